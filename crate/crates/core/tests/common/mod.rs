#![allow(dead_code)]

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use viewstab_core::linalg::Matrix;
use viewstab_core::model::{Dataset, EmbeddingMatrix, Pose, SceneCapture, ViewRecord};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Scene with uniformly random turntable poses and Gaussian embeddings.
pub fn random_scene(r: &mut ChaCha8Rng, id: &str, n: usize, dims: usize, fids: &[&str]) -> SceneCapture {
    let views = (0..n)
        .map(|i| ViewRecord {
            view_id: format!("v{i:03}"),
            pose: Pose::turntable(r.random_range(0.0..360.0), r.random_range(-60.0..60.0)).unwrap(),
            ordinal: i,
        })
        .collect();
    let embs = fids
        .iter()
        .map(|f| {
            let data = (0..n * dims).map(|_| r.sample::<f32, _>(StandardNormal)).collect();
            EmbeddingMatrix::new(*f, n, dims, data).unwrap()
        })
        .collect();
    SceneCapture::new(id, "obj", views, embs).unwrap()
}

/// Same poses and row count as `scene`, every row the same vector.
pub fn constant_scene(r: &mut ChaCha8Rng, id: &str, n: usize, dims: usize) -> SceneCapture {
    let v: Vec<f32> = (0..dims).map(|_| r.random_range(0.1f32..1.0)).collect();
    let views = (0..n)
        .map(|i| ViewRecord {
            view_id: format!("v{i:03}"),
            pose: Pose::turntable(360.0 * i as f64 / n as f64, 0.0).unwrap(),
            ordinal: i,
        })
        .collect();
    let data = (0..n).flat_map(|_| v.iter().copied()).collect();
    SceneCapture::new(id, "obj", views, vec![EmbeddingMatrix::new("f", n, dims, data).unwrap()]).unwrap()
}

pub fn random_dataset(seed: u64, scenes: usize, n: usize, dims: usize) -> Dataset {
    let mut r = rng(seed);
    let s = (0..scenes)
        .map(|i| random_scene(&mut r, &format!("s{i:03}"), n, dims, &["f"]))
        .collect();
    Dataset::new("rand", s).unwrap()
}

fn circular_gap(a: f64, b: f64) -> f64 {
    let mut d = (a - b) % 360.0;
    if d < 0.0 {
        d += 360.0;
    }
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

fn cosine_distance(x: &[f32], y: &[f32]) -> f64 {
    let mut xy = 0.0;
    let mut xx = 0.0;
    let mut yy = 0.0;
    for i in 0..x.len() {
        let (a, b) = (x[i] as f64, y[i] as f64);
        xy += a * b;
        xx += a * a;
        yy += b * b;
    }
    1.0 - xy / (xx * yy).sqrt()
}

/// Direct double loop over view pairs.
pub fn brute_instability(scene: &SceneCapture, fid: &str, radius: f64) -> Vec<Option<f64>> {
    let e = scene.embedding(fid).unwrap();
    let v = scene.views();
    let mut out = Vec::new();
    for i in 0..v.len() {
        let mut total = 0.0;
        let mut count = 0usize;
        for j in 0..v.len() {
            if j == i {
                continue;
            }
            let da = circular_gap(v[i].pose.azimuth(), v[j].pose.azimuth());
            let de = v[i].pose.elevation() - v[j].pose.elevation();
            if (da * da + de * de).sqrt() <= radius {
                total += cosine_distance(e.row(i), e.row(j));
                count += 1;
            }
        }
        out.push(if count == 0 { None } else { Some(total / count as f64) });
    }
    out
}

pub fn sse(x: &Matrix, members: &[usize]) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let d = x.cols();
    let mut c = vec![0.0; d];
    for &i in members {
        for j in 0..d {
            c[j] += x.get(i, j);
        }
    }
    c.iter_mut().for_each(|v| *v /= members.len() as f64);
    members
        .iter()
        .map(|&i| (0..d).map(|j| (x.get(i, j) - c[j]).powi(2)).sum::<f64>())
        .sum()
}

/// Lowest within-cluster sum of squares over every assignment of rows to
/// `k` non-empty clusters.
pub fn exhaustive_kmeans_optimum(x: &Matrix, k: usize) -> f64 {
    let n = x.rows();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    let total = k.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % k;
            c /= k;
        }
        // canonical form: first occurrence order 0,1,2..
        let mut next = 0;
        let mut ok = true;
        for &l in &labels {
            if l > next {
                ok = false;
                break;
            }
            if l == next {
                next += 1;
            }
        }
        if !ok || next != k {
            continue;
        }
        let cost: f64 = (0..k)
            .map(|g| sse(x, &(0..n).filter(|&i| labels[i] == g).collect::<Vec<_>>()))
            .sum();
        best = best.min(cost);
    }
    best
}

pub fn brute_silhouette(x: &Matrix, labels: &[usize], k: usize) -> Vec<f64> {
    let n = x.rows();
    let dist = |i: usize, j: usize| {
        (0..x.cols())
            .map(|c| (x.get(i, c) - x.get(j, c)).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    (0..n)
        .map(|i| {
            let mean_to = |g: usize| {
                let others: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == g).collect();
                if others.is_empty() {
                    None
                } else {
                    Some(others.iter().map(|&j| dist(i, j)).sum::<f64>() / others.len() as f64)
                }
            };
            let Some(a) = mean_to(labels[i]) else { return 0.0 };
            let b = (0..k)
                .filter(|&g| g != labels[i])
                .filter_map(mean_to)
                .fold(f64::INFINITY, f64::min);
            if a.max(b) == 0.0 {
                0.0
            } else {
                (b - a) / a.max(b)
            }
        })
        .collect()
}

/// Eigenvalues of the sample covariance, descending.
pub fn covariance_spectrum(x: &Matrix) -> Vec<f64> {
    let (n, d) = (x.rows(), x.cols());
    let m = DMatrix::from_row_slice(n, d, x.as_slice());
    let mean = m.row_mean();
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    let cov = c.transpose() * &c / (n as f64 - 1.0);
    let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

pub fn key_set(v: &[u64]) -> BTreeSet<u64> {
    v.iter().copied().collect()
}
