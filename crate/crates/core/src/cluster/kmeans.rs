use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{squared_euclidean, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop once an iteration lowers inertia by no more than this.
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            restarts: 10,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub k: usize,
    pub centroids: Matrix,
    pub assignment: Vec<usize>,
    /// Sum of squared distances from each point to its assigned centroid.
    pub inertia: f64,
    pub seed: u64,
    /// Which restart produced this result.
    pub restart: usize,
    pub iterations_run: usize,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
}

impl KMeansResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Lloyd's algorithm with k-means++ seeding, best of `restarts` runs.
///
/// Rows are put in lexicographic order before fitting so the result does not
/// depend on input row order; the returned assignment follows the caller's
/// order.
pub fn kmeans_fit(x: &Matrix, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if cfg.k < 1 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if x.rows() < cfg.k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs at least k={} points, got {}",
            cfg.k,
            x.rows()
        )));
    }
    if cfg.restarts < 1 || cfg.max_iters < 1 {
        return Err(Error::InvalidArgument(
            "restarts and max_iters must be at least 1".into(),
        ));
    }
    if !x.is_finite() {
        return Err(Error::InvalidArgument("k-means input has non-finite values".into()));
    }

    let order = x.canonical_row_order();
    let sorted = x.select_rows(&order);

    let runs: Vec<Run> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(r as u64);
            lloyd(&sorted, cfg, &mut rng)
        })
        .collect();
    let (restart, best) = runs
        .into_iter()
        .enumerate()
        .min_by(|(ra, a), (rb, b)| a.inertia.total_cmp(&b.inertia).then(ra.cmp(rb)))
        .expect("at least one restart");

    let mut assignment = vec![0; x.rows()];
    for (pos, &orig) in order.iter().enumerate() {
        assignment[orig] = best.assignment[pos];
    }
    Ok(KMeansResult {
        k: cfg.k,
        centroids: best.centroids,
        assignment,
        inertia: best.inertia,
        seed: cfg.seed,
        restart,
        iterations_run: best.iterations,
        inertia_history: best.history,
    })
}

struct Run {
    centroids: Matrix,
    assignment: Vec<usize>,
    inertia: f64,
    iterations: usize,
    history: Vec<f64>,
}

fn plus_plus_init(x: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = x.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_euclidean(x.row(i), x.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // round-off can leave target above the running sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(squared_euclidean(x.row(i), x.row(next)));
        }
    }
    x.select_rows(&chosen)
}

fn assign(x: &Matrix, centroids: &Matrix, assignment: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (i, a) in assignment.iter_mut().enumerate() {
        let mut best = (0, f64::INFINITY);
        for c in 0..centroids.rows() {
            let d = squared_euclidean(x.row(i), centroids.row(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        *a = best.0;
        inertia += best.1;
    }
    inertia
}

fn update(x: &Matrix, assignment: &[usize], centroids: &mut Matrix) {
    let k = centroids.rows();
    let d = x.cols();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(x.row(i)) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s / n;
            }
        }
    }
    // an empty cluster takes over the point farthest from its own centroid
    let mut taken = Vec::new();
    for c in 0..k {
        if counts[c] == 0 {
            let far = (0..x.rows())
                .filter(|i| !taken.contains(i))
                .max_by(|&a, &b| {
                    let da = squared_euclidean(x.row(a), centroids.row(assignment[a]));
                    let db = squared_euclidean(x.row(b), centroids.row(assignment[b]));
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .unwrap_or(0);
            taken.push(far);
            let row = x.row(far).to_vec();
            centroids.row_mut(c).copy_from_slice(&row);
        }
    }
}

fn lloyd(x: &Matrix, cfg: &KMeansConfig, rng: &mut ChaCha8Rng) -> Run {
    let mut centroids = plus_plus_init(x, cfg.k, rng);
    let mut assignment = vec![0usize; x.rows()];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let inertia = assign(x, &centroids, &mut assignment);
        iterations += 1;
        let converged = history
            .last()
            .is_some_and(|&prev: &f64| prev - inertia <= cfg.tol);
        history.push(inertia);
        if converged || iterations >= cfg.max_iters {
            break;
        }
        update(x, &assignment, &mut centroids);
    }
    Run {
        inertia: *history.last().expect("one iteration"),
        centroids,
        assignment,
        iterations,
        history,
    }
}
