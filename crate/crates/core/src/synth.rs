//! Synthetic turntable sweeps with known stable / accidental / OOD views.
//!
//! Each (scene, featurizer) background is a smooth closed curve on the unit
//! sphere around a base point that mixes a featurizer-wide mean direction,
//! the scene's class direction, and a scene-specific offset. Accidental views
//! sit at the same positions for every featurizer and collapse onto one
//! tight cluster per featurizer. OOD views are placed independently per
//! featurizer and land on scattered points that keep a faint trace of the
//! class direction.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::downstream::LabelEmbeddingBank;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::model::{feature_distance, Category, Dataset, EmbeddingMatrix, Pose, SceneCapture, ViewKey, ViewLabelSet, ViewRecord};

/// Every injected view is at least this far (cosine) from its neighbours.
pub const MIN_JUMP: f64 = 0.5;

const MEAN_WEIGHT: f64 = 1.0;
const CLASS_WEIGHT: f64 = 0.8;
const SCENE_WEIGHT: f64 = 0.5;
const ACCIDENTAL_SPREAD: f64 = 0.08;
const MAX_TRAJECTORY_SCALE: f64 = 0.6;
const FEATURIZER_STREAM: u64 = 1 << 40;
const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dataset_id: String,
    pub n_scenes: usize,
    pub views_per_scene: usize,
    pub dims: usize,
    pub n_featurizers: usize,
    /// Highest Fourier harmonic of the background curves.
    pub smoothness: usize,
    pub accidental_rate: f64,
    pub ood_rate: f64,
    /// Minimum injected jump over the largest background step.
    pub separation: f64,
    pub class_count: usize,
    /// Weight of the class direction left in OOD views.
    pub ood_class_signal: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dataset_id: "synth".into(),
            n_scenes: 20,
            views_per_scene: 72,
            dims: 64,
            n_featurizers: 3,
            smoothness: 3,
            accidental_rate: 0.03,
            ood_rate: 0.03,
            separation: 5.0,
            class_count: 4,
            ood_class_signal: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_scenes == 0 || self.n_featurizers == 0 || self.class_count == 0 {
            return bad("scene, featurizer and class counts must be positive".into());
        }
        if self.views_per_scene < 4 {
            return bad(format!("need at least 4 views per scene, got {}", self.views_per_scene));
        }
        if self.dims < self.class_count + 4 {
            return bad(format!(
                "dims must be at least class_count + 4 = {}, got {}",
                self.class_count + 4,
                self.dims
            ));
        }
        if self.smoothness == 0 {
            return bad("smoothness must be at least 1".into());
        }
        let rates_ok = self.accidental_rate >= 0.0
            && self.ood_rate >= 0.0
            && self.accidental_rate + self.ood_rate < 0.5;
        if !rates_ok {
            return bad(format!(
                "infeasible rates: accidental {} + ood {} must be nonnegative and sum below 0.5",
                self.accidental_rate, self.ood_rate
            ));
        }
        if !(self.separation > 1.0 && self.separation.is_finite()) {
            return bad(format!("separation must exceed 1, got {}", self.separation));
        }
        if !(self.ood_class_signal >= 0.0 && self.ood_class_signal.is_finite()) {
            return bad("ood_class_signal must be nonnegative".into());
        }
        Ok(())
    }

    pub fn featurizer_id(f: usize) -> String {
        format!("feat{f:02}")
    }

    pub fn class_label(c: usize) -> String {
        format!("class_{c:02}")
    }
}

/// True category per featurizer, scene and view.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub featurizer_ids: Vec<String>,
    pub scene_ids: Vec<String>,
    pub view_ids: Vec<Vec<String>>,
    pub scene_classes: Vec<String>,
    /// Indexed `[featurizer][scene][view]`.
    pub categories: Vec<Vec<Vec<Category>>>,
}

impl GroundTruth {
    fn featurizer_index(&self, featurizer_id: &str) -> Result<usize> {
        self.featurizer_ids
            .iter()
            .position(|f| f == featurizer_id)
            .ok_or_else(|| Error::UnknownFeaturizer(featurizer_id.to_owned()))
    }

    pub fn keys(&self, featurizer_id: &str, category: Category) -> Result<BTreeSet<ViewKey>> {
        let f = self.featurizer_index(featurizer_id)?;
        let mut out = BTreeSet::new();
        for (s, cats) in self.categories[f].iter().enumerate() {
            for (v, &c) in cats.iter().enumerate() {
                if c == category {
                    out.insert(ViewKey::new(&self.scene_ids[s], &self.view_ids[s][v]));
                }
            }
        }
        Ok(out)
    }

    pub fn injected(&self, featurizer_id: &str) -> Result<BTreeSet<ViewKey>> {
        let mut out = self.keys(featurizer_id, Category::Accidental)?;
        out.extend(self.keys(featurizer_id, Category::Ood)?);
        Ok(out)
    }

    pub fn label_set(&self, featurizer_id: &str) -> Result<ViewLabelSet> {
        ViewLabelSet::new(
            featurizer_id,
            self.keys(featurizer_id, Category::Stable)?,
            self.keys(featurizer_id, Category::Accidental)?,
            self.keys(featurizer_id, Category::Ood)?,
        )
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub truth: GroundTruth,
    /// One bank per featurizer holding the class directions.
    pub banks: Vec<LabelEmbeddingBank>,
}

struct FeaturizerFrame {
    mean: Vec<f64>,
    classes: Vec<Vec<f64>>,
    accidental: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Removes the components along the (orthonormal) `basis` and rescales.
fn orthogonal_unit(rng: &mut ChaCha8Rng, d: usize, basis: &[&[f64]]) -> Vec<f64> {
    loop {
        let mut v = gaussian(rng, d);
        for b in basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b.iter()).for_each(|(x, y)| *x -= p * y);
        }
        if dot(&v, &v) > 1e-6 {
            normalize(&mut v);
            return v;
        }
    }
}

fn frame(cfg: &SynthConfig, f: usize) -> FeaturizerFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(FEATURIZER_STREAM + f as u64);
    let d = cfg.dims;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let next = |rng: &mut ChaCha8Rng, basis: &mut Vec<Vec<f64>>| {
        let refs: Vec<&[f64]> = basis.iter().map(Vec::as_slice).collect();
        let v = orthogonal_unit(rng, d, &refs);
        basis.push(v.clone());
        v
    };
    let mean = next(&mut rng, &mut basis);
    let classes = (0..cfg.class_count).map(|_| next(&mut rng, &mut basis)).collect();
    let accidental = next(&mut rng, &mut basis);
    FeaturizerFrame {
        mean,
        classes,
        accidental,
    }
}

fn weighted_sum(terms: &[(f64, &[f64])], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (w, v) in terms {
        out.iter_mut().zip(v.iter()).for_each(|(o, x)| *o += w * x);
    }
    out
}

/// True when `a` and `b` share a neighbour or are neighbours themselves.
fn too_close(a: usize, b: usize, n: usize) -> bool {
    let gap = a.abs_diff(b);
    gap.min(n - gap) <= 2
}

/// `floor(rate * n)` plus one more with probability equal to the fraction.
fn injection_count(rng: &mut ChaCha8Rng, rate: f64, n: usize) -> usize {
    let x = rate * n as f64;
    let base = x.floor();
    base as usize + usize::from(rng.random::<f64>() < x - base)
}

/// Picks `count` positions with at least two clean views between any two
/// of them or any of `taken`.
fn place(rng: &mut ChaCha8Rng, n: usize, count: usize, taken: &[usize]) -> Result<Vec<usize>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut cand: Vec<usize> = (0..n).collect();
    for _ in 0..PLACEMENT_ATTEMPTS {
        cand.shuffle(rng);
        let mut chosen: Vec<usize> = Vec::with_capacity(count);
        for &c in &cand {
            if taken.iter().chain(&chosen).all(|&t| !too_close(t, c, n)) {
                chosen.push(c);
                if chosen.len() == count {
                    chosen.sort_unstable();
                    return Ok(chosen);
                }
            }
        }
    }
    Err(Error::InvalidArgument(format!(
        "infeasible rates: cannot place {count} well-spaced injections among {n} views"
    )))
}

struct Trajectory {
    base: Vec<f64>,
    cos: Vec<Vec<f64>>,
    sin: Vec<Vec<f64>>,
}

impl Trajectory {
    fn at(&self, theta: f64, scale: f64) -> Vec<f64> {
        let mut p = self.base.clone();
        for (h, (a, b)) in self.cos.iter().zip(&self.sin).enumerate() {
            let (s, c) = (((h + 1) as f64) * theta).sin_cos();
            for (j, pj) in p.iter_mut().enumerate() {
                *pj += scale * (c * a[j] + s * b[j]);
            }
        }
        normalize(&mut p);
        p
    }

    fn sweep(&self, views: usize, scale: f64) -> Vec<Vec<f64>> {
        (0..views)
            .map(|i| self.at(std::f64::consts::TAU * i as f64 / views as f64, scale))
            .collect()
    }
}

fn max_step(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    (0..n)
        .map(|i| feature_distance(&points[i], &points[(i + 1) % n]).unwrap_or(0.0))
        .fold(0.0, f64::max)
}

/// Largest trajectory scale (capped) whose biggest adjacent step stays
/// within `limit`.
fn fit_scale(traj: &Trajectory, views: usize, limit: f64) -> f64 {
    if max_step(&traj.sweep(views, MAX_TRAJECTORY_SCALE)) <= limit {
        return MAX_TRAJECTORY_SCALE;
    }
    let (mut lo, mut hi) = (0.0, MAX_TRAJECTORY_SCALE);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if max_step(&traj.sweep(views, mid)) <= limit {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

struct SceneOut {
    capture: SceneCapture,
    categories: Vec<Vec<Category>>,
}

fn generate_scene(cfg: &SynthConfig, frames: &[FeaturizerFrame], s: usize) -> Result<SceneOut> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(s as u64);
    let (n, d) = (cfg.views_per_scene, cfg.dims);
    let class = s % cfg.class_count;
    let scene_id = format!("scene_{s:04}");
    let views: Vec<ViewRecord> = (0..n)
        .map(|i| {
            Ok(ViewRecord {
                view_id: format!("v{i:03}"),
                pose: Pose::turntable(360.0 * i as f64 / n as f64, 0.0)?,
                ordinal: i,
            })
        })
        .collect::<Result<_>>()?;

    let n_acc = injection_count(&mut rng, cfg.accidental_rate, n);
    let accidental = place(&mut rng, n, n_acc, &[])?;
    let limit = MIN_JUMP / cfg.separation;
    let mut embeddings = Vec::with_capacity(frames.len());
    let mut categories = Vec::with_capacity(frames.len());
    for (f, fr) in frames.iter().enumerate() {
        let k = &fr.classes[class];
        let mut span: Vec<&[f64]> = vec![&fr.mean, &fr.accidental];
        span.extend(fr.classes.iter().map(Vec::as_slice));
        let u = orthogonal_unit(&mut rng, d, &span);
        let mut base = weighted_sum(&[(MEAN_WEIGHT, &fr.mean), (CLASS_WEIGHT, k), (SCENE_WEIGHT, &u)], d);
        normalize(&mut base);
        let h = cfg.smoothness;
        let coef_sd = 1.0 / (d as f64).sqrt();
        let draw = |rng: &mut ChaCha8Rng, harmonic: usize| -> Vec<f64> {
            gaussian(rng, d)
                .into_iter()
                .map(|x| x * coef_sd / harmonic as f64)
                .collect()
        };
        let mut cos = Vec::with_capacity(h);
        let mut sin = Vec::with_capacity(h);
        for harmonic in 1..=h {
            cos.push(draw(&mut rng, harmonic));
            sin.push(draw(&mut rng, harmonic));
        }
        let traj = Trajectory { base, cos, sin };
        let scale = fit_scale(&traj, n, limit);
        let mut rows = traj.sweep(n, scale);

        let n_ood = injection_count(&mut rng, cfg.ood_rate, n);
        let ood = place(&mut rng, n, n_ood, &accidental)?;
        let mut cats = vec![Category::Stable; n];
        let jump_ok = |rows: &[Vec<f64>], i: usize, p: &[f64]| {
            let l = &rows[(i + n - 1) % n];
            let r = &rows[(i + 1) % n];
            feature_distance(p, l).unwrap_or(0.0) > MIN_JUMP && feature_distance(p, r).unwrap_or(0.0) > MIN_JUMP
        };
        for &i in &accidental {
            cats[i] = Category::Accidental;
            let p = loop {
                let noise = gaussian(&mut rng, d);
                let mut p = weighted_sum(&[(1.0, &fr.accidental), (ACCIDENTAL_SPREAD * coef_sd, &noise)], d);
                normalize(&mut p);
                if jump_ok(&rows, i, &p) {
                    break p;
                }
            };
            rows[i] = p;
        }
        for &i in &ood {
            cats[i] = Category::Ood;
            let p = loop {
                let w = orthogonal_unit(&mut rng, d, &[&fr.mean]);
                let mut p = weighted_sum(&[(cfg.ood_class_signal, k), (1.0, &w)], d);
                normalize(&mut p);
                if jump_ok(&rows, i, &p) {
                    break p;
                }
            };
            rows[i] = p;
        }
        embeddings.push(EmbeddingMatrix::from_f64_rows(SynthConfig::featurizer_id(f), &rows)?);
        categories.push(cats);
    }
    Ok(SceneOut {
        capture: SceneCapture::new(scene_id, SynthConfig::class_label(class), views, embeddings)?,
        categories,
    })
}

/// Builds the dataset, its ground truth, and one label bank per featurizer.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let frames: Vec<FeaturizerFrame> = (0..cfg.n_featurizers).map(|f| frame(cfg, f)).collect();
    let scenes = (0..cfg.n_scenes)
        .into_par_iter()
        .map(|s| generate_scene(cfg, &frames, s))
        .collect::<Result<Vec<_>>>()?;

    let featurizer_ids: Vec<String> = (0..cfg.n_featurizers).map(SynthConfig::featurizer_id).collect();
    let mut categories = vec![Vec::with_capacity(cfg.n_scenes); cfg.n_featurizers];
    let mut scene_ids = Vec::with_capacity(cfg.n_scenes);
    let mut view_ids = Vec::with_capacity(cfg.n_scenes);
    let mut scene_classes = Vec::with_capacity(cfg.n_scenes);
    let mut captures = Vec::with_capacity(cfg.n_scenes);
    for sc in scenes {
        scene_ids.push(sc.capture.scene_id().to_owned());
        view_ids.push(sc.capture.views().iter().map(|v| v.view_id.clone()).collect());
        scene_classes.push(sc.capture.category_label().to_owned());
        for (f, c) in sc.categories.into_iter().enumerate() {
            categories[f].push(c);
        }
        captures.push(sc.capture);
    }
    let labels: Vec<String> = (0..cfg.class_count).map(SynthConfig::class_label).collect();
    let banks = frames
        .iter()
        .zip(&featurizer_ids)
        .map(|(fr, fid)| LabelEmbeddingBank::new(fid.clone(), labels.clone(), Matrix::from_rows(&fr.classes)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset {
        dataset: Dataset::new(cfg.dataset_id.clone(), captures)?,
        truth: GroundTruth {
            featurizer_ids,
            scene_ids,
            view_ids,
            scene_classes,
            categories,
        },
        banks,
    })
}
