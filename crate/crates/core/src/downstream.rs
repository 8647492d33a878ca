//! Downstream accuracy split by stability category: zero-shot retrieval
//! against a bank of label embeddings, and a softmax linear probe.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::SplitSpec;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::model::{feature_distance, Category, Dataset, ViewLabelSet};

/// One embedding per class label, in the image-embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbeddingBank {
    featurizer_id: String,
    labels: Vec<String>,
    vectors: Matrix,
}

impl LabelEmbeddingBank {
    pub fn new(featurizer_id: impl Into<String>, labels: Vec<String>, vectors: Matrix) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Validation("label bank is empty".into()));
        }
        if labels.len() != vectors.rows() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                got: vectors.rows(),
            });
        }
        let unique: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
        if unique.len() != labels.len() {
            return Err(Error::Validation("label bank has duplicate labels".into()));
        }
        if !vectors.is_finite() {
            return Err(Error::Validation("label bank has non-finite values".into()));
        }
        for (l, v) in labels.iter().zip(vectors.iter_rows()) {
            if norm(v) == 0.0 {
                return Err(Error::DegenerateEmbedding(format!("label `{l}` has a zero vector")));
            }
        }
        Ok(Self {
            featurizer_id: featurizer_id.into(),
            labels,
            vectors,
        })
    }

    pub fn featurizer_id(&self) -> &str {
        &self.featurizer_id
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn dims(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Label indices ordered by ascending cosine distance, ties by label.
pub fn zero_shot_ranking(image: &[f64], bank: &LabelEmbeddingBank) -> Result<Vec<usize>> {
    if image.len() != bank.dims() {
        return Err(Error::DimensionMismatch {
            expected: bank.dims(),
            got: image.len(),
        });
    }
    let dist = bank
        .vectors
        .iter_rows()
        .map(|v| feature_distance(image, v))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..bank.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then_with(|| bank.labels[a].cmp(&bank.labels[b])));
    Ok(order)
}

pub fn zero_shot_topk(image: &[f64], bank: &LabelEmbeddingBank, k: usize) -> Result<Vec<String>> {
    if k > bank.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds the {} bank labels", bank.len())));
    }
    let order = zero_shot_ranking(image, bank)?;
    Ok(order[..k].iter().map(|&i| bank.labels[i].clone()).collect())
}

/// Percentage of views whose ground truth is within the first `k` predictions.
pub fn accuracy_at_k<S: AsRef<str>>(predictions: &[Vec<S>], gt: &[S], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if predictions.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            expected: gt.len(),
            got: predictions.len(),
        });
    }
    if gt.is_empty() {
        return Err(Error::InvalidArgument("no views to score".into()));
    }
    let hits = predictions
        .iter()
        .zip(gt)
        .filter(|(p, g)| p.iter().take(k).any(|l| l.as_ref() == g.as_ref()))
        .count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 256,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("probe needs at least one epoch".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Softmax regression weights; row `c` of `weights` scores `classes[c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub classes: Vec<String>,
    pub weights: Matrix,
    pub bias: Vec<f64>,
    /// Mean cross-entropy over the full training set after each epoch.
    pub loss_history: Vec<f64>,
}

impl LinearProbe {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, x) + b)
            .collect()
    }

    /// Class indices by descending logit, ties by class name.
    pub fn ranking(&self, x: &[f64]) -> Vec<usize> {
        let z = self.logits(x);
        let mut order: Vec<usize> = (0..z.len()).collect();
        order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
        order
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<String>> {
        if x.cols() != self.weights.cols() && x.rows() > 0 {
            return Err(Error::DimensionMismatch {
                expected: self.weights.cols(),
                got: x.cols(),
            });
        }
        Ok(x.iter_rows().map(|r| self.classes[self.ranking(r)[0]].clone()).collect())
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

fn mean_cross_entropy(probe: &LinearProbe, x: &Matrix, y: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &c) in x.iter_rows().zip(y) {
        let mut z = probe.logits(r);
        softmax_in_place(&mut z);
        total -= z[c].max(f64::MIN_POSITIVE).ln();
    }
    total / y.len() as f64
}

/// Trains a single linear layer with softmax cross-entropy and Adam.
pub fn linear_probe_train<S: AsRef<str>>(x: &Matrix, y: &[S], cfg: &ProbeConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    if x.rows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            got: y.len(),
        });
    }
    if !x.is_finite() {
        return Err(Error::InvalidArgument("training rows contain non-finite values".into()));
    }
    let classes: Vec<String> = y
        .iter()
        .map(|s| s.as_ref().to_owned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.len() < 2 {
        return Err(Error::DegenerateTrainingSet(format!(
            "linear probe needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let yi: Vec<usize> = y.iter().map(|s| index[s.as_ref()]).collect();
    let (n, d, c) = (x.rows(), x.cols(), classes.len());

    let mut probe = LinearProbe {
        classes,
        weights: Matrix::zeros(c, d),
        bias: vec![0.0; c],
        loss_history: Vec::with_capacity(cfg.epochs),
    };
    let np = c * (d + 1);
    let mut m = vec![0.0; np];
    let mut v = vec![0.0; np];
    let mut grad = vec![0.0; np];
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.fill(0.0);
            for &i in batch {
                let xi = x.row(i);
                let mut p = probe.logits(xi);
                softmax_in_place(&mut p);
                p[yi[i]] -= 1.0;
                for (k, pk) in p.iter().enumerate() {
                    let g = &mut grad[k * (d + 1)..(k + 1) * (d + 1)];
                    for (gj, xj) in g[..d].iter_mut().zip(xi) {
                        *gj += pk * xj;
                    }
                    g[d] += pk;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(step);
            let bc2 = 1.0 - cfg.beta2.powi(step);
            for k in 0..c {
                for j in 0..=d {
                    let t = k * (d + 1) + j;
                    let g = grad[t] * scale;
                    m[t] = cfg.beta1 * m[t] + (1.0 - cfg.beta1) * g;
                    v[t] = cfg.beta2 * v[t] + (1.0 - cfg.beta2) * g * g;
                    let upd = cfg.learning_rate * (m[t] / bc1) / ((v[t] / bc2).sqrt() + cfg.epsilon);
                    if j < d {
                        let w = probe.weights.get(k, j);
                        probe.weights.set(k, j, w - upd);
                    } else {
                        probe.bias[k] -= upd;
                    }
                }
            }
        }
        let loss = mean_cross_entropy(&probe, x, &yi);
        probe.loss_history.push(loss);
    }
    Ok(probe)
}

#[derive(Clone, Debug, PartialEq)]
pub enum DownstreamTask<'a> {
    ZeroShot { bank: &'a LabelEmbeddingBank, ks: Vec<usize> },
    Probe { split: &'a SplitSpec, cfg: ProbeConfig },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ZeroShot,
    Probe,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::ZeroShot => "zero_shot",
            TaskKind::Probe => "probe",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub category: Category,
    pub n_views: usize,
    /// Aligned with [`StabilityAccuracy::ks`]; `None` when the category is empty.
    pub accuracy: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityAccuracy {
    pub featurizer_id: String,
    pub task: TaskKind,
    pub ks: Vec<usize>,
    pub rows: Vec<CategoryAccuracy>,
}

impl StabilityAccuracy {
    pub fn get(&self, category: Category, k: usize) -> Option<f64> {
        let col = self.ks.iter().position(|&x| x == k)?;
        self.rows.iter().find(|r| r.category == category)?.accuracy[col]
    }
}

/// Per-category accuracy; ground truth is each scene's category label.
///
/// Zero-shot scores every labeled view. The probe trains on labeled views of
/// the split's train scenes and scores labeled views of its test scenes.
pub fn evaluate_by_stability(
    dataset: &Dataset,
    featurizer_id: &str,
    labels: &ViewLabelSet,
    task: &DownstreamTask<'_>,
) -> Result<StabilityAccuracy> {
    dataset.dims(featurizer_id)?;
    match task {
        DownstreamTask::ZeroShot { bank, ks } => {
            if bank.dims() != dataset.dims(featurizer_id)? {
                return Err(Error::DimensionMismatch {
                    expected: dataset.dims(featurizer_id)?,
                    got: bank.dims(),
                });
            }
            if ks.is_empty() || ks.iter().any(|&k| k == 0 || k > bank.len()) {
                return Err(Error::InvalidArgument(format!(
                    "every k must lie in 1..={}, got {ks:?}",
                    bank.len()
                )));
            }
            let mut views = Vec::new();
            for scene in dataset.scenes() {
                let emb = scene.embedding(featurizer_id)?;
                for i in 0..scene.len() {
                    if let Some(cat) = labels.category_of(&scene.view_key(i)) {
                        views.push((cat, emb.row_f64(i), scene.category_label()));
                    }
                }
            }
            let ranked = views
                .par_iter()
                .map(|(_, e, _)| zero_shot_ranking(e, bank))
                .collect::<Result<Vec<_>>>()?;
            let mut rows = Vec::new();
            for cat in Category::ALL {
                let idx: Vec<usize> = (0..views.len()).filter(|&i| views[i].0 == cat).collect();
                let preds: Vec<Vec<&str>> = idx
                    .iter()
                    .map(|&i| ranked[i].iter().map(|&l| bank.labels[l].as_str()).collect())
                    .collect();
                let gt: Vec<&str> = idx.iter().map(|&i| views[i].2).collect();
                let accuracy = ks
                    .iter()
                    .map(|&k| if gt.is_empty() { Ok(None) } else { accuracy_at_k(&preds, &gt, k).map(Some) })
                    .collect::<Result<Vec<_>>>()?;
                rows.push(CategoryAccuracy {
                    category: cat,
                    n_views: idx.len(),
                    accuracy,
                });
            }
            Ok(StabilityAccuracy {
                featurizer_id: featurizer_id.to_owned(),
                task: TaskKind::ZeroShot,
                ks: ks.clone(),
                rows,
            })
        }
        DownstreamTask::Probe { split, cfg } => {
            split.check_disjoint()?;
            let mut train_x = Vec::new();
            let mut train_y = Vec::new();
            let mut test: Vec<(Category, Vec<f64>, &str)> = Vec::new();
            for scene in dataset.scenes() {
                let in_train = split.train_scene_ids.contains(scene.scene_id());
                let in_test = split.test_scene_ids.contains(scene.scene_id());
                if !in_train && !in_test {
                    continue;
                }
                let emb = scene.embedding(featurizer_id)?;
                for i in 0..scene.len() {
                    let Some(cat) = labels.category_of(&scene.view_key(i)) else {
                        continue;
                    };
                    if in_train {
                        train_x.push(emb.row_f64(i));
                        train_y.push(scene.category_label());
                    } else {
                        test.push((cat, emb.row_f64(i), scene.category_label()));
                    }
                }
            }
            let probe = linear_probe_train(&Matrix::from_rows(&train_x)?, &train_y, cfg)?;
            let mut rows = Vec::new();
            for cat in Category::ALL {
                let sel: Vec<&(Category, Vec<f64>, &str)> = test.iter().filter(|t| t.0 == cat).collect();
                let accuracy = if sel.is_empty() {
                    None
                } else {
                    let hits = sel
                        .iter()
                        .filter(|(_, e, g)| probe.classes[probe.ranking(e)[0]] == *g)
                        .count();
                    Some(100.0 * hits as f64 / sel.len() as f64)
                };
                rows.push(CategoryAccuracy {
                    category: cat,
                    n_views: sel.len(),
                    accuracy: vec![accuracy],
                });
            }
            Ok(StabilityAccuracy {
                featurizer_id: featurizer_id.to_owned(),
                task: TaskKind::Probe,
                ks: vec![1],
                rows,
            })
        }
    }
}
