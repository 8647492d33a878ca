//! Per-view instability scores, percentile thresholding and non-maximal
//! suppression.
//!
//! The score of view `i` is the mean cosine distance between its embedding
//! and the embeddings of every other view whose pose lies within `radius`.
//! Views with no pose neighbours stay unscored rather than reading as
//! perfectly stable.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{feature_distance, pose_distance, Dataset, SceneCapture};

/// Multiplier applied to the median nearest-neighbour pose distance when no
/// explicit radius is given.
pub const DEFAULT_RADIUS_FACTOR: f64 = 1.5;
pub const DEFAULT_PERCENTILE: f64 = 97.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub radius: f64,
    pub percentile: f64,
    /// Defaults to `radius` when unset.
    pub nms_radius: Option<f64>,
    pub angle_weight: f64,
}

impl ScoringConfig {
    pub fn new(radius: f64) -> Self {
        Self {
            radius,
            percentile: DEFAULT_PERCENTILE,
            nms_radius: None,
            angle_weight: 1.0,
        }
    }

    pub fn nms_radius(&self) -> f64 {
        self.nms_radius.unwrap_or(self.radius)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "radius must be positive, got {}",
                self.radius
            )));
        }
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(Error::InvalidArgument(format!(
                "percentile must lie in (0, 100], got {}",
                self.percentile
            )));
        }
        let nms = self.nms_radius();
        if !(nms > 0.0 && nms.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "nms radius must be positive, got {nms}"
            )));
        }
        if !(self.angle_weight >= 0.0 && self.angle_weight.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "angle weight must be nonnegative, got {}",
                self.angle_weight
            )));
        }
        Ok(())
    }
}

/// `DEFAULT_RADIUS_FACTOR` times the median distance from each view to its
/// closest other view in the same scene.
pub fn default_radius(dataset: &Dataset, angle_weight: f64) -> Result<f64> {
    let per_scene: Vec<Vec<f64>> = dataset
        .scenes()
        .par_iter()
        .map(|scene| {
            let views = scene.views();
            let mut out = Vec::with_capacity(views.len());
            for (i, a) in views.iter().enumerate() {
                let mut best = f64::INFINITY;
                for (j, b) in views.iter().enumerate() {
                    if i != j {
                        best = best.min(pose_distance(&a.pose, &b.pose, angle_weight)?);
                    }
                }
                if best.is_finite() {
                    out.push(best);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut all: Vec<f64> = per_scene.into_iter().flatten().collect();
    if all.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot derive a radius: no scene has two views".into(),
        ));
    }
    all.sort_by(f64::total_cmp);
    let n = all.len();
    let median = if n % 2 == 1 {
        all[n / 2]
    } else {
        0.5 * (all[n / 2 - 1] + all[n / 2])
    };
    let r = DEFAULT_RADIUS_FACTOR * median;
    if r > 0.0 {
        Ok(r)
    } else {
        Err(Error::InvalidArgument(
            "cannot derive a radius: median neighbour distance is zero".into(),
        ))
    }
}

/// Indices of views (other than `i`) within pose distance `radius` of view `i`.
pub fn neighbors_within(
    scene: &SceneCapture,
    i: usize,
    radius: f64,
    angle_weight: f64,
) -> Result<Vec<usize>> {
    let views = scene.views();
    let center = views.get(i).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "view index {i} out of range for scene `{}` with {} views",
            scene.scene_id(),
            views.len()
        ))
    })?;
    let mut out = Vec::new();
    for (u, v) in views.iter().enumerate() {
        if u != i && pose_distance(&center.pose, &v.pose, angle_weight)? <= radius {
            out.push(u);
        }
    }
    Ok(out)
}

/// Instability score of every view in `scene`; `None` marks views without
/// pose neighbours.
pub fn instability_scores(
    scene: &SceneCapture,
    featurizer_id: &str,
    cfg: &ScoringConfig,
) -> Result<Vec<Option<f64>>> {
    let emb = scene.embedding(featurizer_id)?;
    (0..scene.len())
        .map(|i| {
            let nbrs = neighbors_within(scene, i, cfg.radius, cfg.angle_weight)?;
            if nbrs.is_empty() {
                return Ok(None);
            }
            let mut sum = 0.0;
            for &u in &nbrs {
                sum += feature_distance(emb.row(i), emb.row(u)).map_err(|e| {
                    Error::Validation(format!(
                        "scene `{}`, featurizer `{featurizer_id}`: {e}",
                        scene.scene_id()
                    ))
                })?;
            }
            Ok(Some(sum / nbrs.len() as f64))
        })
        .collect()
}

/// Scores every scene in parallel; the result is in dataset scene order.
pub fn score_dataset(
    dataset: &Dataset,
    featurizer_id: &str,
    cfg: &ScoringConfig,
) -> Result<Vec<Vec<Option<f64>>>> {
    cfg.validate()?;
    dataset
        .scenes()
        .par_iter()
        .map(|s| instability_scores(s, featurizer_id, cfg))
        .collect()
}

/// Nearest-rank percentile: the `ceil(p/100 * n)`-th smallest value.
pub fn percentile_nearest_rank(values: &[f64], percentile: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::NoScorableViews);
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentile must lie in (0, 100], got {percentile}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Labeling {
    pub tau: f64,
    /// Same shape as the score input.
    pub unstable: Vec<Vec<bool>>,
}

/// Pools every scored view, sets `tau` at the nearest-rank percentile and
/// flags views whose score is strictly above it.
pub fn label_unstable(scores: &[Vec<Option<f64>>], percentile: f64) -> Result<Labeling> {
    let pooled: Vec<f64> = scores.iter().flatten().filter_map(|s| *s).collect();
    let tau = percentile_nearest_rank(&pooled, percentile)?;
    let unstable = scores
        .iter()
        .map(|scene| scene.iter().map(|s| s.is_some_and(|v| v > tau)).collect())
        .collect();
    Ok(Labeling { tau, unstable })
}

/// Keeps an unstable view only if no unstable neighbour within `nms_radius`
/// beats it. Equal scores go to the lower ordinal.
pub fn nms(
    scene: &SceneCapture,
    scores: &[Option<f64>],
    unstable: &[bool],
    nms_radius: f64,
    angle_weight: f64,
) -> Result<Vec<bool>> {
    let n = scene.len();
    if scores.len() != n || unstable.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: scores.len().min(unstable.len()),
        });
    }
    let mut kept = vec![false; n];
    for i in 0..n {
        if !unstable[i] {
            continue;
        }
        let Some(si) = scores[i] else { continue };
        let mut dominated = false;
        for u in neighbors_within(scene, i, nms_radius, angle_weight)? {
            if !unstable[u] {
                continue;
            }
            let su = scores[u].unwrap_or(f64::NEG_INFINITY);
            if su > si || (su == si && u < i) {
                dominated = true;
                break;
            }
        }
        kept[i] = !dominated;
    }
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstabilityRow {
    pub scene_id: String,
    pub view_id: String,
    pub ordinal: usize,
    pub score: Option<f64>,
    pub unstable: bool,
    pub nms_kept: bool,
}

/// Scores, labels and NMS survivors for one featurizer over a dataset, rows
/// in dataset order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstabilityTable {
    pub featurizer_id: String,
    pub tau: f64,
    pub config: ScoringConfig,
    pub rows: Vec<InstabilityRow>,
    scene_offsets: Vec<usize>,
}

impl InstabilityTable {
    /// Rows belonging to the `idx`-th scene of the dataset.
    pub fn scene_rows(&self, idx: usize) -> &[InstabilityRow] {
        &self.rows[self.scene_offsets[idx]..self.scene_offsets[idx + 1]]
    }

    pub fn scene_count(&self) -> usize {
        self.scene_offsets.len() - 1
    }

    pub fn unstable_count(&self) -> usize {
        self.rows.iter().filter(|r| r.unstable).count()
    }

    pub fn scored_count(&self) -> usize {
        self.rows.iter().filter(|r| r.score.is_some()).count()
    }
}

pub fn build_instability_table(
    dataset: &Dataset,
    featurizer_id: &str,
    cfg: &ScoringConfig,
) -> Result<InstabilityTable> {
    let scores = score_dataset(dataset, featurizer_id, cfg)?;
    let labeling = label_unstable(&scores, cfg.percentile)?;
    let kept: Vec<Vec<bool>> = dataset
        .scenes()
        .par_iter()
        .zip(scores.par_iter().zip(labeling.unstable.par_iter()))
        .map(|(scene, (s, u))| nms(scene, s, u, cfg.nms_radius(), cfg.angle_weight))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(dataset.view_count());
    let mut scene_offsets = vec![0];
    for (si, scene) in dataset.scenes().iter().enumerate() {
        for (i, view) in scene.views().iter().enumerate() {
            rows.push(InstabilityRow {
                scene_id: scene.scene_id().to_owned(),
                view_id: view.view_id.clone(),
                ordinal: view.ordinal,
                score: scores[si][i],
                unstable: labeling.unstable[si][i],
                nms_kept: kept[si][i],
            });
        }
        scene_offsets.push(rows.len());
    }
    Ok(InstabilityTable {
        featurizer_id: featurizer_id.to_owned(),
        tau: labeling.tau,
        config: cfg.clone(),
        rows,
        scene_offsets,
    })
}
