//! Predicting stable/unstable from a single embedding.
//!
//! Scenes are split into train and test sides so no object spans both.
//! Training uses every stable view plus the NMS survivors among unstable
//! views of the train scenes; evaluation covers every scored view of the
//! test scenes.

mod smo;

pub use smo::{auto_gamma, svm_predict, svm_train, ClassWeighting, SvmModel, SvmParams, SvmPrediction};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instability::InstabilityTable;
use crate::linalg::Matrix;
use crate::model::Dataset;

pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_scene_ids: BTreeSet<String>,
    pub test_scene_ids: BTreeSet<String>,
    pub ratio: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn check_disjoint(&self) -> Result<()> {
        if let Some(s) = self.train_scene_ids.intersection(&self.test_scene_ids).next() {
            return Err(Error::Validation(format!("scene `{s}` is on both sides of the split")));
        }
        Ok(())
    }
}

/// Seeded shuffle of scene ids; the first `floor(ratio * S)` go to train.
pub fn scene_split(dataset: &Dataset, ratio: f64, seed: u64) -> Result<SplitSpec> {
    let mut ids: Vec<String> = dataset.scenes().iter().map(|s| s.scene_id().to_owned()).collect();
    if ids.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a scene split needs at least 2 scenes, got {}",
            ids.len()
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * ids.len() as f64).floor() as usize).clamp(1, ids.len() - 1);
    let test = ids.split_off(n_train);
    Ok(SplitSpec {
        train_scene_ids: ids.into_iter().collect(),
        test_scene_ids: test.into_iter().collect(),
        ratio,
        seed,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub stable_as_stable: usize,
    pub stable_as_unstable: usize,
    pub unstable_as_stable: usize,
    pub unstable_as_unstable: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.stable_as_stable + self.stable_as_unstable + self.unstable_as_stable + self.unstable_as_unstable
    }

    pub fn accuracy(&self) -> f64 {
        100.0 * (self.stable_as_stable + self.unstable_as_unstable) as f64 / self.total().max(1) as f64
    }

    pub fn recall_stable(&self) -> Option<f64> {
        let n = self.stable_as_stable + self.stable_as_unstable;
        (n > 0).then(|| 100.0 * self.stable_as_stable as f64 / n as f64)
    }

    pub fn recall_unstable(&self) -> Option<f64> {
        let n = self.unstable_as_stable + self.unstable_as_unstable;
        (n > 0).then(|| 100.0 * self.unstable_as_unstable as f64 / n as f64)
    }

    /// Accuracy of always answering the more common test class.
    pub fn majority_rate(&self) -> f64 {
        let stable = self.stable_as_stable + self.stable_as_unstable;
        let unstable = self.unstable_as_stable + self.unstable_as_unstable;
        100.0 * stable.max(unstable) as f64 / self.total().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub featurizer_id: String,
    pub n_train: usize,
    pub n_train_unstable: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub recall_stable: Option<f64>,
    pub recall_unstable: Option<f64>,
    pub majority_rate: f64,
    pub confusion: Confusion,
    pub gamma: f64,
    pub support_vectors: usize,
    pub kkt_gap: f64,
}

/// Trains on the train side of `split` and scores the test side.
pub fn evaluate_stability_classifier(
    dataset: &Dataset,
    featurizer_id: &str,
    table: &InstabilityTable,
    split: &SplitSpec,
    params: &SvmParams,
) -> Result<(ClassifierReport, SvmModel)> {
    split.check_disjoint()?;
    if table.featurizer_id != featurizer_id {
        return Err(Error::InvalidArgument(format!(
            "instability table is for `{}`, not `{featurizer_id}`",
            table.featurizer_id
        )));
    }
    if table.scene_count() != dataset.scenes().len() {
        return Err(Error::DimensionMismatch {
            expected: dataset.scenes().len(),
            got: table.scene_count(),
        });
    }
    let mut train_rows = Vec::new();
    let mut train_y = Vec::new();
    let mut test_rows = Vec::new();
    let mut test_y = Vec::new();
    for (si, scene) in dataset.scenes().iter().enumerate() {
        let in_train = split.train_scene_ids.contains(scene.scene_id());
        let in_test = split.test_scene_ids.contains(scene.scene_id());
        if !in_train && !in_test {
            continue;
        }
        let emb = scene.embedding(featurizer_id)?;
        for (i, row) in table.scene_rows(si).iter().enumerate() {
            if row.score.is_none() {
                continue;
            }
            if in_train && (!row.unstable || row.nms_kept) {
                train_rows.push(emb.row_f64(i));
                train_y.push(row.unstable);
            } else if in_test {
                test_rows.push(emb.row_f64(i));
                test_y.push(row.unstable);
            }
        }
    }
    let x_train = Matrix::from_rows(&train_rows)?;
    let model = svm_train(&x_train, &train_y, params)?;

    let x_test = Matrix::from_rows(&test_rows)?;
    let preds = svm_predict(&model, &x_test)?;
    let mut confusion = Confusion::default();
    for (p, &truth) in preds.iter().zip(&test_y) {
        match (truth, p.unstable) {
            (false, false) => confusion.stable_as_stable += 1,
            (false, true) => confusion.stable_as_unstable += 1,
            (true, false) => confusion.unstable_as_stable += 1,
            (true, true) => confusion.unstable_as_unstable += 1,
        }
    }
    let report = ClassifierReport {
        featurizer_id: featurizer_id.to_owned(),
        n_train: train_y.len(),
        n_train_unstable: train_y.iter().filter(|&&u| u).count(),
        n_test: test_y.len(),
        accuracy: confusion.accuracy(),
        recall_stable: confusion.recall_stable(),
        recall_unstable: confusion.recall_unstable(),
        majority_rate: confusion.majority_rate(),
        confusion,
        gamma: model.gamma,
        support_vectors: model.support_vectors.rows(),
        kkt_gap: model.kkt_gap,
    };
    Ok((report, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(seed: u64, n: usize, gap: f64) -> (Matrix, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let u = i % 3 == 0;
            let c = if u { gap } else { -gap };
            rows.push(vec![c + rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]);
            y.push(u);
        }
        (Matrix::from_rows(&rows).unwrap(), y)
    }

    fn kkt_ok(m: &SvmModel, tol: f64) {
        assert!(m.kkt_gap <= tol, "gap {}", m.kkt_gap);
        assert!(m.dual_residual <= 1e-8, "residual {}", m.dual_residual);
        for (sv, coef) in m.support_vectors.iter_rows().zip(&m.dual_coefs) {
            let _ = sv;
            let w = if *coef > 0.0 { m.class_weights[1] } else { m.class_weights[0] };
            assert!(coef.abs() <= m.c * w + 1e-12);
        }
    }

    #[test]
    fn separated_blobs_fit_perfectly() {
        let (x, y) = blobs(1, 60, 3.0);
        let m = svm_train(&x, &y, &SvmParams::default()).unwrap();
        kkt_ok(&m, 1e-3);
        let p = svm_predict(&m, &x).unwrap();
        for (p, &t) in p.iter().zip(&y) {
            assert_eq!(p.unstable, t);
        }
    }

    #[test]
    fn xor_is_separable_with_rbf() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        let y = [false, false, true, true];
        let params = SvmParams {
            gamma: Some(1.0),
            c: 10.0,
            ..SvmParams::default()
        };
        let m = svm_train(&x, &y, &params).unwrap();
        kkt_ok(&m, 1e-3);
        let p = svm_predict(&m, &x).unwrap();
        for (p, &t) in p.iter().zip(&y) {
            assert_eq!(p.unstable, t);
        }
    }

    #[test]
    fn contradictory_duplicates_do_not_crash() {
        let x = Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5], [3.0, 3.0], [-3.0, -3.0]]).unwrap();
        let y = [true, false, true, false];
        let m = svm_train(&x, &y, &SvmParams::default()).unwrap();
        kkt_ok(&m, 1e-3);
        let p = svm_predict(&m, &x.select_rows(&[0, 1])).unwrap();
        let correct = p.iter().zip(&y[..2]).filter(|(p, &t)| p.unstable == t).count();
        assert!(correct <= 1);
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(matches!(
            svm_train(&x, &[true, true], &SvmParams::default()),
            Err(Error::DegenerateTrainingSet(_))
        ));
    }

    #[test]
    fn support_vectors_predict_own_label() {
        let (x, y) = blobs(4, 45, 4.0);
        let m = svm_train(&x, &y, &SvmParams::default()).unwrap();
        let p = svm_predict(&m, &m.support_vectors).unwrap();
        for (p, c) in p.iter().zip(&m.dual_coefs) {
            assert_eq!(p.unstable, *c > 0.0);
        }
    }

    #[test]
    fn far_points_take_bias_sign() {
        let (x, y) = blobs(2, 30, 2.0);
        let m = svm_train(&x, &y, &SvmParams::default()).unwrap();
        let far = Matrix::from_rows(&[[1e4, -1e4]]).unwrap();
        let p = svm_predict(&m, &far).unwrap();
        assert_eq!(p[0].unstable, m.bias > 0.0);
        assert!((p[0].margin - m.bias).abs() < 1e-12);
    }

    #[test]
    fn predict_edge_cases() {
        let (x, y) = blobs(3, 12, 2.0);
        let m = svm_train(&x, &y, &SvmParams::default()).unwrap();
        assert!(svm_predict(&m, &Matrix::zeros(0, 2)).unwrap().is_empty());
        assert!(matches!(
            svm_predict(&m, &Matrix::zeros(1, 3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn permuting_training_rows_keeps_predictions() {
        let (x, y) = blobs(6, 40, 0.4);
        let m1 = svm_train(&x, &y, &SvmParams::default()).unwrap();
        let mut perm: Vec<usize> = (0..40).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(99));
        let xp = x.select_rows(&perm);
        let yp: Vec<bool> = perm.iter().map(|&i| y[i]).collect();
        let m2 = svm_train(&xp, &yp, &SvmParams::default()).unwrap();
        let (probe, _) = blobs(7, 25, 0.4);
        let a = svm_predict(&m1, &probe).unwrap();
        let b = svm_predict(&m2, &probe).unwrap();
        assert_eq!(a, b);
    }
}
