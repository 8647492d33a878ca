//! Cross-featurizer agreement on label sets, and overlap with a reference
//! annotation.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Category, ViewKey, ViewLabelSet};

/// `|a ∩ b| / |a ∪ b|`, with two empty sets counting as full agreement.
pub fn iou<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn check_universe(label_sets: &[ViewLabelSet]) -> Result<()> {
    let Some(first) = label_sets.first() else {
        return Err(Error::InvalidArgument("no label sets given".into()));
    };
    let u0 = first.universe();
    for ls in &label_sets[1..] {
        if ls.universe() != u0 {
            return Err(Error::Validation(format!(
                "label sets for `{}` and `{}` cover different views",
                first.featurizer_id(),
                ls.featurizer_id()
            )));
        }
    }
    Ok(())
}

/// Symmetric F×F matrix of category IoUs with a unit diagonal.
pub fn pairwise_iou_matrix(label_sets: &[ViewLabelSet], category: Category) -> Result<Matrix> {
    check_universe(label_sets)?;
    let f = label_sets.len();
    let pairs: Vec<(usize, usize)> = (0..f).flat_map(|i| (i + 1..f).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| iou(label_sets[i].set(category), label_sets[j].set(category)))
        .collect();
    let mut m = Matrix::zeros(f, f);
    for i in 0..f {
        m.set(i, i, 1.0);
    }
    for (&(i, j), v) in pairs.iter().zip(vals) {
        m.set(i, j, v);
        m.set(j, i, v);
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMeans {
    pub stable: f64,
    pub accidental: f64,
    pub ood: f64,
}

impl CategoryMeans {
    pub fn get(&self, category: Category) -> f64 {
        match category {
            Category::Stable => self.stable,
            Category::Accidental => self.accidental,
            Category::Ood => self.ood,
        }
    }
}

/// Mean off-diagonal IoU for each category. Needs at least two featurizers.
pub fn mean_iou_by_category(label_sets: &[ViewLabelSet]) -> Result<CategoryMeans> {
    if label_sets.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "mean IoU needs at least 2 featurizers, got {}",
            label_sets.len()
        )));
    }
    let mean = |cat| -> Result<f64> {
        let m = pairwise_iou_matrix(label_sets, cat)?;
        let f = m.rows();
        let mut s = 0.0;
        for i in 0..f {
            for j in 0..f {
                if i != j {
                    s += m.get(i, j);
                }
            }
        }
        Ok(s / (f * (f - 1)) as f64)
    };
    Ok(CategoryMeans {
        stable: mean(Category::Stable)?,
        accidental: mean(Category::Accidental)?,
        ood: mean(Category::Ood)?,
    })
}

/// Two-class accuracy of `predicted` over the annotated views, in percent.
pub fn overlap_with_reference(
    predicted: &BTreeSet<ViewKey>,
    positive: &BTreeSet<ViewKey>,
    negative: &BTreeSet<ViewKey>,
) -> Result<f64> {
    if let Some(k) = positive.intersection(negative).next() {
        return Err(Error::Validation(format!("view {k} is annotated both ways")));
    }
    let total = positive.len() + negative.len();
    if total == 0 {
        return Err(Error::InvalidArgument("reference annotation is empty".into()));
    }
    let tp = predicted.intersection(positive).count();
    let tn = negative.difference(predicted).count();
    Ok(100.0 * (tp + tn) as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::collection::btree_set;
    use proptest::prelude::*;

    fn s(v: &[u32]) -> BTreeSet<u32> {
        v.iter().copied().collect()
    }

    fn keys(v: &[u32]) -> BTreeSet<ViewKey> {
        v.iter().map(|i| ViewKey::new("s", format!("v{i:02}"))).collect()
    }

    fn labels(fid: &str, stable: &[u32], acc: &[u32], ood: &[u32]) -> ViewLabelSet {
        ViewLabelSet::new(fid, keys(stable), keys(acc), keys(ood)).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&s(&[1, 2]), &s(&[1, 2])), 1.0);
        assert_eq!(iou(&s(&[1]), &s(&[2])), 0.0);
        assert!((iou(&s(&[1, 2]), &s(&[2, 3])) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&s(&[]), &s(&[])), 1.0);
    }

    #[test]
    fn single_featurizer_matrix() {
        let m = pairwise_iou_matrix(&[labels("a", &[0, 1], &[2], &[])], Category::Ood).unwrap();
        assert_eq!(m.as_slice(), &[1.0]);
        assert!(mean_iou_by_category(&[labels("a", &[0], &[], &[])]).is_err());
    }

    #[test]
    fn identical_and_disjoint_means() {
        let a = labels("a", &[0, 1], &[2], &[3]);
        let b = labels("b", &[0, 1], &[2], &[3]);
        let m = mean_iou_by_category(&[a, b]).unwrap();
        assert_eq!((m.stable, m.accidental, m.ood), (1.0, 1.0, 1.0));
        let a = labels("a", &[0, 1], &[2, 3], &[4, 5]);
        let b = labels("b", &[2, 4], &[0, 5], &[1, 3]);
        let m = mean_iou_by_category(&[a, b]).unwrap();
        assert_eq!((m.stable, m.accidental, m.ood), (0.0, 0.0, 0.0));
    }

    #[test]
    fn mismatched_universe_is_rejected() {
        let a = labels("a", &[0, 1], &[], &[]);
        let b = labels("b", &[0], &[], &[]);
        assert!(pairwise_iou_matrix(&[a, b], Category::Stable).is_err());
    }

    #[test]
    fn reference_overlap_examples() {
        let pos = keys(&[0, 1]);
        let neg = keys(&[2, 3, 4]);
        assert_eq!(overlap_with_reference(&pos, &pos, &neg).unwrap(), 100.0);
        assert_eq!(overlap_with_reference(&neg, &pos, &neg).unwrap(), 0.0);
        let all = keys(&[0, 1, 2, 3, 4]);
        assert!((overlap_with_reference(&all, &pos, &neg).unwrap() - 40.0).abs() < 1e-12);
        assert!(overlap_with_reference(&pos, &pos, &pos).is_err());
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in btree_set(0u32..40, 0..20), b in btree_set(0u32..40, 0..20)) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
            if !a.is_empty() {
                prop_assert_eq!(iou(&a, &a), 1.0);
            }
        }

        #[test]
        fn iou_monotone_under_additions(
            a in btree_set(0u32..40, 1..20),
            b in btree_set(0u32..40, 1..20),
            x in 40u32..60,
        ) {
            let base = iou(&a, &b);
            let (mut a2, mut b2) = (a.clone(), b.clone());
            a2.insert(x);
            b2.insert(x);
            prop_assert!(iou(&a2, &b2) >= base);
            let mut a3 = a.clone();
            a3.insert(x);
            prop_assert!(iou(&a3, &b) <= base);
        }

        #[test]
        fn matrix_symmetric_unit_diagonal(
            assign in proptest::collection::vec(proptest::collection::vec(0u8..3, 12), 1..5),
        ) {
            let sets: Vec<ViewLabelSet> = assign
                .iter()
                .enumerate()
                .map(|(f, a)| {
                    let pick = |c: u8| keys(&(0..12).filter(|&i| a[i as usize] == c).collect::<Vec<u32>>());
                    ViewLabelSet::new(format!("f{f}"), pick(0), pick(1), pick(2)).unwrap()
                })
                .collect();
            for cat in Category::ALL {
                let m = pairwise_iou_matrix(&sets, cat).unwrap();
                for i in 0..m.rows() {
                    prop_assert_eq!(m.get(i, i), 1.0);
                    for j in 0..m.rows() {
                        prop_assert_eq!(m.get(i, j), m.get(j, i));
                    }
                }
            }
        }
    }
}
