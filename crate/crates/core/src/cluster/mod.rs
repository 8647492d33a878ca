//! Splitting unstable views into accidental and OOD sub-types, plus the PCA
//! projection used for scatter exports.
//!
//! Unstable embeddings are clustered with k=2 k-means; the cluster with the
//! higher mean silhouette is the accidental one.

mod kmeans;
mod pca;
mod silhouette;

pub use kmeans::{kmeans_fit, KMeansConfig, KMeansResult};
pub use pca::{pca_project, PcaProjection};
pub use silhouette::{silhouette_per_cluster, silhouette_samples};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{squared_euclidean, Matrix};
use crate::model::Category;

/// Minimum number of unstable views `split_accidental_ood` accepts.
pub const MIN_SPLIT_POINTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterRoles {
    pub accidental_cluster: usize,
    pub ood_cluster: usize,
    pub silhouette_per_cluster: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubtypeSplit {
    pub roles: ClusterRoles,
    pub kmeans: KMeansResult,
}

impl SubtypeSplit {
    pub fn assignment(&self) -> &[usize] {
        &self.kmeans.assignment
    }

    /// Sub-type of the `i`-th input row.
    pub fn category(&self, i: usize) -> Category {
        if self.kmeans.assignment[i] == self.roles.accidental_cluster {
            Category::Accidental
        } else {
            Category::Ood
        }
    }

    pub fn categories(&self) -> Vec<Category> {
        (0..self.kmeans.assignment.len()).map(|i| self.category(i)).collect()
    }
}

pub fn split_accidental_ood(unstable: &Matrix, seed: u64) -> Result<SubtypeSplit> {
    split_accidental_ood_with(unstable, &KMeansConfig::new(2, seed))
}

/// Like [`split_accidental_ood`] with explicit k-means settings; `cfg.k` is
/// forced to 2.
pub fn split_accidental_ood_with(unstable: &Matrix, cfg: &KMeansConfig) -> Result<SubtypeSplit> {
    let n = unstable.rows();
    if n < MIN_SPLIT_POINTS {
        return Err(Error::TooFewUnstable(n));
    }
    let first = unstable.row(0);
    if unstable
        .iter_rows()
        .all(|r| squared_euclidean(r, first) <= f64::EPSILON * f64::EPSILON)
    {
        return Err(Error::ClustersCollapsed);
    }
    let cfg = KMeansConfig { k: 2, ..cfg.clone() };
    let km = kmeans_fit(unstable, &cfg)?;
    let sizes = km.cluster_sizes();
    if sizes.contains(&0)
        || squared_euclidean(km.centroids.row(0), km.centroids.row(1)) <= f64::EPSILON * f64::EPSILON
    {
        return Err(Error::ClustersCollapsed);
    }
    let sil = silhouette_per_cluster(unstable, &km.assignment, 2)?;
    let accidental = if (sil[0] - sil[1]).abs() <= 1e-12 {
        // tie: the smaller cluster, then the lower index
        if sizes[1] < sizes[0] {
            1
        } else {
            0
        }
    } else if sil[1] > sil[0] {
        1
    } else {
        0
    };
    Ok(SubtypeSplit {
        roles: ClusterRoles {
            accidental_cluster: accidental,
            ood_cluster: 1 - accidental,
            silhouette_per_cluster: sil,
        },
        kmeans: km,
    })
}
