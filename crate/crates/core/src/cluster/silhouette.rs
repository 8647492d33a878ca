use crate::error::{Error, Result};
use crate::linalg::{euclidean, Matrix};

/// Per-point silhouette `(b - a) / max(a, b)` under Euclidean distance.
/// Members of singleton clusters score 0.
pub fn silhouette_samples(x: &Matrix, assignment: &[usize], k: usize) -> Result<Vec<f64>> {
    let n = x.rows();
    if k < 2 {
        return Err(Error::SilhouetteUndefined(format!("needs k >= 2, got {k}")));
    }
    if assignment.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: assignment.len(),
        });
    }
    let mut sizes = vec![0usize; k];
    for &a in assignment {
        if a >= k {
            return Err(Error::InvalidArgument(format!("cluster id {a} out of range for k={k}")));
        }
        sizes[a] += 1;
    }
    if let Some(c) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::SilhouetteUndefined(format!("cluster {c} is empty")));
    }

    let mut out = Vec::with_capacity(n);
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[assignment[j]] += euclidean(x.row(i), x.row(j));
            }
        }
        let own = assignment[i];
        if sizes[own] == 1 {
            out.push(0.0);
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        out.push(if denom > 0.0 { (b - a) / denom } else { 0.0 });
    }
    Ok(out)
}

/// Mean member silhouette of each cluster.
pub fn silhouette_per_cluster(x: &Matrix, assignment: &[usize], k: usize) -> Result<Vec<f64>> {
    let samples = silhouette_samples(x, assignment, k)?;
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (&a, s) in assignment.iter().zip(&samples) {
        sum[a] += s;
        count[a] += 1;
    }
    Ok(sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect())
}
