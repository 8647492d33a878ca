use crate::error::{Error, Result};
use crate::linalg::{dot, norm, symmetric_eigen, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    /// q×d, orthonormal rows.
    pub components: Matrix,
    pub mean: Vec<f64>,
    /// N×q coordinates of the fitted rows.
    pub projected: Matrix,
    /// Sample variance along each component.
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// Sample variance summed over all input dimensions.
    pub total_variance: f64,
}

impl PcaProjection {
    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: x.cols(),
            });
        }
        let q = self.components.rows();
        let mut out = Matrix::zeros(x.rows(), q);
        let mut centered = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for ((c, v), m) in centered.iter_mut().zip(x.row(i)).zip(&self.mean) {
                *c = v - m;
            }
            for j in 0..q {
                out.set(i, j, dot(&centered, self.components.row(j)));
            }
        }
        Ok(out)
    }

    /// Maps projected coordinates back into the input space.
    pub fn reconstruct(&self, projected: &Matrix) -> Result<Matrix> {
        let q = self.components.rows();
        if projected.cols() != q {
            return Err(Error::DimensionMismatch {
                expected: q,
                got: projected.cols(),
            });
        }
        let d = self.mean.len();
        let mut out = Matrix::zeros(projected.rows(), d);
        for i in 0..projected.rows() {
            let row = out.row_mut(i);
            row.copy_from_slice(&self.mean);
            for j in 0..q {
                let w = projected.get(i, j);
                for (r, c) in row.iter_mut().zip(self.components.row(j)) {
                    *r += w * c;
                }
            }
        }
        Ok(out)
    }
}

/// Projects `x` onto its top-`q` principal directions.
///
/// Works on the d×d covariance when `d <= N`, otherwise on the N×N Gram
/// matrix of the centered rows. Each component is signed so its
/// largest-magnitude entry is positive.
pub fn pca_project(x: &Matrix, q: usize) -> Result<PcaProjection> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 rows, got {n}")));
    }
    if q == 0 || q > (n - 1).min(d) {
        return Err(Error::InvalidArgument(format!(
            "q={q} must lie in [1, min(N-1, d)] = [1, {}]",
            (n - 1).min(d)
        )));
    }
    if !x.is_finite() {
        return Err(Error::InvalidArgument("PCA input has non-finite values".into()));
    }
    let mean = x.column_means();
    let mut centered = x.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let scale = 1.0 / (n - 1) as f64;
    let total_variance: f64 = centered.as_slice().iter().map(|v| v * v).sum::<f64>() * scale;
    if total_variance <= 0.0 {
        return Err(Error::InvalidArgument("PCA input has zero variance".into()));
    }

    let (values, mut components) = if d <= n {
        let mut cov = Matrix::zeros(d, d);
        for r in centered.iter_rows() {
            for a in 0..d {
                if r[a] == 0.0 {
                    continue;
                }
                for b in a..d {
                    let v = cov.get(a, b) + r[a] * r[b];
                    cov.set(a, b, v);
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov.get(a, b) * scale;
                cov.set(a, b, v);
                cov.set(b, a, v);
            }
        }
        let eig = symmetric_eigen(&cov)?;
        (eig.values[..q].to_vec(), eig.vectors.select_rows(&(0..q).collect::<Vec<_>>()))
    } else {
        let mut gram = Matrix::zeros(n, n);
        for a in 0..n {
            for b in a..n {
                let v = dot(centered.row(a), centered.row(b)) * scale;
                gram.set(a, b, v);
                gram.set(b, a, v);
            }
        }
        let eig = symmetric_eigen(&gram)?;
        let mut comps = Matrix::zeros(q, d);
        for j in 0..q {
            let u = eig.vectors.row(j);
            let row = comps.row_mut(j);
            for (i, &w) in u.iter().enumerate() {
                for (r, c) in row.iter_mut().zip(centered.row(i)) {
                    *r += w * c;
                }
            }
        }
        (eig.values[..q].to_vec(), comps)
    };

    orthonormalize(&mut components, &values, total_variance);
    for j in 0..q {
        let row = components.row_mut(j);
        let (idx, _) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
                if v.abs() > best.1 {
                    (i, v.abs())
                } else {
                    best
                }
            });
        if row[idx] < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
    }

    let explained_variance: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let explained_variance_ratio = explained_variance.iter().map(|v| v / total_variance).collect();
    let mut proj = PcaProjection {
        components,
        mean,
        projected: Matrix::zeros(0, q),
        explained_variance,
        explained_variance_ratio,
        total_variance,
    };
    proj.projected = proj.transform(x)?;
    Ok(proj)
}

/// Modified Gram-Schmidt over the component rows. Directions with negligible
/// variance (rank-deficient input) are replaced by basis vectors orthogonal
/// to the ones already fixed.
fn orthonormalize(c: &mut Matrix, values: &[f64], total: f64) {
    let (q, d) = (c.rows(), c.cols());
    for j in 0..q {
        let negligible = values[j] <= 1e-12 * total;
        let mut candidates: Vec<Vec<f64>> = Vec::new();
        if !negligible {
            candidates.push(c.row(j).to_vec());
        }
        candidates.extend((0..d).map(|e| {
            let mut v = vec![0.0; d];
            v[e] = 1.0;
            v
        }));
        for mut v in candidates {
            for p in 0..j {
                let prev = c.row(p).to_vec();
                let proj = dot(&v, &prev);
                for (x, y) in v.iter_mut().zip(&prev) {
                    *x -= proj * y;
                }
            }
            let nv = norm(&v);
            if nv > 1e-8 {
                v.iter_mut().for_each(|x| *x /= nv);
                c.row_mut(j).copy_from_slice(&v);
                break;
            }
        }
    }
}
