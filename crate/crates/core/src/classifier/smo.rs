use std::collections::{HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lex_cmp, squared_euclidean, Matrix};

/// Full kernel matrices are precomputed up to this many training rows;
/// larger problems go through a bounded row cache.
const FULL_KERNEL_LIMIT: usize = 3000;
const ROW_CACHE_BYTES: usize = 256 << 20;
const TAU: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeighting {
    Uniform,
    /// Each class weighted by `n / (2 n_class)`.
    Balanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    /// `None` picks `1 / (d * mean per-feature variance)`.
    pub gamma: Option<f64>,
    pub tol: f64,
    /// The iteration cap is `max_passes * n * n` pair updates.
    pub max_passes: usize,
    pub class_weighting: ClassWeighting,
    /// Seeds the order in which equally violating indices are preferred.
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: None,
            tol: 1e-3,
            max_passes: 10,
            class_weighting: ClassWeighting::Balanced,
            seed: 0,
        }
    }
}

/// Trained RBF-kernel SVM. Positive decision values mean "unstable".
#[derive(Clone, Debug, PartialEq)]
pub struct SvmModel {
    pub support_vectors: Matrix,
    /// `alpha_i * y_i` for each support vector.
    pub dual_coefs: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub c: f64,
    /// `[stable, unstable]`.
    pub class_weights: [f64; 2],
    /// Maximal KKT violation at exit.
    pub kkt_gap: f64,
    /// `|sum alpha_i y_i|` at exit.
    pub dual_residual: f64,
    pub iterations: usize,
}

impl SvmModel {
    pub fn dims(&self) -> usize {
        self.support_vectors.cols()
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support_vectors
            .iter_rows()
            .zip(&self.dual_coefs)
            .map(|(sv, coef)| coef * (-self.gamma * squared_euclidean(sv, x)).exp())
            .sum::<f64>()
            + self.bias
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvmPrediction {
    pub unstable: bool,
    pub margin: f64,
}

/// Default kernel width: `1 / (d * mean per-feature variance)`, or 1 for
/// constant inputs.
pub fn auto_gamma(x: &Matrix) -> f64 {
    let (n, d) = (x.rows(), x.cols());
    if n == 0 || d == 0 {
        return 1.0;
    }
    let mean = x.column_means();
    let mut var_sum = 0.0;
    for r in x.iter_rows() {
        for (v, m) in r.iter().zip(&mean) {
            var_sum += (v - m) * (v - m);
        }
    }
    let mean_var = var_sum / (n as f64 * d as f64);
    if mean_var > 0.0 {
        1.0 / (d as f64 * mean_var)
    } else {
        1.0
    }
}

/// Trains a soft-margin RBF SVM by sequential minimal optimization.
///
/// Each step updates the maximal-violating pair; training stops once the
/// KKT gap drops to `tol`, and fails with [`Error::NotConverged`] if the
/// iteration cap is hit first. `unstable[i]` is the label of row `i`.
pub fn svm_train(x: &Matrix, unstable: &[bool], params: &SvmParams) -> Result<SvmModel> {
    let n = x.rows();
    if unstable.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: unstable.len(),
        });
    }
    if !x.is_finite() {
        return Err(Error::InvalidArgument("training rows contain non-finite values".into()));
    }
    if !(params.c > 0.0 && params.tol > 0.0) {
        return Err(Error::InvalidArgument("C and tol must be positive".into()));
    }
    let n_unstable = unstable.iter().filter(|&&u| u).count();
    if n_unstable == 0 || n_unstable == n {
        return Err(Error::DegenerateTrainingSet(
            "both classes must be present".into(),
        ));
    }
    let gamma = match params.gamma {
        Some(g) if g > 0.0 && g.is_finite() => g,
        Some(g) => return Err(Error::InvalidArgument(format!("gamma must be positive, got {g}"))),
        None => auto_gamma(x),
    };
    let class_weights = match params.class_weighting {
        ClassWeighting::Uniform => [1.0, 1.0],
        ClassWeighting::Balanced => [
            n as f64 / (2.0 * (n - n_unstable) as f64),
            n as f64 / (2.0 * n_unstable as f64),
        ],
    };

    // canonical row order so the solution does not depend on input order
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| lex_cmp(x.row(a), x.row(b)).then(unstable[a].cmp(&unstable[b])));
    let xs = x.select_rows(&order);
    let y: Vec<f64> = order.iter().map(|&i| if unstable[i] { 1.0 } else { -1.0 }).collect();
    let cap: Vec<f64> = order
        .iter()
        .map(|&i| params.c * class_weights[usize::from(unstable[i])])
        .collect();

    let mut scan: Vec<usize> = (0..n).collect();
    scan.shuffle(&mut ChaCha8Rng::seed_from_u64(params.seed));

    let mut kernel = KernelRows::new(&xs, &y, gamma);
    let max_iter = params.max_passes.max(1).saturating_mul(n).saturating_mul(n).max(1000);
    let sol = solve(&mut kernel, &y, &cap, params.tol, max_iter, &scan)?;

    let mut svs = Vec::new();
    let mut coefs = Vec::new();
    for i in 0..n {
        if sol.alpha[i] > 0.0 {
            svs.push(xs.row(i).to_vec());
            coefs.push(sol.alpha[i] * y[i]);
        }
    }
    let dual_residual = sol.alpha.iter().zip(&y).map(|(a, y)| a * y).sum::<f64>().abs();
    Ok(SvmModel {
        support_vectors: Matrix::from_rows(&svs)?,
        dual_coefs: coefs,
        bias: -sol.rho,
        gamma,
        c: params.c,
        class_weights,
        kkt_gap: sol.gap,
        dual_residual,
        iterations: sol.iterations,
    })
}

pub fn svm_predict(model: &SvmModel, x: &Matrix) -> Result<Vec<SvmPrediction>> {
    if x.rows() == 0 {
        return Ok(Vec::new());
    }
    if x.cols() != model.dims() && model.support_vectors.rows() > 0 {
        return Err(Error::DimensionMismatch {
            expected: model.dims(),
            got: x.cols(),
        });
    }
    Ok((0..x.rows())
        .into_par_iter()
        .map(|i| {
            let margin = model.decision(x.row(i));
            SvmPrediction {
                unstable: margin > 0.0,
                margin,
            }
        })
        .collect())
}

struct Solution {
    alpha: Vec<f64>,
    rho: f64,
    gap: f64,
    iterations: usize,
}

/// Rows of `Q_ij = y_i y_j K(x_i, x_j)`.
struct KernelRows<'a> {
    x: &'a Matrix,
    y: &'a [f64],
    gamma: f64,
    full: Option<Vec<f64>>,
    cache: HashMap<usize, Vec<f64>>,
    lru: VecDeque<usize>,
    capacity: usize,
}

impl<'a> KernelRows<'a> {
    fn new(x: &'a Matrix, y: &'a [f64], gamma: f64) -> Self {
        let n = x.rows();
        let mut rows = Self {
            x,
            y,
            gamma,
            full: None,
            cache: HashMap::new(),
            lru: VecDeque::new(),
            capacity: (ROW_CACHE_BYTES / (8 * n.max(1))).max(2),
        };
        if n <= FULL_KERNEL_LIMIT {
            let mut full = vec![0.0; n * n];
            full.par_chunks_mut(n.max(1))
                .enumerate()
                .for_each(|(i, out)| rows.fill_row(i, out));
            rows.full = Some(full);
        }
        rows
    }

    fn fill_row(&self, i: usize, out: &mut [f64]) {
        let xi = self.x.row(i);
        for (j, o) in out.iter_mut().enumerate() {
            let k = (-self.gamma * squared_euclidean(xi, self.x.row(j))).exp();
            *o = self.y[i] * self.y[j] * k;
        }
    }

    fn row(&mut self, i: usize) -> Vec<f64> {
        let n = self.x.rows();
        if let Some(full) = &self.full {
            return full[i * n..(i + 1) * n].to_vec();
        }
        if let Some(r) = self.cache.get(&i) {
            return r.clone();
        }
        let mut r = vec![0.0; n];
        r.par_chunks_mut(1024).enumerate().for_each(|(c, out)| {
            let xi = self.x.row(i);
            for (off, o) in out.iter_mut().enumerate() {
                let j = c * 1024 + off;
                let k = (-self.gamma * squared_euclidean(xi, self.x.row(j))).exp();
                *o = self.y[i] * self.y[j] * k;
            }
        });
        if self.lru.len() >= self.capacity {
            if let Some(old) = self.lru.pop_front() {
                self.cache.remove(&old);
            }
        }
        self.lru.push_back(i);
        self.cache.insert(i, r.clone());
        r
    }
}

fn solve(
    q: &mut KernelRows<'_>,
    y: &[f64],
    cap: &[f64],
    tol: f64,
    max_iter: usize,
    scan: &[usize],
) -> Result<Solution> {
    let n = y.len();
    let mut alpha = vec![0.0; n];
    // gradient of 0.5 a'Qa - e'a
    let mut grad = vec![-1.0; n];
    // RBF: K(x, x) = 1
    let qd = 1.0;
    let mut iterations = 0;

    let in_up = |t: usize, a: &[f64]| (y[t] > 0.0 && a[t] < cap[t]) || (y[t] < 0.0 && a[t] > 0.0);
    let in_low = |t: usize, a: &[f64]| (y[t] < 0.0 && a[t] < cap[t]) || (y[t] > 0.0 && a[t] > 0.0);

    let gap = loop {
        let mut gmax = (f64::NEG_INFINITY, usize::MAX);
        let mut gmin = (f64::INFINITY, usize::MAX);
        for &t in scan {
            let v = -y[t] * grad[t];
            if in_up(t, &alpha) && v > gmax.0 {
                gmax = (v, t);
            }
            if in_low(t, &alpha) && v < gmin.0 {
                gmin = (v, t);
            }
        }
        let gap = gmax.0 - gmin.0;
        if gmax.1 == usize::MAX || gmin.1 == usize::MAX || gap <= tol {
            break gap.max(0.0);
        }
        if iterations >= max_iter {
            return Err(Error::NotConverged { iterations, gap });
        }
        iterations += 1;

        let (i, j) = (gmax.1, gmin.1);
        let qi = q.row(i);
        let qj = q.row(j);
        let (ci, cj) = (cap[i], cap[j]);
        let (old_i, old_j) = (alpha[i], alpha[j]);

        if y[i] != y[j] {
            let quad = (qd + qd + 2.0 * qi[j]).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > ci - cj {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = ci - diff;
                }
            } else if alpha[j] > cj {
                alpha[j] = cj;
                alpha[i] = cj + diff;
            }
        } else {
            let quad = (qd + qd - 2.0 * qi[j]).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > ci {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = sum - ci;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > cj {
                if alpha[j] > cj {
                    alpha[j] = cj;
                    alpha[i] = sum - cj;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for k in 0..n {
            grad[k] += qi[k] * di + qj[k] * dj;
        }
    };

    // bias from free vectors, or the midpoint of the feasible interval
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= cap[t] {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else if ub.is_finite() && lb.is_finite() {
        0.5 * (ub + lb)
    } else if ub.is_finite() {
        ub
    } else {
        lb
    };
    Ok(Solution {
        alpha,
        rho,
        gap,
        iterations,
    })
}
