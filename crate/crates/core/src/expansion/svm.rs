//! Soft-margin SVM trained with SMO, plus Platt scaling.
//!
//! The solver follows the usual decomposition scheme: pick the maximal
//! violating pair using second-order information, solve the two-variable
//! subproblem analytically, update gradients, stop when the KKT gap drops below
//! `tol`. The full kernel matrix is precomputed, which is fine at the training
//! sizes used here (|E| * (K + 1) rows).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::dot;

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Linear,
    Rbf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmParams {
    pub kernel: KernelKind,
    pub c: f64,
    /// RBF width. `None` uses `1 / (n_features * var(X))`.
    pub gamma: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            kernel: KernelKind::Rbf,
            c: 1.0,
            gamma: None,
            tol: 1e-3,
            max_iter: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => dot(a, b),
            Kernel::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

fn scale_gamma(x: &[Vec<f64>]) -> f64 {
    let n = x.iter().map(Vec::len).sum::<usize>() as f64;
    let width = x.first().map_or(1, Vec::len).max(1) as f64;
    let mean = x.iter().flatten().sum::<f64>() / n;
    let var = x.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (width * var)
    } else {
        1.0
    }
}

/// A trained binary classifier with calibrated probability output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmMember {
    pub kernel: Kernel,
    pub support_vectors: Vec<Vec<f64>>,
    /// `alpha_i * y_i` for each support vector.
    pub coef: Vec<f64>,
    pub bias: f64,
    pub platt_a: f64,
    pub platt_b: f64,
    pub iterations: usize,
}

impl SvmMember {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support_vectors
            .iter()
            .zip(&self.coef)
            .map(|(sv, c)| c * self.kernel.eval(sv, x))
            .sum::<f64>()
            + self.bias
    }

    /// Platt-calibrated probability of the positive class.
    pub fn probability(&self, x: &[f64]) -> f64 {
        platt_probability(self.decision(x), self.platt_a, self.platt_b)
    }
}

pub fn platt_probability(f: f64, a: f64, b: f64) -> f64 {
    let z = f * a + b;
    let p = if z >= 0.0 {
        (-z).exp() / (1.0 + (-z).exp())
    } else {
        1.0 / (1.0 + z.exp())
    };
    p.clamp(1e-15, 1.0 - 1e-15)
}

/// Trains on rows labelled `true` (positive) / `false`.
pub fn train_svm(x: &[Vec<f64>], labels: &[bool], params: &SvmParams) -> Result<SvmMember> {
    if x.len() != labels.len() || x.is_empty() {
        return Err(Error::InvalidInput("SVM needs matching, non-empty rows and labels".into()));
    }
    if !(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)) {
        return Err(Error::SingleClass);
    }
    if !(params.c > 0.0) {
        return Err(Error::Config("SVM C must be > 0".into()));
    }
    let kernel = match params.kernel {
        KernelKind::Linear => Kernel::Linear,
        KernelKind::Rbf => Kernel::Rbf {
            gamma: params.gamma.unwrap_or_else(|| scale_gamma(x)),
        },
    };
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let n = x.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(&x[i], &x[j]);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    let sol = solve(&k, &y, params.c, params.tol, params.max_iter)?;

    let mut support_vectors = Vec::new();
    let mut coef = Vec::new();
    for i in 0..n {
        if sol.alpha[i] > 0.0 {
            support_vectors.push(x[i].clone());
            coef.push(sol.alpha[i] * y[i]);
        }
    }
    // Decision values on the training rows, for calibration.
    let dec: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| sol.alpha[j] > 0.0)
                .map(|j| sol.alpha[j] * y[j] * k[j * n + i])
                .sum::<f64>()
                - sol.rho
        })
        .collect();
    let (platt_a, platt_b) = fit_platt(&dec, labels);
    Ok(SvmMember {
        kernel,
        support_vectors,
        coef,
        bias: -sol.rho,
        platt_a,
        platt_b,
        iterations: sol.iterations,
    })
}

struct Solution {
    alpha: Vec<f64>,
    rho: f64,
    iterations: usize,
}

/// Dual solver for `min 1/2 a'Qa - e'a, 0 <= a <= C, y'a = 0` with `Q_ij = y_i y_j K_ij`.
fn solve(k: &[f64], y: &[f64], c: f64, tol: f64, max_iter: usize) -> Result<Solution> {
    let n = y.len();
    let q = |i: usize, j: usize| y[i] * y[j] * k[i * n + j];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let is_upper = |a: f64| a >= c;
    let is_lower = |a: f64| a <= 0.0;

    let mut iterations = 0;
    loop {
        // Working set selection with second-order gain.
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            let in_up = if y[t] > 0.0 { !is_upper(alpha[t]) } else { !is_lower(alpha[t]) };
            if in_up && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i_sel = Some(t);
            }
        }
        let Some(i) = i_sel else { break };
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut obj_min = f64::INFINITY;
        for t in 0..n {
            let in_low = if y[t] > 0.0 { !is_lower(alpha[t]) } else { !is_upper(alpha[t]) };
            if !in_low {
                continue;
            }
            let yg = y[t] * grad[t];
            gmax2 = gmax2.max(yg);
            let b = gmax + yg;
            if b > 0.0 {
                let mut a = k[i * n + i] + k[t * n + t] - 2.0 * k[i * n + t];
                if a <= 0.0 {
                    a = TAU;
                }
                let obj = -(b * b) / a;
                if obj <= obj_min {
                    obj_min = obj;
                    j_sel = Some(t);
                }
            }
        }
        if gmax + gmax2 < tol {
            break;
        }
        let Some(j) = j_sel else { break };
        if iterations >= max_iter {
            return Err(Error::NoConvergence { iterations });
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let mut quad = k[i * n + i] + k[j * n + j] + 2.0 * q(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
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
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = k[i * n + i] + k[j * n + j] - 2.0 * q(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }

    // Bias from free variables, or the midpoint of the feasible interval.
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut sum_free = 0.0;
    let mut n_free = 0usize;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if is_upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if is_lower(alpha[t]) {
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
    } else {
        (ub + lb) / 2.0
    };
    Ok(Solution {
        alpha,
        rho,
        iterations,
    })
}

/// Fits `P(y=1|f) = 1 / (1 + exp(A f + B))` by regularized maximum likelihood
/// (Newton iterations with backtracking, smoothed targets).
pub fn fit_platt(dec: &[f64], labels: &[bool]) -> (f64, f64) {
    let prior1 = labels.iter().filter(|&&l| l).count() as f64;
    let prior0 = labels.len() as f64 - prior1;
    let hi = (prior1 + 1.0) / (prior1 + 2.0);
    let lo = 1.0 / (prior0 + 2.0);
    let t: Vec<f64> = labels.iter().map(|&l| if l { hi } else { lo }).collect();

    const MAX_ITER: usize = 100;
    const MIN_STEP: f64 = 1e-10;
    const SIGMA: f64 = 1e-12;
    const EPS: f64 = 1e-5;

    let objective = |a: f64, b: f64| -> f64 {
        dec.iter()
            .zip(&t)
            .map(|(&f, &ti)| {
                let z = f * a + b;
                if z >= 0.0 {
                    ti * z + (-z).exp().ln_1p()
                } else {
                    (ti - 1.0) * z + z.exp().ln_1p()
                }
            })
            .sum()
    };

    let mut a = 0.0;
    let mut b = ((prior0 + 1.0) / (prior1 + 1.0)).ln();
    let mut fval = objective(a, b);
    for _ in 0..MAX_ITER {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (SIGMA, SIGMA, 0.0, 0.0, 0.0);
        for (&f, &ti) in dec.iter().zip(&t) {
            let z = f * a + b;
            let (p, q) = if z >= 0.0 {
                let e = (-z).exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = z.exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            let d2 = p * q;
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = ti - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < EPS && g2.abs() < EPS {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        let mut improved = false;
        while step >= MIN_STEP {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                improved = true;
                break;
            }
            step /= 2.0;
        }
        if !improved {
            break;
        }
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn clusters(n: usize, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let pos = i % 2 == 0;
            let c = if pos { sep } else { -sep };
            x.push(vec![c + noise.sample(&mut rng), c + noise.sample(&mut rng), rng.random::<f64>()]);
            y.push(pos);
        }
        (x, y)
    }

    #[test]
    fn separates_gaussian_clusters() {
        let (x, y) = clusters(60, 2.0, 1);
        let m = train_svm(&x, &y, &SvmParams::default()).unwrap();
        for (r, &l) in x.iter().zip(&y) {
            assert_eq!(m.decision(r) > 0.0, l);
            let p = m.probability(r);
            assert!(p > 0.0 && p < 1.0);
            assert_eq!(p > 0.5, l);
        }
    }

    #[test]
    fn duplicate_point_with_both_labels() {
        let x = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let m = train_svm(&x, &[true, false], &SvmParams::default()).unwrap();
        assert!((m.probability(&x[0]) - 0.5).abs() < 1e-3);
    }

    #[test]
    fn hard_margin_limit() {
        let (x, y) = clusters(40, 2.0, 2);
        let params = SvmParams {
            kernel: KernelKind::Linear,
            c: 1e6,
            ..Default::default()
        };
        let m = train_svm(&x, &y, &params).unwrap();
        let hinge: f64 = x
            .iter()
            .zip(&y)
            .map(|(r, &l)| {
                let s = if l { 1.0 } else { -1.0 };
                (1.0 - s * m.decision(r)).max(0.0)
            })
            .sum();
        assert!(hinge < 1e-2, "hinge {hinge}");
    }

    #[test]
    fn iteration_cap_reports_count() {
        let (x, y) = clusters(40, 0.2, 3);
        let params = SvmParams {
            max_iter: 2,
            ..Default::default()
        };
        assert!(matches!(
            train_svm(&x, &y, &params),
            Err(Error::NoConvergence { iterations: 2 })
        ));
    }
}
