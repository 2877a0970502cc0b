//! Frequentist comparators: MI-LASSO (group lasso across imputations) and
//! the plain lasso used by the full-data and complete-case arms.
//!
//! Both minimize a half-scaled least squares loss,
//! `½ Σ_d ‖y_d − X_d β_d‖² + λ Σ_j ‖β_{·,j}‖₂`, on standardized data. With
//! this scaling `λ_max = max_j ‖(x_{1j}ᵀy_1, …, x_{Dj}ᵀy_D)‖` and the KKT
//! conditions read `‖g_j‖ ≤ λ` for zero groups and `g_j = λ β_j/‖β_j‖` for
//! active ones, where `g_{d,j} = x_{dj}ᵀ r_d`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{destandardize_coefficients, Dataset, ImputedStack, Provenance, StandardizedStack};
use crate::error::{Error, Result};
use crate::linalg::{least_squares, CholeskyFactor};
use crate::selection::{modified_bic, ols_reference};

const MM_TOL: f64 = 1e-6;
const MM_MAX_ITER: usize = 500;
const MM_EPS: f64 = 1e-10;
const ZERO_NORM: f64 = 1e-6;
const BCD_TOL: f64 = 1e-10;
const BCD_MAX_SWEEPS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupLassoFit {
    /// `D × p`, standardized scale.
    pub beta_std: DMatrix<f64>,
    /// `D × p`, original scale.
    pub beta: DMatrix<f64>,
    pub intercepts: Vec<f64>,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `‖β_{·,j}‖₂` on the standardized scale.
    pub group_norms: Vec<f64>,
    /// Objective after every iterated-ridge step (starting value first).
    pub objective_trace: Vec<f64>,
}

impl GroupLassoFit {
    pub fn selected(&self) -> Vec<bool> {
        self.group_norms.iter().map(|&v| v > 0.0).collect()
    }
}

struct Suff {
    gram: Vec<DMatrix<f64>>,
    xty: Vec<DVector<f64>>,
    yty: Vec<f64>,
}

impl Suff {
    fn new(stack: &StandardizedStack) -> Self {
        let gram = (0..stack.d()).map(|d| stack.x(d).transpose() * stack.x(d)).collect();
        let xty = (0..stack.d()).map(|d| stack.x(d).transpose() * stack.y(d)).collect();
        let yty = (0..stack.d()).map(|d| stack.y(d).norm_squared()).collect();
        Self { gram, xty, yty }
    }

    fn d(&self) -> usize {
        self.gram.len()
    }

    fn p(&self) -> usize {
        self.gram[0].nrows()
    }

    /// `½ RSS` of one dataset via the sufficient statistics.
    fn half_rss(&self, d: usize, b: &DVector<f64>) -> f64 {
        let g = &self.gram[d];
        0.5 * (self.yty[d] - 2.0 * b.dot(&self.xty[d]) + (g * b).dot(b)).max(0.0)
    }
}

fn group_norms(beta: &DMatrix<f64>) -> Vec<f64> {
    (0..beta.ncols()).map(|j| beta.column(j).norm()).collect()
}

fn objective(s: &Suff, beta: &DMatrix<f64>, lambda: f64) -> f64 {
    let loss: f64 = (0..s.d()).map(|d| s.half_rss(d, &beta.row(d).transpose())).sum();
    loss + lambda * group_norms(beta).iter().sum::<f64>()
}

/// Stacked per-group gradients `g_{d,j} = x_{dj}ᵀ r_d`, `D × p`.
fn gradients(s: &Suff, beta: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(s.d(), s.p());
    for d in 0..s.d() {
        let b = beta.row(d).transpose();
        let gd = &s.xty[d] - &s.gram[d] * b;
        for j in 0..s.p() {
            g[(d, j)] = gd[j];
        }
    }
    g
}

/// `max_j ‖stacked x_jᵀ y‖`: the smallest λ with an all-zero solution.
pub fn lambda_max(stack: &StandardizedStack) -> f64 {
    let s = Suff::new(stack);
    (0..s.p())
        .map(|j| (0..s.d()).map(|d| s.xty[d][j].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// `k` log-spaced values from `λ_max` down to `λ_max · ratio`.
pub fn lambda_grid(stack: &StandardizedStack, k: usize, ratio: f64) -> Vec<f64> {
    let top = lambda_max(stack);
    if k <= 1 {
        return vec![top];
    }
    (0..k)
        .map(|i| top * ratio.powf(i as f64 / (k - 1) as f64))
        .collect()
}

/// Largest KKT violation of a group-lasso solution (0 means exact).
pub fn kkt_violation(stack: &StandardizedStack, beta_std: &DMatrix<f64>, lambda: f64) -> f64 {
    let s = Suff::new(stack);
    let g = gradients(&s, beta_std);
    let mut worst: f64 = 0.0;
    for j in 0..s.p() {
        let norm = beta_std.column(j).norm();
        let gj = g.column(j);
        if norm == 0.0 {
            worst = worst.max(gj.norm() - lambda);
        } else {
            let target = beta_std.column(j) * (lambda / norm);
            worst = worst.max((gj - target).norm());
        }
    }
    worst.max(0.0)
}

/// Ridge solve per dataset with per-coordinate penalties `pen` on `active`
/// coordinates; inactive ones are fixed at zero.
fn ridge_step(s: &Suff, pen: &[f64], active: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(s.d(), s.p());
    let k = active.len();
    if k == 0 {
        return out;
    }
    for d in 0..s.d() {
        let g = &s.gram[d];
        let mut a = DMatrix::from_fn(k, k, |r, c| g[(active[r], active[c])]);
        for r in 0..k {
            a[(r, r)] += pen[active[r]];
        }
        let rhs = DVector::from_fn(k, |r, _| s.xty[d][active[r]]);
        let sol = match CholeskyFactor::new(&a) {
            Ok(ch) => ch.solve(&rhs),
            Err(_) => {
                let scale = (a.trace() / k as f64).max(1.0);
                for r in 0..k {
                    a[(r, r)] += 1e-8 * scale;
                }
                CholeskyFactor::new(&a).map(|ch| ch.solve(&rhs)).unwrap_or_else(|_| DVector::zeros(k))
            }
        };
        for (r, &j) in active.iter().enumerate() {
            out[(d, j)] = sol[r];
        }
    }
    out
}

/// Exact minimizer of one group's block problem given its partial-residual
/// gradients `g` and column norms `h`.
fn group_block_solution(g: &[f64], h: &[f64], lambda: f64) -> Vec<f64> {
    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if gn <= lambda {
        return vec![0.0; g.len()];
    }
    if lambda == 0.0 {
        return g.iter().zip(h).map(|(gv, hv)| gv / hv).collect();
    }
    let equal = h.iter().all(|v| (v - h[0]).abs() <= 1e-12 * h[0].abs());
    let t = if equal {
        (gn - lambda) / h[0]
    } else {
        // Σ g_d² / (h_d t + λ)² = 1 has a unique root in t > 0
        let phi = |t: f64| g.iter().zip(h).map(|(gv, hv)| gv * gv / (hv * t + lambda).powi(2)).sum::<f64>() - 1.0;
        let hmin = h.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = (gn - lambda) / hmin.max(1e-300);
        while phi(hi) > 0.0 {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if phi(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        0.5 * (lo + hi)
    };
    g.iter().zip(h).map(|(gv, hv)| gv * t / (hv * t + lambda)).collect()
}

/// Block coordinate descent from `beta`. Returns sweeps used and whether the
/// largest coefficient change fell below tolerance.
fn bcd(s: &Suff, beta: &mut DMatrix<f64>, lambda: f64) -> (usize, bool) {
    let (dn, p) = (s.d(), s.p());
    // current gradients x_djᵀ r_d, kept up to date
    let mut grad = gradients(s, beta);
    let mut g = vec![0.0; dn];
    let mut h = vec![0.0; dn];
    for sweep in 1..=BCD_MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            for d in 0..dn {
                h[d] = s.gram[d][(j, j)];
                g[d] = grad[(d, j)] + h[d] * beta[(d, j)];
            }
            let new = group_block_solution(&g, &h, lambda);
            for d in 0..dn {
                let delta = new[d] - beta[(d, j)];
                if delta != 0.0 {
                    max_change = max_change.max(delta.abs());
                    beta[(d, j)] = new[d];
                    let col = s.gram[d].column(j);
                    for k in 0..p {
                        grad[(d, k)] -= col[k] * delta;
                    }
                }
            }
        }
        if max_change < BCD_TOL {
            return (sweep, true);
        }
    }
    (BCD_MAX_SWEEPS, false)
}

/// Fits MI-LASSO at one `λ`.
///
/// Iterated ridge: with `w_j = ‖β_j^{(t)}‖ + ε`, each dataset solves
/// `(X_dᵀX_d + diag(λ/w_j)) β_d = X_dᵀ y_d`; groups whose norm drops below
/// 1e-6 are set to zero and leave the active set. The iterate is then
/// polished by exact block coordinate descent, which also revives groups
/// that were zeroed too early.
pub fn fit_milasso(stack: &StandardizedStack, lambda: f64) -> Result<GroupLassoFit> {
    fit_milasso_warm(stack, lambda, None)
}

pub fn fit_milasso_warm(stack: &StandardizedStack, lambda: f64, warm: Option<&DMatrix<f64>>) -> Result<GroupLassoFit> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {lambda}")));
    }
    let s = Suff::new(stack);
    let (d, p) = (s.d(), s.p());

    if lambda == 0.0 {
        let mut beta = DMatrix::zeros(d, p);
        for k in 0..d {
            let (b, _) = least_squares(stack.x(k), stack.y(k));
            for j in 0..p {
                beta[(k, j)] = b[j];
            }
        }
        return finish(stack, &s, beta, lambda, 1, true, Vec::new());
    }

    // starting point: warm start, with zero groups reseeded from a ridge fit
    let ridge = ridge_step(&s, &vec![lambda; p], &(0..p).collect::<Vec<_>>());
    let mut beta = match warm {
        Some(w) if w.shape() == (d, p) => {
            let mut b = w.clone();
            for j in 0..p {
                if b.column(j).norm() == 0.0 {
                    b.set_column(j, &ridge.column(j));
                }
            }
            b
        }
        _ => ridge,
    };

    let mut trace = vec![objective(&s, &beta, lambda)];
    let mut iterations = 0;
    for _ in 0..MM_MAX_ITER {
        iterations += 1;
        let norms = group_norms(&beta);
        let active: Vec<usize> = (0..p).filter(|&j| norms[j] >= ZERO_NORM).collect();
        let pen: Vec<f64> = norms.iter().map(|nv| lambda / (nv + MM_EPS)).collect();
        let next = ridge_step(&s, &pen, &active);
        let change = (&next - &beta).abs().max();
        beta = next;
        for j in 0..p {
            if beta.column(j).norm() < ZERO_NORM {
                beta.column_mut(j).fill(0.0);
            }
        }
        trace.push(objective(&s, &beta, lambda));
        if change < MM_TOL {
            break;
        }
    }

    let (sweeps, converged) = bcd(&s, &mut beta, lambda);
    if !converged {
        log::warn!("MI-LASSO at lambda {lambda}: block descent hit its sweep limit");
    }
    finish(stack, &s, beta, lambda, iterations + sweeps, converged, trace)
}

fn finish(
    stack: &StandardizedStack,
    _s: &Suff,
    beta_std: DMatrix<f64>,
    lambda: f64,
    iterations: usize,
    converged: bool,
    objective_trace: Vec<f64>,
) -> Result<GroupLassoFit> {
    let coef = destandardize_coefficients(&beta_std, stack.state())?;
    Ok(GroupLassoFit {
        group_norms: group_norms(&beta_std),
        beta: coef.beta,
        intercepts: coef.intercept,
        beta_std,
        lambda,
        iterations,
        converged,
        objective_trace,
    })
}

/// MI-LASSO objective `½ Σ_d ‖y_d − X_d β_d‖² + λ Σ_j ‖β_j‖` on the standardized scale.
pub fn milasso_objective(stack: &StandardizedStack, beta_std: &DMatrix<f64>, lambda: f64) -> f64 {
    objective(&Suff::new(stack), beta_std, lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub lambda: f64,
    pub bic: f64,
    pub n_selected: usize,
}

/// Fits the path (largest λ first, warm-started) and returns the
/// BIC-minimizing fit together with the whole path.
pub fn tune_milasso(stack: &StandardizedStack, lambda_grid: &[f64]) -> Result<(GroupLassoFit, Vec<PathPoint>)> {
    if lambda_grid.is_empty() {
        return Err(Error::InvalidParameter("empty lambda grid".into()));
    }
    let mut grid = lambda_grid.to_vec();
    grid.sort_by(|a, b| b.total_cmp(a));
    let original = stack.original();
    let ols = ols_reference(original);
    let mut best: Option<(f64, GroupLassoFit)> = None;
    let mut path = Vec::with_capacity(grid.len());
    let mut warm: Option<DMatrix<f64>> = None;
    for &lam in &grid {
        let fit = fit_milasso_warm(stack, lam, warm.as_ref())?;
        let bic = modified_bic(original, &fit.beta, ols.as_ref())?.value;
        path.push(PathPoint {
            lambda: lam,
            bic,
            n_selected: fit.selected().iter().filter(|s| **s).count(),
        });
        warm = Some(fit.beta_std.clone());
        // strict improvement keeps the larger λ on ties
        if best.as_ref().is_none_or(|(b, _)| bic < *b) {
            best = Some((bic, fit));
        }
    }
    Ok((best.expect("non-empty grid").1, path))
}

/// Coordinate-descent lasso, `½‖y − Xβ‖² + λ‖β‖₁`, no intercept.
pub fn fit_lasso(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> DVector<f64> {
    fit_lasso_warm(x, y, lambda, None)
}

pub fn fit_lasso_warm(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, warm: Option<&DVector<f64>>) -> DVector<f64> {
    let p = x.ncols();
    let gram = x.transpose() * x;
    let xty = x.transpose() * y;
    let mut beta = warm.cloned().unwrap_or_else(|| DVector::zeros(p));
    let mut grad = &xty - &gram * &beta;
    for _ in 0..100_000 {
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            let h = gram[(j, j)];
            if h <= 0.0 {
                continue;
            }
            let z = grad[j] + h * beta[j];
            let new = soft_threshold(z, lambda) / h;
            let delta = new - beta[j];
            if delta != 0.0 {
                max_change = max_change.max(delta.abs());
                beta[j] = new;
                let col = gram.column(j);
                for k in 0..p {
                    grad[k] -= col[k] * delta;
                }
            }
        }
        if max_change < 1e-12 {
            break;
        }
    }
    beta
}

pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    /// Original-scale slopes.
    pub beta: DVector<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub selected: Vec<bool>,
    pub bic: f64,
}

/// Lasso on one complete dataset with λ chosen by the modified BIC (D = 1)
/// over the default 50-point grid.
pub fn tune_lasso(data: &Dataset) -> Result<LassoFit> {
    let stack = ImputedStack::new(vec![data.clone()], Provenance::Loaded)?;
    let st = crate::data::standardize(&stack)?;
    let grid = lambda_grid(&st, 50, 1e-3);
    let ols = ols_reference(&stack);
    let (x, y) = (st.x(0), st.y(0));
    let mut warm: Option<DVector<f64>> = None;
    let mut best: Option<LassoFit> = None;
    for &lam in &grid {
        let b = fit_lasso_warm(x, y, lam, warm.as_ref());
        let coef = destandardize_coefficients(&DMatrix::from_row_slice(1, b.len(), b.as_slice()), st.state())?;
        let bic = modified_bic(&stack, &coef.beta, ols.as_ref())?.value;
        if best.as_ref().is_none_or(|f| bic < f.bic) {
            best = Some(LassoFit {
                beta: coef.beta.row(0).transpose(),
                intercept: coef.intercept[0],
                lambda: lam,
                selected: b.iter().map(|v| *v != 0.0).collect(),
                bic,
            });
        }
        warm = Some(b);
    }
    Ok(best.expect("non-empty grid"))
}
