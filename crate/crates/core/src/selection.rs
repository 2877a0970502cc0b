//! From posterior draws to a selected variable set.
//!
//! Draws of `β_{d,j}` are pooled over imputations, chains and iterations
//! into one sample per covariate (order: dataset-major, then chain, then
//! iteration). A covariate is kept when the equal-tailed x% interval of its
//! pooled sample excludes zero, or, for spike models, when its posterior
//! inclusion proportion exceeds one half. The modified BIC scores a fitted
//! coefficient matrix and drives the choice of x% when no truth is known.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ImputedStack;
use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, least_squares};
use crate::models::PosteriorDraws;

/// The x% grid: 5, 10, …, 95.
pub fn x_grid() -> Vec<f64> {
    (1..=19).map(|k| 5.0 * k as f64).collect()
}

/// Type-7 (linear interpolation) quantile of a sorted sample.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_copy(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Pooled posterior sample per covariate.
#[derive(Debug, Clone)]
pub struct PooledPosterior {
    pub column_names: Vec<String>,
    pub d: usize,
    /// `samples[j]`: every draw of `β_{d,j}` on the original scale.
    pub samples: Vec<Vec<f64>>,
    /// Same samples, sorted ascending.
    sorted: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    /// Posterior mean of `β_{d,j}`, `D × p`.
    pub dataset_means: DMatrix<f64>,
    /// Posterior mean of `β_{d,j}` over draws with `γ_j = 1` (spike models;
    /// zero where a group is never active).
    pub conditional_means: Option<DMatrix<f64>>,
    /// Inclusion proportion per covariate (spike models).
    pub inclusion: Option<Vec<f64>>,
}

impl PooledPosterior {
    /// Shrinkage-model posterior from raw draws, `per_dataset[d][j]` holding
    /// the original-scale draws of `β_{d,j}`.
    pub fn from_draws(column_names: Vec<String>, per_dataset: &[Vec<Vec<f64>>]) -> Result<Self> {
        let d = per_dataset.len();
        let p = column_names.len();
        if d == 0 || per_dataset.iter().any(|v| v.len() != p || v.iter().any(Vec::is_empty)) {
            return Err(Error::Dimension(format!("draws must be D x {p} non-empty vectors")));
        }
        let dataset_means = DMatrix::from_fn(d, p, |k, j| {
            let v = &per_dataset[k][j];
            compensated_sum(v.iter().copied()) / v.len() as f64
        });
        let samples = pool_samples(per_dataset);
        let sorted = samples.iter().map(|s| sorted_copy(s)).collect();
        Ok(PooledPosterior {
            column_names,
            d,
            samples,
            sorted,
            sigma2: Vec::new(),
            dataset_means,
            conditional_means: None,
            inclusion: None,
        })
    }

    pub fn p(&self) -> usize {
        self.samples.len()
    }

    pub fn mean(&self, j: usize) -> f64 {
        compensated_sum(self.samples[j].iter().copied()) / self.samples[j].len() as f64
    }

    pub fn quantile(&self, j: usize, q: f64) -> f64 {
        quantile_sorted(&self.sorted[j], q)
    }

    /// Equal-tailed x% interval of covariate `j`.
    pub fn interval(&self, j: usize, x_pct: f64) -> (f64, f64) {
        let tail = (1.0 - x_pct / 100.0) / 2.0;
        (self.quantile(j, tail), self.quantile(j, 1.0 - tail))
    }
}

/// Builds per-covariate pooled samples from a set of draws given as
/// `values[d][j]` slices. Exposed for tests and custom pipelines.
pub fn pool_samples(per_dataset: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let p = per_dataset.first().map_or(0, |d| d.len());
    (0..p)
        .map(|j| per_dataset.iter().flat_map(|d| d[j].iter().copied()).collect())
        .collect()
}

pub fn pool(draws: &PosteriorDraws) -> Result<PooledPosterior> {
    let (d, p) = (draws.d, draws.p);
    let m = draws.n_draws();
    if m == 0 || draws.n_chains() == 0 {
        return Err(Error::InvalidParameter("no posterior draws to pool".into()));
    }
    let total = draws.n_chains() * m;
    let mut samples = vec![Vec::with_capacity(d * total); p];
    let mut dataset_means = DMatrix::zeros(d, p);
    for k in 0..d {
        for j in 0..p {
            let idx = k * p + j;
            let start = samples[j].len();
            for c in 0..draws.n_chains() {
                let bo = &draws.beta_original[c];
                samples[j].extend((0..m).map(|i| bo[i * d * p + idx]));
            }
            dataset_means[(k, j)] =
                compensated_sum(samples[j][start..].iter().copied()) / total as f64;
        }
    }
    let mut sigma2 = Vec::with_capacity(total);
    for c in 0..draws.n_chains() {
        sigma2.extend_from_slice(&draws.trace(c, "sigma2").expect("sigma2 trace").values);
    }

    let (conditional_means, inclusion) = if draws.kind().is_spike() {
        let mut incl = vec![0.0; p];
        let mut cond = DMatrix::zeros(d, p);
        let mut count = vec![0usize; p];
        for c in 0..draws.n_chains() {
            let g = draws.trace(c, "gamma").expect("gamma trace");
            let bo = &draws.beta_original[c];
            for i in 0..m {
                for j in 0..p {
                    if g.draw(i)[j] > 0.5 {
                        incl[j] += 1.0;
                        count[j] += 1;
                        for k in 0..d {
                            cond[(k, j)] += bo[i * d * p + k * p + j];
                        }
                    }
                }
            }
        }
        for j in 0..p {
            incl[j] /= total as f64;
            if count[j] > 0 {
                for k in 0..d {
                    cond[(k, j)] /= count[j] as f64;
                }
            }
        }
        (Some(cond), Some(incl))
    } else {
        (None, None)
    };

    let sorted = samples.iter().map(|s| sorted_copy(s)).collect();
    Ok(PooledPosterior {
        column_names: draws.column_names.clone(),
        d,
        samples,
        sorted,
        sigma2,
        dataset_means,
        conditional_means,
        inclusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Rule {
    CredibleInterval { x_pct: f64 },
    MedianIndicator,
    BicPath { lambda: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub column_names: Vec<String>,
    pub selected: Vec<bool>,
    pub rule: Rule,
    /// Pooled point estimates (original scale).
    pub estimates: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub bic: Option<f64>,
}

impl SelectionResult {
    pub fn n_selected(&self) -> usize {
        self.selected.iter().filter(|s| **s).count()
    }
}

pub fn select_by_interval(pooled: &PooledPosterior, x_pct: f64) -> SelectionResult {
    let p = pooled.p();
    let mut selected = vec![false; p];
    let mut lo = vec![0.0; p];
    let mut hi = vec![0.0; p];
    for j in 0..p {
        let (a, b) = pooled.interval(j, x_pct);
        lo[j] = a;
        hi[j] = b;
        selected[j] = a > 0.0 || b < 0.0;
    }
    SelectionResult {
        column_names: pooled.column_names.clone(),
        selected,
        rule: Rule::CredibleInterval { x_pct },
        estimates: (0..p).map(|j| pooled.mean(j)).collect(),
        lo,
        hi,
        bic: None,
    }
}

/// Spike models only: keep `j` iff its pooled inclusion proportion is
/// strictly above 0.5. Intervals reported are 95%.
pub fn select_by_median_indicator(pooled: &PooledPosterior) -> Result<SelectionResult> {
    let incl = pooled.inclusion.as_ref().ok_or_else(|| {
        Error::Incompatible("median-indicator rule needs a spike model (no inclusion indicators)".into())
    })?;
    let p = pooled.p();
    let (lo, hi): (Vec<f64>, Vec<f64>) = (0..p).map(|j| pooled.interval(j, 95.0)).unzip();
    Ok(SelectionResult {
        column_names: pooled.column_names.clone(),
        selected: incl.iter().map(|&q| q > 0.5).collect(),
        rule: Rule::MedianIndicator,
        estimates: (0..p).map(|j| pooled.mean(j)).collect(),
        lo,
        hi,
        bic: None,
    })
}

/// Sensitivity, specificity, precision and F1 of a selection.
///
/// With no truly important covariates SEN is 1; with no unimportant ones SPE
/// is 1; with nothing selected precision and F1 are 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub sen: f64,
    pub spe: f64,
    pub precision: f64,
    pub f1: f64,
}

pub fn confusion(selected: &[bool], truth: &[bool]) -> Confusion {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut tn = 0usize;
    let mut fn_ = 0usize;
    for (&s, &t) in selected.iter().zip(truth) {
        match (s, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let sen = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let spe = if tn + fp == 0 { 1.0 } else { tn as f64 / (tn + fp) as f64 };
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let f1 = if precision + sen == 0.0 || tp + fp == 0 {
        0.0
    } else {
        2.0 * precision * sen / (precision + sen)
    };
    Confusion { sen, spe, precision, f1 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bic {
    /// `-inf` when the residual sum of squares is zero.
    pub value: f64,
    pub df: f64,
    pub rss: f64,
    pub zero_rss: bool,
    /// `df` used the selected-count × D fallback (no OLS reference).
    pub df_fallback: bool,
}

/// Per-dataset OLS slopes (with intercept) on the original scale, `D × p`.
/// `None` when `n <= p`.
pub fn ols_reference(stack: &ImputedStack) -> Option<DMatrix<f64>> {
    if stack.n() <= stack.p() + 1 {
        return None;
    }
    let mut out = DMatrix::zeros(stack.d(), stack.p());
    for (k, ds) in stack.datasets().iter().enumerate() {
        let (_, b, _) = crate::linalg::least_squares_with_intercept(ds.x(), ds.y());
        for j in 0..stack.p() {
            out[(k, j)] = b[j];
        }
    }
    Some(out)
}

/// Modified BIC of slopes `beta_bar` (`D × p`, original scale). Intercepts
/// are `ȳ_d − x̄_dᵀ β̄_d`. Without `beta_ols` the degrees of freedom fall
/// back to (number of non-zero groups) × D.
pub fn modified_bic(stack: &ImputedStack, beta_bar: &DMatrix<f64>, beta_ols: Option<&DMatrix<f64>>) -> Result<Bic> {
    let (d, p, n) = (stack.d(), stack.p(), stack.n());
    if beta_bar.shape() != (d, p) {
        return Err(Error::Dimension(format!(
            "coefficients are {:?}, stack is {d}x{p}",
            beta_bar.shape()
        )));
    }
    if let Some(o) = beta_ols {
        if o.shape() != (d, p) {
            return Err(Error::Dimension("OLS reference shape".into()));
        }
    }
    let mut terms = Vec::with_capacity(d * n);
    for (k, ds) in stack.datasets().iter().enumerate() {
        let x = ds.x();
        let y = ds.y();
        let xbar: Vec<f64> = (0..p).map(|j| x.column(j).mean()).collect();
        let b0 = y.mean() - (0..p).map(|j| xbar[j] * beta_bar[(k, j)]).sum::<f64>();
        for i in 0..n {
            let fit = b0 + (0..p).map(|j| x[(i, j)] * beta_bar[(k, j)]).sum::<f64>();
            terms.push((y[i] - fit).powi(2));
        }
    }
    let rss = compensated_sum(terms);
    let dn = (d * n) as f64;

    let norms: Vec<f64> = (0..p).map(|j| beta_bar.column(j).norm()).collect();
    let (df, df_fallback) = match beta_ols {
        Some(o) => {
            let mut df = 0.0;
            for j in 0..p {
                if norms[j] > 0.0 {
                    df += 1.0;
                    let on = o.column(j).norm();
                    if on > 0.0 {
                        df += norms[j] / on * (d as f64 - 1.0);
                    }
                }
            }
            (df, false)
        }
        None => (norms.iter().filter(|v| **v > 0.0).count() as f64 * d as f64, true),
    };
    let zero_rss = !(rss > 0.0);
    let value = if zero_rss {
        f64::NEG_INFINITY
    } else {
        (rss / dn).ln() + df * dn.ln() / dn
    };
    Ok(Bic {
        value,
        df,
        rss,
        zero_rss,
        df_fallback,
    })
}

/// How the BIC of a Bayesian selection obtains its coefficient matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BicMode {
    /// Per-dataset posterior means of selected covariates (conditional on
    /// inclusion for spike models), zero elsewhere.
    #[default]
    PosteriorMean,
    /// Per-dataset OLS refits on the selected covariates.
    Refit,
}

/// Per-dataset OLS (with intercept) restricted to `selected`; `D × p`.
pub fn refit_matrix(stack: &ImputedStack, selected: &[bool]) -> DMatrix<f64> {
    let cols: Vec<usize> = (0..stack.p()).filter(|&j| selected[j]).collect();
    let mut out = DMatrix::zeros(stack.d(), stack.p());
    if cols.is_empty() {
        return out;
    }
    for (k, ds) in stack.datasets().iter().enumerate() {
        let n = ds.n();
        let xs = DMatrix::from_fn(n, cols.len(), |i, a| ds.x()[(i, cols[a])]);
        let (_, b, _) = crate::linalg::least_squares_with_intercept(&xs, ds.y());
        for (a, &j) in cols.iter().enumerate() {
            out[(k, j)] = b[a];
        }
    }
    out
}

/// Coefficient matrix used to score a selection.
pub fn bic_coefficients(pooled: &PooledPosterior, stack: &ImputedStack, selected: &[bool], mode: BicMode) -> DMatrix<f64> {
    match mode {
        BicMode::Refit => refit_matrix(stack, selected),
        BicMode::PosteriorMean => {
            let base = pooled.conditional_means.as_ref().unwrap_or(&pooled.dataset_means);
            DMatrix::from_fn(base.nrows(), base.ncols(), |k, j| if selected[j] { base[(k, j)] } else { 0.0 })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub x_pct: f64,
    pub selected: Vec<bool>,
    pub n_selected: usize,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub distance: Option<f64>,
    pub bic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanTable {
    pub rows: Vec<ScanRow>,
    /// Index of the chosen row: distance argmax with truth, BIC argmin
    /// otherwise (ties go to the larger x%).
    pub best: usize,
}

impl ScanTable {
    pub fn best_row(&self) -> &ScanRow {
        &self.rows[self.best]
    }
}

/// Context for scoring scan rows by modified BIC.
pub struct BicContext<'a> {
    pub stack: &'a ImputedStack,
    pub mode: BicMode,
}

/// Scans x% over 5..95. With `truth`, rows carry SEN/SPE/distance and the
/// distance-maximizing row is marked; otherwise `bic` must be given and the
/// BIC-minimizing row is marked.
pub fn scan_intervals(pooled: &PooledPosterior, truth: Option<&[bool]>, bic: Option<&BicContext>) -> Result<ScanTable> {
    if truth.is_none() && bic.is_none() {
        return Err(Error::InvalidParameter("interval scan needs truth or a BIC context".into()));
    }
    if let Some(t) = truth {
        if t.len() != pooled.p() {
            return Err(Error::Dimension("truth length".into()));
        }
    }
    let ols = bic.and_then(|c| ols_reference(c.stack));
    let mut rows = Vec::with_capacity(19);
    for x in x_grid() {
        let sel = select_by_interval(pooled, x).selected;
        let (sen, spe, distance) = match truth {
            Some(t) => {
                let c = confusion(&sel, t);
                (Some(c.sen), Some(c.spe), Some((c.sen * c.sen + c.spe * c.spe).sqrt()))
            }
            None => (None, None, None),
        };
        let bic_value = match bic {
            Some(ctx) => {
                let coef = bic_coefficients(pooled, ctx.stack, &sel, ctx.mode);
                Some(modified_bic(ctx.stack, &coef, ols.as_ref())?.value)
            }
            None => None,
        };
        rows.push(ScanRow {
            x_pct: x,
            n_selected: sel.iter().filter(|s| **s).count(),
            selected: sel,
            sen,
            spe,
            distance,
            bic: bic_value,
        });
    }
    let best = if truth.is_some() {
        argbest(&rows, |r| r.distance.unwrap(), true)
    } else {
        argbest(&rows, |r| r.bic.unwrap(), false)
    };
    Ok(ScanTable { rows, best })
}

/// Index of the max (or min) value; ties resolve to the later row.
fn argbest(rows: &[ScanRow], f: impl Fn(&ScanRow) -> f64, maximize: bool) -> usize {
    let mut best = 0;
    for i in 1..rows.len() {
        let (a, b) = (f(&rows[i]), f(&rows[best]));
        let better = if maximize { a >= b } else { a <= b };
        if better {
            best = i;
        }
    }
    best
}

/// Per-dataset OLS on the selected covariates, averaged over datasets.
/// Returns the pooled slopes and whether a ridge fallback was needed.
pub fn refit_pool(stack: &ImputedStack, selected: &[bool]) -> Result<(DVector<f64>, bool)> {
    let p = stack.p();
    if selected.len() != p {
        return Err(Error::Dimension("selection length".into()));
    }
    let cols: Vec<usize> = (0..p).filter(|&j| selected[j]).collect();
    // more columns than centered rows: ridge straight away
    let deficient = cols.len() + 1 >= stack.n();
    let mut sum = DVector::zeros(p);
    let mut ridged_any = false;
    for ds in stack.datasets() {
        let n = ds.n();
        let xs = DMatrix::from_fn(n, cols.len(), |i, a| ds.x()[(i, cols[a])]);
        let xm: Vec<f64> = (0..cols.len()).map(|a| xs.column(a).mean()).collect();
        let xc = DMatrix::from_fn(n, cols.len(), |i, a| xs[(i, a)] - xm[a]);
        let ym = ds.y().mean();
        let yc = ds.y().map(|v| v - ym);
        let (b, ridged) = if deficient {
            (crate::linalg::ridged_least_squares(&xc, &yc), true)
        } else {
            least_squares(&xc, &yc)
        };
        ridged_any |= ridged;
        for (a, &j) in cols.iter().enumerate() {
            sum[j] += b[a];
        }
    }
    Ok((sum / stack.d() as f64, ridged_any))
}

/// Selection report in JSON form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub model: String,
    #[serde(flatten)]
    pub rule: Rule,
    pub bic: Option<f64>,
    pub converged: Option<bool>,
    pub max_rhat: Option<f64>,
    pub covariates: Vec<CovariateReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateReport {
    pub name: String,
    pub selected: bool,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

impl SelectionResult {
    pub fn report(&self, model: &str, converged: Option<bool>, max_rhat: Option<f64>) -> SelectionReport {
        SelectionReport {
            model: model.to_string(),
            rule: self.rule,
            bic: self.bic.filter(|b| b.is_finite()),
            converged,
            max_rhat,
            covariates: (0..self.selected.len())
                .map(|j| CovariateReport {
                    name: self.column_names[j].clone(),
                    selected: self.selected[j],
                    estimate: self.estimates[j],
                    lo: self.lo[j],
                    hi: self.hi[j],
                })
                .collect(),
        }
    }
}
