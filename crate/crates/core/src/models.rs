//! The five Bayesian MI-LASSO models and their Gibbs updates.
//!
//! All models share `y_d ~ N(X_d β_d, σ² I)` with `π(σ²) ∝ 1/σ²` and put a
//! group prior on `β_{·,j} = (β_{1,j}, …, β_{D,j})`:
//!
//! * Multi-Laplace: `β_{d,j} ~ N(0, λ_j²)`, `λ_j² ~ Gamma((D+1)/2, ·)`, `ρ ~ Gamma(r, s)`.
//! * Horseshoe: `β_{d,j} ~ N(0, τ² λ_j²)`, `λ_j, τ ~ C⁺(0, 1)`.
//! * ARD: `β_{d,j} ~ N(0, 1/λ_j²)`, `π(λ_j²) ∝ 1/λ_j²`.
//! * Spike-Normal: `β_{·,j} = 0` w.p. `1 − p0`, else `β_{d,j} ~ N(0, v0)`.
//! * Spike-Laplace: inclusion weight `π_j ~ Beta(a, b)`, slab `N(0, τ_j²)`
//!   with `τ_j² ~ Gamma((D+1)/2, ·)` governed by `lambda`.
//!
//! Sweep order: shrinkage models update β, then the local/global scales,
//! then σ². Spike models update the indicators (β collapsed per group),
//! then β over the active set, then slab scales, then σ².
//!
//! Everything here works on standardized data; see [`fit`].

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{destandardize_flat, StandardizationState, StandardizedStack};
use crate::error::{Error, Result};
use crate::linalg::CholeskyFactor;
use crate::rng::SimRng;
use crate::sampler::dist::{
    beta as beta_draw, gamma_rate, inv_gamma, sample_gig, sample_gig_half, sample_mvn_with_factor,
    standard_normal,
};
use crate::sampler::{rhat_per_component, run_chains, ChainConfig, Kernel, Rhat, Trace, TraceSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    MultiLaplace,
    Horseshoe,
    Ard,
    SpikeNormal,
    SpikeLaplace,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::MultiLaplace,
        ModelKind::Horseshoe,
        ModelKind::Ard,
        ModelKind::SpikeNormal,
        ModelKind::SpikeLaplace,
    ];

    pub fn is_spike(self) -> bool {
        matches!(self, ModelKind::SpikeNormal | ModelKind::SpikeLaplace)
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::MultiLaplace => "Multi-Laplace",
            ModelKind::Horseshoe => "Horseshoe",
            ModelKind::Ard => "ARD",
            ModelKind::SpikeNormal => "Spike-Normal",
            ModelKind::SpikeLaplace => "Spike-Laplace",
        }
    }

    fn allowed(self) -> &'static [&'static str] {
        match self {
            ModelKind::MultiLaplace => &["r", "s"],
            ModelKind::Horseshoe | ModelKind::Ard => &[],
            ModelKind::SpikeNormal => &["p0", "v0"],
            ModelKind::SpikeLaplace => &["a", "b", "lambda"],
        }
    }

    /// Default hyperparameters.
    pub fn defaults(self) -> BTreeMap<String, f64> {
        let pairs: &[(&str, f64)] = match self {
            ModelKind::MultiLaplace => &[("r", 2.0), ("s", 15.0)],
            ModelKind::Horseshoe | ModelKind::Ard => &[],
            ModelKind::SpikeNormal => &[("p0", 0.5), ("v0", 4.0)],
            ModelKind::SpikeLaplace => &[("a", 1.0), ("b", 1.0), ("lambda", 6.0 / 11.0)],
        };
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }
}

/// How the second argument of a `Gamma(shape, θ)` prior is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaArg {
    Scale,
    Rate,
}

/// Readings of the ambiguous Gamma priors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorReadings {
    /// Second argument `2/(Dρ)` of the Multi-Laplace `λ_j²` prior.
    pub lambda2: GammaArg,
    /// Second argument `s` of `ρ ~ Gamma(r, s)`.
    pub rho: GammaArg,
    /// Second argument `2/(Dλ)` of the Spike-Laplace slab prior.
    pub slab: GammaArg,
}

impl Default for PriorReadings {
    fn default() -> Self {
        Self {
            lambda2: GammaArg::Rate,
            rho: GammaArg::Rate,
            slab: GammaArg::Scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Missing keys take their defaults.
    #[serde(default)]
    pub hyperparams: BTreeMap<String, f64>,
    #[serde(default)]
    pub readings: PriorReadings,
}

impl ModelSpec {
    /// Default hyperparameters and readings.
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            hyperparams: kind.defaults(),
            readings: PriorReadings::default(),
        }
    }

    /// Supplied hyperparameters override the defaults; the result is validated.
    pub fn with_hyperparams(kind: ModelKind, supplied: &BTreeMap<String, f64>) -> Result<Self> {
        let mut spec = Self::new(kind);
        for (k, v) in supplied {
            spec.hyperparams.insert(k.clone(), *v);
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let allowed = self.kind.allowed();
        for (k, v) in &self.hyperparams {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::InvalidParameter(format!(
                    "{} takes no hyperparameter `{k}`",
                    self.kind.label()
                )));
            }
            if k == "p0" {
                if !(*v > 0.0 && *v < 1.0) {
                    return Err(Error::InvalidParameter(format!("p0 must be in (0,1), got {v}")));
                }
            } else if !(*v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{k} must be positive, got {v}")));
            }
        }
        for k in allowed {
            if !self.hyperparams.contains_key(*k) {
                return Err(Error::InvalidParameter(format!("missing hyperparameter `{k}`")));
            }
        }
        Ok(())
    }

    /// Fills in defaults for missing keys, then validates.
    pub fn resolved(&self) -> Result<Self> {
        let mut out = self.clone();
        for (k, v) in self.kind.defaults() {
            out.hyperparams.entry(k).or_insert(v);
        }
        out.validate()?;
        Ok(out)
    }

    pub fn h(&self, key: &str) -> f64 {
        self.hyperparams[key]
    }

    /// Rate of the `λ_j²` (Multi-Laplace) or `τ_j²` (Spike-Laplace) Gamma
    /// prior given its scale parameter `t` (ρ or lambda) and `D`.
    fn group_gamma_rate(reading: GammaArg, t: f64, d: usize) -> f64 {
        let d = d as f64;
        match reading {
            // θ = 2/(D t) is a scale
            GammaArg::Scale => d * t / 2.0,
            GammaArg::Rate => 2.0 / (d * t),
        }
    }

    fn rho_rate(&self) -> f64 {
        match self.readings.rho {
            GammaArg::Rate => self.h("s"),
            GammaArg::Scale => 1.0 / self.h("s"),
        }
    }
}

/// Precomputed sufficient statistics of a standardized stack.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub d: usize,
    pub n: usize,
    pub p: usize,
    pub x: Vec<DMatrix<f64>>,
    pub y: Vec<DVector<f64>>,
    pub gram: Vec<DMatrix<f64>>,
    pub xty: Vec<DVector<f64>>,
}

impl ModelData {
    pub fn new(stack: &StandardizedStack) -> Self {
        let x: Vec<DMatrix<f64>> = (0..stack.d()).map(|d| stack.x(d).clone()).collect();
        let y: Vec<DVector<f64>> = (0..stack.d()).map(|d| stack.y(d).clone()).collect();
        Self::from_parts(x, y)
    }

    pub fn from_parts(x: Vec<DMatrix<f64>>, y: Vec<DVector<f64>>) -> Self {
        let gram = x.iter().map(|m| m.transpose() * m).collect();
        let xty = x.iter().zip(&y).map(|(m, v)| m.transpose() * v).collect();
        Self {
            d: x.len(),
            n: x[0].nrows(),
            p: x[0].ncols(),
            x,
            y,
            gram,
            xty,
        }
    }

    pub fn rss(&self, beta: &DMatrix<f64>) -> f64 {
        let mut total = 0.0;
        for d in 0..self.d {
            let b = beta.row(d).transpose();
            let r = &self.y[d] - &self.x[d] * b;
            total += r.norm_squared();
        }
        total
    }
}

/// Group sums of squares `S_j = Σ_d β_{d,j}²`.
pub fn group_ss(beta: &DMatrix<f64>) -> Vec<f64> {
    (0..beta.ncols()).map(|j| beta.column(j).norm_squared()).collect()
}

/// Current values of every latent quantity. Fields not used by a model keep
/// their initial values.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// `D × p`.
    pub beta: DMatrix<f64>,
    pub sigma2: f64,
    /// Multi-Laplace / Horseshoe local variances, ARD precisions.
    pub lambda2: Vec<f64>,
    pub rho: f64,
    pub tau2: f64,
    pub nu: Vec<f64>,
    pub xi: f64,
    pub gamma: Vec<bool>,
    pub pi: Vec<f64>,
    pub tau2_slab: Vec<f64>,
}

impl LatentState {
    pub fn new(d: usize, p: usize) -> Self {
        Self {
            beta: DMatrix::zeros(d, p),
            sigma2: 1.0,
            lambda2: vec![1.0; p],
            rho: 1.0,
            tau2: 1.0,
            nu: vec![1.0; p],
            xi: 1.0,
            gamma: vec![true; p],
            pi: vec![0.5; p],
            tau2_slab: vec![1.0; p],
        }
    }

    /// Dispersed starting point for one chain.
    fn dispersed(spec: &ModelSpec, data: &ModelData, rng: &mut SimRng) -> Self {
        let (d, p) = (data.d, data.p);
        let mut s = Self::new(d, p);
        let jitter = |rng: &mut SimRng, sd: f64| (sd * standard_normal(rng)).exp();
        let yvar = data.y.iter().map(|y| y.norm_squared()).sum::<f64>() / (d * (data.n - 1)) as f64;
        s.sigma2 = yvar.max(1e-8) * jitter(rng, 0.5);
        for v in s.lambda2.iter_mut() {
            *v = jitter(rng, 1.0);
        }
        match spec.kind {
            ModelKind::MultiLaplace => {
                s.rho = spec.h("r") / spec.rho_rate() * jitter(rng, 0.5);
            }
            ModelKind::SpikeNormal | ModelKind::SpikeLaplace => {
                for g in s.gamma.iter_mut() {
                    *g = rng.random::<bool>();
                }
                if spec.kind == ModelKind::SpikeLaplace {
                    let (a, b) = (spec.h("a"), spec.h("b"));
                    let c = ModelSpec::group_gamma_rate(spec.readings.slab, spec.h("lambda"), d);
                    for j in 0..p {
                        s.pi[j] = a / (a + b);
                        s.tau2_slab[j] = (d as f64 + 1.0) / 2.0 / c * jitter(rng, 0.5);
                    }
                } else {
                    s.tau2_slab = vec![spec.h("v0"); p];
                }
            }
            _ => {}
        }
        s
    }

    /// Prior variance of `β_{d,j}` implied by the current scales. Spike-Normal
    /// keeps `v0` in `tau2_slab`.
    pub fn prior_variance(&self, kind: ModelKind, j: usize) -> f64 {
        match kind {
            ModelKind::MultiLaplace => self.lambda2[j],
            ModelKind::Horseshoe => self.tau2 * self.lambda2[j],
            ModelKind::Ard => 1.0 / self.lambda2[j],
            ModelKind::SpikeNormal | ModelKind::SpikeLaplace => self.tau2_slab[j],
        }
    }
}

fn non_finite(parameter: &str) -> Error {
    Error::NonFinite {
        parameter: parameter.to_string(),
        iteration: 0,
    }
}

/// Draws every `β_d` from its Gaussian full conditional. For spike models
/// only the active groups are drawn; the rest are pinned at exactly 0.
pub fn update_beta(
    state: &mut LatentState,
    data: &ModelData,
    spec: &ModelSpec,
    rng: &mut SimRng,
) -> Result<()> {
    let active: Vec<usize> = if spec.kind.is_spike() {
        (0..data.p).filter(|&j| state.gamma[j]).collect()
    } else {
        (0..data.p).collect()
    };
    let prior_prec: Vec<f64> = active
        .iter()
        .map(|&j| 1.0 / state.prior_variance(spec.kind, j))
        .collect();
    let inv_s2 = 1.0 / state.sigma2;
    let k = active.len();
    for d in 0..data.d {
        for j in 0..data.p {
            state.beta[(d, j)] = 0.0;
        }
        if k == 0 {
            continue;
        }
        let g = &data.gram[d];
        let q = DMatrix::from_fn(k, k, |a, b| {
            let v = g[(active[a], active[b])] * inv_s2;
            if a == b {
                v + prior_prec[a]
            } else {
                v
            }
        });
        let rhs = DVector::from_fn(k, |a, _| data.xty[d][active[a]] * inv_s2);
        let chol = CholeskyFactor::new(&q)?;
        let draw = sample_mvn_with_factor(&rhs, &chol, rng);
        for (a, &j) in active.iter().enumerate() {
            state.beta[(d, j)] = draw[a];
        }
    }
    Ok(())
}

/// Draws `ρ` given the Multi-Laplace local variances (`p = lambda2.len()`).
pub fn draw_rho(lambda2: &[f64], d: usize, spec: &ModelSpec, rng: &mut SimRng) -> Result<f64> {
    let r = spec.h("r");
    let sr = spec.rho_rate();
    let k = (d as f64 + 1.0) / 2.0;
    let p = lambda2.len() as f64;
    let total: f64 = lambda2.iter().sum();
    match spec.readings.lambda2 {
        GammaArg::Scale => gamma_rate(r + p * k, sr + d as f64 / 2.0 * total, rng),
        GammaArg::Rate => {
            if lambda2.is_empty() {
                gamma_rate(r, sr, rng)
            } else {
                sample_gig(r - p * k, 2.0 * sr, 4.0 / d as f64 * total, rng)
            }
        }
    }
}

/// `λ_j² | rest ~ GIG(1/2, 2c(ρ), S_j)` then `ρ | rest`.
pub fn update_multilaplace_locals(
    state: &mut LatentState,
    data: &ModelData,
    spec: &ModelSpec,
    rng: &mut SimRng,
) -> Result<()> {
    let c = ModelSpec::group_gamma_rate(spec.readings.lambda2, state.rho, data.d);
    let ss = group_ss(&state.beta);
    for j in 0..data.p {
        state.lambda2[j] = sample_gig_half(2.0 * c, ss[j], rng)?;
    }
    state.rho = draw_rho(&state.lambda2, data.d, spec, rng)?;
    Ok(())
}

/// Half-Cauchy scales through inverse-gamma auxiliaries.
pub fn update_horseshoe_locals(state: &mut LatentState, data: &ModelData, rng: &mut SimRng) -> Result<()> {
    let d = data.d as f64;
    let ss = group_ss(&state.beta);
    for j in 0..data.p {
        state.lambda2[j] = inv_gamma((d + 1.0) / 2.0, 1.0 / state.nu[j] + ss[j] / (2.0 * state.tau2), rng)?;
        state.nu[j] = inv_gamma(1.0, 1.0 + 1.0 / state.lambda2[j], rng)?;
    }
    let p = data.p as f64;
    let rate = 1.0 / state.xi + (0..data.p).map(|j| ss[j] / (2.0 * state.lambda2[j])).sum::<f64>();
    state.tau2 = inv_gamma((p * d + 1.0) / 2.0, rate, rng)?;
    state.xi = inv_gamma(1.0, 1.0 + 1.0 / state.tau2, rng)?;
    Ok(())
}

/// `λ_j² | rest ~ Gamma(D/2, rate max(S_j, 1e-10)/2)`.
pub fn update_ard_locals(state: &mut LatentState, data: &ModelData, rng: &mut SimRng) -> Result<()> {
    let ss = group_ss(&state.beta);
    for j in 0..data.p {
        state.lambda2[j] = gamma_rate(data.d as f64 / 2.0, ss[j].max(1e-10) / 2.0, rng)?;
    }
    Ok(())
}

/// Log Bayes factor (slab vs spike) of group `j` with the group's
/// coefficients integrated out, plus the per-dataset conditional means and
/// precisions of the slab.
fn group_log_bf(
    state: &LatentState,
    data: &ModelData,
    j: usize,
    slab_var: f64,
    means: &mut [f64],
    precs: &mut [f64],
) -> f64 {
    let inv_s2 = 1.0 / state.sigma2;
    let mut log_bf = 0.0;
    for d in 0..data.d {
        let g = &data.gram[d];
        let mut c = data.xty[d][j];
        for k in 0..data.p {
            if k != j {
                c -= g[(j, k)] * state.beta[(d, k)];
            }
        }
        let q = g[(j, j)] * inv_s2 + 1.0 / slab_var;
        let m = c * inv_s2 / q;
        means[d] = m;
        precs[d] = q;
        log_bf += -0.5 * (slab_var * q).ln() + 0.5 * q * m * m;
    }
    log_bf
}

/// Collapsed update of the inclusion indicators, group by group. Each
/// active group's coefficients are redrawn from their conditional; inactive
/// groups are set to 0. Spike-Laplace then updates `π_j`.
pub fn update_spike_indicators(
    state: &mut LatentState,
    data: &ModelData,
    spec: &ModelSpec,
    rng: &mut SimRng,
) -> Result<()> {
    let mut means = vec![0.0; data.d];
    let mut precs = vec![0.0; data.d];
    for j in 0..data.p {
        let (slab_var, prior_incl) = match spec.kind {
            ModelKind::SpikeNormal => (state.tau2_slab[j], spec.h("p0")),
            ModelKind::SpikeLaplace => (state.tau2_slab[j], state.pi[j]),
            _ => return Err(Error::Incompatible("indicator update needs a spike model".into())),
        };
        let log_bf = group_log_bf(state, data, j, slab_var, &mut means, &mut precs);
        let logit = log_bf + prior_incl.ln() - (1.0 - prior_incl).ln();
        let prob = if logit >= 0.0 {
            1.0 / (1.0 + (-logit).exp())
        } else {
            let e = logit.exp();
            e / (1.0 + e)
        };
        if !prob.is_finite() {
            return Err(non_finite("gamma"));
        }
        let on = rng.random::<f64>() < prob;
        state.gamma[j] = on;
        for d in 0..data.d {
            state.beta[(d, j)] = if on {
                means[d] + standard_normal(rng) / precs[d].sqrt()
            } else {
                0.0
            };
        }
    }
    if spec.kind == ModelKind::SpikeLaplace {
        let (a, b) = (spec.h("a"), spec.h("b"));
        for j in 0..data.p {
            let g = if state.gamma[j] { 1.0 } else { 0.0 };
            state.pi[j] = beta_draw(a + g, b + 1.0 - g, rng)?.clamp(1e-300, 1.0 - 1e-16);
        }
    }
    Ok(())
}

/// Spike-Laplace slab scales: GIG(1/2, 2c, S_j) for active groups, the
/// Gamma prior for inactive ones.
pub fn update_slab_scales(
    state: &mut LatentState,
    data: &ModelData,
    spec: &ModelSpec,
    rng: &mut SimRng,
) -> Result<()> {
    let c = ModelSpec::group_gamma_rate(spec.readings.slab, spec.h("lambda"), data.d);
    let shape = (data.d as f64 + 1.0) / 2.0;
    let ss = group_ss(&state.beta);
    for j in 0..data.p {
        state.tau2_slab[j] = if state.gamma[j] {
            sample_gig_half(2.0 * c, ss[j], rng)?
        } else {
            gamma_rate(shape, c, rng)?.max(f64::MIN_POSITIVE)
        };
    }
    Ok(())
}

/// `σ² | rest ~ InvGamma(nD/2, max(RSS, 1e-12)/2)`.
pub fn update_sigma(state: &mut LatentState, data: &ModelData, rng: &mut SimRng) -> Result<()> {
    let rss = data.rss(&state.beta);
    if !rss.is_finite() {
        return Err(non_finite("sigma2"));
    }
    state.sigma2 = inv_gamma((data.n * data.d) as f64 / 2.0, rss.max(1e-12) / 2.0, rng)?;
    Ok(())
}

/// Fixed prior variances (and σ²) under which only β is sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenScales {
    /// Prior variance of `β_{d,j}` for each `j`.
    pub prior_var: Vec<f64>,
    pub sigma2: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitOptions {
    pub frozen: Option<FrozenScales>,
}

/// Gibbs kernel of one model on one stack.
pub struct GibbsKernel<'a> {
    spec: &'a ModelSpec,
    data: &'a ModelData,
    frozen: Option<&'a FrozenScales>,
}

impl<'a> GibbsKernel<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a ModelData, frozen: Option<&'a FrozenScales>) -> Self {
        Self { spec, data, frozen }
    }

    fn frozen_state(&self, f: &FrozenScales) -> LatentState {
        let mut s = LatentState::new(self.data.d, self.data.p);
        s.sigma2 = f.sigma2;
        for (j, &v) in f.prior_var.iter().enumerate() {
            match self.spec.kind {
                ModelKind::MultiLaplace | ModelKind::Horseshoe => s.lambda2[j] = v,
                ModelKind::Ard => s.lambda2[j] = 1.0 / v,
                ModelKind::SpikeNormal | ModelKind::SpikeLaplace => s.tau2_slab[j] = v,
            }
        }
        s
    }
}

impl Kernel for GibbsKernel<'_> {
    type State = LatentState;

    fn init(&self, rng: &mut SimRng) -> Result<LatentState> {
        Ok(match self.frozen {
            Some(f) => self.frozen_state(f),
            None => LatentState::dispersed(self.spec, self.data, rng),
        })
    }

    fn step(&self, s: &mut LatentState, rng: &mut SimRng) -> Result<()> {
        let (spec, data) = (self.spec, self.data);
        if self.frozen.is_some() {
            return update_beta(s, data, spec, rng);
        }
        match spec.kind {
            ModelKind::MultiLaplace => {
                update_beta(s, data, spec, rng)?;
                update_multilaplace_locals(s, data, spec, rng)?;
            }
            ModelKind::Horseshoe => {
                update_beta(s, data, spec, rng)?;
                update_horseshoe_locals(s, data, rng)?;
            }
            ModelKind::Ard => {
                update_beta(s, data, spec, rng)?;
                update_ard_locals(s, data, rng)?;
            }
            ModelKind::SpikeNormal => {
                update_spike_indicators(s, data, spec, rng)?;
                update_beta(s, data, spec, rng)?;
            }
            ModelKind::SpikeLaplace => {
                update_spike_indicators(s, data, spec, rng)?;
                update_beta(s, data, spec, rng)?;
                update_slab_scales(s, data, spec, rng)?;
            }
        }
        update_sigma(s, data, rng)
    }

    fn layout(&self) -> Vec<(String, usize)> {
        let (d, p) = (self.data.d, self.data.p);
        let mut l = vec![("beta".to_string(), d * p), ("sigma2".to_string(), 1)];
        match self.spec.kind {
            ModelKind::MultiLaplace => {
                l.push(("lambda2".into(), p));
                l.push(("rho".into(), 1));
            }
            ModelKind::Horseshoe => {
                l.push(("lambda2".into(), p));
                l.push(("tau2".into(), 1));
            }
            ModelKind::Ard => l.push(("lambda2".into(), p)),
            ModelKind::SpikeNormal => l.push(("gamma".into(), p)),
            ModelKind::SpikeLaplace => {
                l.push(("gamma".into(), p));
                l.push(("pi".into(), p));
                l.push(("tau2_slab".into(), p));
            }
        }
        l
    }

    fn record(&self, s: &LatentState, traces: &mut [Trace]) {
        // beta laid out d-major: index d·p + j
        let (d, p) = (self.data.d, self.data.p);
        let t = &mut traces[0].values;
        for k in 0..d {
            for j in 0..p {
                t.push(s.beta[(k, j)]);
            }
        }
        traces[1].values.push(s.sigma2);
        match self.spec.kind {
            ModelKind::MultiLaplace => {
                traces[2].values.extend_from_slice(&s.lambda2);
                traces[3].values.push(s.rho);
            }
            ModelKind::Horseshoe => {
                traces[2].values.extend_from_slice(&s.lambda2);
                traces[3].values.push(s.tau2);
            }
            ModelKind::Ard => traces[2].values.extend_from_slice(&s.lambda2),
            ModelKind::SpikeNormal => {
                traces[2].values.extend(s.gamma.iter().map(|&g| if g { 1.0 } else { 0.0 }));
            }
            ModelKind::SpikeLaplace => {
                traces[2].values.extend(s.gamma.iter().map(|&g| if g { 1.0 } else { 0.0 }));
                traces[3].values.extend_from_slice(&s.pi);
                traces[4].values.extend_from_slice(&s.tau2_slab);
            }
        }
    }
}

/// Posterior draws of one fit.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub spec: ModelSpec,
    pub d: usize,
    pub p: usize,
    pub column_names: Vec<String>,
    pub state: StandardizationState,
    /// Per chain, on the standardized scale.
    pub chains: Vec<TraceSet>,
    /// Per chain, draw-major `D·p` slopes on the original scale.
    pub beta_original: Vec<Vec<f64>>,
    /// Per chain, draw-major `D` intercepts on the original scale.
    pub intercepts: Vec<Vec<f64>>,
    /// Split R-hat of every `β_{d,j}` (index `d·p + j`); empty if not computed.
    pub rhat: Vec<Rhat>,
    pub rhat_threshold: f64,
    pub converged: bool,
}

impl PosteriorDraws {
    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    /// Retained draws per chain.
    pub fn n_draws(&self) -> usize {
        self.chains[0].get("beta").map_or(0, Trace::len)
    }

    pub fn trace(&self, chain: usize, name: &str) -> Option<&Trace> {
        self.chains[chain].get(name)
    }

    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().map(|r| r.value).fold(1.0, f64::max)
    }
}

/// Fits `spec` to a standardized stack.
pub fn fit(spec: &ModelSpec, stack: &StandardizedStack, cfg: &ChainConfig) -> Result<PosteriorDraws> {
    fit_with(spec, stack, cfg, &FitOptions::default())
}

pub fn fit_with(
    spec: &ModelSpec,
    stack: &StandardizedStack,
    cfg: &ChainConfig,
    options: &FitOptions,
) -> Result<PosteriorDraws> {
    let spec = spec.resolved()?;
    let data = ModelData::new(stack);
    if let Some(f) = &options.frozen {
        if f.prior_var.len() != data.p || f.prior_var.iter().any(|v| !(*v > 0.0)) || !(f.sigma2 > 0.0) {
            return Err(Error::InvalidParameter("frozen scales must be positive, one per column".into()));
        }
    }
    let kernel = GibbsKernel::new(&spec, &data, options.frozen.as_ref());
    let chains = run_chains(&kernel, cfg)?;

    let state = stack.state().clone();
    let (d, p) = (data.d, data.p);
    let mut beta_original = Vec::with_capacity(chains.len());
    let mut intercepts = Vec::with_capacity(chains.len());
    for c in &chains {
        let t = c.get("beta").expect("beta trace");
        let mut bo = vec![0.0; t.values.len()];
        let mut ic = vec![0.0; t.len() * d];
        for i in 0..t.len() {
            destandardize_flat(
                t.draw(i),
                &state,
                &mut bo[i * d * p..(i + 1) * d * p],
                &mut ic[i * d..(i + 1) * d],
            );
        }
        beta_original.push(bo);
        intercepts.push(ic);
    }

    let rhat = if cfg.compute_rhat {
        rhat_per_component(&chains, "beta")?
    } else {
        Vec::new()
    };
    let converged = rhat.iter().all(|r| r.value < cfg.rhat_threshold);
    if !converged {
        log::warn!(
            "{}: max split R-hat {:.3} exceeds {}",
            spec.kind.label(),
            rhat.iter().map(|r| r.value).fold(1.0, f64::max),
            cfg.rhat_threshold
        );
    }
    Ok(PosteriorDraws {
        column_names: stack.column_names().to_vec(),
        spec,
        d,
        p,
        state,
        chains,
        beta_original,
        intercepts,
        rhat,
        rhat_threshold: cfg.rhat_threshold,
        converged,
    })
}
