//! Bayesian optimization of spike-model hyperparameters against modified BIC.

mod gp;

use std::collections::BTreeMap;

use argmin::core::CostFunction;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::data::{standardize, ImputedStack};
use crate::error::{Error, Result};
use crate::models::{fit, ModelKind, ModelSpec};
use crate::rng::{substream_rng, Stream};
use crate::sampler::ChainConfig;
use crate::selection::{bic_coefficients, modified_bic, ols_reference, pool, select_by_median_indicator, BicMode};

pub use gp::{matern52, Gp, GpHyper, NUGGET};

/// Number of quasi-random points evaluated before the GP takes over.
pub const INITIAL_POINTS: usize = 3;

pub type Point = BTreeMap<String, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Param {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: Scale,
}

impl Param {
    fn new(name: &str, lower: f64, upper: f64, scale: Scale) -> Self {
        Param {
            name: name.into(),
            lower,
            upper,
            scale,
        }
    }

    fn from_unit(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self.scale {
            Scale::Linear => self.lower + u * (self.upper - self.lower),
            Scale::Log => (self.lower.ln() + u * (self.upper / self.lower).ln()).exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub params: Vec<Param>,
}

impl SearchSpace {
    pub fn spike_normal() -> Self {
        SearchSpace {
            params: vec![
                Param::new("v0", 0.01, 1000.0, Scale::Log),
                Param::new("p0", 0.01, 0.99, Scale::Linear),
            ],
        }
    }

    pub fn spike_laplace() -> Self {
        SearchSpace {
            params: vec![
                Param::new("lambda", 0.01, 100.0, Scale::Log),
                Param::new("a", 0.1, 1000.0, Scale::Log),
                Param::new("b", 0.1, 1000.0, Scale::Log),
            ],
        }
    }

    /// Default space for a spike model. Shrinkage models are not tuned.
    pub fn for_model(kind: ModelKind) -> Result<Self> {
        match kind {
            ModelKind::SpikeNormal => Ok(Self::spike_normal()),
            ModelKind::SpikeLaplace => Ok(Self::spike_laplace()),
            other => Err(Error::Incompatible(format!(
                "hyperparameter tuning is only defined for spike models, not {}",
                other.label()
            ))),
        }
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(Error::InvalidParameter("search space has no parameters".into()));
        }
        for p in &self.params {
            if !(p.lower < p.upper) || !p.lower.is_finite() || !p.upper.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "search bounds for {}: need lower < upper, got [{}, {}]",
                    p.name, p.lower, p.upper
                )));
            }
            if p.scale == Scale::Log && p.lower <= 0.0 {
                return Err(Error::InvalidParameter(format!("log-scale bound for {} must be positive", p.name)));
            }
        }
        Ok(())
    }

    /// Maps a point of the unit cube to parameter values.
    pub fn point(&self, u: &[f64]) -> Point {
        self.params.iter().zip(u).map(|(p, &v)| (p.name.clone(), p.from_unit(v))).collect()
    }
}

/// Expected improvement below `best` for a Gaussian prediction.
pub fn ei(mean: f64, sd: f64, best: f64) -> f64 {
    let gain = best - mean;
    if !(sd > 0.0) {
        return gain.max(0.0);
    }
    let z = gain / sd;
    let n = Normal::standard();
    (gain * n.cdf(z) + sd * n.pdf(z)).max(0.0)
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const PRIMES: [u64; 10] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29];

/// Halton point `index` (from 1) with a random shift modulo 1.
pub fn halton(index: u64, shift: &[f64]) -> Vec<f64> {
    shift
        .iter()
        .enumerate()
        .map(|(k, s)| (radical_inverse(index, PRIMES[k % PRIMES.len()]) + s).fract())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoRound {
    pub round: usize,
    pub point: Point,
    /// `+inf` when the evaluation failed.
    pub value: f64,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BoTrace {
    pub rounds: Vec<BoRound>,
}

impl BoTrace {
    pub fn best_curve(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.best_so_far).collect()
    }

    /// `round,point,BIC,best_so_far`; points as `name=value` joined by `;`.
    pub fn to_csv(&self) -> Result<String> {
        let mut rows = vec![vec!["round".to_string(), "point".into(), "BIC".into(), "best_so_far".into()]];
        for r in &self.rounds {
            let pt = r.point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
            rows.push(vec![r.round.to_string(), pt, r.value.to_string(), r.best_so_far.to_string()]);
        }
        crate::report::csv_string(&rows)
    }
}

struct NegEi<'a> {
    gp: &'a Gp,
    best: f64,
}

impl CostFunction for NegEi<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, u: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let outside: f64 = u.iter().map(|v| (v - v.clamp(0.0, 1.0)).abs()).sum();
        let c: Vec<f64> = u.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let (m, s) = self.gp.predict(&c);
        Ok(-ei(m, s, self.best) + outside)
    }
}

/// EI maximizer over the unit cube: random screening, then Nelder–Mead
/// from the best few candidates and the incumbent.
fn propose<R: Rng>(gp: &Gp, best: f64, incumbent: &[f64], dim: usize, rng: &mut R) -> Vec<f64> {
    let mut cands: Vec<(f64, Vec<f64>)> = (0..512)
        .map(|_| {
            let u: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            let (m, s) = gp.predict(&u);
            (ei(m, s, best), u)
        })
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut starts: Vec<Vec<f64>> = cands.iter().take(5).map(|c| c.1.clone()).collect();
    starts.push(incumbent.to_vec());

    let mut top = cands[0].clone();
    for s in starts {
        if let Some((u, c)) = gp::nelder_mead(NegEi { gp, best }, &s, 0.05, 200) {
            let u: Vec<f64> = u.iter().map(|v| v.clamp(0.0, 1.0)).collect();
            if -c > top.0 {
                top = (-c, u);
            }
        }
    }
    top.1
}

/// Minimizes `evaluator` over `space` with `budget` evaluations: three
/// shifted-Halton points, then one EI-maximizing point per round. Failed
/// evaluations are recorded as `+inf`.
pub fn optimize<F>(space: &SearchSpace, mut evaluator: F, budget: usize, seed: u64) -> Result<(Point, BoTrace)>
where
    F: FnMut(&Point) -> Result<f64>,
{
    space.validate()?;
    if budget < INITIAL_POINTS {
        return Err(Error::InvalidParameter(format!(
            "optimization budget must be at least {INITIAL_POINTS}, got {budget}"
        )));
    }
    let dim = space.dim();
    let mut rng = substream_rng(seed, Stream::Hyperopt, 0);
    let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
    let mut halton_next = 1u64;

    let mut us: Vec<Vec<f64>> = Vec::with_capacity(budget);
    let mut values: Vec<f64> = Vec::with_capacity(budget);
    let mut trace = BoTrace::default();
    let mut best_idx = 0usize;

    for round in 0..budget {
        let finite: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_finite()).collect();
        let u = if round < INITIAL_POINTS || finite.len() < 2 {
            let h = halton(halton_next, &shift);
            halton_next += 1;
            h
        } else {
            // failed points enter the GP at the worst finite value
            let worst = finite.iter().map(|&i| values[i]).fold(f64::NEG_INFINITY, f64::max);
            let y: Vec<f64> = values.iter().map(|&v| if v.is_finite() { v } else { worst }).collect();
            match Gp::fit(&us, &y) {
                Some(gp) => propose(&gp, values[best_idx], &us[best_idx], dim, &mut rng),
                None => {
                    let h = halton(halton_next, &shift);
                    halton_next += 1;
                    h
                }
            }
        };
        let point = space.point(&u);
        let value = match evaluator(&point) {
            Ok(v) if !v.is_nan() => v,
            Ok(_) => f64::INFINITY,
            Err(e) => {
                log::warn!("evaluation at round {} failed: {e}", round + 1);
                f64::INFINITY
            }
        };
        us.push(u);
        values.push(value);
        if value < values[best_idx] {
            best_idx = round;
        }
        trace.rounds.push(BoRound {
            round: round + 1,
            point,
            value,
            best_so_far: values[best_idx],
        });
    }
    Ok((trace.rounds[best_idx].point.clone(), trace))
}

/// Modified BIC of a spike model fitted with `hyper` and selected by the
/// median-indicator rule. The chain seed is fixed so the score is
/// deterministic.
pub fn spike_bic(base: &ModelSpec, stack: &ImputedStack, chains: &ChainConfig, hyper: &Point) -> Result<f64> {
    if !base.kind.is_spike() {
        return Err(Error::Incompatible(format!("{} has no inclusion indicators", base.kind.label())));
    }
    let mut spec = base.clone();
    for (k, v) in hyper {
        spec.hyperparams.insert(k.clone(), *v);
    }
    let spec = spec.resolved()?;
    let std_stack = standardize(stack)?;
    let draws = fit(&spec, &std_stack, chains)?;
    let pooled = pool(&draws)?;
    let sel = select_by_median_indicator(&pooled)?;
    let coef = bic_coefficients(&pooled, stack, &sel.selected, BicMode::PosteriorMean);
    let ols = ols_reference(stack);
    Ok(modified_bic(stack, &coef, ols.as_ref())?.value)
}
