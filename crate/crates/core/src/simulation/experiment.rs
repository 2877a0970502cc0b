//! Replicated experiment: generate, mask, impute, fit every arm, select,
//! evaluate, then aggregate over replications.

use std::collections::HashMap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, impose_missing, MetricsRow, Scenario, ScenarioConfig};
use crate::baseline::{lambda_grid, tune_lasso, tune_milasso};
use crate::data::{standardize, Dataset, ImputedStack, Provenance};
use crate::error::{Error, Result};
use crate::imputation::{impute, MiceConfig};
use crate::models::{fit, ModelKind, ModelSpec};
use crate::rng::{substream, substream_rng, Stream};
use crate::sampler::ChainConfig;
use crate::selection::{pool, refit_pool, scan_intervals, select_by_median_indicator, BicContext, BicMode};

/// One comparison method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Lasso on the complete data before masking.
    Lasso,
    /// Bayesian lasso on the complete data, interval chosen by modified BIC.
    Blasso,
    /// Bayesian lasso on the complete data, interval chosen by distance.
    BlassoCi,
    /// Lasso on complete cases only.
    CcLasso,
    MiLasso,
    MultiLaplace,
    Horseshoe,
    Ard,
    SpikeNormal,
    SpikeLaplace,
}

impl Arm {
    pub const ALL: [Arm; 10] = [
        Arm::Lasso,
        Arm::Blasso,
        Arm::BlassoCi,
        Arm::CcLasso,
        Arm::MiLasso,
        Arm::MultiLaplace,
        Arm::Horseshoe,
        Arm::Ard,
        Arm::SpikeNormal,
        Arm::SpikeLaplace,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Lasso => "LASSO",
            Arm::Blasso => "BLASSO",
            Arm::BlassoCi => "BLASSO(CI)",
            Arm::CcLasso => "CC-LASSO",
            Arm::MiLasso => "MI-LASSO",
            Arm::MultiLaplace => ModelKind::MultiLaplace.label(),
            Arm::Horseshoe => ModelKind::Horseshoe.label(),
            Arm::Ard => ModelKind::Ard.label(),
            Arm::SpikeNormal => ModelKind::SpikeNormal.label(),
            Arm::SpikeLaplace => ModelKind::SpikeLaplace.label(),
        }
    }

    /// The Bayesian model behind the arm.
    pub fn model(self) -> Option<ModelKind> {
        match self {
            Arm::Blasso | Arm::BlassoCi | Arm::MultiLaplace => Some(ModelKind::MultiLaplace),
            Arm::Horseshoe => Some(ModelKind::Horseshoe),
            Arm::Ard => Some(ModelKind::Ard),
            Arm::SpikeNormal => Some(ModelKind::SpikeNormal),
            Arm::SpikeLaplace => Some(ModelKind::SpikeLaplace),
            _ => None,
        }
    }

    /// Arms whose x% is chosen by the distance criterion.
    pub fn is_scan(self) -> bool {
        matches!(self, Arm::BlassoCi | Arm::MultiLaplace | Arm::Horseshoe | Arm::Ard)
    }
}

/// How scan arms pick their interval level when the truth is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XChoice {
    /// Each replication uses its own distance-maximizing x%.
    #[default]
    PerReplication,
    /// One x% for all replications, maximizing the averaged distance.
    Average,
}

fn default_mcmc() -> ChainConfig {
    ChainConfig {
        n_chains: 2,
        burn_in: 1000,
        kept: 2000,
        ..ChainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub arms: Vec<Arm>,
    /// Chain settings for every Bayesian arm; the seed is replaced per
    /// replication and arm.
    pub mcmc: ChainConfig,
    /// Imputation settings; the seed is replaced per replication.
    pub mice: MiceConfig,
    pub lambda_grid_size: usize,
    /// Model specifications overriding the defaults, at most one per kind.
    pub models: Vec<ModelSpec>,
    pub x_choice: XChoice,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            arms: Arm::ALL.to_vec(),
            mcmc: default_mcmc(),
            mice: MiceConfig::default(),
            lambda_grid_size: 50,
            models: Vec::new(),
            x_choice: XChoice::default(),
        }
    }
}

impl ExperimentConfig {
    /// The specification used for a model kind.
    pub fn model_spec(&self, kind: ModelKind) -> ModelSpec {
        self.models.iter().find(|m| m.kind == kind).cloned().unwrap_or_else(|| ModelSpec::new(kind))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.mcmc.validate()?;
        self.mice.validate()?;
        if self.arms.is_empty() {
            return Err(Error::InvalidParameter("arms must not be empty".into()));
        }
        for (i, m) in self.models.iter().enumerate() {
            m.resolved()?;
            if self.models[..i].iter().any(|o| o.kind == m.kind) {
                return Err(Error::InvalidParameter(format!("models: kind {:?} given twice", m.kind)));
            }
        }
        if self.lambda_grid_size < 2 {
            return Err(Error::InvalidParameter("lambda_grid_size must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanMetrics {
    pub x_pct: f64,
    pub metrics: MetricsRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub arm: Arm,
    /// Fixed-rule arms.
    pub metrics: Option<MetricsRow>,
    /// Scan arms: one entry per x% from 5 to 95.
    pub scan: Vec<ScanMetrics>,
    pub converged: Option<bool>,
    pub max_rhat: Option<f64>,
    pub error: Option<String>,
}

impl ArmOutcome {
    fn failed(arm: Arm, e: Error) -> Self {
        Self {
            arm,
            metrics: None,
            scan: Vec::new(),
            converged: None,
            max_rhat: None,
            error: Some(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationLog {
    pub replication: usize,
    pub seed: u64,
    pub complete_cases: usize,
    pub arms: Vec<ArmOutcome>,
    pub error: Option<String>,
}

impl ReplicationLog {
    pub fn outcome(&self, arm: Arm) -> Option<&ArmOutcome> {
        self.arms.iter().find(|o| o.arm == arm && o.error.is_none())
    }
}

struct Context<'a> {
    scenario: &'a Scenario,
    truth: Vec<bool>,
    cfg: &'a ExperimentConfig,
    rep_seed: u64,
}

impl Context<'_> {
    fn metrics(&self, stack: &ImputedStack, selected: &[bool]) -> Result<MetricsRow> {
        let (beta_hat, _) = refit_pool(stack, selected)?;
        self.metrics_with(selected, &beta_hat)
    }

    fn metrics_with(&self, selected: &[bool], beta_hat: &DVector<f64>) -> Result<MetricsRow> {
        evaluate(
            selected,
            &self.truth,
            beta_hat,
            &self.scenario.config.beta_true,
            &self.scenario.sigma_mse,
        )
    }

    fn chain_config(&self, arm: Arm) -> ChainConfig {
        ChainConfig {
            seed: substream(self.rep_seed, Stream::Arm, arm as u64),
            ..self.cfg.mcmc.clone()
        }
    }

    fn lasso_arm(&self, arm: Arm, data: &Dataset) -> Result<ArmOutcome> {
        let fit = tune_lasso(data)?;
        let stack = ImputedStack::new(vec![data.clone()], Provenance::Simulated)?;
        Ok(ArmOutcome {
            arm,
            metrics: Some(self.metrics(&stack, &fit.selected)?),
            scan: Vec::new(),
            converged: None,
            max_rhat: None,
            error: None,
        })
    }

    fn milasso_arm(&self, stack: &ImputedStack) -> Result<ArmOutcome> {
        let st = standardize(stack)?;
        let (fit, _) = tune_milasso(&st, &lambda_grid(&st, self.cfg.lambda_grid_size, 1e-3))?;
        Ok(ArmOutcome {
            arm: Arm::MiLasso,
            metrics: Some(self.metrics(stack, &fit.selected())?),
            scan: Vec::new(),
            converged: Some(fit.converged),
            max_rhat: None,
            error: None,
        })
    }

    fn bayes_arm(&self, arm: Arm, stack: &ImputedStack) -> Result<ArmOutcome> {
        let kind = arm.model().expect("bayesian arm");
        let st = standardize(stack)?;
        let draws = fit(&self.cfg.model_spec(kind), &st, &self.chain_config(arm))?;
        let pooled = pool(&draws)?;
        let mut out = ArmOutcome {
            arm,
            metrics: None,
            scan: Vec::new(),
            converged: Some(draws.converged),
            max_rhat: Some(draws.max_rhat()),
            error: None,
        };
        if arm.is_scan() {
            let table = scan_intervals(&pooled, Some(&self.truth), None)?;
            let mut cache: HashMap<Vec<bool>, MetricsRow> = HashMap::new();
            for row in &table.rows {
                let m = match cache.get(&row.selected) {
                    Some(m) => *m,
                    None => {
                        let m = self.metrics(stack, &row.selected)?;
                        cache.insert(row.selected.clone(), m);
                        m
                    }
                };
                out.scan.push(ScanMetrics {
                    x_pct: row.x_pct,
                    metrics: m,
                });
            }
        } else if kind.is_spike() {
            let sel = select_by_median_indicator(&pooled)?;
            out.metrics = Some(self.metrics(stack, &sel.selected)?);
        } else {
            let ctx = BicContext {
                stack,
                mode: BicMode::PosteriorMean,
            };
            let table = scan_intervals(&pooled, None, Some(&ctx))?;
            out.metrics = Some(self.metrics(stack, &table.best_row().selected)?);
        }
        Ok(out)
    }
}

/// Runs one replication end to end. Failures before the arms are fitted
/// are recorded in `error`; failures inside an arm only mark that arm.
pub fn run_replication(cfg: &ExperimentConfig, scenario: &Scenario, replication: usize) -> ReplicationLog {
    let rep_seed = substream(cfg.scenario.seed, Stream::Replication, replication as u64);
    let mut log = ReplicationLog {
        replication,
        seed: rep_seed,
        complete_cases: 0,
        arms: Vec::new(),
        error: None,
    };
    let ctx = Context {
        scenario,
        truth: cfg.scenario.truth(),
        cfg,
        rep_seed,
    };
    let prepared = (|| -> Result<_> {
        let full = scenario.generate(&mut substream_rng(rep_seed, Stream::Generate, 0))?;
        let inc = impose_missing(&full, &cfg.scenario.missing, &mut substream_rng(rep_seed, Stream::Missingness, 0))?;
        let mice = MiceConfig {
            seed: substream(rep_seed, Stream::Imputation, 0),
            ..cfg.mice.clone()
        };
        let needs_mi = cfg.arms.iter().any(|a| matches!(a, Arm::MiLasso) || (a.model().is_some() && !matches!(a, Arm::Blasso | Arm::BlassoCi)));
        let stack = if needs_mi { Some(impute(&inc, &mice)?) } else { None };
        Ok((full, inc, stack))
    })();
    let (full, inc, stack) = match prepared {
        Ok(v) => v,
        Err(e) => {
            log::warn!("replication {replication} failed: {e}");
            log.error = Some(e.to_string());
            return log;
        }
    };
    log.complete_cases = inc.complete_case_rows().len();
    for &arm in &cfg.arms {
        let res = match arm {
            Arm::Lasso => ctx.lasso_arm(arm, &full),
            Arm::CcLasso => inc.complete_cases().and_then(|cc| ctx.lasso_arm(arm, &cc)),
            Arm::MiLasso => ctx.milasso_arm(stack.as_ref().expect("imputed")),
            Arm::Blasso | Arm::BlassoCi => ImputedStack::new(vec![full.clone()], Provenance::Simulated)
                .and_then(|s| ctx.bayes_arm(arm, &s)),
            _ => ctx.bayes_arm(arm, stack.as_ref().expect("imputed")),
        };
        log.arms.push(res.unwrap_or_else(|e| {
            log::warn!("replication {replication}, arm {}: {e}", arm.label());
            ArmOutcome::failed(arm, e)
        }));
    }
    log::info!("replication {replication} done");
    log
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    /// Sample sd over replications divided by `sqrt(R)`; 0 when `R = 1`.
    pub se: f64,
}

impl MetricStat {
    pub fn from_values(v: &[f64]) -> Self {
        let r = v.len();
        if r == 0 {
            return Self { mean: f64::NAN, se: f64::NAN };
        }
        let mean = v.iter().sum::<f64>() / r as f64;
        let se = if r < 2 {
            0.0
        } else {
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
            (var / r as f64).sqrt()
        };
        Self { mean, se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub label: String,
    /// Interval level used (scan arms only); with per-replication choice
    /// this is the mean of the chosen levels.
    pub x_pct: Option<f64>,
    /// Replications with a result for this arm.
    pub n: usize,
    pub sen: MetricStat,
    pub spe: MetricStat,
    pub f1: MetricStat,
    pub mse: MetricStat,
    /// Metrics at the chosen rule, indexed by replication.
    pub per_replication: Vec<Option<MetricsRow>>,
    /// Chosen x% per replication (scan arms only).
    pub chosen_x: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub summaries: Vec<ArmSummary>,
    pub replications: Vec<ReplicationLog>,
    pub failed: usize,
    /// Set when only one replication ran, so every `se` is a placeholder 0.
    pub single_replication: bool,
}

impl ExperimentResult {
    pub fn summary(&self, arm: Arm) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.arm == arm)
    }
}

fn distance(m: &MetricsRow) -> f64 {
    (m.sen * m.sen + m.spe * m.spe).sqrt()
}

/// Index of the largest score; ties go to the later (larger x%) entry.
fn last_argmax(scores: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, d) in scores.enumerate() {
        if best.is_none_or(|(_, b)| d >= b) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Scan index chosen for each replication.
fn choose_x(outcomes: &[Option<&ArmOutcome>], mode: XChoice) -> Vec<Option<usize>> {
    match mode {
        XChoice::PerReplication => outcomes
            .iter()
            .map(|o| o.and_then(|o| last_argmax(o.scan.iter().map(|r| distance(&r.metrics)))))
            .collect(),
        XChoice::Average => {
            let present: Vec<&ArmOutcome> = outcomes.iter().flatten().copied().collect();
            let k = present.first().map_or(0, |o| o.scan.len());
            let avg = (0..k).map(|i| present.iter().map(|o| distance(&o.scan[i].metrics)).sum::<f64>() / present.len() as f64);
            let best = last_argmax(avg);
            outcomes.iter().map(|o| o.and(best)).collect()
        }
    }
}

pub fn aggregate(cfg: &ExperimentConfig, logs: Vec<ReplicationLog>) -> ExperimentResult {
    let failed = logs.iter().filter(|l| l.error.is_some()).count();
    let mut summaries = Vec::new();
    for &arm in &cfg.arms {
        let outcomes: Vec<Option<&ArmOutcome>> = logs.iter().map(|l| l.outcome(arm)).collect();
        let (per_replication, chosen_x): (Vec<Option<MetricsRow>>, Vec<Option<f64>>) = if arm.is_scan() {
            choose_x(&outcomes, cfg.x_choice)
                .iter()
                .zip(&outcomes)
                .map(|(i, o)| match (i, o) {
                    (Some(i), Some(o)) => (Some(o.scan[*i].metrics), Some(o.scan[*i].x_pct)),
                    _ => (None, None),
                })
                .unzip()
        } else {
            (outcomes.iter().map(|o| o.and_then(|o| o.metrics)).collect(), vec![None; logs.len()])
        };
        let xs: Vec<f64> = chosen_x.iter().flatten().copied().collect();
        let x_pct = (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let rows: Vec<MetricsRow> = per_replication.iter().flatten().copied().collect();
        let stat = |f: fn(&MetricsRow) -> f64| MetricStat::from_values(&rows.iter().map(f).collect::<Vec<_>>());
        summaries.push(ArmSummary {
            arm,
            label: arm.label().to_string(),
            x_pct,
            n: rows.len(),
            sen: stat(|m| m.sen),
            spe: stat(|m| m.spe),
            f1: stat(|m| m.f1),
            mse: stat(|m| m.mse),
            per_replication,
            chosen_x,
        });
    }
    ExperimentResult {
        config: cfg.clone(),
        summaries,
        single_replication: logs.len() == 1,
        replications: logs,
        failed,
    }
}

/// Runs every replication (in parallel, merged by index) and aggregates.
/// Fails if 10% or more of the replications fail.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let scenario = Scenario::new(&cfg.scenario)?;
    let r = cfg.scenario.replications;
    let logs: Vec<ReplicationLog> = (0..r).into_par_iter().map(|i| run_replication(cfg, &scenario, i)).collect();
    let failed = logs.iter().filter(|l| l.error.is_some()).count();
    if failed * 10 >= r && failed > 0 {
        let first = logs.iter().find_map(|l| l.error.clone()).unwrap_or_default();
        return Err(Error::Experiment(format!("{failed} of {r} replications failed; first: {first}")));
    }
    Ok(aggregate(cfg, logs))
}
