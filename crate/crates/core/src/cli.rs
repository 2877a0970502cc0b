//! Command-line driver: `simulate`, `impute`, `fit`, `select`, `tune`, `report`.
//!
//! Each command reads one JSON config (`--config`), writes its artifacts to
//! `--out`, and is a pure function of the config, input files and seed.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{load_stack, read_incomplete_csv, standardize, write_long_csv, write_multi_file, ImputedStack, StackFormat};
use crate::error::{Error, Result};
use crate::hyperopt::{optimize, spike_bic, SearchSpace};
use crate::imputation::{impute_with_report, MiceConfig};
use crate::models::{fit, ModelKind, ModelSpec, PosteriorDraws};
use crate::report::{csv_string, posterior_summary_csv, scan_curve_report, selection_csv, table_report, ErrorBar};
use crate::sampler::{dump_traces, ChainConfig};
use crate::selection::{
    bic_coefficients, modified_bic, ols_reference, pool, scan_intervals, select_by_interval, select_by_median_indicator,
    BicContext, BicMode, PooledPosterior, ScanTable, SelectionResult,
};
use crate::simulation::{aggregate, run_experiment, Arm, ExperimentConfig, ReplicationLog, ScenarioConfig, XChoice};

pub const CONFIG_VERSION: u32 = 1;

/// Exit code for a fit that did not converge under `--strict`.
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "milasso", version, about = "Variable selection on multiply-imputed data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Exit nonzero when a fit fails the R-hat check.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Run a simulation experiment.
    Simulate,
    /// Multiply impute an incomplete CSV.
    Impute,
    /// Fit a Bayesian model to an imputed stack.
    Fit,
    /// Fit and apply a selection rule.
    Select,
    /// Tune a spike model by Bayesian optimization.
    Tune,
    /// Rebuild tables and scan curves from an experiment log.
    Report,
}

fn one() -> u32 {
    CONFIG_VERSION
}

fn long_csv() -> StackFormat {
    StackFormat::LongCsv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub version: u32,
    pub scenario: ScenarioConfig,
    pub arms: Vec<Arm>,
    pub mcmc: ChainConfig,
    pub mice: MiceConfig,
    pub lambda_grid_size: usize,
    pub models: Vec<ModelSpec>,
    pub x_choice: XChoice,
    pub error_bar: ErrorBar,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            version: CONFIG_VERSION,
            scenario: e.scenario,
            arms: e.arms,
            mcmc: e.mcmc,
            mice: e.mice,
            lambda_grid_size: e.lambda_grid_size,
            models: e.models,
            x_choice: e.x_choice,
            error_bar: ErrorBar::default(),
        }
    }
}

impl SimulateConfig {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            scenario: self.scenario.clone(),
            arms: self.arms.clone(),
            mcmc: self.mcmc.clone(),
            mice: self.mice.clone(),
            lambda_grid_size: self.lambda_grid_size,
            models: self.models.clone(),
            x_choice: self.x_choice,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputeConfig {
    #[serde(default = "one")]
    pub version: u32,
    /// Incomplete CSV with a `y` column; `NA` or empty cells are missing.
    pub input: PathBuf,
    #[serde(default)]
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub mice: MiceConfig,
    #[serde(default = "long_csv")]
    pub output_format: StackFormat,
}

/// Selection rule for `select`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RuleConfig {
    /// Fixed credible-interval level.
    CredibleInterval { x_pct: f64 },
    /// Scan x% over 5..95 and keep the level with the lowest modified BIC.
    BicScan {
        #[serde(default)]
        mode: BicMode,
    },
    MedianIndicator,
}

impl RuleConfig {
    pub fn default_for(kind: ModelKind) -> Self {
        if kind.is_spike() {
            RuleConfig::MedianIndicator
        } else {
            RuleConfig::BicScan { mode: BicMode::default() }
        }
    }

    fn check(&self, kind: ModelKind) -> Result<()> {
        let ok = match self {
            RuleConfig::MedianIndicator => kind.is_spike(),
            RuleConfig::CredibleInterval { x_pct } => {
                if !(*x_pct > 0.0 && *x_pct < 100.0) {
                    return Err(Error::Config(format!("rule.x_pct: must be in (0, 100), got {x_pct}")));
                }
                !kind.is_spike()
            }
            RuleConfig::BicScan { .. } => !kind.is_spike(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Incompatible(format!(
                "rule incompatible with model: {:?} cannot be used with {}",
                self,
                kind.label()
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "one")]
    pub version: u32,
    /// Imputed stack: a long CSV with `.imp`, or the stem of per-dataset files.
    pub input: PathBuf,
    #[serde(default = "long_csv")]
    pub format: StackFormat,
    pub model: ModelSpec,
    #[serde(default)]
    pub mcmc: ChainConfig,
    /// Defaults to a BIC scan for shrinkage models and the median
    /// indicator for spike models.
    #[serde(default)]
    pub rule: Option<RuleConfig>,
    /// Also write raw traces under `traces/`.
    #[serde(default)]
    pub dump_traces: bool,
}

impl FitConfig {
    pub fn rule(&self) -> RuleConfig {
        self.rule.unwrap_or_else(|| RuleConfig::default_for(self.model.kind))
    }
}

fn default_budget() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    #[serde(default = "one")]
    pub version: u32,
    pub input: PathBuf,
    #[serde(default = "long_csv")]
    pub format: StackFormat,
    /// Spike model; its hyperparameters are the starting defaults.
    pub model: ModelSpec,
    #[serde(default)]
    pub mcmc: ChainConfig,
    #[serde(default = "default_budget")]
    pub budget: usize,
    /// Defaults to the model's built-in space.
    #[serde(default)]
    pub space: Option<SearchSpace>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    #[serde(default = "one")]
    pub version: u32,
    /// `experiment.json` written by `simulate`.
    pub input: PathBuf,
    #[serde(default)]
    pub error_bar: ErrorBar,
    /// Row order of the table; defaults to the experiment's arms.
    #[serde(default)]
    pub arms: Option<Vec<Arm>>,
}

/// Everything `report` needs to rebuild the tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentLog {
    pub version: u32,
    pub config: ExperimentConfig,
    pub replications: Vec<ReplicationLog>,
}

/// Parses JSON, naming the offending field path on error.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{path}: {}", e.into_inner()))
    })
}

fn check_version(v: u32) -> Result<()> {
    if v != CONFIG_VERSION {
        return Err(Error::Config(format!("version: unsupported config version {v} (expected {CONFIG_VERSION})")));
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write_text(path, &s)
}

/// Relative input paths are taken relative to the config file.
fn resolve(base: Option<&Path>, p: &Path) -> PathBuf {
    match base.and_then(Path::parent) {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p.to_path_buf(),
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => parse_config(&read_text(p)?),
        None => Ok(T::default()),
    }
}

fn require_config<T: DeserializeOwned>(path: Option<&Path>, cmd: &str) -> Result<T> {
    let p = path.ok_or_else(|| Error::Config(format!("`{cmd}` needs --config")))?;
    parse_config(&read_text(p)?)
}

fn dry_run<T: Serialize>(cfg: &T) -> Result<i32> {
    println!("{}", serde_json::to_string_pretty(cfg)?);
    Ok(0)
}

/// Runs the parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli))
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let cfg_path = cli.config.as_deref();
    match cli.command {
        Command::Simulate => {
            let mut cfg: SimulateConfig = load_config(cfg_path)?;
            if let Some(s) = cli.seed {
                cfg.scenario.seed = s;
            }
            check_version(cfg.version)?;
            cfg.experiment().validate()?;
            if cli.dry_run {
                return dry_run(&cfg);
            }
            cmd_simulate(&cfg, &cli.out, cli.strict)
        }
        Command::Impute => {
            let mut cfg: ImputeConfig = require_config(cfg_path, "impute")?;
            if let Some(s) = cli.seed {
                cfg.mice.seed = s;
            }
            check_version(cfg.version)?;
            cfg.mice.validate()?;
            cfg.input = resolve(cfg_path, &cfg.input);
            cfg.mask = cfg.mask.map(|m| resolve(cfg_path, &m));
            if cli.dry_run {
                return dry_run(&cfg);
            }
            cmd_impute(&cfg, &cli.out)
        }
        Command::Fit | Command::Select => {
            let mut cfg: FitConfig = require_config(cfg_path, "fit")?;
            if let Some(s) = cli.seed {
                cfg.mcmc.seed = s;
            }
            check_version(cfg.version)?;
            cfg.model = cfg.model.resolved()?;
            cfg.mcmc.validate()?;
            let select = cli.command == Command::Select;
            if select {
                cfg.rule().check(cfg.model.kind)?;
            }
            cfg.input = resolve(cfg_path, &cfg.input);
            if cli.dry_run {
                return dry_run(&cfg);
            }
            cmd_fit(&cfg, &cli.out, select, cli.strict)
        }
        Command::Tune => {
            let mut cfg: TuneConfig = require_config(cfg_path, "tune")?;
            if let Some(s) = cli.seed {
                cfg.mcmc.seed = s;
                cfg.seed = s;
            }
            check_version(cfg.version)?;
            cfg.model = cfg.model.resolved()?;
            cfg.mcmc.validate()?;
            let space = match &cfg.space {
                Some(s) => s.clone(),
                None => SearchSpace::for_model(cfg.model.kind)?,
            };
            if !cfg.model.kind.is_spike() {
                return Err(Error::Incompatible(format!(
                    "model.kind: tuning needs a spike model, got {}",
                    cfg.model.kind.label()
                )));
            }
            space.validate()?;
            if cfg.budget < crate::hyperopt::INITIAL_POINTS {
                return Err(Error::Config(format!(
                    "budget: must be at least {}, got {}",
                    crate::hyperopt::INITIAL_POINTS,
                    cfg.budget
                )));
            }
            cfg.space = Some(space);
            cfg.input = resolve(cfg_path, &cfg.input);
            if cli.dry_run {
                return dry_run(&cfg);
            }
            cmd_tune(&cfg, &cli.out, cli.strict)
        }
        Command::Report => {
            let mut cfg: ReportConfig = require_config(cfg_path, "report")?;
            check_version(cfg.version)?;
            cfg.input = resolve(cfg_path, &cfg.input);
            if cli.dry_run {
                return dry_run(&cfg);
            }
            cmd_report(&cfg, &cli.out)
        }
    }
}

fn make_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn arm_file(arm: Arm) -> String {
    serde_json::to_value(arm)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

fn write_experiment_reports(
    cfg: &ExperimentConfig,
    logs: Vec<ReplicationLog>,
    arms: &[Arm],
    bar: ErrorBar,
    out: &Path,
) -> Result<bool> {
    let result = aggregate(cfg, logs);
    let table = table_report(&result, arms, bar)?;
    write_text(&out.join("results.csv"), &table.formatted)?;
    write_text(&out.join("results_raw.csv"), &table.raw)?;
    for curve in scan_curve_report(&result) {
        write_text(&out.join(format!("scan_{}.csv", arm_file(curve.arm))), &curve.to_csv()?)?;
    }
    let all_converged = result
        .replications
        .iter()
        .flat_map(|l| &l.arms)
        .all(|a| a.converged != Some(false));
    Ok(all_converged)
}

/// Runs an experiment; writes `results.csv`, `results_raw.csv`,
/// `scan_<arm>.csv` and `experiment.json`.
pub fn cmd_simulate(cfg: &SimulateConfig, out: &Path, strict: bool) -> Result<i32> {
    let exp = cfg.experiment();
    let result = run_experiment(&exp)?;
    make_out(out)?;
    let log = ExperimentLog {
        version: CONFIG_VERSION,
        config: exp.clone(),
        replications: result.replications,
    };
    write_json(&out.join("experiment.json"), &log)?;
    let converged = write_experiment_reports(&exp, log.replications, &exp.arms, cfg.error_bar, out)?;
    Ok(strict_code(strict, converged))
}

/// Rebuilds the experiment reports from `experiment.json`.
pub fn cmd_report(cfg: &ReportConfig, out: &Path) -> Result<i32> {
    let log: ExperimentLog = parse_config(&read_text(&cfg.input)?)?;
    check_version(log.version)?;
    make_out(out)?;
    let arms = cfg.arms.clone().unwrap_or_else(|| log.config.arms.clone());
    write_experiment_reports(&log.config, log.replications, &arms, cfg.error_bar, out)?;
    Ok(0)
}

/// Imputes `input` into `stack.csv` (long format) or `stack_1.csv … stack_D.csv`.
pub fn cmd_impute(cfg: &ImputeConfig, out: &Path) -> Result<i32> {
    let data = read_incomplete_csv(&cfg.input, cfg.mask.as_deref())?;
    let (stack, report) = impute_with_report(&data, &cfg.mice)?;
    make_out(out)?;
    match cfg.output_format {
        StackFormat::LongCsv => write_long_csv(&stack, &out.join("stack.csv"))?,
        StackFormat::MultiFile => write_multi_file(&stack, &out.join("stack"))?,
    }
    write_json(&out.join("imputation.json"), &report)?;
    Ok(0)
}

fn strict_code(strict: bool, converged: bool) -> i32 {
    if strict && !converged {
        EXIT_NOT_CONVERGED
    } else {
        0
    }
}

fn rhat_csv(draws: &PosteriorDraws) -> Result<String> {
    let mut rows = vec![["parameter", "rhat", "zero_variance"].map(String::from).to_vec()];
    for (k, r) in draws.rhat.iter().enumerate() {
        let (d, j) = (k / draws.p, k % draws.p);
        rows.push(vec![
            format!("beta[{},{}]", d + 1, draws.column_names[j]),
            r.value.to_string(),
            r.zero_variance.to_string(),
        ]);
    }
    csv_string(&rows)
}

#[derive(Debug, Serialize)]
struct FitSummary<'a> {
    model: &'a str,
    hyperparams: &'a std::collections::BTreeMap<String, f64>,
    n_chains: usize,
    n_draws: usize,
    d: usize,
    p: usize,
    converged: bool,
    max_rhat: Option<f64>,
}

fn write_fit(draws: &PosteriorDraws, pooled: &PooledPosterior, out: &Path) -> Result<()> {
    write_text(&out.join("posterior_summary.csv"), &posterior_summary_csv(pooled)?)?;
    write_text(&out.join("rhat.csv"), &rhat_csv(draws)?)?;
    let max = draws.max_rhat();
    write_json(
        &out.join("fit.json"),
        &FitSummary {
            model: draws.kind().label(),
            hyperparams: &draws.spec.hyperparams,
            n_chains: draws.n_chains(),
            n_draws: draws.n_draws(),
            d: draws.d,
            p: draws.p,
            converged: draws.converged,
            max_rhat: max.is_finite().then_some(max),
        },
    )
}

fn bic_of(pooled: &PooledPosterior, stack: &ImputedStack, selected: &[bool], mode: BicMode) -> Result<f64> {
    let coef = bic_coefficients(pooled, stack, selected, mode);
    Ok(modified_bic(stack, &coef, ols_reference(stack).as_ref())?.value)
}

fn scan_csv(t: &ScanTable) -> Result<String> {
    let mut rows = vec![["x_pct", "n_selected", "bic", "best"].map(String::from).to_vec()];
    for (i, r) in t.rows.iter().enumerate() {
        rows.push(vec![
            r.x_pct.to_string(),
            r.n_selected.to_string(),
            r.bic.map(|b| b.to_string()).unwrap_or_default(),
            u8::from(i == t.best).to_string(),
        ]);
    }
    csv_string(&rows)
}

/// Applies `rule`; also returns the scan table for BIC scans.
pub fn apply_rule(
    rule: RuleConfig,
    pooled: &PooledPosterior,
    stack: &ImputedStack,
) -> Result<(SelectionResult, Option<ScanTable>)> {
    match rule {
        RuleConfig::CredibleInterval { x_pct } => {
            let mut sel = select_by_interval(pooled, x_pct);
            sel.bic = Some(bic_of(pooled, stack, &sel.selected, BicMode::PosteriorMean)?);
            Ok((sel, None))
        }
        RuleConfig::BicScan { mode } => {
            let table = scan_intervals(pooled, None, Some(&BicContext { stack, mode }))?;
            let best = table.best_row();
            let mut sel = select_by_interval(pooled, best.x_pct);
            sel.bic = best.bic;
            Ok((sel, Some(table)))
        }
        RuleConfig::MedianIndicator => {
            let mut sel = select_by_median_indicator(pooled)?;
            sel.bic = Some(bic_of(pooled, stack, &sel.selected, BicMode::PosteriorMean)?);
            Ok((sel, None))
        }
    }
}

fn write_selection(sel: &SelectionResult, draws: &PosteriorDraws, out: &Path) -> Result<()> {
    let max = draws.max_rhat();
    let report = sel.report(draws.kind().label(), Some(draws.converged), max.is_finite().then_some(max));
    write_json(&out.join("selection.json"), &report)?;
    write_text(&out.join("selection.csv"), &selection_csv(&report)?)
}

/// Fits the model; with `select`, applies the rule as well.
pub fn cmd_fit(cfg: &FitConfig, out: &Path, select: bool, strict: bool) -> Result<i32> {
    let stack = load_stack(&cfg.input, cfg.format)?;
    if stack.d() < 2 {
        log::warn!("imputed stack has D = 1; models degenerate to single-dataset fits");
    }
    let std_stack = standardize(&stack)?;
    let draws = fit(&cfg.model, &std_stack, &cfg.mcmc)?;
    let pooled = pool(&draws)?;
    make_out(out)?;
    write_fit(&draws, &pooled, out)?;
    if cfg.dump_traces {
        dump_traces(&draws.chains, &out.join("traces"), "chain")?;
    }
    if select {
        let (sel, table) = apply_rule(cfg.rule(), &pooled, &stack)?;
        if let Some(t) = table {
            write_text(&out.join("scan.csv"), &scan_csv(&t)?)?;
        }
        write_selection(&sel, &draws, out)?;
    }
    Ok(strict_code(strict, draws.converged))
}

#[derive(Debug, Serialize)]
struct TuneSummary<'a> {
    model: &'a str,
    best: &'a crate::hyperopt::Point,
    bic: f64,
    rounds: usize,
}

/// Tunes a spike model, then refits at the best point.
pub fn cmd_tune(cfg: &TuneConfig, out: &Path, strict: bool) -> Result<i32> {
    let stack = load_stack(&cfg.input, cfg.format)?;
    let space = cfg.space.clone().expect("resolved in dispatch");
    let (best, trace) = optimize(&space, |p| spike_bic(&cfg.model, &stack, &cfg.mcmc, p), cfg.budget, cfg.seed)?;
    make_out(out)?;
    write_text(&out.join("bo_trace.csv"), &trace.to_csv()?)?;

    let mut spec = cfg.model.clone();
    spec.hyperparams.extend(best.clone());
    let std_stack = standardize(&stack)?;
    let draws = fit(&spec, &std_stack, &cfg.mcmc)?;
    let pooled = pool(&draws)?;
    let (sel, _) = apply_rule(RuleConfig::MedianIndicator, &pooled, &stack)?;
    write_fit(&draws, &pooled, out)?;
    write_selection(&sel, &draws, out)?;
    let best_bic = trace.best_curve().last().copied().unwrap_or(f64::INFINITY);
    write_json(
        &out.join("best.json"),
        &TuneSummary {
            model: spec.kind.label(),
            best: &best,
            bic: best_bic,
            rounds: trace.rounds.len(),
        },
    )?;
    Ok(strict_code(strict, draws.converged))
}
