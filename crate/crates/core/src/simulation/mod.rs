//! Synthetic scenarios with known truth: covariate generators, missingness
//! mechanisms, evaluation metrics and the replicated experiment driver.

mod experiment;

pub use experiment::{
    aggregate, run_experiment, run_replication, Arm, ArmOutcome, ArmSummary, ExperimentConfig, ExperimentResult,
    MetricStat, ReplicationLog, ScanMetrics, XChoice,
};

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{default_column_names, ColumnKind, Dataset, IncompleteDataset};
use crate::error::{Error, Result};
use crate::linalg::CholeskyFactor;
use crate::rng::SimRng;
use crate::sampler::dist::standard_normal;
use crate::selection::confusion;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovKind {
    CompoundSymmetry,
    Ar1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Mcar,
    Mar,
}

/// Where and how covariates go missing. Column indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissingSpec {
    pub mechanism: Mechanism,
    pub target_cols: Vec<usize>,
    /// MCAR: each target column loses exactly `ceil(mcar_frac · n)` entries.
    pub mcar_frac: f64,
    /// MAR intercept.
    pub alpha0: f64,
    /// MAR slopes on the driver covariate and on `y`.
    pub slopes: (f64, f64),
    /// The MAR driver of target column `j` is column `j - driver_offset`.
    pub driver_offset: usize,
}

impl Default for MissingSpec {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::Mcar,
            target_cols: (11..=20).collect(),
            mcar_frac: 0.05,
            alpha0: -4.0,
            slopes: (0.5, 0.5),
            driver_offset: 10,
        }
    }
}

impl MissingSpec {
    pub fn none() -> Self {
        Self {
            target_cols: Vec::new(),
            ..Self::default()
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        for &j in &self.target_cols {
            if j < 1 || j > p {
                return Err(Error::InvalidParameter(format!("missing.target_cols: column {j} outside 1..={p}")));
            }
            if self.mechanism == Mechanism::Mar {
                if j <= self.driver_offset {
                    return Err(Error::InvalidParameter(format!("missing.target_cols: column {j} has no driver column")));
                }
                if self.target_cols.contains(&(j - self.driver_offset)) {
                    return Err(Error::InvalidParameter(format!(
                        "missing.target_cols: driver column {} of column {j} is itself a target",
                        j - self.driver_offset
                    )));
                }
            }
        }
        if !(0.0..1.0).contains(&self.mcar_frac) {
            return Err(Error::InvalidParameter(format!("missing.mcar_frac must be in [0,1), got {}", self.mcar_frac)));
        }
        if !self.alpha0.is_finite() || !self.slopes.0.is_finite() || !self.slopes.1.is_finite() {
            return Err(Error::InvalidParameter("missing.alpha0 and missing.slopes must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub n: usize,
    pub p: usize,
    pub corr: f64,
    pub cov_kind: CovKind,
    pub beta_true: Vec<f64>,
    /// Dichotomize covariates at zero before forming `y`.
    pub binary: bool,
    /// With binary covariates, weight the MSE by the covariance of the
    /// dichotomized covariates instead of the latent Gaussian one.
    pub binary_mse_cov: bool,
    pub missing: MissingSpec,
    pub replications: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::scenario_a(0.1, Mechanism::Mcar)
    }
}

/// Unit coefficients at the given 1-based positions.
pub fn unit_beta(p: usize, active: &[usize]) -> Vec<f64> {
    let mut b = vec![0.0; p];
    for &j in active {
        b[j - 1] = 1.0;
    }
    b
}

fn missing_for(mechanism: Mechanism, p: usize, high: bool) -> MissingSpec {
    let (targets, frac): (Vec<usize>, f64) = if p >= 40 {
        ((11..=20).chain(31..=40).collect(), 0.025)
    } else {
        ((11..=20).collect(), 0.05)
    };
    MissingSpec {
        mechanism,
        target_cols: targets,
        mcar_frac: frac,
        alpha0: if high { -1.8 } else { -4.0 },
        ..MissingSpec::default()
    }
}

impl ScenarioConfig {
    /// Compound symmetry, n = 100, p = 20.
    pub fn scenario_a(corr: f64, mechanism: Mechanism) -> Self {
        Self {
            n: 100,
            p: 20,
            corr,
            cov_kind: CovKind::CompoundSymmetry,
            beta_true: unit_beta(20, &[1, 2, 5, 11, 12, 15]),
            binary: false,
            binary_mse_cov: false,
            missing: missing_for(mechanism, 20, false),
            replications: 20,
            seed: 1,
        }
    }

    /// AR(1) with correlation 0.5. For `p = 40` the active pattern repeats
    /// in the second half and MCAR drops 2.5% in columns 11..20 and 31..40.
    pub fn scenario_b(n: usize, p: usize, mechanism: Mechanism, high_missing: bool) -> Self {
        let active: Vec<usize> = if p >= 40 {
            vec![1, 2, 5, 11, 12, 15, 21, 22, 25, 31, 32, 35]
        } else {
            vec![1, 2, 5, 11, 12, 15]
        };
        Self {
            n,
            p,
            corr: 0.5,
            cov_kind: CovKind::Ar1,
            beta_true: unit_beta(p, &active),
            binary: false,
            binary_mse_cov: false,
            missing: missing_for(mechanism, p, high_missing),
            replications: 20,
            seed: 1,
        }
    }

    /// Scenario B's generator with covariates dichotomized at zero.
    pub fn scenario_c(mechanism: Mechanism) -> Self {
        Self {
            binary: true,
            ..Self::scenario_b(100, 20, mechanism, false)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 5 || self.p < 1 {
            return Err(Error::InvalidParameter(format!("scenario.n/p too small: n={}, p={}", self.n, self.p)));
        }
        if !(0.0..1.0).contains(&self.corr) {
            return Err(Error::InvalidParameter(format!("scenario.corr must be in [0,1), got {}", self.corr)));
        }
        if self.beta_true.len() != self.p {
            return Err(Error::InvalidParameter(format!(
                "scenario.beta_true has {} entries, p = {}",
                self.beta_true.len(),
                self.p
            )));
        }
        if self.beta_true.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter("scenario.beta_true must be finite".into()));
        }
        if self.replications < 1 {
            return Err(Error::InvalidParameter("scenario.replications must be >= 1".into()));
        }
        self.missing.validate(self.p)
    }

    pub fn truth(&self) -> Vec<bool> {
        self.beta_true.iter().map(|b| *b != 0.0).collect()
    }
}

/// Population covariance of the latent Gaussian covariates.
pub fn population_covariance(kind: CovKind, p: usize, corr: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            1.0
        } else {
            match kind {
                CovKind::CompoundSymmetry => corr,
                CovKind::Ar1 => corr.powi((i as i32 - j as i32).abs()),
            }
        }
    })
}

/// Covariance of `1{Z >= 0}` for `Z ~ N(0, Σ)` with unit variances:
/// `1/4` on the diagonal and `asin(Σ_ij)/(2π)` off it.
pub fn dichotomized_covariance(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(sigma.nrows(), sigma.ncols(), |i, j| {
        if i == j {
            0.25
        } else {
            sigma[(i, j)].clamp(-1.0, 1.0).asin() / (2.0 * std::f64::consts::PI)
        }
    })
}

/// Precomputed generator for one scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    /// Latent Gaussian covariance.
    pub sigma: DMatrix<f64>,
    /// Covariance used in the MSE quadratic form.
    pub sigma_mse: DMatrix<f64>,
    /// Noise variance `βᵀΣβ` on the latent covariance.
    pub sigma2: f64,
    chol: CholeskyFactor,
}

impl Scenario {
    pub fn new(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let sigma = population_covariance(config.cov_kind, config.p, config.corr);
        let chol = CholeskyFactor::new(&sigma)?;
        let beta = DVector::from_column_slice(&config.beta_true);
        let sigma2 = (&sigma * &beta).dot(&beta);
        if !(sigma2 > 0.0) {
            return Err(Error::InvalidParameter("scenario.beta_true gives zero signal variance".into()));
        }
        let sigma_mse = if config.binary && config.binary_mse_cov {
            dichotomized_covariance(&sigma)
        } else {
            sigma.clone()
        };
        Ok(Self {
            config: config.clone(),
            sigma,
            sigma_mse,
            sigma2,
            chol,
        })
    }

    /// Draws `n` rows of covariates (dichotomized when configured).
    pub fn draw_x(&self, n: usize, rng: &mut SimRng) -> DMatrix<f64> {
        let p = self.config.p;
        let l = self.chol.l();
        let mut x = DMatrix::zeros(n, p);
        let mut z = DVector::zeros(p);
        for i in 0..n {
            for k in 0..p {
                z[k] = standard_normal(rng);
            }
            let row = l * &z;
            for k in 0..p {
                x[(i, k)] = if self.config.binary {
                    if row[k] >= 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    row[k]
                };
            }
        }
        x
    }

    pub fn generate(&self, rng: &mut SimRng) -> Result<Dataset> {
        let n = self.config.n;
        let x = self.draw_x(n, rng);
        let beta = DVector::from_column_slice(&self.config.beta_true);
        let sd = self.sigma2.sqrt();
        let mean = &x * &beta;
        let y = DVector::from_fn(n, |i, _| mean[i] + sd * standard_normal(rng));
        let kind = if self.config.binary {
            ColumnKind::Binary
        } else {
            ColumnKind::Continuous
        };
        Dataset::new(x, y, default_column_names(self.config.p), vec![kind; self.config.p])
    }
}

/// Draws one complete dataset for `cfg`.
pub fn generate(cfg: &ScenarioConfig, rng: &mut SimRng) -> Result<(Dataset, Vec<bool>)> {
    let s = Scenario::new(cfg)?;
    Ok((s.generate(rng)?, cfg.truth()))
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

const MASK_RETRIES: usize = 100;
/// A target column must keep at least this many observed rows.
pub const MIN_OBSERVED: usize = 5;

/// Applies the missingness mechanism. A MAR column left with fewer than
/// five observed rows has its mask redrawn (up to 100 times).
pub fn impose_missing(data: &Dataset, spec: &MissingSpec, rng: &mut SimRng) -> Result<IncompleteDataset> {
    let (n, p) = (data.n(), data.p());
    spec.validate(p)?;
    let mut mask = DMatrix::from_element(n, p, true);
    for &col in &spec.target_cols {
        let j = col - 1;
        match spec.mechanism {
            Mechanism::Mcar => {
                let k = (spec.mcar_frac * n as f64 - 1e-9).ceil().max(0.0) as usize;
                if n < k + MIN_OBSERVED {
                    return Err(Error::InvalidParameter(format!(
                        "MCAR would leave column {col} with {} observed rows",
                        n.saturating_sub(k)
                    )));
                }
                for i in sample(rng, n, k) {
                    mask[(i, j)] = false;
                }
            }
            Mechanism::Mar => {
                let drv = j - spec.driver_offset;
                let mut ok = false;
                for _ in 0..MASK_RETRIES {
                    let mut observed = 0;
                    for i in 0..n {
                        let t = spec.alpha0 + spec.slopes.0 * data.x()[(i, drv)] + spec.slopes.1 * data.y()[i];
                        let miss = rng.random::<f64>() < logistic(t);
                        mask[(i, j)] = !miss;
                        observed += usize::from(!miss);
                    }
                    if observed >= MIN_OBSERVED {
                        ok = true;
                        break;
                    }
                }
                if !ok {
                    return Err(Error::InvalidParameter(format!(
                        "MAR mask for column {col} kept fewer than {MIN_OBSERVED} rows after {MASK_RETRIES} draws"
                    )));
                }
            }
        }
    }
    IncompleteDataset::new(
        data.x().clone(),
        data.y().clone(),
        mask,
        data.column_names().to_vec(),
        Some(data.column_kinds().to_vec()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub sen: f64,
    pub spe: f64,
    pub f1: f64,
    pub mse: f64,
    pub selected_count: usize,
}

/// Selection metrics and the Σ-weighted coefficient error `(β̂−β)ᵀΣ(β̂−β)`.
pub fn evaluate(
    selected: &[bool],
    truth: &[bool],
    beta_hat: &DVector<f64>,
    beta_true: &[f64],
    sigma: &DMatrix<f64>,
) -> Result<MetricsRow> {
    let p = truth.len();
    if selected.len() != p || beta_hat.len() != p || beta_true.len() != p || sigma.shape() != (p, p) {
        return Err(Error::Dimension("evaluate: argument lengths disagree".into()));
    }
    let c = confusion(selected, truth);
    let diff = beta_hat - DVector::from_column_slice(beta_true);
    let mse = (sigma * &diff).dot(&diff).max(0.0);
    Ok(MetricsRow {
        sen: c.sen,
        spe: c.spe,
        f1: c.f1,
        mse,
        selected_count: selected.iter().filter(|s| **s).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn sample_cov(x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows() as f64;
        let means = DVector::from_fn(x.ncols(), |j, _| x.column(j).mean());
        let c = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - means[j]);
        c.transpose() * &c / (n - 1.0)
    }

    #[test]
    fn identity_covariance() {
        let mut cfg = ScenarioConfig::scenario_a(0.0, Mechanism::Mcar);
        cfg.n = 10_000;
        let s = Scenario::new(&cfg).unwrap();
        let x = s.draw_x(10_000, &mut rng_from_seed(1));
        let c = sample_cov(&x);
        assert!((c - DMatrix::identity(20, 20)).amax() < 0.05);
    }

    #[test]
    fn noise_variance_closed_form() {
        let s = Scenario::new(&ScenarioConfig::scenario_a(0.1, Mechanism::Mcar)).unwrap();
        assert!((s.sigma2 - 9.0).abs() < 1e-12);
        let b = population_covariance(CovKind::Ar1, 20, 0.5);
        assert_eq!(b[(0, 2)], 0.25);
    }

    #[test]
    fn population_covariances_reproduced() {
        for cfg in [
            ScenarioConfig::scenario_a(0.5, Mechanism::Mcar),
            ScenarioConfig::scenario_b(100, 20, Mechanism::Mcar, false),
            ScenarioConfig::scenario_c(Mechanism::Mcar),
        ] {
            let s = Scenario::new(&cfg).unwrap();
            let mut rng = rng_from_seed(2);
            let x = s.draw_x(100_000, &mut rng);
            let c = sample_cov(&x);
            let target = if cfg.binary { dichotomized_covariance(&s.sigma) } else { s.sigma.clone() };
            assert!((&c - &target).amax() < 0.02, "{:?}", cfg.cov_kind);
            // signal to noise on the latent scale
            if !cfg.binary {
                let beta = DVector::from_column_slice(&cfg.beta_true);
                let signal = &x * &beta;
                let m = signal.mean();
                let v = signal.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (signal.len() as f64 - 1.0);
                let ratio = v / s.sigma2;
                assert!((0.95..=1.05).contains(&ratio), "{ratio}");
            }
        }
    }

    #[test]
    fn mcar_fixed_counts() {
        let cfg = ScenarioConfig::scenario_a(0.1, Mechanism::Mcar);
        let mut rng = rng_from_seed(3);
        let (ds, _) = generate(&cfg, &mut rng).unwrap();
        let inc = impose_missing(&ds, &cfg.missing, &mut rng).unwrap();
        for j in 0..20 {
            let expect = if j >= 10 { 5 } else { 0 };
            assert_eq!(inc.missing_count(j), expect);
        }
        let none = MissingSpec {
            mcar_frac: 0.0,
            ..cfg.missing.clone()
        };
        assert_eq!(impose_missing(&ds, &none, &mut rng).unwrap().total_missing(), 0);
    }

    #[test]
    fn mcar_complete_case_rate() {
        let cfg = ScenarioConfig::scenario_a(0.1, Mechanism::Mcar);
        let mut rng = rng_from_seed(4);
        let mut total = 0.0;
        for _ in 0..200 {
            let (ds, _) = generate(&cfg, &mut rng).unwrap();
            let inc = impose_missing(&ds, &cfg.missing, &mut rng).unwrap();
            total += inc.complete_case_rows().len() as f64 / 100.0;
        }
        let rate = total / 200.0;
        assert!((rate - 0.95f64.powi(10)).abs() < 0.02, "{rate}");
    }

    fn mean_cc_rate(cfg: &ScenarioConfig, reps: usize, seed: u64) -> f64 {
        let mut rng = rng_from_seed(seed);
        let mut total = 0.0;
        for _ in 0..reps {
            let (ds, _) = generate(cfg, &mut rng).unwrap();
            let inc = impose_missing(&ds, &cfg.missing, &mut rng).unwrap();
            total += inc.complete_case_rows().len() as f64 / cfg.n as f64;
        }
        total / reps as f64
    }

    // Frozen from an independent 2000-replication numpy run with raw Y:
    // 0.669 at alpha0 = -4 and 0.335 at alpha0 = -1.8.
    #[test]
    fn mar_complete_case_rate() {
        let low = ScenarioConfig::scenario_a(0.1, Mechanism::Mar);
        let rate = mean_cc_rate(&low, 200, 5);
        assert!((rate - 0.669).abs() < 0.02, "{rate}");
        let high = ScenarioConfig::scenario_b(100, 20, Mechanism::Mar, true);
        let mut high_a = ScenarioConfig::scenario_a(0.1, Mechanism::Mar);
        high_a.missing = high.missing;
        let rate = mean_cc_rate(&high_a, 200, 6);
        assert!((rate - 0.335).abs() < 0.02, "{rate}");
    }

    #[test]
    fn evaluate_counts() {
        let truth = [true, true, false, false];
        let sel = [true, false, true, false];
        let z = DVector::zeros(4);
        let m = evaluate(&sel, &truth, &z, &[0.0; 4], &DMatrix::identity(4, 4)).unwrap();
        assert_eq!((m.sen, m.spe, m.f1), (0.5, 0.5, 0.5));
        let bt = [1.0, 1.0, 0.0, 0.0];
        let perfect = evaluate(&truth, &truth, &DVector::from_column_slice(&bt), &bt, &DMatrix::identity(4, 4)).unwrap();
        assert_eq!((perfect.sen, perfect.spe, perfect.f1, perfect.mse), (1.0, 1.0, 1.0, 0.0));
        let comp = [false, false, true, true];
        let worst = evaluate(&comp, &truth, &z, &bt, &DMatrix::identity(4, 4)).unwrap();
        assert_eq!((worst.sen, worst.f1), (0.0, 0.0));
    }

    #[test]
    fn validation_names_fields() {
        let mut cfg = ScenarioConfig::default();
        cfg.corr = 1.2;
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("corr"), "{e}");
        cfg.corr = 0.1;
        cfg.beta_true.pop();
        assert!(cfg.validate().unwrap_err().to_string().contains("beta_true"));
    }
}
