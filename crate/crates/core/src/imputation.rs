//! Multiple imputation by chained equations.
//!
//! Continuous columns are imputed by predictive mean matching after a
//! Bayesian linear-regression draw; binary columns by Bernoulli draws from a
//! logistic model whose coefficients are perturbed around the posterior mode.
//! Every incomplete column is regressed on all other covariates plus `y`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, Dataset, ImputedStack, IncompleteDataset, Provenance};
use crate::error::{Error, Result};
use crate::linalg::CholeskyFactor;
use crate::rng::{substream_rng, SimRng, Stream};
use crate::sampler::dist::{gamma_rate, standard_normal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiceConfig {
    /// Number of completed datasets.
    pub d: usize,
    /// Chained-equation sweeps per imputation.
    pub cycles: usize,
    pub pmm_donors: usize,
    pub seed: u64,
}

impl Default for MiceConfig {
    fn default() -> Self {
        Self {
            d: 5,
            cycles: 10,
            pmm_donors: 5,
            seed: 1,
        }
    }
}

impl MiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 || self.cycles < 1 || self.pmm_donors < 1 {
            return Err(Error::InvalidParameter("d, cycles and pmm_donors must all be >= 1".into()));
        }
        Ok(())
    }
}

/// Diagnostics gathered while imputing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiceReport {
    /// Logistic fits that needed the ridge fallback, summed over imputations.
    pub separation_fallbacks: usize,
    /// Linear fits that needed a ridge to be solvable.
    pub singular_fallbacks: usize,
}

pub fn impute(data: &IncompleteDataset, cfg: &MiceConfig) -> Result<ImputedStack> {
    impute_with_report(data, cfg).map(|(s, _)| s)
}

pub fn impute_with_report(data: &IncompleteDataset, cfg: &MiceConfig) -> Result<(ImputedStack, MiceReport)> {
    cfg.validate()?;
    let (n, p) = (data.n(), data.p());
    for j in 0..p {
        let miss = data.missing_count(j);
        if miss > 0 && n - miss < 5 {
            return Err(Error::InvalidParameter(format!(
                "column `{}` has {} observed rows; imputation needs >= 5",
                data.column_names()[j],
                n - miss
            )));
        }
    }
    let results: Vec<(Dataset, MiceReport)> = (0..cfg.d)
        .into_par_iter()
        .map(|m| {
            let mut rng = substream_rng(cfg.seed, Stream::Imputation, m as u64);
            impute_one(data, cfg, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut report = MiceReport::default();
    let mut sets = Vec::with_capacity(cfg.d);
    for (ds, r) in results {
        report.separation_fallbacks += r.separation_fallbacks;
        report.singular_fallbacks += r.singular_fallbacks;
        sets.push(ds);
    }
    if report.separation_fallbacks > 0 {
        log::warn!("{} logistic imputation fits used the ridge fallback", report.separation_fallbacks);
    }
    Ok((ImputedStack::new(sets, Provenance::Imputed)?, report))
}

fn initial_fill(data: &IncompleteDataset) -> DMatrix<f64> {
    let (n, p) = (data.n(), data.p());
    let mut x = data.x().clone();
    for j in 0..p {
        let obs: Vec<f64> = (0..n).filter(|&i| data.is_observed(i, j)).map(|i| x[(i, j)]).collect();
        let fill = match data.column_kinds()[j] {
            ColumnKind::Continuous => obs.iter().sum::<f64>() / obs.len() as f64,
            ColumnKind::Binary => {
                let ones = obs.iter().filter(|v| **v == 1.0).count();
                // mode, ties to 1
                if 2 * ones >= obs.len() {
                    1.0
                } else {
                    0.0
                }
            }
        };
        for i in 0..n {
            if !data.is_observed(i, j) {
                x[(i, j)] = fill;
            }
        }
    }
    x
}

/// Design `[1, X_{-j}, y]` over all rows.
fn design(x: &DMatrix<f64>, y: &DVector<f64>, j: usize) -> DMatrix<f64> {
    let (n, p) = x.shape();
    DMatrix::from_fn(n, p + 1, |i, c| {
        if c == 0 {
            1.0
        } else if c < p {
            let src = if c - 1 < j { c - 1 } else { c };
            x[(i, src)]
        } else {
            y[i]
        }
    })
}

fn rows(z: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), z.ncols(), |r, c| z[(idx[r], c)])
}

fn factor_with_ridge(a: &DMatrix<f64>, flag: &mut usize) -> CholeskyFactor {
    if let Ok(f) = CholeskyFactor::new(a) {
        return f;
    }
    *flag += 1;
    let k = a.nrows();
    let scale = (a.trace() / k as f64).max(1.0);
    let mut bump = 1e-8;
    loop {
        let mut r = a.clone();
        for i in 0..k {
            r[(i, i)] += bump * scale;
        }
        if let Ok(f) = CholeskyFactor::new(&r) {
            return f;
        }
        bump *= 100.0;
    }
}

/// `L⁻ᵀ z` for the lower factor `L`: a draw with covariance `(LLᵀ)⁻¹`.
fn inv_factor_draw(f: &CholeskyFactor, rng: &mut SimRng) -> DVector<f64> {
    let k = f.l().nrows();
    let mut z = DVector::from_fn(k, |_, _| standard_normal(rng));
    f.solve_upper_mut(&mut z);
    z
}

fn impute_one(data: &IncompleteDataset, cfg: &MiceConfig, rng: &mut SimRng) -> Result<(Dataset, MiceReport)> {
    let (n, p) = (data.n(), data.p());
    let mut x = initial_fill(data);
    let mut report = MiceReport::default();
    let mut order: Vec<usize> = (0..p).filter(|&j| data.missing_count(j) > 0).collect();
    order.sort_by_key(|&j| (data.missing_count(j), j));

    for _ in 0..cfg.cycles {
        for &j in &order {
            let obs: Vec<usize> = (0..n).filter(|&i| data.is_observed(i, j)).collect();
            let mis: Vec<usize> = (0..n).filter(|&i| !data.is_observed(i, j)).collect();
            let z = design(&x, data.y(), j);
            let values = match data.column_kinds()[j] {
                ColumnKind::Continuous => pmm_column(&z, &x, j, &obs, &mis, cfg.pmm_donors, rng, &mut report)?,
                ColumnKind::Binary => logistic_column(&z, &x, j, &obs, &mis, rng, &mut report)?,
            };
            for (&i, v) in mis.iter().zip(values) {
                x[(i, j)] = v;
            }
        }
    }
    let ds = Dataset::new(x, data.y().clone(), data.column_names().to_vec(), data.column_kinds().to_vec())?;
    Ok((ds, report))
}

#[allow(clippy::too_many_arguments)]
fn pmm_column(
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    j: usize,
    obs: &[usize],
    mis: &[usize],
    donors: usize,
    rng: &mut SimRng,
    report: &mut MiceReport,
) -> Result<Vec<f64>> {
    let zo = rows(z, obs);
    let yo = DVector::from_fn(obs.len(), |r, _| x[(obs[r], j)]);
    let ztz = zo.transpose() * &zo;
    let f = factor_with_ridge(&ztz, &mut report.singular_fallbacks);
    let bhat = f.solve(&(zo.transpose() * &yo));
    let resid = &yo - &zo * &bhat;
    let dof = obs.len().saturating_sub(zo.ncols()).max(1) as f64;
    let chi2 = gamma_rate(dof / 2.0, 0.5, rng)?;
    let sigma = (resid.norm_squared().max(1e-300) / chi2).sqrt();
    let bstar = &bhat + inv_factor_draw(&f, rng) * sigma;

    // donors scored with the point estimate, targets with the draw
    let donor_pred: Vec<f64> = (0..obs.len()).map(|r| zo.row(r).dot(&bhat.transpose())).collect();
    let k = donors.min(obs.len());
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(obs.len());
    let mut out = Vec::with_capacity(mis.len());
    for &i in mis {
        let target = z.row(i).dot(&bstar.transpose());
        scratch.clear();
        scratch.extend(donor_pred.iter().enumerate().map(|(r, v)| ((v - target).abs(), r)));
        scratch.sort_by(|a, b| a.0.total_cmp(&b.0).then(obs[a.1].cmp(&obs[b.1])));
        let pick = scratch[rng.random_range(0..k)].1;
        out.push(x[(obs[pick], j)]);
    }
    Ok(out)
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// IRLS for logistic regression with an optional ridge on the non-intercept
/// coefficients. Returns the mode, the factor of the observed information,
/// and whether the fit looks separated.
fn irls(zo: &DMatrix<f64>, yo: &DVector<f64>, ridge: f64, flag: &mut usize) -> (DVector<f64>, CholeskyFactor, bool) {
    let k = zo.ncols();
    let mut b = DVector::zeros(k);
    let mut converged = false;
    let mut info_f = None;
    for _ in 0..100 {
        let eta = zo * &b;
        let pr = eta.map(sigmoid);
        let w = pr.map(|v| (v * (1.0 - v)).max(1e-10));
        let mut info = DMatrix::zeros(k, k);
        for r in 0..zo.nrows() {
            let row = zo.row(r);
            info += row.transpose() * row * w[r];
        }
        let mut grad = zo.transpose() * (yo - &pr);
        for c in 1..k {
            info[(c, c)] += ridge;
            grad[c] -= ridge * b[c];
        }
        let f = factor_with_ridge(&info, flag);
        let step = f.solve(&grad);
        b += &step;
        info_f = Some(f);
        if step.amax() < 1e-8 {
            converged = true;
            break;
        }
        if b.amax() > 50.0 {
            break;
        }
    }
    let eta_max = (zo * &b).amax();
    let separated = !converged || eta_max > 30.0;
    (b, info_f.expect("at least one iteration"), separated)
}

fn logistic_column(
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    j: usize,
    obs: &[usize],
    mis: &[usize],
    rng: &mut SimRng,
    report: &mut MiceReport,
) -> Result<Vec<f64>> {
    let zo = rows(z, obs);
    let yo = DVector::from_fn(obs.len(), |r, _| x[(obs[r], j)]);
    let mut singular = 0;
    let (mut b, mut f, separated) = irls(&zo, &yo, 0.0, &mut singular);
    if separated {
        report.separation_fallbacks += 1;
        let (b2, f2, _) = irls(&zo, &yo, 1e-4, &mut singular);
        b = b2;
        f = f2;
    }
    report.singular_fallbacks += singular;
    let bstar = &b + inv_factor_draw(&f, rng);
    Ok(mis
        .iter()
        .map(|&i| {
            let pr = sigmoid(z.row(i).dot(&bstar.transpose()));
            if rng.random::<f64>() < pr {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_column_names;
    use crate::rng::rng_from_seed;

    fn incomplete(seed: u64, n: usize, binary_col: bool) -> IncompleteDataset {
        let mut rng = rng_from_seed(seed);
        let p = 4;
        let x = DMatrix::from_fn(n, p, |_, _| standard_normal(&mut rng));
        let mut x = x;
        if binary_col {
            for i in 0..n {
                x[(i, 3)] = if x[(i, 3)] + 0.5 * x[(i, 0)] > 0.0 { 1.0 } else { 0.0 };
            }
        }
        let y = DVector::from_fn(n, |i, _| x[(i, 0)] + x[(i, 1)] + standard_normal(&mut rng));
        let mut mask = DMatrix::from_element(n, p, true);
        for i in 0..n {
            for j in 1..p {
                if rng.random::<f64>() < 0.15 {
                    mask[(i, j)] = false;
                }
            }
        }
        IncompleteDataset::new(x, y, mask, default_column_names(p), None).unwrap()
    }

    #[test]
    fn complete_input_is_replicated() {
        let data = incomplete(1, 30, false);
        let full = Dataset::new(
            data.x().map(|v| if v.is_nan() { 0.0 } else { v }),
            data.y().clone(),
            default_column_names(4),
            vec![ColumnKind::Continuous; 4],
        )
        .unwrap();
        let stack = impute(&IncompleteDataset::from_complete(&full), &MiceConfig::default()).unwrap();
        assert_eq!(stack.d(), 5);
        for ds in stack.datasets() {
            assert_eq!(ds, &full);
        }
    }

    #[test]
    fn observed_cells_kept_and_pmm_donors() {
        let data = incomplete(2, 60, true);
        let stack = impute(&data, &MiceConfig::default()).unwrap();
        assert!(stack.agrees_with_observed(&data));
        for j in 1..3 {
            let observed: Vec<f64> = (0..60).filter(|&i| data.is_observed(i, j)).map(|i| data.x()[(i, j)]).collect();
            for ds in stack.datasets() {
                for i in 0..60 {
                    assert!(observed.contains(&ds.x()[(i, j)]));
                }
            }
        }
        for ds in stack.datasets() {
            assert!(ds.x().column(3).iter().all(|v| *v == 0.0 || *v == 1.0));
        }
        // imputations differ somewhere
        let a = stack.dataset(0).x();
        assert!(stack.datasets()[1..].iter().any(|d| d.x() != a));
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let data = incomplete(3, 40, true);
        let cfg = MiceConfig::default();
        let a = impute(&data, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| impute(&data, &cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn separated_binary_column_uses_fallback() {
        let n = 40;
        let mut rng = rng_from_seed(4);
        let x0 = DVector::from_fn(n, |_, _| standard_normal(&mut rng));
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { x0[i] } else if x0[i] > 0.0 { 1.0 } else { 0.0 });
        let y = DVector::from_fn(n, |i, _| x0[i] + 0.1 * standard_normal(&mut rng));
        let mut mask = DMatrix::from_element(n, 2, true);
        for i in (0..n).step_by(7) {
            mask[(i, 1)] = false;
        }
        let data = IncompleteDataset::new(x, y, mask, default_column_names(2), None).unwrap();
        let (stack, report) = impute_with_report(&data, &MiceConfig::default()).unwrap();
        assert!(report.separation_fallbacks > 0);
        assert!(stack.agrees_with_observed(&data));
    }

    #[test]
    fn too_few_observed_rows() {
        let n = 10;
        let x = DMatrix::from_fn(n, 2, |i, j| (i * (j + 1)) as f64);
        let y = DVector::from_fn(n, |i, _| i as f64);
        let mut mask = DMatrix::from_element(n, 2, true);
        for i in 0..6 {
            mask[(i, 1)] = false;
        }
        let data = IncompleteDataset::new(x, y, mask, default_column_names(2), None).unwrap();
        assert!(impute(&data, &MiceConfig::default()).is_err());
    }
}
