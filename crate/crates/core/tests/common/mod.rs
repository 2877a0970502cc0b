#![allow(dead_code)]

use milasso::data::StandardizedStack;
use milasso::models::{GammaArg, ModelKind, ModelSpec};
use milasso::sampler::ChainConfig;
use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

/// A 10-row single-covariate dataset, centered; `slope` controls the signal.
pub fn tiny_stack(slope: f64) -> StandardizedStack {
    let xs = [-1.5, -1.2, -0.8, -0.4, -0.1, 0.2, 0.5, 0.9, 1.1, 1.3];
    let es = [0.31, -0.52, 0.12, 0.44, -0.27, -0.05, 0.38, -0.61, 0.22, -0.02];
    let xm = xs.iter().sum::<f64>() / 10.0;
    let x = DMatrix::from_fn(10, 1, |i, _| xs[i] - xm);
    let y0: Vec<f64> = (0..10).map(|i| slope * x[(i, 0)] + es[i]).collect();
    let ym = y0.iter().sum::<f64>() / 10.0;
    let y = DVector::from_fn(10, |i, _| y0[i] - ym);
    StandardizedStack::from_standardized(vec![x], vec![y]).unwrap()
}

/// Posterior mean and sd of β for the D=1, p=1 model, by quadrature.
///
/// σ² is integrated analytically (`π(σ²) ∝ 1/σ²` gives `RSS(β)^{-n/2}`);
/// the prior scales are integrated numerically into the marginal prior of β.
pub fn grid_posterior(spec: &ModelSpec, stack: &StandardizedStack) -> (f64, f64) {
    let x = stack.x(0).column(0).into_owned();
    let y = stack.y(0).clone();
    let n = x.len() as f64;
    let sxx = x.norm_squared();
    let sxy = x.dot(&y);
    let syy = y.norm_squared();
    let bhat = sxy / sxx;
    let rss = |b: f64| syy - 2.0 * b * sxy + b * b * sxx;
    let se = (rss(bhat) / (n - 1.0) / sxx).sqrt();
    let log_lik = |b: f64| -n / 2.0 * rss(b).ln();

    let log_prior = marginal_log_prior(spec);
    let lo = bhat - 40.0 * se;
    let hi = bhat + 40.0 * se;
    // include the origin densely for spiky priors
    let k = 40_000;
    let step = (hi - lo) / k as f64;
    let mut z = 0.0;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    let ref_ll = log_lik(bhat);
    for i in 0..=k {
        let b = lo + (i as f64 + 0.5) * step;
        if b.abs() < 1e-9 {
            continue;
        }
        let w = (log_lik(b) - ref_ll + log_prior(b)).exp() * step;
        z += w;
        m1 += w * b;
        m2 += w * b * b;
    }
    if spec.kind == ModelKind::SpikeNormal || spec.kind == ModelKind::SpikeLaplace {
        // point mass at zero: prior weight (1 − q) times the likelihood at 0
        let q = match spec.kind {
            ModelKind::SpikeNormal => spec.h("p0"),
            _ => spec.h("a") / (spec.h("a") + spec.h("b")),
        };
        let w0 = (1.0 - q) * (log_lik(0.0) - ref_ll).exp();
        z = q * z + w0;
        m1 *= q;
        m2 *= q;
    }
    let mean = m1 / z;
    (mean, (m2 / z - mean * mean).sqrt())
}

fn log_normal_pdf(b: f64, v: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * v).ln() - b * b / (2.0 * v)
}

fn log_gamma_pdf(v: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * v.ln() - rate * v
}

/// Marginal log prior density of a single coefficient (D = 1, up to a
/// constant), integrating the variance hierarchy on a log grid.
fn marginal_log_prior(spec: &ModelSpec) -> Box<dyn Fn(f64) -> f64> {
    // log-variance grid
    let grid: Vec<f64> = (0..=3000).map(|i| -30.0 + i as f64 * 0.015).collect();
    let dl = 0.015;
    match spec.kind {
        ModelKind::MultiLaplace => {
            let r = spec.h("r");
            let s = spec.h("s");
            let s_rate = match spec.readings.rho {
                GammaArg::Rate => s,
                GammaArg::Scale => 1.0 / s,
            };
            // D = 1: λ² ~ Gamma(1, ·) with rate c(ρ)
            let c_of = |rho: f64| match spec.readings.lambda2 {
                GammaArg::Scale => rho / 2.0,
                GammaArg::Rate => 2.0 / rho,
            };
            let rho_grid: Vec<f64> = (0..=3000).map(|i| -25.0 + i as f64 * 0.015).collect();
            // w(v) = ∫ Gamma(v; 1, c(ρ)) Gamma(ρ; r, s) dρ, in log ρ
            let weights: Vec<f64> = grid
                .iter()
                .map(|&lv| {
                    let v = lv.exp();
                    let mut acc = 0.0;
                    for &lr in &rho_grid {
                        let rho = lr.exp();
                        acc += (log_gamma_pdf(v, 1.0, c_of(rho)) + log_gamma_pdf(rho, r, s_rate) + lr).exp();
                    }
                    acc * 0.015 * v * dl
                })
                .collect();
            mixture(grid, weights)
        }
        ModelKind::Horseshoe => {
            // u = τλ has density (4/π²) ln u/(u² − 1); v = u²
            let weights: Vec<f64> = grid
                .iter()
                .map(|&lv| {
                    let u = (lv / 2.0).exp();
                    let f = if (u - 1.0).abs() < 1e-8 {
                        2.0 / std::f64::consts::PI.powi(2)
                    } else {
                        4.0 / std::f64::consts::PI.powi(2) * u.ln() / (u * u - 1.0)
                    };
                    f * u * dl / 2.0
                })
                .collect();
            mixture(grid, weights)
        }
        ModelKind::Ard => Box::new(|b: f64| -b.abs().ln()),
        ModelKind::SpikeNormal => {
            let v0 = spec.h("v0");
            Box::new(move |b| log_normal_pdf(b, v0))
        }
        ModelKind::SpikeLaplace => {
            let lam = spec.h("lambda");
            let c = match spec.readings.slab {
                GammaArg::Scale => lam / 2.0,
                GammaArg::Rate => 2.0 / lam,
            };
            let k = (2.0 * c).sqrt();
            Box::new(move |b| (k / 2.0).ln() - k * b.abs())
        }
    }
}

fn mixture(grid: Vec<f64>, weights: Vec<f64>) -> Box<dyn Fn(f64) -> f64> {
    let vs: Vec<f64> = grid.iter().map(|l| l.exp()).collect();
    Box::new(move |b| {
        let mut acc = 0.0;
        for (v, w) in vs.iter().zip(&weights) {
            if *w > 0.0 {
                acc += w * log_normal_pdf(b, *v).exp();
            }
        }
        acc.ln()
    })
}

pub fn pooled_beta(draws: &milasso::models::PosteriorDraws, index: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for c in 0..draws.n_chains() {
        out.extend(draws.trace(c, "beta").unwrap().component(index));
    }
    out
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

pub fn grid_chain_config(seed: u64) -> ChainConfig {
    ChainConfig {
        n_chains: 4,
        burn_in: 1000,
        kept: 10_000,
        thin: 5,
        seed,
        rhat_threshold: 1.1,
        compute_rhat: true,
    }
}

/// Relative errors (mean, sd) of the Gibbs posterior of β against the
/// quadrature oracle on the tiny D=1, p=1 instance.
pub fn grid_errors(kind: ModelKind, seed: u64) -> (f64, f64) {
    // ARD's improper prior needs a strong signal to keep mass off zero
    let slope = if kind == ModelKind::Ard { 3.0 } else { 1.0 };
    let stack = tiny_stack(slope);
    let spec = ModelSpec::new(kind);
    let (gm, gs) = grid_posterior(&spec, &stack);
    let draws = milasso::models::fit(&spec, &stack, &grid_chain_config(seed)).unwrap();
    let (m, s) = mean_sd(&pooled_beta(&draws, 0));
    ((m - gm).abs() / gm.abs(), (s - gs).abs() / gs)
}

/// 50×3 design, D = 2, fixed draws.
pub fn conjugate_stack() -> StandardizedStack {
    use milasso::rng::rng_from_seed;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rng_from_seed(99);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for d in 0..2 {
        let x = DMatrix::from_fn(50, 3, |_, _| StandardNormal.sample(&mut rng));
        let b = DVector::from_vec(vec![1.0 + 0.1 * d as f64, -0.5, 0.0]);
        let e = DVector::from_fn(50, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.8 * z
        });
        ys.push(&x * b + e);
        xs.push(x);
    }
    StandardizedStack::from_standardized(xs, ys).unwrap()
}

/// Worst |mean error| in Monte Carlo standard errors and worst relative
/// variance error of the frozen-scale Gibbs marginals of `kind`, against
/// the closed-form Gaussian posterior (independent inverse).
pub fn conjugate_errors(kind: ModelKind, seed: u64) -> (f64, f64) {
    use milasso::models::{fit_with, FitOptions, FrozenScales};
    let stack = conjugate_stack();
    let prior_var = vec![0.5, 2.0, 1.0];
    let sigma2 = 0.7;
    let opts = FitOptions {
        frozen: Some(FrozenScales {
            prior_var: prior_var.clone(),
            sigma2,
        }),
    };
    let cfg = ChainConfig {
        n_chains: 2,
        burn_in: 10,
        kept: 4000,
        thin: 1,
        seed,
        rhat_threshold: 1.1,
        compute_rhat: false,
    };
    let draws = fit_with(&ModelSpec::new(kind), &stack, &cfg, &opts).unwrap();
    let (mut worst_z, mut worst_v) = (0.0f64, 0.0f64);
    for d in 0..2 {
        let x = stack.x(d);
        let q = x.transpose() * x / sigma2 + DMatrix::from_diagonal(&DVector::from_iterator(3, prior_var.iter().map(|v| 1.0 / v)));
        let cov = q.try_inverse().unwrap();
        let mean = &cov * (x.transpose() * stack.y(d)) / sigma2;
        for j in 0..3 {
            let s = pooled_beta(&draws, d * 3 + j);
            let (m, sd) = mean_sd(&s);
            let se = (cov[(j, j)] / s.len() as f64).sqrt();
            worst_z = worst_z.max((m - mean[j]).abs() / se);
            worst_v = worst_v.max((sd * sd - cov[(j, j)]).abs() / cov[(j, j)]);
        }
    }
    (worst_z, worst_v)
}

/// KS distance between prior-only Horseshoe shrinkage factors
/// `k = 1/(1+λ²)` (τ fixed at 1) and Beta(1/2, 1/2).
pub fn horseshoe_prior_ks(n: usize, seed: u64) -> f64 {
    use milasso::models::{update_horseshoe_locals, LatentState, ModelData};
    use milasso::rng::rng_from_seed;
    use rand_distr::{Distribution, StandardNormal};
    let data = ModelData::from_parts(vec![DMatrix::zeros(2, 1)], vec![DVector::zeros(2)]);
    let mut st = LatentState::new(1, 1);
    let mut rng = rng_from_seed(seed);
    let thin = 10;
    let mut ks: Vec<f64> = Vec::with_capacity(n);
    for it in 0..(n + 100) * thin {
        // β | λ, τ = 1 from its prior, then the local-scale update
        let z: f64 = StandardNormal.sample(&mut rng);
        st.beta[(0, 0)] = z * st.lambda2[0].sqrt();
        st.tau2 = 1.0;
        update_horseshoe_locals(&mut st, &data, &mut rng).unwrap();
        if it >= 100 * thin && it % thin == 0 {
            ks.push(1.0 / (1.0 + st.lambda2[0]));
        }
    }
    ks.sort_by(f64::total_cmp);
    let m = ks.len() as f64;
    let cdf = |k: f64| 2.0 / std::f64::consts::PI * k.sqrt().asin();
    ks.iter()
        .enumerate()
        .map(|(i, &k)| {
            let f = cdf(k);
            (f - i as f64 / m).abs().max(((i + 1) as f64 / m - f).abs())
        })
        .fold(0.0, f64::max)
}
