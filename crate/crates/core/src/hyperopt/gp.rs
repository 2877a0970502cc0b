//! Gaussian-process surrogate with a Matérn-5/2 kernel.

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};

use crate::linalg::CholeskyFactor;

/// Observation noise on the standardized objective.
pub const NUGGET: f64 = 1e-6;

const LOG_LS: (f64, f64) = (-4.6, 2.3);
const LOG_VAR: (f64, f64) = (-6.9, 6.9);

pub fn matern52(r: f64) -> f64 {
    let s = 5f64.sqrt() * r;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

#[derive(Debug, Clone)]
pub struct GpHyper {
    pub lengthscales: Vec<f64>,
    pub signal_var: f64,
    pub mean: f64,
}

fn scaled_dist(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(ls)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn gram(x: &[Vec<f64>], h: &GpHyper) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| {
        let k = h.signal_var * matern52(scaled_dist(&x[i], &x[j], &h.lengthscales));
        if i == j {
            k + NUGGET
        } else {
            k
        }
    })
}

/// Negative log marginal likelihood (without the constant).
fn nlml(x: &[Vec<f64>], y: &DVector<f64>, h: &GpHyper) -> f64 {
    let Ok(chol) = CholeskyFactor::new(&gram(x, h)) else {
        return f64::INFINITY;
    };
    let r = y.add_scalar(-h.mean);
    let alpha = chol.solve(&r);
    0.5 * r.dot(&alpha) + 0.5 * chol.log_det()
}

struct Lml<'a> {
    x: &'a [Vec<f64>],
    y: &'a DVector<f64>,
}

impl Lml<'_> {
    fn unpack(&self, t: &[f64]) -> GpHyper {
        let dim = self.x[0].len();
        GpHyper {
            lengthscales: t[..dim].iter().map(|v| v.clamp(LOG_LS.0, LOG_LS.1).exp()).collect(),
            signal_var: t[dim].clamp(LOG_VAR.0, LOG_VAR.1).exp(),
            mean: t[dim + 1],
        }
    }
}

impl CostFunction for Lml<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, t: &Vec<f64>) -> Result<f64, argmin::core::Error> {
        let v = nlml(self.x, self.y, &self.unpack(t));
        Ok(if v.is_finite() { v } else { 1e300 })
    }
}

/// Nelder–Mead from `start` with an axis-aligned initial simplex.
pub(crate) fn nelder_mead<C>(cost: C, start: &[f64], step: f64, iters: u64) -> Option<(Vec<f64>, f64)>
where
    C: CostFunction<Param = Vec<f64>, Output = f64>,
{
    let mut simplex = vec![start.to_vec()];
    for i in 0..start.len() {
        let mut v = start.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-10).ok()?;
    let res = Executor::new(cost, solver)
        .configure(|s| s.max_iters(iters))
        .run()
        .ok()?;
    let st = res.state();
    Some((st.best_param.clone()?, st.best_cost))
}

/// GP conditioned on standardized observations.
#[derive(Debug, Clone)]
pub struct Gp {
    x: Vec<Vec<f64>>,
    hyper: GpHyper,
    chol: CholeskyFactor,
    alpha: DVector<f64>,
    y_mean: f64,
    y_sd: f64,
}

impl Gp {
    /// Fits hyperparameters by maximizing the marginal likelihood. `None`
    /// if no kernel matrix could be factored.
    pub fn fit(x: &[Vec<f64>], y: &[f64]) -> Option<Gp> {
        let n = y.len();
        if n == 0 || x.len() != n {
            return None;
        }
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        let ys = DVector::from_iterator(n, y.iter().map(|v| (v - y_mean) / y_sd));
        let dim = x[0].len();

        let mut best: Option<(Vec<f64>, f64)> = None;
        for ls0 in [0.2f64, 0.5, 1.5] {
            let mut start = vec![ls0.ln(); dim];
            start.push(0.0);
            start.push(0.0);
            let cost = Lml { x, y: &ys };
            if let Some((t, c)) = nelder_mead(cost, &start, 0.5, 400) {
                if best.as_ref().is_none_or(|b| c < b.1) {
                    best = Some((t, c));
                }
            }
        }
        let (t, _) = best?;
        let hyper = Lml { x, y: &ys }.unpack(&t);
        let chol = CholeskyFactor::new(&gram(x, &hyper)).ok()?;
        let alpha = chol.solve(&ys.add_scalar(-hyper.mean));
        Some(Gp {
            x: x.to_vec(),
            hyper,
            chol,
            alpha,
            y_mean,
            y_sd,
        })
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    /// Posterior mean and sd at `u`, on the original objective scale.
    pub fn predict(&self, u: &[f64]) -> (f64, f64) {
        let h = &self.hyper;
        let k = DVector::from_iterator(
            self.x.len(),
            self.x.iter().map(|xi| h.signal_var * matern52(scaled_dist(xi, u, &h.lengthscales))),
        );
        let mean = h.mean + k.dot(&self.alpha);
        let mut v = k;
        self.chol.solve_lower_mut(&mut v);
        let var = (h.signal_var + NUGGET - v.norm_squared()).max(0.0);
        (self.y_mean + self.y_sd * mean, self.y_sd * var.sqrt())
    }
}
