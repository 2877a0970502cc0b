//! Special-distribution samplers used by the Gibbs kernels.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::CholeskyFactor;

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v}")))
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Gamma draw with the given shape and *rate*.
pub fn gamma_rate<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    check_positive("gamma shape", shape)?;
    check_positive("gamma rate", rate)?;
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(g.sample(rng))
}

/// Inverse-gamma draw: `1/X` with `X ~ Gamma(shape, rate)`; the result has
/// density `∝ x^{-shape-1} exp(-rate/x)`.
pub fn inv_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    check_positive("inverse-gamma shape", shape)?;
    check_positive("inverse-gamma rate", rate)?;
    let g = Gamma::new(shape, 1.0).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(rate / g.sample(rng))
}

pub fn beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    check_positive("beta a", a)?;
    check_positive("beta b", b)?;
    let d = Beta::new(a, b).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(d.sample(rng))
}

/// Inverse Gaussian draw (Michael, Schucany and Haas transform).
pub fn sample_inverse_gaussian<R: Rng + ?Sized>(mu: f64, lam: f64, rng: &mut R) -> Result<f64> {
    check_positive("inverse-gaussian mu", mu)?;
    check_positive("inverse-gaussian lambda", lam)?;
    let nu = standard_normal(rng);
    let w = mu * nu * nu / (2.0 * lam);
    // smaller root of the quadratic, written to avoid cancellation
    let x = mu / (1.0 + w + (w * (w + 2.0)).sqrt());
    let u: f64 = rng.random();
    let out = if u <= mu / (mu + x) { x } else { mu * mu / x };
    Ok(out.max(f64::MIN_POSITIVE))
}

/// Draw from GIG(1/2, a, b), density `∝ x^{-1/2} exp(-(a x + b/x)/2)`.
///
/// `b = 0` gives the Gamma(1/2, rate a/2) limit.
pub fn sample_gig_half<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    check_positive("gig a", a)?;
    if !(b >= 0.0) || !b.is_finite() {
        return Err(Error::InvalidParameter(format!("gig b must be >= 0, got {b}")));
    }
    if b == 0.0 {
        return Ok(gamma_rate(0.5, a / 2.0, rng)?.max(f64::MIN_POSITIVE));
    }
    let mu = (a / b).sqrt();
    let inv = sample_inverse_gaussian(mu, a, rng)?;
    Ok(1.0 / inv)
}

/// Draw from GIG(p, a, b), density `∝ x^{p-1} exp(-(a x + b/x)/2)`.
///
/// Ratio-of-uniforms on `log x` with the mode shifted to the origin. The
/// log density in that variable is concave, so the bounding rectangle is
/// found by bisection and acceptance stays bounded away from zero.
pub fn sample_gig<R: Rng + ?Sized>(p: f64, a: f64, b: f64, rng: &mut R) -> Result<f64> {
    if !p.is_finite() || !(a >= 0.0) || !(b >= 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidParameter(format!("invalid gig parameters ({p}, {a}, {b})")));
    }
    if b == 0.0 {
        if a > 0.0 && p > 0.0 {
            return Ok(gamma_rate(p, a / 2.0, rng)?.max(f64::MIN_POSITIVE));
        }
        return Err(Error::InvalidParameter(format!("gig with b = 0 needs a > 0 and p > 0, got ({p}, {a})")));
    }
    if a == 0.0 {
        if p < 0.0 {
            return Ok(inv_gamma(-p, b / 2.0, rng)?.max(f64::MIN_POSITIVE));
        }
        return Err(Error::InvalidParameter(format!("gig with a = 0 needs p < 0, got {p}")));
    }

    let h = |y: f64| p * y - 0.5 * (a * y.exp() + b * (-y).exp());
    let dh = |y: f64| p - 0.5 * (a * y.exp() - b * (-y).exp());
    // mode: a e^{2y} - 2p e^y - b = 0
    let mode = ((p + (p * p + a * b).sqrt()) / a).ln();
    let hm = h(mode);

    // extreme v on one side of the mode: root of 1 + t h'(mode + t)/2 = 0
    let bound = |dir: f64| -> f64 {
        let g = |t: f64| 1.0 + dir * t * dh(mode + dir * t) / 2.0;
        let mut hi = 1.0;
        while g(hi) > 0.0 {
            hi *= 2.0;
            if hi > 1e6 {
                break;
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-12 * hi.max(1.0) {
                break;
            }
        }
        let t = 0.5 * (lo + hi);
        t * ((h(mode + dir * t) - hm) / 2.0).exp()
    };
    let v_plus = bound(1.0);
    let v_minus = -bound(-1.0);

    loop {
        let u: f64 = rng.random();
        if u == 0.0 {
            continue;
        }
        let v = v_minus + (v_plus - v_minus) * rng.random::<f64>();
        let y = mode + v / u;
        if 2.0 * u.ln() <= h(y) - hm {
            return Ok(y.exp().max(f64::MIN_POSITIVE));
        }
    }
}

/// Draw from `N(Q⁻¹ r, Q⁻¹)` given the precision `Q` and `r`.
pub fn sample_mvn_precision<R: Rng + ?Sized>(
    mean_rhs: &DVector<f64>,
    precision: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if precision.nrows() != mean_rhs.len() {
        return Err(Error::Dimension(format!(
            "precision is {}x{}, rhs has length {}",
            precision.nrows(),
            precision.ncols(),
            mean_rhs.len()
        )));
    }
    let chol = CholeskyFactor::new(precision)?;
    Ok(sample_mvn_with_factor(mean_rhs, &chol, rng))
}

/// As [`sample_mvn_precision`] with a precomputed factor `Q = L Lᵀ`.
pub fn sample_mvn_with_factor<R: Rng + ?Sized>(
    mean_rhs: &DVector<f64>,
    chol: &CholeskyFactor,
    rng: &mut R,
) -> DVector<f64> {
    // L w = r, then Lᵀ β = w + z gives mean Q⁻¹ r and covariance Q⁻¹.
    let mut w = mean_rhs.clone();
    chol.solve_lower_mut(&mut w);
    for v in w.iter_mut() {
        *v += standard_normal(rng);
    }
    chol.solve_upper_mut(&mut w);
    w
}
