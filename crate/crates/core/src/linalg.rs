//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower Cholesky factor of a symmetric positive definite matrix.
///
/// Unlike `nalgebra::Cholesky`, a failure reports the index of the first
/// pivot that is not strictly positive.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
}

impl CholeskyFactor {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!(
                "cholesky of non-square {}x{} matrix",
                n,
                a.ncols()
            )));
        }
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j });
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { l })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower_mut(&self, b: &mut DVector<f64>) {
        let n = self.l.nrows();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Solves `Lᵀ x = b` in place.
    pub fn solve_upper_mut(&self, b: &mut DVector<f64>) {
        let n = self.l.nrows();
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_lower_mut(&mut x);
        self.solve_upper_mut(&mut x);
        x
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }
}

/// Least squares solution of `x β ≈ y` (no intercept column added).
///
/// Returns the coefficients and whether a ridge of `1e-8·trace/p` had to be
/// added to make the normal equations solvable.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, bool) {
    let p = x.ncols();
    if p == 0 {
        return (DVector::zeros(0), false);
    }
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    match CholeskyFactor::new(&xtx) {
        Ok(chol) => (chol.solve(&xty), false),
        Err(_) => (ridge_solve(xtx, &xty), true),
    }
}

/// Solves `(A + 1e-8·tr(A)/p·I) b = rhs`.
fn ridge_solve(mut a: DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let p = a.nrows();
    let scale = (a.trace() / p as f64).max(1.0);
    for j in 0..p {
        a[(j, j)] += 1e-8 * scale;
    }
    match CholeskyFactor::new(&a) {
        Ok(chol) => chol.solve(rhs),
        Err(_) => DVector::zeros(p),
    }
}

/// Least squares that always applies the small ridge, for designs known to
/// be rank deficient (more columns than rows).
pub fn ridged_least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    if x.ncols() == 0 {
        return DVector::zeros(0);
    }
    ridge_solve(x.transpose() * x, &(x.transpose() * y))
}

/// Least squares with an unpenalized intercept. Returns `(intercept, slopes, ridged)`.
pub fn least_squares_with_intercept(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> (f64, DVector<f64>, bool) {
    let n = x.nrows();
    let p = x.ncols();
    let y_mean = y.mean();
    if p == 0 {
        return (y_mean, DVector::zeros(0), false);
    }
    let means: Vec<f64> = (0..p).map(|j| x.column(j).mean()).collect();
    let xc = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - means[j]);
    let yc = y.map(|v| v - y_mean);
    let (beta, ridged) = least_squares(&xc, &yc);
    let intercept = y_mean - (0..p).map(|j| means[j] * beta[j]).sum::<f64>();
    (intercept, beta, ridged)
}

/// Sum of `values` with Neumaier compensation.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cholesky_matches_nalgebra() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0]);
        let ours = CholeskyFactor::new(&a).unwrap();
        let theirs = a.clone().cholesky().unwrap();
        assert_relative_eq!(ours.l(), &theirs.l(), epsilon = 1e-12);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_relative_eq!(ours.solve(&b), theirs.solve(&b), epsilon = 1e-12);
        assert_relative_eq!(ours.log_det(), a.determinant().ln(), epsilon = 1e-12);
    }

    #[test]
    fn cholesky_reports_pivot() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 2.0, 1.0]);
        match CholeskyFactor::new(&a) {
            Err(Error::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 2),
            other => panic!("expected pivot error, got {other:?}"),
        }
    }

    #[test]
    fn least_squares_recovers_exact_system() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
        let truth = DVector::from_vec(vec![1.5, -0.5]);
        let y = &x * &truth;
        let (beta, ridged) = least_squares(&x, &y);
        assert!(!ridged);
        assert_relative_eq!(beta, truth, epsilon = 1e-12);
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let vals = vec![1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(vals), 2.0);
    }
}
