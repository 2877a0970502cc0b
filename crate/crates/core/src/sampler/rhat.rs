//! Split-chain Gelman-Rubin potential scale reduction.

use crate::error::{Error, Result};

/// R-hat value; `value` is `+inf` when `zero_variance` is set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rhat {
    pub value: f64,
    /// Some whole chain was constant while the chains were not all equal
    /// to the same constant.
    pub zero_variance: bool,
}

/// Computes split R-hat: every chain is cut into two halves (dropping the
/// middle draw of odd-length chains) and the classic
/// `√((W(m−1)/m + B/m)/W)` is evaluated over the halves. Floored at 1.
pub fn rhat(chains: &[&[f64]]) -> Result<Rhat> {
    if chains.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "R-hat needs at least 2 chains, got {}",
            chains.len()
        )));
    }
    let len = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if len < 10 {
        return Err(Error::InvalidParameter(format!(
            "R-hat needs at least 10 draws per chain, got {len}"
        )));
    }
    let constant = |c: &[f64]| c[..len].iter().all(|v| *v == c[0]);
    if chains.iter().any(|c| constant(c)) {
        let first = chains[0][0];
        let all_same = chains.iter().all(|c| constant(c) && c[0] == first);
        return Ok(if all_same {
            Rhat { value: 1.0, zero_variance: false }
        } else {
            Rhat { value: f64::INFINITY, zero_variance: true }
        });
    }
    let half = len / 2;
    let mut pieces: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let c = &c[..len];
        pieces.push(&c[..half]);
        pieces.push(&c[len - half..]);
    }
    Ok(psrf(&pieces))
}

fn psrf(pieces: &[&[f64]]) -> Rhat {
    let m = half_len(pieces) as f64;
    let k = pieces.len() as f64;
    let means: Vec<f64> = pieces.iter().map(|c| c.iter().sum::<f64>() / m).collect();
    let vars: Vec<f64> = pieces
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (m - 1.0))
        .collect();

    let grand = means.iter().sum::<f64>() / k;
    let b = m * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (k - 1.0);
    let w = vars.iter().sum::<f64>() / k;
    if w == 0.0 {
        // every half constant, chains not: halves disagree outright
        return Rhat { value: f64::INFINITY, zero_variance: true };
    }
    let value = ((w * (m - 1.0) / m + b / m) / w).sqrt();
    Rhat { value: value.max(1.0), zero_variance: false }
}

fn half_len(pieces: &[&[f64]]) -> usize {
    pieces[0].len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::sampler::dist::standard_normal;

    #[test]
    fn identical_chains_give_one() {
        let c: Vec<f64> = (0..100).map(|i| (i % 4) as f64).collect();
        let r = rhat(&[&c, &c]).unwrap();
        assert_eq!(r.value, 1.0);
        assert!(!r.zero_variance);
    }

    #[test]
    fn separated_chains_match_hand_formula() {
        let mut rng = rng_from_seed(3);
        let a: Vec<f64> = (0..1000).map(|_| standard_normal(&mut rng)).collect();
        let b: Vec<f64> = (0..1000).map(|_| 10.0 + standard_normal(&mut rng)).collect();
        let r = rhat(&[&a, &b]).unwrap();
        assert!(r.value > 3.0);

        // independent evaluation over the four halves
        let halves = [&a[..500], &a[500..], &b[..500], &b[500..]];
        let m = 500.0;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let mu: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
        let g = mu.iter().sum::<f64>() / 4.0;
        let bb = m / 3.0 * mu.iter().map(|x| (x - g).powi(2)).sum::<f64>();
        let ww = halves
            .iter()
            .zip(&mu)
            .map(|(h, u)| h.iter().map(|x| (x - u).powi(2)).sum::<f64>() / (m - 1.0))
            .sum::<f64>()
            / 4.0;
        let expect = ((ww * (m - 1.0) / m + bb / m) / ww).sqrt();
        assert!((r.value - expect).abs() < 1e-12);
    }

    #[test]
    fn constant_chain_is_sentinel() {
        let a = vec![1.0; 50];
        let b: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let r = rhat(&[&a, &b]).unwrap();
        assert!(r.value.is_infinite() && r.zero_variance);
        let same = rhat(&[&a, &a]).unwrap();
        assert_eq!(same.value, 1.0);
    }

    #[test]
    fn constant_half_is_not_sentinel() {
        let a: Vec<f64> = (0..100).map(|i| if i < 50 { 0.0 } else { (i % 3) as f64 }).collect();
        let b: Vec<f64> = (0..100).map(|i| (i % 3) as f64).collect();
        let r = rhat(&[&a, &b]).unwrap();
        assert!(r.value.is_finite() && !r.zero_variance);
    }

    #[test]
    fn preconditions() {
        let a = vec![0.0; 50];
        assert!(rhat(&[&a]).is_err());
        assert!(rhat(&[&a[..5], &a[..5]]).is_err());
    }
}
