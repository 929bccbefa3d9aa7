use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinomialCi {
    pub successes: u64,
    pub trials: u64,
    pub alpha: f64,
    pub lower: f64,
    pub upper: f64,
}

/// `P(X <= k)` for `X ~ Binomial(n, p)`, summed in log space.
pub fn binomial_cdf(k: u64, n: u64, p: f64) -> f64 {
    if k >= n {
        return 1.0;
    }
    if p <= 0.0 {
        return 1.0;
    }
    if p >= 1.0 {
        return 0.0;
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let mut log_term = n as f64 * lq;
    let mut terms = Vec::with_capacity(k as usize + 1);
    terms.push(log_term);
    for i in 1..=k {
        log_term += ((n - i + 1) as f64 / i as f64).ln() + lp - lq;
        terms.push(log_term);
    }
    let mx = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = terms.iter().map(|t| (t - mx).exp()).sum();
    (mx + s.ln()).exp().min(1.0)
}

/// Root of a decreasing function of `p` on `[0, 1]`.
fn bisect(f: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact two-sided Clopper-Pearson interval at level `1 - alpha`.
pub fn clopper_pearson(k: u64, n: u64, alpha: f64) -> Result<BinomialCi> {
    if n == 0 || k > n {
        return Err(Error::invalid(format!(
            "need 0 <= k <= n and n >= 1, got k={k}, n={n}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    let half = alpha / 2.0;
    // P(X >= k) rises with p; lower bound solves P(X >= k) = alpha/2
    let lower = if k == 0 {
        0.0
    } else {
        bisect(|p| half - (1.0 - binomial_cdf(k - 1, n, p)))
    };
    let upper = if k == n {
        1.0
    } else {
        bisect(|p| binomial_cdf(k, n, p) - half)
    };
    Ok(BinomialCi {
        successes: k,
        trials: n,
        alpha,
        lower,
        upper,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_successes_closed_form() {
        let ci = clopper_pearson(10, 10, 0.05).unwrap();
        assert_eq!(ci.upper, 1.0);
        assert!((ci.lower - 0.025f64.powf(0.1)).abs() < 1e-10);
    }

    #[test]
    fn no_successes_closed_form() {
        let ci = clopper_pearson(0, 10, 0.05).unwrap();
        assert_eq!(ci.lower, 0.0);
        assert!((ci.upper - (1.0 - 0.025f64.powf(0.1))).abs() < 1e-10);
        assert!((ci.upper - 0.3085).abs() < 1e-4);
    }

    #[test]
    fn invalid_arguments_are_rejected() {
        assert!(clopper_pearson(3, 2, 0.05).is_err());
        assert!(clopper_pearson(0, 0, 0.05).is_err());
        assert!(clopper_pearson(1, 2, 1.0).is_err());
    }

    #[test]
    fn cdf_small_case() {
        // n=2, p=0.5: P(X<=0)=0.25, P(X<=1)=0.75
        assert!((binomial_cdf(0, 2, 0.5) - 0.25).abs() < 1e-15);
        assert!((binomial_cdf(1, 2, 0.5) - 0.75).abs() < 1e-15);
    }
}
