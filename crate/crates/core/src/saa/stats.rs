//! Risk metrics and Wilcoxon tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskMetrics {
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
    pub cvar10: f64,
    pub mean: f64,
    /// Sample standard deviation, 0 for a single sample.
    pub sd: f64,
}

/// Quantile by linear interpolation between order statistics of `sorted`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn mean_sd(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = if samples.len() > 1 {
        (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

pub fn risk_metrics(samples: &[f64]) -> Result<RiskMetrics> {
    if samples.is_empty() {
        return Err(Error::Empty);
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgs("samples must be finite".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = (0.1 * sorted.len() as f64).ceil().max(1.0) as usize;
    let cvar10 = sorted[..k].iter().sum::<f64>() / k as f64;
    let (mean, sd) = mean_sd(&sorted);
    let (mean, sd) = if sorted.iter().all(|&v| v == sorted[0]) { (sorted[0], 0.0) } else { (mean, sd) };
    Ok(RiskMetrics {
        p10: quantile_sorted(&sorted, 0.1),
        p50: quantile_sorted(&sorted, 0.5),
        p90: quantile_sorted(&sorted, 0.9),
        cvar10,
        mean,
        sd,
    })
}

/// Half-width of a two-sided 95% Student-t interval for the mean.
pub fn ci_half_width(samples: &[f64]) -> f64 {
    if samples.len() < 2 {
        return 0.0;
    }
    let (_, sd) = mean_sd(samples);
    let n = samples.len() as f64;
    let t = StudentsT::new(0.0, 1.0, n - 1.0).map(|d| d.inverse_cdf(0.975)).unwrap_or(1.96);
    t * sd / n.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestKind {
    SignedRank,
    RankSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub kind: TestKind,
    /// `W+` for the signed-rank test, the rank sum of `a` for the rank-sum test.
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
    /// Every paired difference was zero.
    pub no_difference: bool,
}

/// Average ranks (1-based) and the tie groups' sizes.
fn ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut r = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (r, ties)
}

fn normal_two_sided(stat: f64, mean: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((stat - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let phi = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - phi.cdf(z))).min(1.0)
}

/// Two-sided p-value from an exact distribution given as counts over doubled statistics.
fn exact_two_sided(counts: &[f64], observed2: usize) -> f64 {
    let total: f64 = counts.iter().sum();
    let le: f64 = counts[..=observed2.min(counts.len() - 1)].iter().sum();
    let ge: f64 = counts[observed2.min(counts.len())..].iter().sum();
    (2.0 * le.min(ge) / total).min(1.0)
}

const EXACT_MAX: usize = 12;

fn signed_rank(a: &[f64], b: &[f64]) -> Comparison {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&v| v != 0.0).collect();
    if d.is_empty() {
        return Comparison { kind: TestKind::SignedRank, statistic: 0.0, p_value: 1.0, exact: true, no_difference: true };
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (r, ties) = ranks(&abs);
    let w_plus: f64 = d.iter().zip(&r).filter(|(v, _)| **v > 0.0).map(|(_, &rk)| rk).sum();
    let n = d.len();
    if n <= EXACT_MAX {
        // Ranks are multiples of 1/2; work on doubled integers.
        let r2: Vec<usize> = r.iter().map(|&x| (2.0 * x).round() as usize).collect();
        let max: usize = r2.iter().sum();
        let mut counts = vec![0.0; max + 1];
        counts[0] = 1.0;
        for &x in &r2 {
            for s in (x..=max).rev() {
                counts[s] += counts[s - x];
            }
        }
        let p = exact_two_sided(&counts, (2.0 * w_plus).round() as usize);
        return Comparison { kind: TestKind::SignedRank, statistic: w_plus, p_value: p, exact: true, no_difference: false };
    }
    let nf = n as f64;
    let tie: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie;
    let p = normal_two_sided(w_plus, nf * (nf + 1.0) / 4.0, var);
    Comparison { kind: TestKind::SignedRank, statistic: w_plus, p_value: p, exact: false, no_difference: false }
}

fn rank_sum(a: &[f64], b: &[f64]) -> Comparison {
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let (r, ties) = ranks(&all);
    let (na, nb) = (a.len(), b.len());
    let w: f64 = r[..na].iter().sum();
    if na <= EXACT_MAX && nb <= EXACT_MAX {
        let r2: Vec<usize> = r.iter().map(|&x| (2.0 * x).round() as usize).collect();
        let max: usize = r2.iter().sum();
        // dp[k][s]: subsets of size k with doubled rank sum s.
        let mut dp = vec![vec![0.0f64; max + 1]; na + 1];
        dp[0][0] = 1.0;
        for &x in &r2 {
            for k in (1..=na).rev() {
                for s in (x..=max).rev() {
                    let add = dp[k - 1][s - x];
                    if add != 0.0 {
                        dp[k][s] += add;
                    }
                }
            }
        }
        let p = exact_two_sided(&dp[na], (2.0 * w).round() as usize);
        return Comparison { kind: TestKind::RankSum, statistic: w, p_value: p, exact: true, no_difference: false };
    }
    let n = (na + nb) as f64;
    let (naf, nbf) = (na as f64, nb as f64);
    let tie: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = naf * nbf / 12.0 * ((n + 1.0) - tie);
    let p = normal_two_sided(w, naf * (n + 1.0) / 2.0, var);
    Comparison { kind: TestKind::RankSum, statistic: w, p_value: p, exact: false, no_difference: false }
}

/// Wilcoxon signed-rank (`paired`) or rank-sum test, two-sided.
pub fn compare_runs(a: &[f64], b: &[f64], paired: bool) -> Result<Comparison> {
    let got = a.len().min(b.len());
    if got < 5 {
        return Err(Error::TooFewSamples { needed: 5, got });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgs("samples must be finite".into()));
    }
    if paired {
        if a.len() != b.len() {
            return Err(Error::InvalidArgs("paired samples must have equal length".into()));
        }
        Ok(signed_rank(a, b))
    } else {
        Ok(rank_sum(a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    #[test]
    fn cvar_of_one_to_hundred() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let m = risk_metrics(&v).unwrap();
        assert!((m.cvar10 - 5.5).abs() < 1e-12);
        assert!((m.p50 - 50.5).abs() < 1e-12);
        assert!((m.p10 - 10.9).abs() < 1e-12);
    }

    #[test]
    fn constant_and_midpoint() {
        let m = risk_metrics(&[3.25; 7]).unwrap();
        for v in [m.p10, m.p50, m.p90, m.cvar10, m.mean] {
            assert_eq!(v, 3.25);
        }
        assert_eq!(m.sd, 0.0);
        assert_eq!(risk_metrics(&[0.0, 10.0]).unwrap().p50, 5.0);
        assert!(matches!(risk_metrics(&[]), Err(Error::Empty)));
    }

    #[test]
    fn identical_pairs_have_no_difference() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let c = compare_runs(&a, &a, true).unwrap();
        assert!(c.no_difference);
        assert_eq!(c.p_value, 1.0);
    }

    #[test]
    fn disjoint_samples_are_significant() {
        let a: Vec<f64> = (1..=10).map(f64::from).collect();
        let b: Vec<f64> = (101..=110).map(f64::from).collect();
        let c = compare_runs(&a, &b, false).unwrap();
        assert!(c.exact);
        assert_eq!(c.statistic, 55.0);
        // One arrangement in C(20, 10) per tail.
        assert!((c.p_value - 2.0 / 184_756.0).abs() < 1e-15);
        let p = compare_runs(&a, &b, true).unwrap();
        assert!((p.p_value - 2.0 / 1024.0).abs() < 1e-15);
    }

    #[test]
    fn shuffled_copies_are_not_significant() {
        let mut passes = 0;
        for seed in 0..100u64 {
            let mut rng = crate::rng::substream(seed, &[9]);
            let a: Vec<f64> = (0..20).map(|i| (i * 7 % 13) as f64 + 0.1 * i as f64).collect();
            let mut b = a.clone();
            b.shuffle(&mut rng);
            if compare_runs(&a, &b, false).unwrap().p_value > 0.05 {
                passes += 1;
            }
        }
        assert!(passes >= 95);
    }

    #[test]
    fn rejects_small_or_ragged_input() {
        assert!(matches!(compare_runs(&[1.0; 4], &[2.0; 4], false), Err(Error::TooFewSamples { .. })));
        assert!(compare_runs(&[1.0; 5], &[2.0; 6], true).is_err());
    }

    #[test]
    fn normal_approximation_agrees_with_exact_near_cutover() {
        // n = 13 uses the approximation; shift by one element to compare with n = 12 exact.
        let a: Vec<f64> = (0..13).map(|i| i as f64 * 1.3 + 0.2).collect();
        let b: Vec<f64> = (0..13).map(|i| i as f64 * 1.1 + 2.0).collect();
        let approx = compare_runs(&a, &b, false).unwrap();
        let exact = compare_runs(&a[..12], &b[..12], false).unwrap();
        assert!(!approx.exact && exact.exact);
        assert!((approx.p_value - exact.p_value).abs() < 0.2);
    }

    #[test]
    fn exact_signed_rank_small_case() {
        // d = 1, 2, 3, 4, -5: W+ = 10; P(W+ >= 10) = 10/32 is the smaller tail.
        let a = [1.0, 2.0, 3.0, 4.0, 0.0];
        let b = [0.0, 0.0, 0.0, 0.0, 5.0];
        let c = compare_runs(&a, &b, true).unwrap();
        assert_eq!(c.statistic, 10.0);
        assert!((c.p_value - 20.0 / 32.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn quantiles_ordered_and_monotone(v in proptest::collection::vec(-1e6f64..1e6, 1..60), shift in 0.0f64..100.0) {
            let m = risk_metrics(&v).unwrap();
            prop_assert!(m.p10 <= m.p50 && m.p50 <= m.p90);
            prop_assert!(m.cvar10 <= m.p50 + 1e-9);
            let w: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let n = risk_metrics(&w).unwrap();
            prop_assert!(n.p10 >= m.p10 - 1e-9 && n.p50 >= m.p50 - 1e-9 && n.p90 >= m.p90 - 1e-9 && n.cvar10 >= m.cvar10 - 1e-9);
        }
    }
}
