//! Descriptive summaries and paired nonparametric tests.
//!
//! Quantiles interpolate linearly between order statistics. The confidence
//! interval of the median comes from a seeded percentile bootstrap. The
//! paired Wilcoxon signed-rank test drops zero differences, ranks the
//! absolute differences with average ranks on ties, and computes the exact
//! two-sided p-value from the full sign-flip null distribution for n <= 25;
//! larger samples use the normal approximation with tie-corrected variance
//! and a 0.5 continuity correction.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;
/// Exact Wilcoxon null distribution is used up to this sample size.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Linear interpolation between closest order statistics of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let t = h - lo as f64;
        sorted[lo] * (1.0 - t) + sorted[hi] * t
    }
}

fn median_sorted(sorted: &[f64]) -> f64 {
    quantile_sorted(sorted, 0.5)
}

/// Summarizes case-wise metric values: median, quartiles, bootstrap 95% CI
/// of the median, mean and population SD.
pub fn summarize(values: &[f64], bootstrap_seed: u64) -> Result<MetricSummary> {
    if values.is_empty() {
        return Err(Error::Summary("no values to summarize".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Summary("non-finite value in summary input".into()));
    }
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(bootstrap_seed);
    let mut medians = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut resample = vec![0.0; n];
    for _ in 0..BOOTSTRAP_RESAMPLES {
        for r in resample.iter_mut() {
            *r = sorted[rng.gen_range(0..n)];
        }
        resample.sort_by(|a, b| a.partial_cmp(b).unwrap());
        medians.push(median_sorted(&resample));
    }
    medians.sort_by(|a, b| a.partial_cmp(b).unwrap());

    Ok(MetricSummary {
        n,
        median: median_sorted(&sorted),
        q25: quantile_sorted(&sorted, 0.25),
        q75: quantile_sorted(&sorted, 0.75),
        ci95_low: quantile_sorted(&medians, 0.025),
        ci95_high: quantile_sorted(&medians, 0.975),
        mean,
        sd: var.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PValueMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// Label for the comparison (arm pair and measurement), set by the caller.
    pub label: String,
    /// W = min(W+, W-).
    pub w: f64,
    /// Pairs remaining after zero differences were dropped.
    pub n_used: usize,
    /// Two-sided p-value.
    pub p: f64,
    pub method: PValueMethod,
    pub significant: bool,
    pub highly_significant: bool,
}

/// Average ranks of |d| (ties share the mean of their rank range), returned
/// doubled so that all ranks are integers.
fn double_ranks(abs_d: &[f64]) -> Vec<u64> {
    let n = abs_d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs_d[a].partial_cmp(&abs_d[b]).unwrap());
    let mut double_rank = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs_d[order[j + 1]] == abs_d[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 (1-based); doubled average = (i+1) + (j+1)
        let dr = (i + 1 + j + 1) as u64;
        for &idx in &order[i..=j] {
            double_rank[idx] = dr;
        }
        i = j + 1;
    }
    double_rank
}

/// Null distribution of 2*W+ by dynamic programming over sign assignments:
/// `counts[s]` = number of assignments with doubled positive-rank sum `s`.
fn exact_counts(double_ranks: &[u64]) -> Vec<f64> {
    let total: u64 = double_ranks.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut upper = 0usize;
    for &r in double_ranks {
        let r = r as usize;
        upper += r;
        for s in (r..=upper).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

/// Paired Wilcoxon signed-rank test, two-sided.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Input("empty samples".into()));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::DegenerateTest(
            "all paired differences are zero".into(),
        ));
    }
    let n = diffs.len();
    let abs_d: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let dranks = double_ranks(&abs_d);

    let two_w_plus: u64 = diffs
        .iter()
        .zip(&dranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let two_total: u64 = dranks.iter().sum();
    let two_w_minus = two_total - two_w_plus;
    let w = two_w_plus.min(two_w_minus) as f64 / 2.0;

    let (p, method) = if n <= WILCOXON_EXACT_MAX_N {
        let counts = exact_counts(&dranks);
        let denom = (n as f64).exp2();
        let p_le: f64 = counts[..=two_w_plus as usize].iter().sum::<f64>() / denom;
        let p_ge: f64 = counts[two_w_plus as usize..].iter().sum::<f64>() / denom;
        ((2.0 * p_le.min(p_ge)).min(1.0), PValueMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        // tie correction: sum of (t^3 - t) over tie groups
        let mut tie_term = 0.0;
        let mut sorted_abs = abs_d.clone();
        sorted_abs.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted_abs[j + 1] == sorted_abs[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        if var <= 0.0 {
            return Err(Error::DegenerateTest(
                "zero variance in normal approximation".into(),
            ));
        }
        let w_plus = two_w_plus as f64 / 2.0;
        let centered = w_plus - mean;
        // 0.5 continuity correction toward the mean
        let corrected = if centered > 0.0 {
            centered - 0.5
        } else if centered < 0.0 {
            centered + 0.5
        } else {
            0.0
        };
        let z = corrected / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let p = (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0);
        (p, PValueMethod::NormalApprox)
    };

    Ok(TestResult {
        label: String::new(),
        w,
        n_used: n,
        p,
        method,
        significant: false,
        highly_significant: false,
    })
}

/// Applies the Bonferroni correction: significant iff p < 0.05/m, highly
/// significant iff p < 0.01/m. For the default family of 25 tests the
/// thresholds are 0.002 and 0.0004.
pub fn bonferroni_flags(mut results: Vec<TestResult>, family_size: usize) -> Vec<TestResult> {
    let m = family_size.max(1) as f64;
    let sig = 0.05 / m;
    let high = 0.01 / m;
    for r in &mut results {
        r.significant = r.p < sig;
        r.highly_significant = r.p < high;
    }
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summarize_interpolated_quantiles() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0, 5.0], 0).unwrap();
        assert_eq!(s.median, 3.0);
        assert_eq!(s.q25, 2.0);
        assert_eq!(s.q75, 4.0);
    }

    #[test]
    fn summarize_degenerate_bootstrap() {
        let s = summarize(&[7.0, 7.0, 7.0], 1).unwrap();
        assert_eq!(s.median, 7.0);
        assert_eq!(s.ci95_low, 7.0);
        assert_eq!(s.ci95_high, 7.0);
    }

    #[test]
    fn summarize_mean_vs_median() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0, 100.0], 2).unwrap();
        assert_eq!(s.mean, 22.0);
        assert_eq!(s.median, 3.0);
    }

    #[test]
    fn summarize_rejects_empty() {
        assert!(matches!(summarize(&[], 0), Err(Error::Summary(_))));
    }

    #[test]
    fn summarize_is_permutation_invariant() {
        let vals = [4.0, 1.0, 3.3, 8.0, 2.1, 9.9, 0.5];
        let mut shuffled = vals.to_vec();
        shuffled.reverse();
        shuffled.swap(0, 3);
        let a = summarize(&vals, 33).unwrap();
        let b = summarize(&shuffled, 33).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wilcoxon_all_positive_n6() {
        let a = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let b = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.method, PValueMethod::Exact);
        assert!((r.p - 0.03125).abs() < 1e-12, "p = {}", r.p);
        assert_eq!(r.w, 0.0);
        assert_eq!(r.n_used, 6);
    }

    #[test]
    fn wilcoxon_identical_samples_degenerate() {
        let a = [1.0, 2.0, 3.0];
        let err = wilcoxon_signed_rank(&a, &a).unwrap_err();
        assert!(matches!(err, Error::DegenerateTest(_)));
    }

    #[test]
    fn wilcoxon_symmetric_in_arguments() {
        let a = [3.1, 2.2, 5.5, 1.0, 4.4, 2.0, 7.7, 0.3];
        let b = [2.9, 2.6, 5.0, 1.7, 4.0, 2.8, 7.0, 0.9];
        let r1 = wilcoxon_signed_rank(&a, &b).unwrap();
        let r2 = wilcoxon_signed_rank(&b, &a).unwrap();
        assert!((r1.p - r2.p).abs() < 1e-15);
        assert_eq!(r1.w, r2.w);
    }

    #[test]
    fn wilcoxon_invariant_under_positive_affine_scale_of_differences() {
        // scaling both members preserves difference signs and magnitude order
        let a = [3.0, 1.0, 4.0, 1.5, 9.0, 2.6];
        let b = [2.0, 1.2, 3.3, 1.9, 8.0, 2.0];
        let r1 = wilcoxon_signed_rank(&a, &b).unwrap();
        let a2: Vec<f64> = a.iter().map(|x| 3.5 * x + 2.0).collect();
        let b2: Vec<f64> = b.iter().map(|x| 3.5 * x + 2.0).collect();
        let r2 = wilcoxon_signed_rank(&a2, &b2).unwrap();
        assert!((r1.p - r2.p).abs() < 1e-15);
    }

    /// Literal 2^n enumeration oracle, independent of the DP path.
    fn enumeration_p(diffs: &[f64]) -> f64 {
        let n = diffs.len();
        let abs_d: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
        let dr = double_ranks(&abs_d);
        let obs: u64 = diffs
            .iter()
            .zip(&dr)
            .filter(|(d, _)| **d > 0.0)
            .map(|(_, r)| *r)
            .sum();
        let mut count_le = 0u64;
        let mut count_ge = 0u64;
        for signs in 0..(1u64 << n) {
            let s: u64 = (0..n)
                .filter(|i| signs >> i & 1 == 1)
                .map(|i| dr[i])
                .sum();
            if s <= obs {
                count_le += 1;
            }
            if s >= obs {
                count_ge += 1;
            }
        }
        let denom = (1u64 << n) as f64;
        (2.0 * (count_le.min(count_ge) as f64) / denom).min(1.0)
    }

    #[test]
    fn wilcoxon_exact_matches_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for trial in 0..200 {
            let n = rng.gen_range(1..=12);
            // integer-valued data provoke ties and zero differences
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
            let diffs: Vec<f64> = a
                .iter()
                .zip(&b)
                .map(|(x, y)| x - y)
                .filter(|d| *d != 0.0)
                .collect();
            if diffs.is_empty() {
                assert!(wilcoxon_signed_rank(&a, &b).is_err());
                continue;
            }
            let r = wilcoxon_signed_rank(&a, &b).unwrap();
            let oracle = enumeration_p(&diffs);
            assert!(
                (r.p - oracle).abs() < 1e-12,
                "trial {trial}: dp {} vs enumeration {oracle}",
                r.p
            );
        }
    }

    #[test]
    fn normal_approx_close_to_exact_at_boundary() {
        // n just above the exact cutoff should be well approximated
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 26;
        let a: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.3).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.method, PValueMethod::NormalApprox);
        assert!(r.p > 0.0 && r.p <= 1.0);
    }

    #[test]
    fn bonferroni_thresholds_match_reported_calls() {
        let mk = |p: f64| TestResult {
            label: String::new(),
            w: 0.0,
            n_used: 10,
            p,
            method: PValueMethod::Exact,
            significant: false,
            highly_significant: false,
        };
        let flagged = bonferroni_flags(vec![mk(3.1e-6), mk(4.9e-2), mk(0.0019)], 25);
        assert!(flagged[0].significant && flagged[0].highly_significant);
        assert!(!flagged[1].significant && !flagged[1].highly_significant);
        assert!(flagged[2].significant && !flagged[2].highly_significant);
    }
}
