//! Rank-based tests: Wilcoxon rank-sum (Mann–Whitney U), Wilcoxon
//! signed-rank, and Spearman correlation.
//!
//! Exact p-values come from the permutation distribution of the doubled
//! midrank sums, built by dynamic programming; larger samples use the
//! tie-corrected normal approximation with continuity correction.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Samples with at most this many (non-zero) observations get exact p-values.
pub const EXACT_CUTOFF: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMethod {
    RankSum,
    SignedRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// `U` of the first sample (rank-sum) or `W⁺` (signed-rank).
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    pub two_sided: bool,
    pub exact: bool,
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Σ (t³ − t) over tie groups.
fn tie_term(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut total = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        total += t * t * t - t;
        i = j + 1;
    }
    total
}

fn check_finite(xs: &[f64]) -> Result<()> {
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite observation".into()));
    }
    Ok(())
}

fn doubled(ranks: &[f64]) -> Vec<usize> {
    ranks.iter().map(|r| (2.0 * r).round() as usize).collect()
}

fn upper_normal_tail(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Rank-sum test; exact when `|a| + |b| ≤ EXACT_CUTOFF`.
///
/// The one-sided alternative is that `a` tends to exceed `b`.
pub fn rank_sum_test(a: &[f64], b: &[f64], two_sided: bool) -> Result<TestResult> {
    if a.len() + b.len() <= EXACT_CUTOFF {
        rank_sum_exact(a, b, two_sided)
    } else {
        rank_sum_normal(a, b, two_sided)
    }
}

fn rank_sum_prepare(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument(
            "rank-sum test needs two nonempty samples".into(),
        ));
    }
    check_finite(a)?;
    check_finite(b)?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let na = a.len() as f64;
    let u = ranks[..a.len()].iter().sum::<f64>() - na * (na + 1.0) / 2.0;
    Ok((ranks, u))
}

/// Exact permutation p-value over all `C(N, |a|)` assignments of the pooled
/// midranks to the first sample.
pub fn rank_sum_exact(a: &[f64], b: &[f64], two_sided: bool) -> Result<TestResult> {
    let (ranks, u) = rank_sum_prepare(a, b)?;
    let na = a.len();
    let r2 = doubled(&ranks);
    let max_sum: usize = r2.iter().sum();
    // counts[k][s]: subsets of size k with doubled rank sum s
    let mut counts = vec![vec![0u128; max_sum + 1]; na + 1];
    counts[0][0] = 1;
    for &r in &r2 {
        for k in (1..=na).rev() {
            for s in (r..=max_sum).rev() {
                let add = counts[k - 1][s - r];
                if add > 0 {
                    counts[k][s] += add;
                }
            }
        }
    }
    let offset = (na * (na + 1)) as i64; // doubled n_a(n_a+1)/2
    let mean2 = (a.len() * b.len()) as i64; // doubled n_a·n_b/2
    let obs2 = (2.0 * u).round() as i64;
    let total: u128 = counts[na].iter().sum();
    let extreme: u128 = counts[na]
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .filter(|(s, _)| {
            let u2 = *s as i64 - offset;
            if two_sided {
                (u2 - mean2).abs() >= (obs2 - mean2).abs()
            } else {
                u2 >= obs2
            }
        })
        .map(|(_, &c)| c)
        .sum();
    Ok(TestResult {
        statistic: u,
        p_value: (extreme as f64 / total as f64).min(1.0),
        method: TestMethod::RankSum,
        two_sided,
        exact: true,
    })
}

/// Normal approximation with tie correction and continuity correction.
pub fn rank_sum_normal(a: &[f64], b: &[f64], two_sided: bool) -> Result<TestResult> {
    let (_, u) = rank_sum_prepare(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ties = if n > 1.0 {
        tie_term(&pooled) / (n * (n - 1.0))
    } else {
        0.0
    };
    let var = na * nb / 12.0 * ((n + 1.0) - ties);
    let mean = na * nb / 2.0;
    let p = normal_p(u, mean, var, two_sided);
    Ok(TestResult {
        statistic: u,
        p_value: p,
        method: TestMethod::RankSum,
        two_sided,
        exact: false,
    })
}

fn normal_p(stat: f64, mean: f64, var: f64, two_sided: bool) -> f64 {
    if var <= 0.0 {
        return 1.0;
    }
    let sd = var.sqrt();
    let p = if two_sided {
        let d = ((stat - mean).abs() - 0.5).max(0.0);
        2.0 * upper_normal_tail(d / sd)
    } else {
        upper_normal_tail((stat - mean - 0.5) / sd)
    };
    p.clamp(0.0, 1.0)
}

/// Signed-rank test on paired differences; zeros are dropped first. Exact
/// when at most `EXACT_CUTOFF` non-zero differences remain.
///
/// The one-sided alternative is that the differences tend to be positive.
pub fn signed_rank_test(diffs: &[f64], two_sided: bool) -> Result<TestResult> {
    let nonzero = diffs.iter().filter(|&&d| d != 0.0).count();
    if nonzero <= EXACT_CUTOFF {
        signed_rank_exact(diffs, two_sided)
    } else {
        signed_rank_normal(diffs, two_sided)
    }
}

fn signed_rank_prepare(diffs: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    check_finite(diffs)?;
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nz.is_empty() {
        return Err(Error::InvalidArgument(
            "signed-rank test needs a non-zero difference".into(),
        ));
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus = nz
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    Ok((abs, ranks, w_plus))
}

/// Exact p-value over all `2ⁿ` sign assignments.
pub fn signed_rank_exact(diffs: &[f64], two_sided: bool) -> Result<TestResult> {
    let (_, ranks, w_plus) = signed_rank_prepare(diffs)?;
    let r2 = doubled(&ranks);
    let max_sum: usize = r2.iter().sum();
    let mut counts = vec![0u128; max_sum + 1];
    counts[0] = 1;
    for &r in &r2 {
        for s in (r..=max_sum).rev() {
            counts[s] += counts[s - r];
        }
    }
    let mean2 = (max_sum / 2) as i64;
    let obs2 = (2.0 * w_plus).round() as i64;
    let total: u128 = counts.iter().sum();
    let extreme: u128 = counts
        .iter()
        .enumerate()
        .filter(|(s, &c)| {
            c > 0 && {
                let w2 = *s as i64;
                if two_sided {
                    (w2 - mean2).abs() >= (obs2 - mean2).abs()
                } else {
                    w2 >= obs2
                }
            }
        })
        .map(|(_, &c)| c)
        .sum();
    Ok(TestResult {
        statistic: w_plus,
        p_value: (extreme as f64 / total as f64).min(1.0),
        method: TestMethod::SignedRank,
        two_sided,
        exact: true,
    })
}

pub fn signed_rank_normal(diffs: &[f64], two_sided: bool) -> Result<TestResult> {
    let (abs, _, w_plus) = signed_rank_prepare(diffs)?;
    let n = abs.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term(&abs) / 48.0;
    Ok(TestResult {
        statistic: w_plus,
        p_value: normal_p(w_plus, mean, var, two_sided),
        method: TestMethod::SignedRank,
        two_sided,
        exact: false,
    })
}

/// Spearman rank correlation (Pearson correlation of midranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(
            "spearman needs two equal-length samples of size ≥ 2".into(),
        ));
    }
    check_finite(x)?;
    check_finite(y)?;
    let (rx, ry) = (midranks(x), midranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument(
            "spearman undefined for a constant sample".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
