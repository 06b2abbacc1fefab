//! Two-sided location tests against zero: one-sample Student t and Wilcoxon signed-rank.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

/// Largest number of non-zero differences for which the Wilcoxon null
/// distribution is enumerated exactly.
const WILCOXON_EXACT_MAX: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    #[default]
    TTest,
    Wilcoxon,
}

impl std::str::FromStr for TestMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "t" | "t_test" | "t-test" | "ttest" => Ok(TestMethod::TTest),
            "wilcoxon" | "w" => Ok(TestMethod::Wilcoxon),
            other => Err(format!("unknown test `{other}` (expected t or wilcoxon)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SignificanceError {
    #[error("a significance test needs at least 2 values, got {0}")]
    TooFew(usize),
    #[error("values must be finite")]
    NotFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub method: TestMethod,
    /// t for the t-test; W+ (sum of positive ranks) for Wilcoxon.
    pub statistic: f64,
    pub p_value: f64,
    /// The sample has no spread (all values equal, or all zero for Wilcoxon).
    pub degenerate: bool,
    /// `p_value` is an upper bound rather than an exact value.
    pub p_is_bound: bool,
}

pub fn significance_test(values: &[f64], method: TestMethod) -> Result<SignificanceResult, SignificanceError> {
    if values.len() < 2 {
        return Err(SignificanceError::TooFew(values.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SignificanceError::NotFinite);
    }
    Ok(match method {
        TestMethod::TTest => t_test(values),
        TestMethod::Wilcoxon => wilcoxon(values),
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn t_test(values: &[f64]) -> SignificanceResult {
    let n = values.len() as f64;
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    let sd = (ss / (n - 1.0)).sqrt();
    let all_equal = values.iter().all(|v| *v == values[0]);
    if all_equal || sd == 0.0 {
        let zero_mean = m == 0.0;
        return SignificanceResult {
            method: TestMethod::TTest,
            statistic: if zero_mean { 0.0 } else { m.signum() * f64::INFINITY },
            p_value: if zero_mean { 1.0 } else { f64::EPSILON },
            degenerate: true,
            p_is_bound: !zero_mean,
        };
    }
    let t = m / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("df >= 1");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    SignificanceResult {
        method: TestMethod::TTest,
        statistic: t,
        p_value: p,
        degenerate: false,
        p_is_bound: false,
    }
}

/// Average ranks of `abs` (1-based), ties sharing the mean of their positions.
fn average_ranks(abs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0.0; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
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

fn wilcoxon(values: &[f64]) -> SignificanceResult {
    // zero differences carry no sign and are dropped
    let nonzero: Vec<f64> = values.iter().copied().filter(|v| *v != 0.0).collect();
    if nonzero.is_empty() {
        return SignificanceResult {
            method: TestMethod::Wilcoxon,
            statistic: 0.0,
            p_value: 1.0,
            degenerate: true,
            p_is_bound: false,
        };
    }
    let abs: Vec<f64> = nonzero.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, r)| r)
        .sum();
    let n = nonzero.len();

    let p = if n <= WILCOXON_EXACT_MAX {
        exact_signed_rank_p(&ranks, w_plus)
    } else {
        let nf = n as f64;
        let mu = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = ((w_plus - mu).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::standard();
        (2.0 * normal.sf(z)).min(1.0)
    };
    SignificanceResult {
        method: TestMethod::Wilcoxon,
        statistic: w_plus,
        p_value: p,
        degenerate: false,
        p_is_bound: false,
    }
}

/// Exact two-sided p under the sign-flip null, using the observed (possibly tied) ranks.
fn exact_signed_rank_p(ranks: &[f64], w_plus: f64) -> f64 {
    // doubled ranks are integers even with ties
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let all: f64 = counts.iter().sum();
    let observed = (w_plus * 2.0).round() as usize;
    let lower: f64 = counts[..=observed].iter().sum::<f64>() / all;
    let upper: f64 = counts[observed..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}
