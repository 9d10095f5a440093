//! Evaluation statistics: token error rate, duration accuracy, a style
//! similarity proxy, bootstrap and Wilson intervals, Pearson correlation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub const DEFAULT_MARGIN: f64 = 0.10;
pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_SEED: u64 = 42;

/// Relative slack on the duration margin so that `gen = 1.1 * target`
/// counts despite rounding in the product.
const MARGIN_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalMethod {
    Bootstrap,
    Wilson,
}

/// A point estimate with its confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub metric: String,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub method: IntervalMethod,
    pub resamples: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn named(mut self, metric: impl Into<String>) -> Self {
        self.metric = metric.into();
        self
    }

    pub fn half_width(&self) -> f64 {
        (self.ci_high - self.ci_low) / 2.0
    }
}

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over reference length; may exceed 1.
pub fn error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("reference"));
    }
    Ok(levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}

pub fn within_margin(generated: f64, target: f64, margin: f64) -> bool {
    (generated - target).abs() <= margin * target * (1.0 + MARGIN_SLACK)
}

/// Fraction of pairs with `|gen - target| / target <= margin`.
pub fn duration_accuracy(generated: &[f64], target: &[f64], margin: f64) -> Result<f64> {
    if generated.len() != target.len() {
        return Err(Error::Shape {
            op: "duration_accuracy",
            lhs: vec![generated.len()],
            rhs: vec![target.len()],
        });
    }
    if generated.is_empty() {
        return Err(Error::Empty("durations"));
    }
    if let Some(t) = target.iter().find(|&&t| !(t > 0.0)) {
        return Err(Error::invalid(format!("target durations must be positive, got {t}")));
    }
    let hits = generated
        .iter()
        .zip(target)
        .filter(|&(&g, &t)| within_margin(g, t, margin))
        .count();
    Ok(hits as f64 / generated.len() as f64)
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap of the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<EvalReport> {
    if values.is_empty() {
        return Err(Error::Empty("bootstrap values"));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!(
            "bootstrap needs resamples >= 1 and level in (0, 1), got {resamples} and {level}"
        )));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let ci_low = quantile_sorted(&means, alpha).min(mean);
    let ci_high = quantile_sorted(&means, 1.0 - alpha).max(mean);
    Ok(EvalReport {
        metric: String::new(),
        mean,
        ci_low,
        ci_high,
        n,
        method: IntervalMethod::Bootstrap,
        resamples,
        seed,
    })
}

/// Two-sided standard normal critical value.
pub fn z_for_level(level: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize, level: f64) -> Result<EvalReport> {
    if n == 0 || successes > n {
        return Err(Error::invalid(format!("wilson interval needs 0 <= successes <= n, n >= 1; got {successes}/{n}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("level must lie in (0, 1), got {level}")));
    }
    let z = z_for_level(level);
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    Ok(EvalReport {
        metric: String::new(),
        mean: p,
        ci_low: (center - half).clamp(0.0, p),
        ci_high: (center + half).clamp(p, 1.0),
        n,
        method: IntervalMethod::Wilson,
        resamples: 0,
        seed: 0,
    })
}

fn style_histogram(tokens: &[usize], alphabets: &[Vec<usize>]) -> Vec<f64> {
    alphabets
        .iter()
        .map(|alpha| tokens.iter().filter(|t| alpha.contains(t)).count() as f64)
        .collect()
}

/// Cosine similarity of per-style token histograms. Tokens outside every
/// alphabet are ignored; a sequence with none in any alphabet scores 0.
pub fn style_similarity(prompt: &[usize], generated: &[usize], alphabets: &[Vec<usize>]) -> Result<f64> {
    if prompt.is_empty() || generated.is_empty() {
        return Err(Error::Empty("style similarity input"));
    }
    let a = style_histogram(prompt, alphabets);
    let b = style_histogram(generated, alphabets);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// Sample Pearson correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            op: "pearson_r",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    if x.len() < 2 {
        return Err(Error::invalid("pearson_r needs at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson_r is undefined for zero variance"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
