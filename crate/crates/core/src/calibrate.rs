//! Score alignment: a linear rescaling of test predictions whose endpoints
//! come from dev-set gaps between gold and predicted extremes.
//!
//! With `q_p` the nearest-rank p-th percentile, the bottom subset of a list
//! is `{v ≤ q_p}` and the top subset `{v ≥ q_(100−p)}`. Then
//!
//! ```text
//! a = clip01(mean(gold_bottom) − mean(pred_bottom) + min(test))
//! b = clip01(mean(gold_top)    − mean(pred_top)    + max(test))
//! aligned(v) = (v − min(test)) / (max(test) − min(test)) · (b − a) + a
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetMode {
    /// Gold and predicted subsets each use their own list's quantiles.
    #[default]
    Independent,
    /// Predicted subsets are the predictions of the essays in the gold subsets.
    IndexMatched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentParams {
    pub a: f64,
    pub b: f64,
    pub percent: f64,
    pub mode: SubsetMode,
    pub gold_bottom_mean: f64,
    pub pred_bottom_mean: f64,
    pub gold_top_mean: f64,
    pub pred_top_mean: f64,
    pub test_min: f64,
    pub test_max: f64,
}

impl AlignmentParams {
    /// `b < a`: the transform reverses the order of predictions.
    pub fn is_inverted(&self) -> bool {
        self.b < self.a
    }
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Nearest-rank percentile of an ascending list.
pub fn nearest_rank(sorted: &[f64], percent: f64) -> f64 {
    let n = sorted.len();
    let rank = ((percent / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn mean_where(values: &[f64], keep: impl Fn(usize) -> bool) -> f64 {
    let (sum, n) = values
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .fold((0.0, 0usize), |(s, n), (_, v)| (s + v, n + 1));
    sum / n as f64
}

/// Means of the bottom and top p% subsets of `values`.
fn extreme_means(values: &[f64], percent: f64) -> (f64, f64) {
    let s = sorted(values);
    let lo = nearest_rank(&s, percent);
    let hi = nearest_rank(&s, 100.0 - percent);
    (
        mean_where(values, |i| values[i] <= lo),
        mean_where(values, |i| values[i] >= hi),
    )
}

pub fn fit(dev_gold: &[f64], dev_pred: &[f64], test_pred: &[f64], percent: f64) -> Result<AlignmentParams> {
    fit_with_mode(dev_gold, dev_pred, test_pred, percent, SubsetMode::Independent)
}

pub fn fit_with_mode(
    dev_gold: &[f64],
    dev_pred: &[f64],
    test_pred: &[f64],
    percent: f64,
    mode: SubsetMode,
) -> Result<AlignmentParams> {
    if dev_gold.is_empty() || dev_pred.is_empty() {
        return Err(Error::EmptyInput("dev predictions"));
    }
    if test_pred.is_empty() {
        return Err(Error::EmptyInput("test predictions"));
    }
    if dev_gold.len() != dev_pred.len() {
        return Err(Error::LengthMismatch {
            left: dev_gold.len(),
            right: dev_pred.len(),
        });
    }
    if !(0.0..=100.0).contains(&percent) {
        return Err(Error::InvalidArgument(format!("percent {percent} outside [0, 100]")));
    }
    let dev_pred: Vec<f64> = dev_pred.iter().map(|&v| clip01(v)).collect();
    let test: Vec<f64> = test_pred.iter().map(|&v| clip01(v)).collect();
    let test_min = test.iter().cloned().fold(f64::INFINITY, f64::min);
    let test_max = test.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let (gold_bottom_mean, gold_top_mean) = extreme_means(dev_gold, percent);
    let (pred_bottom_mean, pred_top_mean) = match mode {
        SubsetMode::Independent => extreme_means(&dev_pred, percent),
        SubsetMode::IndexMatched => {
            let s = sorted(dev_gold);
            let lo = nearest_rank(&s, percent);
            let hi = nearest_rank(&s, 100.0 - percent);
            (
                mean_where(&dev_pred, |i| dev_gold[i] <= lo),
                mean_where(&dev_pred, |i| dev_gold[i] >= hi),
            )
        }
    };
    Ok(AlignmentParams {
        a: clip01(gold_bottom_mean - pred_bottom_mean + test_min),
        b: clip01(gold_top_mean - pred_top_mean + test_max),
        percent,
        mode,
        gold_bottom_mean,
        pred_bottom_mean,
        gold_top_mean,
        pred_top_mean,
        test_min,
        test_max,
    })
}

/// Maps one value. Constant test predictions map to the midpoint `(a+b)/2`.
pub fn align_value(v: f64, params: &AlignmentParams) -> f64 {
    let (a, b) = (params.a, params.b);
    let span = params.test_max - params.test_min;
    if span <= 0.0 {
        return 0.5 * (a + b);
    }
    let t = (clip01(v) - params.test_min) / span;
    if t <= 0.0 {
        a
    } else if t >= 1.0 {
        b
    } else {
        (a + t * (b - a)).clamp(a.min(b), a.max(b))
    }
}

pub fn apply(test_pred: &[f64], params: &AlignmentParams) -> Vec<f64> {
    test_pred.iter().map(|&v| align_value(v, params)).collect()
}
