mod common;

use aes_core::calibrate::{align_value, apply, fit, fit_with_mode, nearest_rank, SubsetMode};
use proptest::prelude::*;
use rand::Rng;

/// Independent endpoint computation: sort, take the rank cut-offs, average
/// everything on the far side of each cut (ties included).
fn oracle_endpoints(gold: &[f64], pred: &[f64], test: &[f64], p: f64) -> (f64, f64) {
    fn cuts(v: &[f64], p: f64) -> (f64, f64) {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len() as f64;
        let lo_rank = ((p / 100.0 * n).ceil() as usize).max(1);
        let hi_rank = (((100.0 - p) / 100.0 * n).ceil() as usize).max(1);
        let (lo, hi) = (s[lo_rank - 1], s[hi_rank - 1]);
        let avg = |f: &dyn Fn(f64) -> bool| {
            let kept: Vec<f64> = v.iter().cloned().filter(|&x| f(x)).collect();
            kept.iter().sum::<f64>() / kept.len() as f64
        };
        (avg(&|x| x <= lo), avg(&|x| x >= hi))
    }
    let pred: Vec<f64> = pred.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let (gb, gt) = cuts(gold, p);
    let (pb, pt) = cuts(&pred, p);
    let tmin = test.iter().cloned().fold(1.0f64, |a, v| a.min(v.clamp(0.0, 1.0)));
    let tmax = test.iter().cloned().fold(0.0f64, |a, v| a.max(v.clamp(0.0, 1.0)));
    ((gb - pb + tmin).clamp(0.0, 1.0), (gt - pt + tmax).clamp(0.0, 1.0))
}

/// Twenty dev essays: at p = 5 the bottom subset is the single minimum and
/// the top subset the two largest values.
fn dev_of(bottom: f64, top: [f64; 2], filler: f64) -> Vec<f64> {
    let mut v = vec![bottom];
    v.extend(std::iter::repeat(filler).take(17));
    v.extend(top);
    v
}

#[test]
fn expanding_a_shrunk_range() {
    let gold = dev_of(0.0, [1.0, 1.0], 0.5);
    let pred = dev_of(0.06, [0.88, 0.92], 0.5);
    let test = [0.04, 0.3, 0.6, 0.95];
    let p = fit(&gold, &pred, &test, 5.0).unwrap();
    assert!((p.gold_top_mean - 1.0).abs() <= 1e-9);
    assert!((p.pred_top_mean - 0.9).abs() <= 1e-9);
    assert!((p.pred_bottom_mean - 0.06).abs() <= 1e-9);
    assert!((p.b - 1.0).abs() <= 1e-9, "Clip(1.05)");
    assert!((p.a - 0.0).abs() <= 1e-9, "Clip(-0.02)");
}

#[test]
fn shrinking_an_overconfident_ceiling() {
    let gold = dev_of(0.0, [0.8, 0.8], 0.4);
    let pred = dev_of(0.0, [0.99, 0.99], 0.4);
    let test = [0.0, 0.5, 0.99];
    let p = fit(&gold, &pred, &test, 5.0).unwrap();
    assert!((p.b - 0.8).abs() <= 1e-9);
    assert!((apply(&test, &p)[2] - 0.8).abs() <= 1e-9);
}

#[test]
fn calibrated_dev_keeps_test_endpoints() {
    let dev = [0.05, 0.2, 0.45, 0.7, 0.9, 0.3];
    let test = [0.12, 0.5, 0.81, 0.33];
    let p = fit(&dev, &dev, &test, 5.0).unwrap();
    assert!((p.a - 0.12).abs() <= 1e-9 && (p.b - 0.81).abs() <= 1e-9);
    for (x, y) in test.iter().zip(apply(&test, &p)) {
        assert!((x - y).abs() <= 1e-9);
    }
}

#[test]
fn constant_predictions_map_to_midpoint() {
    let p = fit(&[0.0, 1.0], &[0.5, 0.5], &[0.4, 0.4], 5.0).unwrap();
    let mid = 0.5 * (p.a + p.b);
    assert_eq!(apply(&[0.4, 0.4], &p), vec![mid, mid]);
}

#[test]
fn nearest_rank_on_small_lists() {
    assert_eq!(nearest_rank(&[0.1, 0.2, 0.3], 5.0), 0.1);
    assert_eq!(nearest_rank(&[0.1, 0.2, 0.3], 95.0), 0.3);
}

#[test]
fn shrunk_predictor_is_corrected_in_most_trials() {
    let wins = (0..50).filter(|&s| {
        let (before, after) = common::shrunk_trial(s);
        after > before
    });
    assert!(wins.count() >= 45);
}

fn unit_vec(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, 1..max)
}

proptest! {
    #[test]
    fn endpoints_match_oracle(gold in unit_vec(40), noise in unit_vec(40), test in unit_vec(30), p in 1.0f64..50.0) {
        let pred: Vec<f64> = gold.iter().zip(noise.iter().cycle()).map(|(g, n)| g * 0.7 + n * 0.3 - 0.05).collect();
        let got = fit(&gold, &pred, &test, p).unwrap();
        let (a, b) = oracle_endpoints(&gold, &pred, &test, p);
        prop_assert!((got.a - a).abs() <= 1e-12);
        prop_assert!((got.b - b).abs() <= 1e-12);
    }

    #[test]
    fn outputs_in_unit_range_and_order_preserved(gold in unit_vec(30), pred in unit_vec(30), test in unit_vec(50)) {
        let n = gold.len().min(pred.len());
        for mode in [SubsetMode::Independent, SubsetMode::IndexMatched] {
            let p = fit_with_mode(&gold[..n], &pred[..n], &test, 5.0, mode).unwrap();
            let out = apply(&test, &p);
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
            for i in 0..test.len() {
                for j in 0..test.len() {
                    if test[i] <= test[j] {
                        let ordered = if p.is_inverted() { out[i] >= out[j] } else { out[i] <= out[j] };
                        prop_assert!(ordered);
                    }
                }
            }
        }
    }
}

#[test]
fn ten_thousand_fuzz_inputs() {
    let mut r = common::rng(99);
    for _ in 0..10_000 {
        let n = r.random_range(1..12);
        let gold: Vec<f64> = (0..n).map(|_| r.random_range(0.0..=1.0)).collect();
        let pred: Vec<f64> = (0..n).map(|_| r.random_range(-0.2..1.2)).collect();
        let test: Vec<f64> = (0..r.random_range(1..12)).map(|_| r.random_range(-0.2..1.2)).collect();
        let p = fit(&gold, &pred, &test, 5.0).unwrap();
        assert!((0.0..=1.0).contains(&p.a) && (0.0..=1.0).contains(&p.b));
        let mut sorted = test.clone();
        sorted.sort_by(f64::total_cmp);
        let out: Vec<f64> = sorted.iter().map(|&v| align_value(v, &p)).collect();
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        // An inverted fit (b < a) reverses the order instead.
        let monotone = if p.is_inverted() {
            out.windows(2).all(|w| w[0] >= w[1])
        } else {
            out.windows(2).all(|w| w[0] <= w[1])
        };
        assert!(monotone, "{sorted:?} -> {out:?}");
    }
}
