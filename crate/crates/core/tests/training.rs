mod common;

use aes_core::encoder::{Encoder, EncoderConfig, ReferenceEncoder, SENTENCE_FEATURES};
use aes_core::model::{train, LossWeights, ModelConfig, TrainConfig, TrainingData, TraitModel};
use aes_core::selftrain::estimate_uncertainty;
use aes_core::synth::{generate_corpus, SynthConfig};
use common::*;
use ndarray::{Array1, Array2, Axis};

/// Standardized sentence-statistic features of synthetic essays, and a
/// target that is an exact linear function of them.
fn linear_task(n: usize) -> (TrainingData, TrainingData) {
    let synth = generate_corpus(&SynthConfig {
        essays_per_prompt: n,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let enc = ReferenceEncoder::new(EncoderConfig {
        hash_dim: 8,
        ..Default::default()
    });
    let rows: Vec<Vec<f64>> = synth
        .corpus
        .essays()
        .iter()
        .map(|e| enc.encode(&e.text)[enc.dim() - SENTENCE_FEATURES..].to_vec())
        .collect();
    let mut x = Array2::from_shape_fn((n, SENTENCE_FEATURES), |(i, j)| rows[i][j]);
    let mean = x.mean_axis(Axis(0)).unwrap();
    let sd = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
    x = (&x - &mean) / &sd;
    let w: Array1<f64> = (0..SENTENCE_FEATURES).map(|j| if j % 3 == 0 { 0.04 } else { -0.02 }).collect();
    let y = x.dot(&w).mapv(|v| 0.5 + v);
    let traits = names(&["overall"]);
    let mut data = TrainingData::constant_targets(x, &traits, 0.0);
    data.targets.column_mut(0).assign(&y);
    let train_rows: Vec<usize> = (0..n * 3 / 4).collect();
    let dev_rows: Vec<usize> = (n * 3 / 4..n).collect();
    (data.subset(&train_rows), data.subset(&dev_rows))
}

/// Ordinary least squares with intercept via the normal equations, solved
/// by Gaussian elimination. Returns the in-sample mean squared error.
fn ols_mse(x: &Array2<f64>, y: &[f64]) -> f64 {
    let (n, d) = x.dim();
    let p = d + 1;
    let design = |i: usize, j: usize| if j == d { 1.0 } else { x[[i, j]] };
    let mut m = vec![vec![0.0; p + 1]; p];
    for i in 0..n {
        for a in 0..p {
            for b in 0..p {
                m[a][b] += design(i, a) * design(i, b);
            }
            m[a][p] += design(i, a) * y[i];
        }
    }
    for c in 0..p {
        let pivot = (c..p).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap();
        if m[pivot][c].abs() < 1e-12 {
            continue;
        }
        m.swap(c, pivot);
        for r in 0..p {
            if r != c {
                let f = m[r][c] / m[c][c];
                for k in c..=p {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    let beta: Vec<f64> = (0..p).map(|j| if m[j][j].abs() < 1e-12 { 0.0 } else { m[j][p] / m[j][j] }).collect();
    (0..n)
        .map(|i| {
            let fit: f64 = (0..p).map(|j| design(i, j) * beta[j]).sum();
            (fit - y[i]).powi(2)
        })
        .sum::<f64>()
        / n as f64
}

fn model_for(data: &TrainingData, dropout: f64, seed: u64) -> TraitModel {
    TraitModel::new(
        ModelConfig {
            input_dim: data.features.ncols(),
            hidden: 16,
            head_hidden: 8,
            dropout,
            traits: data.traits.clone(),
        },
        seed,
    )
    .unwrap()
}

#[test]
fn learns_a_linear_function_of_sentence_statistics() {
    let (train_set, dev) = linear_task(400);
    let y: Vec<f64> = train_set.targets.column(0).to_vec();
    let oracle = ols_mse(&train_set.features, &y);
    assert!(oracle < 1e-12, "targets are exactly linear: {oracle:e}");
    let variance = {
        let m = y.iter().sum::<f64>() / y.len() as f64;
        y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64
    };
    let mut model = model_for(&train_set, 0.0, 1);
    let cfg = TrainConfig {
        max_epochs: 200,
        patience: 200,
        ..quick_train_config(2)
    };
    train(&mut model, &train_set, &dev, &LossWeights::balance(&train_set.traits), &cfg).unwrap();
    let pred = model.predict(train_set.features.view()).unwrap();
    let mse = pred.column(0).iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64;
    assert!(mse <= oracle + 0.05 * variance, "mse {mse}, target variance {variance}");
}

#[test]
fn early_stopping_restores_best_epoch() {
    let (_, train_set, dev) = trained_base(5);
    let mut m = model_for(&train_set, 0.1, 6);
    let cfg = TrainConfig {
        max_epochs: 40,
        patience: 3,
        ..quick_train_config(7)
    };
    let log = train(&mut m, &train_set, &dev, &LossWeights::balance(&train_set.traits), &cfg).unwrap();
    let best = log.epochs.iter().map(|e| e.dev_qwk).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(log.best_dev_qwk, best);
    let first_best = log.epochs.iter().find(|e| e.dev_qwk == best).unwrap().epoch;
    assert_eq!(log.best_epoch, first_best);
    assert!(log.epochs.len() <= log.best_epoch + cfg.patience);
    if log.stopped_early {
        assert_eq!(log.epochs.len(), log.best_epoch + cfg.patience);
    }
    assert_eq!(dev.mean_qwk(&m.predict(dev.features.view()).unwrap()).unwrap(), log.best_dev_qwk);
}

#[test]
fn patience_zero_runs_one_epoch() {
    let (_, train_set, dev) = trained_base(8);
    let mut m = model_for(&train_set, 0.1, 9);
    let cfg = TrainConfig {
        patience: 0,
        ..quick_train_config(10)
    };
    let log = train(&mut m, &train_set, &dev, &LossWeights::balance(&train_set.traits), &cfg).unwrap();
    assert_eq!(log.epochs.len(), 1);
}

#[test]
fn training_is_deterministic() {
    let (a, _, _) = trained_base(11);
    let (b, _, _) = trained_base(11);
    assert_eq!(a, b);
    let (c, _, _) = trained_base(12);
    assert_ne!(a, c);
}

#[test]
fn mc_mean_converges_with_more_passes() {
    let (model, _, dev) = trained_base(13);
    let subset = dev.subset(&(0..20).collect::<Vec<_>>());
    let short = estimate_uncertainty(&model, &subset, 1000, 1).unwrap();
    let long = estimate_uncertainty(&model, &subset, 4000, 2).unwrap();
    for (s, l) in short.records.iter().zip(&long.records) {
        for t in 0..s.mean.len() {
            // Standard error of a 1000-pass mean is sd / sqrt(1000).
            let tol = 5.0 * (s.sd[t].max(l.sd[t]) / 1000f64.sqrt()) + 1e-12;
            assert!((s.mean[t] - l.mean[t]).abs() <= tol, "{} {t}", s.essay_id);
            assert!((s.sd[t] - l.sd[t]).abs() <= 0.15 * l.sd[t] + 1e-12);
        }
    }
}

#[test]
fn empty_inputs_rejected() {
    let (_, train_set, dev) = trained_base(14);
    let mut m = model_for(&train_set, 0.1, 15);
    let empty = train_set.subset(&[]);
    let w = LossWeights::balance(&train_set.traits);
    assert!(train(&mut m, &empty, &dev, &w, &quick_train_config(0)).is_err());
    assert!(train(&mut m, &train_set, &empty, &w, &quick_train_config(0)).is_err());
}
