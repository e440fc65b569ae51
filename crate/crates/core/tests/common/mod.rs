//! Helpers shared by the integration suites.
#![allow(dead_code)]

use aes_core::adapt::{attach, LayerSelector, LoraConfig};
use aes_core::corpus::OVERALL;
use aes_core::model::{gradients, loss, LossWeights, ModelConfig, TrainingData, TraitModel};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn names(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random features in [-1, 1] and random targets in (0, 1), with one
/// masked-out cell per trait column to exercise masking.
pub fn random_batch(rows: usize, dim: usize, traits: &[String], seed: u64) -> TrainingData {
    let mut r = rng(seed);
    let x = Array2::from_shape_fn((rows, dim), |_| r.random_range(-1.0..1.0));
    let mut data = TrainingData::constant_targets(x, traits, 0.5);
    data.targets.mapv_inplace(|_| r.random_range(0.05..0.95));
    for t in 0..traits.len() {
        data.mask[[t % rows, t]] = 0.0;
    }
    data
}

pub fn tiny_model(traits: &[String], dim: usize, seed: u64) -> TraitModel {
    TraitModel::new(
        ModelConfig {
            input_dim: dim,
            hidden: 5,
            head_hidden: 3,
            dropout: 0.1,
            traits: traits.to_vec(),
        },
        seed,
    )
    .unwrap()
}

/// Attaches adapters to every layer and randomizes `B` so that gradients
/// reach `A` as well.
pub fn with_random_adapters(model: &mut TraitModel, rank: usize, seed: u64) {
    let config = LoraConfig {
        rank,
        alpha: 2.0 * rank as f64,
        dropout: 0.05,
        layers: LayerSelector::All,
    };
    attach(model, &config, seed).unwrap();
    let mut r = rng(seed ^ 0xb);
    for layer in model.layers_mut() {
        let lora = layer.adapter.as_mut().unwrap();
        lora.b.mapv_inplace(|_| r.random_range(-0.5..0.5));
    }
}

#[derive(Debug, Clone)]
pub struct FdResult {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

pub fn loss_of(model: &TraitModel, data: &TrainingData, weights: &LossWeights) -> f64 {
    let pred = model.predict(data.features.view()).unwrap();
    loss(&pred, &data.targets, &data.mask, weights, model.traits()).unwrap()
}

/// Central finite differences on up to `per_tensor` coordinates of every
/// parameter tensor (frozen ones included).
pub fn finite_differences(
    model: &TraitModel,
    data: &TrainingData,
    weights: &LossWeights,
    h: f64,
    per_tensor: usize,
) -> Vec<FdResult> {
    let grads = gradients(model, data, weights).unwrap();
    let names: Vec<String> = model.parameters().into_iter().map(|p| p.0).collect();
    let mut out = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let analytic = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
        let len = analytic.len();
        let step = (len / per_tensor).max(1);
        for i in (0..len).step_by(step).take(per_tensor) {
            let mut m = model.clone();
            m.parameters_mut()[k].values[i] += h;
            let up = loss_of(&m, data, weights);
            m.parameters_mut()[k].values[i] -= 2.0 * h;
            let down = loss_of(&m, data, weights);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            out.push(FdResult {
                tensor: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel,
            });
        }
    }
    out
}

pub fn overall_traits() -> Vec<String> {
    names(&[OVERALL, "content", "organization"])
}

/// QWK from pairwise sums: observed disagreement over essay pairs, expected
/// disagreement over every (gold, pred) cross pair. No matrices involved.
pub fn qwk_oracle(gold: &[i64], pred: &[i64], min: i64, max: i64) -> f64 {
    let n = (max - min + 1) as f64;
    let w = |a: i64, b: i64| ((a - b) as f64).powi(2) / ((n - 1.0) * (n - 1.0));
    let observed: f64 = gold.iter().zip(pred).map(|(&g, &p)| w(g, p)).sum();
    let mut expected = 0.0;
    for &g in gold {
        for &p in pred {
            expected += w(g, p);
        }
    }
    expected /= gold.len() as f64;
    if expected == 0.0 {
        1.0
    } else {
        1.0 - observed / expected
    }
}

/// Gold scores on 2..=12, normalized, with the bell shape of a sum of two
/// uniforms.
pub fn bell_gold(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let q = 0.5 * (r.random::<f64>() + r.random::<f64>());
            (q * 10.0).round() / 10.0
        })
        .collect()
}

/// One shrunk-predictor trial: QWK on the test set before and after
/// alignment fitted on a separate dev set.
pub fn shrunk_trial(seed: u64) -> (f64, f64) {
    use aes_core::calibrate::{apply, fit};
    use aes_core::metrics::qwk_normalized;
    use aes_core::synth::shrunk_predictions;
    let mut r = rng(seed);
    let dev_gold = bell_gold(64, &mut r);
    let test_gold = bell_gold(300, &mut r);
    let dev_pred = shrunk_predictions(&dev_gold, 0.02, &mut r);
    let test_pred = shrunk_predictions(&test_gold, 0.02, &mut r);
    let params = fit(&dev_gold, &dev_pred, &test_pred, 5.0).unwrap();
    let aligned = apply(&test_pred, &params);
    (
        qwk_normalized(&test_gold, &test_pred, 2, 12).unwrap(),
        qwk_normalized(&test_gold, &aligned, 2, 12).unwrap(),
    )
}

pub fn quick_train_config(seed: u64) -> aes_core::model::TrainConfig {
    aes_core::model::TrainConfig {
        optimizer: aes_core::model::AdamWConfig {
            lr: 5e-3,
            ..Default::default()
        },
        batch_size: 16,
        max_epochs: 30,
        patience: 5,
        seed,
    }
}

/// A base model trained on a small heteroscedastic feature corpus, with its
/// train and dev sets.
pub fn trained_base(seed: u64) -> (TraitModel, TrainingData, TrainingData) {
    use aes_core::synth::{heteroscedastic_data, HeteroConfig};
    let hc = HeteroConfig::default();
    let (train_set, _) = heteroscedastic_data(&hc, 160, seed, "train");
    let (dev, _) = heteroscedastic_data(&hc, 80, seed, "dev");
    let mut model = TraitModel::new(
        ModelConfig {
            input_dim: train_set.features.ncols(),
            hidden: 16,
            head_hidden: 8,
            dropout: 0.1,
            traits: train_set.traits.clone(),
        },
        seed,
    )
    .unwrap();
    aes_core::model::train(
        &mut model,
        &train_set,
        &dev,
        &LossWeights::balance(&train_set.traits),
        &quick_train_config(seed),
    )
    .unwrap();
    (model, train_set, dev)
}

/// Base (non-adapter) tensors by name.
pub fn base_tensors(model: &TraitModel) -> Vec<(String, Vec<f64>)> {
    model
        .parameters()
        .into_iter()
        .filter(|(n, _, _)| !n.ends_with(".lora_a") && !n.ends_with(".lora_b"))
        .map(|(n, v, _)| (n, v.to_vec()))
        .collect()
}
