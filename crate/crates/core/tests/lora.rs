mod common;

use aes_core::adapt::{attach, detach, two_stage_finetune, AdapterState, LayerSelector, LoraConfig, LoraLayer, SweepTarget};
use aes_core::model::{train, AdapterCheckpoint, LossWeights, TrainingData};
use aes_core::Error;
use common::*;
use ndarray::{array, Array2};
use rand::Rng;

fn small_lora(rank: usize) -> LoraConfig {
    LoraConfig {
        rank,
        alpha: rank as f64,
        dropout: 0.05,
        layers: LayerSelector::Default,
    }
}

fn random_inputs(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_fn((n, dim), |_| r.random_range(-3.0..3.0))
}

#[test]
fn attach_is_bit_exact_identity() {
    let (base, _, _) = trained_base(1);
    let x = random_inputs(100, base.config.input_dim, 2);
    let before = base.predict(x.view()).unwrap();
    for selector in [LayerSelector::Default, LayerSelector::All] {
        let mut adapted = base.clone();
        attach(&mut adapted, &LoraConfig { layers: selector, ..small_lora(8) }, 3).unwrap();
        assert_eq!(adapted.predict(x.view()).unwrap(), before);
    }
}

#[test]
fn stage_two_training_leaves_base_tensors_untouched() {
    let (base, train_set, dev) = trained_base(4);
    let frozen = base_tensors(&base);
    let mut adapted = base.clone();
    attach(&mut adapted, &small_lora(4), 5).unwrap();
    let weights = LossWeights::trait_focus(adapted.traits(), "content");
    train(&mut adapted, &train_set, &dev, &weights, &quick_train_config(6)).unwrap();
    assert_eq!(base_tensors(&adapted), frozen);
    assert!(adapted.layers().iter().any(|l| l.adapter.as_ref().is_some_and(|a| a.b.iter().any(|&v| v != 0.0))));

    let outcome = two_stage_finetune(&base, &train_set, &dev, &small_lora(4), &quick_train_config(7), 8).unwrap();
    assert_eq!(base_tensors(&base), frozen);
    let mut deployed = base.clone();
    outcome.best.apply(&mut deployed).unwrap();
    assert_eq!(base_tensors(&deployed), frozen);
}

#[test]
fn detach_restores_base_outputs() {
    let (base, train_set, dev) = trained_base(9);
    let x = random_inputs(50, base.config.input_dim, 10);
    let mut adapted = base.clone();
    attach(&mut adapted, &small_lora(4), 11).unwrap();
    train(&mut adapted, &train_set, &dev, &LossWeights::balance(base.traits()), &quick_train_config(12)).unwrap();
    assert_ne!(adapted.predict(x.view()).unwrap(), base.predict(x.view()).unwrap());
    let removed = detach(&mut adapted);
    assert_eq!(removed.len(), 1 + (base.traits().len() - 1));
    assert_eq!(adapted.predict(x.view()).unwrap(), base.predict(x.view()).unwrap());
}

#[test]
fn two_by_two_hand_example() {
    let lora = LoraLayer {
        a: array![[1.0, 1.0]],
        b: array![[1.0], [0.0]],
        rank: 1,
        alpha: 1.0,
        dropout: 0.0,
    };
    let w = array![[1.0, 0.0], [0.0, 1.0]];
    let x = array![1.0, 2.0];
    let y = (&w + &lora.delta_weight()).dot(&x);
    assert_eq!(y, array![4.0, 2.0]);
    assert_eq!(LoraLayer { rank: 512, alpha: 512.0, ..lora }.scale(), 1.0);
}

#[test]
fn adapter_checkpoint_round_trip() {
    let (base, train_set, dev) = trained_base(13);
    let outcome = two_stage_finetune(&base, &train_set, &dev, &small_lora(3), &quick_train_config(14), 15).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapter.json");
    AdapterCheckpoint::new(outcome.best.clone()).save(&path).unwrap();
    let loaded = AdapterCheckpoint::load(&path).unwrap();
    assert_eq!(loaded.adapter, outcome.best);
    let x = random_inputs(20, base.config.input_dim, 16);
    let (mut a, mut b) = (base.clone(), base.clone());
    outcome.best.apply(&mut a).unwrap();
    loaded.adapter.apply(&mut b).unwrap();
    assert_eq!(a.predict(x.view()).unwrap(), b.predict(x.view()).unwrap());
}

#[test]
fn sweep_covers_targets_in_order_and_is_deterministic() {
    let (base, train_set, dev) = trained_base(17);
    let cfg = quick_train_config(18);
    let one = two_stage_finetune(&base, &train_set, &dev, &small_lora(2), &cfg, 19).unwrap();
    let two = two_stage_finetune(&base, &train_set, &dev, &small_lora(2), &cfg, 19).unwrap();
    assert_eq!(one.best, two.best);
    let targets: Vec<String> = one.entries.iter().map(|e| e.target.to_string()).collect();
    assert_eq!(targets, ["balance", "overall", "content"]);
    let best = one.entries.iter().map(|e| e.dev_qwk).fold(f64::NEG_INFINITY, f64::max);
    let first = one.entries.iter().find(|e| e.dev_qwk == best).unwrap();
    assert_eq!(one.best.target, first.target, "ties go to the earlier target");
}

#[test]
fn single_trait_sweep_has_two_targets() {
    assert_eq!(
        SweepTarget::sweep(&names(&["overall"])),
        vec![SweepTarget::Balance, SweepTarget::Overall]
    );
    let eight = names(&["overall", "a", "b", "c", "d", "e", "f", "g"]);
    assert_eq!(SweepTarget::sweep(&eight).len(), 9);
}

#[test]
fn untrained_base_is_rejected() {
    let traits = names(&["overall", "content"]);
    let model = tiny_model(&traits, 4, 1);
    let data: TrainingData = random_batch(8, 4, &traits, 2);
    let err = two_stage_finetune(&model, &data, &data, &small_lora(2), &quick_train_config(1), 1).unwrap_err();
    assert!(matches!(err, Error::BaseNotTrained));
    assert!(AdapterState::from_model(&model, SweepTarget::Balance, 0.0).layers.is_empty());
}
