//! Low-rank adapters and the two-stage adapter sweep.
//!
//! An adapted dense layer computes `W·x + (alpha/r)·B·(A·dropout(x))` with
//! the base `W` frozen. `B` starts at zero, so attaching an adapter leaves
//! the model's outputs unchanged until the factors are trained.

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::OVERALL;
use crate::error::{Error, Result};
use crate::model::{train, LossWeights, TrainConfig, TrainLog, TrainingData, TraitModel};
use crate::rng::{derive_seed, rng_from, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraLayer {
    /// `r × in`.
    pub a: Array2<f64>,
    /// `out × r`.
    pub b: Array2<f64>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraLayer {
    /// `A ~ N(0, (1/r)²)`, `B = 0`.
    pub fn new(in_dim: usize, out_dim: usize, rank: usize, alpha: f64, dropout: f64, rng: &mut Rng) -> Self {
        let dist = Normal::new(0.0, 1.0 / rank as f64).expect("positive scale");
        LoraLayer {
            a: Array2::from_shape_fn((rank, in_dim), |_| dist.sample(rng)),
            b: Array2::zeros((out_dim, rank)),
            rank,
            alpha,
            dropout,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// The low-rank update `(alpha/r)·B·A`.
    pub fn delta_weight(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scale()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelector {
    /// The trunk and every trait head's hidden layer.
    Default,
    All,
    Named(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub layers: LayerSelector,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 512,
            alpha: 512.0,
            dropout: 0.05,
            layers: LayerSelector::Default,
        }
    }
}

fn selected_layers(model: &TraitModel, selector: &LayerSelector) -> Result<Vec<String>> {
    let ids: Vec<String> = model.layers().iter().map(|l| l.id.clone()).collect();
    Ok(match selector {
        LayerSelector::All => ids,
        LayerSelector::Default => ids
            .into_iter()
            .filter(|id| id == "trunk" || (id.starts_with("head.") && id.ends_with(".hidden")))
            .collect(),
        LayerSelector::Named(names) => {
            if let Some(missing) = names.iter().find(|n| !ids.contains(n)) {
                return Err(Error::UnknownLayer(missing.clone()));
            }
            names.clone()
        }
    })
}

/// Freezes every base layer and inserts fresh adapters into the selected
/// layers.
pub fn attach(model: &mut TraitModel, config: &LoraConfig, seed: u64) -> Result<()> {
    if config.rank == 0 {
        return Err(Error::Config("adapter rank must be at least 1".into()));
    }
    let targets = selected_layers(model, &config.layers)?;
    model.set_frozen(true);
    for (i, id) in targets.iter().enumerate() {
        let layer = model.layer_mut(id)?;
        let mut rng = rng_from(seed, "adapt/init", i as u64);
        layer.adapter = Some(LoraLayer::new(
            layer.in_dim(),
            layer.out_dim(),
            config.rank,
            config.alpha,
            config.dropout,
            &mut rng,
        ));
    }
    Ok(())
}

/// Removes every adapter, returning them by layer id.
pub fn detach(model: &mut TraitModel) -> Vec<(String, LoraLayer)> {
    model
        .layers_mut()
        .into_iter()
        .filter_map(|l| l.adapter.take().map(|a| (l.id.clone(), a)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SweepTarget {
    Balance,
    Overall,
    Trait(String),
}

impl std::fmt::Display for SweepTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepTarget::Balance => f.write_str("balance"),
            SweepTarget::Overall => f.write_str(OVERALL),
            SweepTarget::Trait(t) => f.write_str(t),
        }
    }
}

impl From<SweepTarget> for String {
    fn from(t: SweepTarget) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for SweepTarget {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Ok(match s.as_str() {
            "" => return Err(Error::InvalidArgument("empty sweep target".into())),
            "balance" => SweepTarget::Balance,
            OVERALL => SweepTarget::Overall,
            _ => SweepTarget::Trait(s),
        })
    }
}

impl SweepTarget {
    /// Sweep order: balance, overall, then each other trait.
    pub fn sweep(traits: &[String]) -> Vec<SweepTarget> {
        let mut v = vec![SweepTarget::Balance, SweepTarget::Overall];
        v.extend(traits.iter().skip(1).map(|t| SweepTarget::Trait(t.clone())));
        v
    }

    pub fn loss_weights(&self, traits: &[String]) -> LossWeights {
        match self {
            SweepTarget::Balance => LossWeights::balance(traits),
            SweepTarget::Overall => LossWeights::overall_focus(traits),
            SweepTarget::Trait(t) => LossWeights::trait_focus(traits, t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub layer: String,
    pub lora: LoraLayer,
}

/// Trained adapter factors and the sweep target that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    pub layers: Vec<AdapterEntry>,
    pub target: SweepTarget,
    pub dev_qwk: f64,
}

impl AdapterState {
    pub fn from_model(model: &TraitModel, target: SweepTarget, dev_qwk: f64) -> Self {
        AdapterState {
            layers: model
                .layers()
                .into_iter()
                .filter_map(|l| {
                    l.adapter.as_ref().map(|a| AdapterEntry {
                        layer: l.id.clone(),
                        lora: a.clone(),
                    })
                })
                .collect(),
            target,
            dev_qwk,
        }
    }

    /// Installs these adapters on `model`, freezing its base layers.
    pub fn apply(&self, model: &mut TraitModel) -> Result<()> {
        for entry in &self.layers {
            let layer = model.layer_mut(&entry.layer)?;
            if entry.lora.a.ncols() != layer.in_dim() || entry.lora.b.nrows() != layer.out_dim() {
                return Err(Error::DimensionMismatch {
                    expected: layer.in_dim(),
                    actual: entry.lora.a.ncols(),
                });
            }
        }
        model.set_frozen(true);
        for entry in &self.layers {
            model.layer_mut(&entry.layer)?.adapter = Some(entry.lora.clone());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub target: SweepTarget,
    pub dev_qwk: f64,
    /// Dev QWK per trait, averaged over prompts.
    pub trait_dev_qwk: Vec<(String, f64)>,
    pub log: TrainLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub best: AdapterState,
    pub base_dev_qwk: f64,
    pub entries: Vec<SweepEntry>,
    /// For every trait, the sweep target with the best dev QWK on it.
    pub per_trait_winners: Vec<(String, SweepTarget)>,
}

impl SweepOutcome {
    /// True when the best adapter beats the stage-1 model on dev.
    pub fn improves_on_base(&self) -> bool {
        self.best.dev_qwk > self.base_dev_qwk
    }
}

/// Second-stage adapter sweep over a trained base model.
///
/// For each target (balance, overall, then every other trait) fresh adapters
/// are attached to a copy of the frozen base, trained under that target's
/// loss weights with early stopping on dev, and scored on dev. The adapter
/// with the highest dev QWK wins; ties go to the earlier target.
pub fn two_stage_finetune(
    base: &TraitModel,
    train_set: &TrainingData,
    dev: &TrainingData,
    lora: &LoraConfig,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<SweepOutcome> {
    if !base.trained {
        return Err(Error::BaseNotTrained);
    }
    if base.layers().iter().any(|l| l.adapter.is_some()) {
        return Err(Error::Config("base model already carries adapters".into()));
    }
    let base_dev_qwk = dev.mean_qwk(&base.predict(dev.features.view())?)?;
    let targets = SweepTarget::sweep(base.traits());

    let entries: Vec<(SweepEntry, AdapterState)> = targets
        .par_iter()
        .enumerate()
        .map(|(i, target)| -> Result<_> {
            let mut model = base.clone();
            attach(&mut model, lora, derive_seed(seed, "adapt/attach", i as u64))?;
            let cfg = TrainConfig {
                seed: derive_seed(seed, "adapt/train", i as u64),
                ..train_config.clone()
            };
            let weights = target.loss_weights(model.traits());
            let log = train(&mut model, train_set, dev, &weights, &cfg)?;
            let report = dev.evaluate(&model.predict(dev.features.view())?)?;
            let dev_qwk = report.grand_average();
            let entry = SweepEntry {
                target: target.clone(),
                dev_qwk,
                trait_dev_qwk: report.trait_averages().into_iter().map(|(t, a)| (t, a.kappa)).collect(),
                log,
            };
            Ok((entry, AdapterState::from_model(&model, target.clone(), dev_qwk)))
        })
        .collect::<Result<_>>()?;

    let mut best_idx = 0;
    for (i, (e, _)) in entries.iter().enumerate() {
        if e.dev_qwk > entries[best_idx].0.dev_qwk {
            best_idx = i;
        }
    }
    let per_trait_winners = base
        .traits()
        .iter()
        .filter_map(|t| {
            let score = |e: &SweepEntry| e.trait_dev_qwk.iter().find(|(n, _)| n == t).map(|p| p.1);
            let mut winner: Option<(f64, &SweepTarget)> = None;
            for (e, _) in &entries {
                if let Some(s) = score(e) {
                    if winner.is_none_or(|(w, _)| s > w) {
                        winner = Some((s, &e.target));
                    }
                }
            }
            winner.map(|(_, target)| (t.clone(), target.clone()))
        })
        .collect();
    let best = entries[best_idx].1.clone();
    Ok(SweepOutcome {
        best,
        base_dev_qwk,
        entries: entries.into_iter().map(|(e, _)| e).collect(),
        per_trait_winners,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use ndarray::array;

    #[test]
    fn hand_computed_adapter_output() {
        let mut model = TraitModel::new(
            ModelConfig {
                input_dim: 2,
                hidden: 2,
                head_hidden: 1,
                dropout: 0.0,
                traits: vec![OVERALL.into()],
            },
            0,
        )
        .unwrap();
        model.trunk.weight = array![[1.0, 0.0], [0.0, 1.0]];
        model.trunk.bias = array![0.0, 0.0];
        model.trunk.adapter = Some(LoraLayer {
            a: array![[1.0, 1.0]],
            b: array![[1.0], [0.0]],
            rank: 1,
            alpha: 1.0,
            dropout: 0.0,
        });
        let eff = &model.trunk.weight + &model.trunk.adapter.as_ref().unwrap().delta_weight();
        assert_eq!(eff.dot(&array![1.0, 2.0]), array![4.0, 2.0]);
        // Through the forward pass: the trunk pre-activation is (4, 2).
        let out = model.predict(array![[1.0, 2.0]].view()).unwrap();
        let w = &model.overall.weight;
        let expect = 1.0 / (1.0 + (-(w[[0, 0]] * 4f64.tanh() + w[[0, 1]] * 2f64.tanh())).exp());
        assert!((out[[0, 0]] - expect).abs() < 1e-15);
    }

    #[test]
    fn scale_is_alpha_over_rank() {
        let mut rng = rng_from(0, "t", 0);
        assert_eq!(LoraLayer::new(4, 3, 512, 512.0, 0.05, &mut rng).scale(), 1.0);
        assert_eq!(LoraLayer::new(4, 3, 8, 16.0, 0.0, &mut rng).scale(), 2.0);
    }

    #[test]
    fn attach_selects_default_layers_and_freezes() {
        let mut model = TraitModel::new(
            ModelConfig {
                input_dim: 6,
                hidden: 4,
                head_hidden: 2,
                dropout: 0.1,
                traits: vec![OVERALL.into(), "content".into(), "voice".into()],
            },
            1,
        )
        .unwrap();
        let before = model.predict(array![[1.0, 0.0, -1.0, 2.0, 0.5, 0.0]].view()).unwrap();
        attach(&mut model, &LoraConfig { rank: 3, alpha: 6.0, ..Default::default() }, 2).unwrap();
        let adapted: Vec<&str> = model
            .layers()
            .into_iter()
            .filter(|l| l.adapter.is_some())
            .map(|l| l.id.as_str())
            .collect();
        assert_eq!(adapted, ["trunk", "head.content.hidden", "head.voice.hidden"]);
        assert!(model.layers().iter().all(|l| l.frozen));
        let after = model.predict(array![[1.0, 0.0, -1.0, 2.0, 0.5, 0.0]].view()).unwrap();
        assert_eq!(before, after);

        let err = attach(
            &mut model,
            &LoraConfig {
                layers: LayerSelector::Named(vec!["nope".into()]),
                ..Default::default()
            },
            0,
        );
        assert!(matches!(err, Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn sweep_targets_follow_trait_list() {
        let single = SweepTarget::sweep(&[OVERALL.to_string()]);
        assert_eq!(single, vec![SweepTarget::Balance, SweepTarget::Overall]);
        let eight: Vec<String> = std::iter::once(OVERALL.to_string())
            .chain((0..7).map(|i| format!("t{i}")))
            .collect();
        assert_eq!(SweepTarget::sweep(&eight).len(), 9);
        let json = serde_json::to_string(&SweepTarget::Trait("voice".into())).unwrap();
        assert_eq!(json, "\"voice\"");
        assert_eq!(serde_json::from_str::<SweepTarget>("\"balance\"").unwrap(), SweepTarget::Balance);
    }

    #[test]
    fn untrained_base_rejected() {
        let model = TraitModel::new(
            ModelConfig {
                input_dim: 2,
                traits: vec![OVERALL.into()],
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let data = TrainingData::constant_targets(array![[0.0, 1.0]], model.traits(), 0.5);
        let err = two_stage_finetune(&model, &data, &data, &LoraConfig::default(), &TrainConfig::default(), 0);
        assert!(matches!(err, Err(Error::BaseNotTrained)));
    }
}
