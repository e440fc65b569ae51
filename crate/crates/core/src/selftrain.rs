//! Uncertainty-aware self-training.
//!
//! Unlabeled essays are scored with `T` dropout-active forward passes; the
//! per-trait population standard deviation of those passes is the essay's
//! uncertainty, averaged over its traits. Essays are binned by predicted
//! score and the least uncertain few of each bin become pseudo-labeled
//! training data for one fresh model.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::OVERALL;
use crate::error::{Error, Result};
use crate::model::{train, DropoutMode, LossWeights, ModelConfig, TrainConfig, TrainLog, TrainingData, TraitModel};
use crate::rng::{derive_seed, fnv1a, Rng};
use rand::SeedableRng;

/// Anything that scores feature rows, deterministically or with dropout.
pub trait Predictor: Sync {
    fn traits(&self) -> &[String];
    fn dropout_rate(&self) -> f64;
    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
    /// One stochastic pass; `rngs` holds one stream per row.
    fn predict_stochastic(&self, x: ArrayView2<'_, f64>, rngs: &mut [Rng]) -> Result<Array2<f64>>;
}

impl Predictor for TraitModel {
    fn traits(&self) -> &[String] {
        &self.config.traits
    }

    fn dropout_rate(&self) -> f64 {
        self.config.dropout
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        TraitModel::predict(self, x)
    }

    fn predict_stochastic(&self, x: ArrayView2<'_, f64>, rngs: &mut [Rng]) -> Result<Array2<f64>> {
        self.forward(x, DropoutMode::PerRow(rngs))
    }
}

/// Population standard deviation (divisor `T`) of repeated predictions.
///
/// Deviations are taken relative to the first pass, so identical passes give
/// exactly zero rather than rounding residue from the mean.
pub fn mc_std(passes: &[f64]) -> f64 {
    let Some(&first) = passes.first() else {
        return 0.0;
    };
    let t = passes.len() as f64;
    let shifted: Vec<f64> = passes.iter().map(|y| y - first).collect();
    let mean = shifted.iter().sum::<f64>() / t;
    (shifted.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / t).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub essay_id: String,
    /// Mean prediction per trait (model trait order).
    pub mean: Vec<f64>,
    /// Standard deviation per trait.
    pub sd: Vec<f64>,
    /// Mean of `sd` over the traits scored for the essay's prompt.
    pub uncertainty: f64,
    pub passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEstimate {
    pub traits: Vec<String>,
    pub records: Vec<UncertaintyRecord>,
}

impl UncertaintyEstimate {
    pub fn means(&self) -> Array2<f64> {
        let t = self.traits.len();
        Array2::from_shape_fn((self.records.len(), t), |(i, j)| self.records[i].mean[j])
    }

    pub fn is_zero_variance(&self) -> bool {
        self.records.iter().all(|r| r.uncertainty == 0.0)
    }
}

const CHUNK: usize = 128;

/// MC-dropout estimate over the rows of `data`, with `passes` stochastic
/// forward passes per essay. Each essay draws its masks from a stream keyed
/// by `(seed, essay_id)`, so results do not depend on batching.
pub fn estimate_uncertainty<P: Predictor + ?Sized>(
    predictor: &P,
    data: &TrainingData,
    passes: usize,
    seed: u64,
) -> Result<UncertaintyEstimate> {
    if passes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 dropout passes, got {passes}")));
    }
    let n_traits = predictor.traits().len();
    let rows: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<Vec<UncertaintyRecord>> = rows
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<Vec<UncertaintyRecord>> {
            let x = data.features.select(Axis(0), chunk);
            let mut rngs: Vec<Rng> = chunk
                .iter()
                .map(|&i| Rng::seed_from_u64(derive_seed(seed, "mc", fnv1a(data.ids[i].as_bytes()))))
                .collect();
            let outputs = (0..passes)
                .map(|_| predictor.predict_stochastic(x.view(), &mut rngs))
                .collect::<Result<Vec<_>>>()?;
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(r, &i)| {
                    let active = active_traits(data, i, n_traits);
                    let mut mean = Vec::with_capacity(n_traits);
                    let mut sd = Vec::with_capacity(n_traits);
                    for t in 0..n_traits {
                        let ys: Vec<f64> = outputs.iter().map(|o| o[[r, t]]).collect();
                        mean.push(ys.iter().sum::<f64>() / passes as f64);
                        sd.push(mc_std(&ys));
                    }
                    let uncertainty = active.iter().map(|&t| sd[t]).sum::<f64>() / active.len().max(1) as f64;
                    UncertaintyRecord {
                        essay_id: data.ids[i].clone(),
                        mean,
                        sd,
                        uncertainty,
                        passes,
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(UncertaintyEstimate {
        traits: predictor.traits().to_vec(),
        records: chunks.into_iter().flatten().collect(),
    })
}

fn active_traits(data: &TrainingData, row: usize, n_traits: usize) -> Vec<usize> {
    let ranges = &data.group_ranges[data.groups[row]].ranges;
    (0..n_traits).filter(|&t| ranges.get(t).is_some_and(Option::is_some)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub essay_id: String,
    /// Normalized pseudo-scores, model trait order.
    pub scores: Vec<f64>,
    pub bin: usize,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub lower: f64,
    pub upper: f64,
    pub candidates: usize,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeledSet {
    pub traits: Vec<String>,
    pub labels: Vec<PseudoLabel>,
    pub bins: Vec<BinSummary>,
    pub n_bins: usize,
    pub per_bin: usize,
    pub binning_trait: String,
    /// Where the pseudo-scores came from, e.g. the producing stage.
    pub source: String,
    /// True when the pseudo-scores were score-aligned before selection.
    pub aligned: bool,
}

impl PseudoLabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Equal-width bins over the observed range of the binning trait's mean
/// prediction; from each bin the `per_bin` least uncertain records are kept
/// (ties by essay id). Sparse bins contribute fewer.
pub fn select_balanced(
    estimate: &UncertaintyEstimate,
    n_bins: usize,
    per_bin: usize,
    binning_trait: &str,
) -> Result<PseudoLabeledSet> {
    if estimate.records.is_empty() {
        return Err(Error::EmptyInput("uncertainty records"));
    }
    if n_bins == 0 || per_bin == 0 {
        return Err(Error::InvalidArgument("bins and per-bin count must be at least 1".into()));
    }
    let col = estimate
        .traits
        .iter()
        .position(|t| t == binning_trait)
        .ok_or_else(|| Error::TraitMismatch(format!("unknown binning trait `{binning_trait}`")))?;
    let values: Vec<f64> = estimate.records.iter().map(|r| r.mean[col]).collect();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let bin_of = |v: f64| -> usize {
        if width <= 0.0 {
            0
        } else {
            (((v - lo) / width).floor() as usize).min(n_bins - 1)
        }
    };
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for (i, &v) in values.iter().enumerate() {
        members[bin_of(v)].push(i);
    }
    let mut labels = Vec::new();
    let mut bins = Vec::with_capacity(n_bins);
    for (b, idx) in members.iter_mut().enumerate() {
        idx.sort_by(|&x, &y| {
            let (rx, ry) = (&estimate.records[x], &estimate.records[y]);
            rx.uncertainty
                .total_cmp(&ry.uncertainty)
                .then_with(|| rx.essay_id.cmp(&ry.essay_id))
        });
        let take = idx.len().min(per_bin);
        for &i in &idx[..take] {
            let r = &estimate.records[i];
            labels.push(PseudoLabel {
                essay_id: r.essay_id.clone(),
                scores: r.mean.clone(),
                bin: b,
                uncertainty: r.uncertainty,
            });
        }
        bins.push(BinSummary {
            lower: lo + width * b as f64,
            upper: if b + 1 == n_bins { hi } else { lo + width * (b + 1) as f64 },
            candidates: idx.len(),
            selected: take,
        });
    }
    Ok(PseudoLabeledSet {
        traits: estimate.traits.clone(),
        labels,
        bins,
        n_bins,
        per_bin,
        binning_trait: binning_trait.to_string(),
        source: String::new(),
        aligned: false,
    })
}

/// Training rows for the selected pseudo-labels, taken from `pool`.
pub fn pseudo_training_data(set: &PseudoLabeledSet, pool: &TrainingData) -> Result<TrainingData> {
    let rows: Vec<usize> = set
        .labels
        .iter()
        .map(|l| {
            pool.ids
                .iter()
                .position(|id| id == &l.essay_id)
                .ok_or_else(|| Error::InvalidArgument(format!("pseudo-labeled essay `{}` not in pool", l.essay_id)))
        })
        .collect::<Result<_>>()?;
    let mut data = pool.subset(&rows);
    let n_traits = data.traits.len();
    for (r, label) in set.labels.iter().enumerate() {
        let active = active_traits(&data, r, n_traits);
        for t in 0..n_traits {
            let on = active.contains(&t);
            data.targets[[r, t]] = if on { label.scores[t] } else { 0.0 };
            data.mask[[r, t]] = if on { 1.0 } else { 0.0 };
        }
    }
    Ok(data)
}

/// Trains one freshly initialized model on labeled plus pseudo-labeled rows.
pub fn self_train(
    config: &ModelConfig,
    train_config: &TrainConfig,
    labeled: &TrainingData,
    dev: &TrainingData,
    pseudo: &TrainingData,
    weights: &LossWeights,
    seed: u64,
) -> Result<(TraitModel, TrainLog)> {
    let labeled_ids: HashSet<&str> = labeled.ids.iter().chain(&dev.ids).map(String::as_str).collect();
    if let Some(id) = pseudo.ids.iter().find(|id| labeled_ids.contains(id.as_str())) {
        return Err(Error::PseudoLabelOverlap(id.clone()));
    }
    let augmented = labeled.concat(pseudo)?;
    let mut model = TraitModel::new(config.clone(), derive_seed(seed, "ust/init", 0))?;
    let cfg = TrainConfig {
        seed: derive_seed(seed, "ust/train", 0),
        ..train_config.clone()
    };
    let log = train(&mut model, &augmented, dev, weights, &cfg)?;
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyGroupReport {
    pub k: usize,
    /// Mean QWK over traits for the k most uncertain essays.
    pub top: f64,
    pub all: f64,
    /// Mean QWK over traits for the k least uncertain essays.
    pub bottom: f64,
    /// Mean QWK over traits for the balanced selection.
    pub balanced: f64,
    pub balanced_count: usize,
    /// Every essay had zero uncertainty; groups then differ only by id order.
    pub zero_variance: bool,
}

/// QWK of MC-mean predictions within uncertainty groups of a scored set.
pub fn uncertainty_group_report<P: Predictor + ?Sized>(
    predictor: &P,
    eval: &TrainingData,
    k: usize,
    passes: usize,
    n_bins: usize,
    seed: u64,
) -> Result<UncertaintyGroupReport> {
    if k == 0 || k > eval.len() {
        return Err(Error::InvalidArgument(format!("group size {k} for {} essays", eval.len())));
    }
    let estimate = estimate_uncertainty(predictor, eval, passes, seed)?;
    uncertainty_groups(&estimate, eval, k, n_bins)
}

/// Group QWKs from an existing estimate over the rows of `eval`.
pub fn uncertainty_groups(
    estimate: &UncertaintyEstimate,
    eval: &TrainingData,
    k: usize,
    n_bins: usize,
) -> Result<UncertaintyGroupReport> {
    let means = estimate.means();
    let mut order: Vec<usize> = (0..estimate.records.len()).collect();
    order.sort_by(|&x, &y| {
        let (rx, ry) = (&estimate.records[x], &estimate.records[y]);
        rx.uncertainty
            .total_cmp(&ry.uncertainty)
            .then_with(|| rx.essay_id.cmp(&ry.essay_id))
    });
    let bottom: Vec<usize> = order[..k].to_vec();
    let mut top: Vec<usize> = order[order.len() - k..].to_vec();
    top.reverse();
    let balanced_set = select_balanced(estimate, n_bins, (k / n_bins.max(1)).max(1), OVERALL)?;
    let balanced: Vec<usize> = balanced_set
        .labels
        .iter()
        .map(|l| eval.ids.iter().position(|id| *id == l.essay_id).expect("estimate covers eval"))
        .collect();
    let all: Vec<usize> = (0..eval.len()).collect();
    let score = |rows: &[usize]| -> Result<f64> { Ok(eval.evaluate_rows(&means, rows)?.grand_average()) };
    Ok(UncertaintyGroupReport {
        k,
        top: score(&top)?,
        all: score(&all)?,
        bottom: score(&bottom)?,
        balanced: score(&balanced)?,
        balanced_count: balanced.len(),
        zero_variance: estimate.is_zero_variance(),
    })
}
