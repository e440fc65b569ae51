//! Run configuration and stage orchestration.
//!
//! A run trains a base model per seed (single, best-of-runs or bagged),
//! optionally sweeps low-rank adapters, aligns scores, self-trains on
//! pseudo-labeled essays and aligns again. Each stage's test QWK becomes a
//! row of the run report; model and adapter selection only ever look at dev.

mod config;
mod data;
pub mod report;

pub use config::{
    AlignConfig, DiagnosticConfig, LossConfig, Mode, ModelDims, RunConfig, SelfTrainConfig, Stages, Strategy,
    StrategyConfig,
};
pub use data::{FeatureStore, Layout};
pub use report::{RunReport, SeedRecord, StageRow, StageSummary, UnitRecord};

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{two_stage_finetune, SweepOutcome, SweepTarget};
use crate::calibrate::{self, AlignmentParams, SubsetMode};
use crate::corpus::{full_split, ingest, k_split, Corpus, DatasetSplit, ScoreSchema, SplitPolicy};
use crate::encoder::ReferenceEncoder;
use crate::error::{Error, Result};
use crate::metrics::QwkReport;
use crate::model::{train, LossWeights, ModelCheckpoint, ModelConfig, TrainConfig, TrainLog, TrainingData, TraitModel};
use crate::rng::{derive_seed, rng_from, Rng};
use crate::selftrain::{
    estimate_uncertainty, pseudo_training_data, select_balanced, self_train, uncertainty_group_report, Predictor,
    UncertaintyGroupReport,
};

/// Mean of several models' continuous outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<TraitModel>,
}

impl Predictor for Ensemble {
    fn traits(&self) -> &[String] {
        self.members[0].traits()
    }

    fn dropout_rate(&self) -> f64 {
        self.members[0].config.dropout
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut sum = self.members[0].predict(x)?;
        for m in &self.members[1..] {
            sum += &m.predict(x)?;
        }
        Ok(sum / self.members.len() as f64)
    }

    fn predict_stochastic(&self, x: ArrayView2<'_, f64>, rngs: &mut [Rng]) -> Result<Array2<f64>> {
        let mut sum = self.members[0].predict_stochastic(x, rngs)?;
        for m in &self.members[1..] {
            sum += &m.predict_stochastic(x, rngs)?;
        }
        Ok(sum / self.members.len() as f64)
    }
}

/// The model behind a stage: one network or a bagged ensemble.
#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    Single(TraitModel),
    Ensemble(Ensemble),
}

impl Scorer {
    pub fn models(&self) -> Vec<&TraitModel> {
        match self {
            Scorer::Single(m) => vec![m],
            Scorer::Ensemble(e) => e.members.iter().collect(),
        }
    }

    fn predictor(&self) -> &dyn Predictor {
        match self {
            Scorer::Single(m) => m,
            Scorer::Ensemble(e) => e,
        }
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.predictor().predict(x)
    }
}

impl Predictor for Scorer {
    fn traits(&self) -> &[String] {
        self.predictor().traits()
    }

    fn dropout_rate(&self) -> f64 {
        self.predictor().dropout_rate()
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.predictor().predict(x)
    }

    fn predict_stochastic(&self, x: ArrayView2<'_, f64>, rngs: &mut [Rng]) -> Result<Array2<f64>> {
        self.predictor().predict_stochastic(x, rngs)
    }
}

/// One model- or adapter-selection decision; only dev scores are logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub stage: String,
    pub candidate: String,
    pub dev_qwk: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub stage: String,
    pub base_dev_qwk: f64,
    pub targets: Vec<(SweepTarget, f64)>,
    pub winner: SweepTarget,
    pub winner_dev_qwk: f64,
    /// False when no target beat the base model on dev and the base was kept.
    pub adopted: bool,
    pub per_trait_winners: Vec<(String, SweepTarget)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentAudit {
    pub stage: String,
    pub prompt: String,
    #[serde(rename = "trait")]
    pub trait_name: String,
    pub params: AlignmentParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoSummary {
    pub pool: usize,
    pub selected: usize,
    pub per_bin: Vec<usize>,
    pub aligned: bool,
    pub binning_trait: String,
    pub augmented_train: usize,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDigest {
    pub name: String,
    pub sha256: String,
}

/// Labeled and unlabeled partitions of one modelling unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitData {
    pub layout: Layout,
    pub train: TrainingData,
    pub dev: TrainingData,
    pub test: TrainingData,
    pub pool: TrainingData,
}

impl UnitData {
    pub fn build(layout: Layout, corpus: &Corpus, split: &DatasetSplit, features: &FeatureStore) -> Result<Self> {
        let keep = |ids: &[String]| -> Vec<String> {
            ids.iter()
                .filter(|id| {
                    corpus
                        .get(id)
                        .is_some_and(|e| layout.groups.iter().any(|g| g.name == e.prompt_id))
                })
                .cloned()
                .collect()
        };
        Ok(UnitData {
            train: layout.data(corpus, &keep(&split.train), features, true)?,
            dev: layout.data(corpus, &keep(&split.dev), features, true)?,
            test: layout.data(corpus, &keep(&split.test), features, true)?,
            pool: layout.data(corpus, &keep(&split.unlabeled), features, false)?,
            layout,
        })
    }
}

impl RunConfig {
    pub fn model_config(&self, layout: &Layout) -> ModelConfig {
        ModelConfig {
            input_dim: layout.input_dim(),
            hidden: self.model.hidden,
            head_hidden: self.model.head_hidden,
            dropout: self.model.dropout,
            traits: layout.traits.clone(),
        }
    }

    pub fn loss_weights(&self, traits: &[String]) -> LossWeights {
        LossWeights::uniform(traits, self.loss.alpha_overall, self.loss.alpha)
    }

    /// Splits for one training seed. The test partition depends only on
    /// `split_seed`, so every seed and stage is scored on the same essays.
    pub fn split_for(&self, corpus: &Corpus, seed: u64) -> Result<DatasetSplit> {
        let full = full_split(corpus, self.split_seed)?;
        match self.split {
            SplitPolicy::Full => Ok(full),
            SplitPolicy::KData { k } => k_split(corpus, seed, k, &full.test),
        }
    }
}

/// Trains one freshly initialized model; init and minibatch order derive
/// from `seed`.
pub fn train_single(
    config: &RunConfig,
    layout: &Layout,
    train_set: &TrainingData,
    dev: &TrainingData,
    seed: u64,
) -> Result<(TraitModel, TrainLog)> {
    let mut model = TraitModel::new(config.model_config(layout), derive_seed(seed, "base/init", 0))?;
    let cfg = TrainConfig {
        seed: derive_seed(seed, "base/train", 0),
        ..config.train.clone()
    };
    let log = train(&mut model, train_set, dev, &config.loss_weights(&layout.traits), &cfg)?;
    Ok((model, log))
}

/// Trains one model per seed and keeps the best on dev (earliest on ties).
pub fn best_of_runs(
    config: &RunConfig,
    layout: &Layout,
    train_set: &TrainingData,
    dev: &TrainingData,
    seeds: &[u64],
) -> Result<(TraitModel, Vec<SelectionEntry>)> {
    let runs: Vec<(TraitModel, TrainLog)> = seeds
        .par_iter()
        .map(|&s| train_single(config, layout, train_set, dev, s))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, (_, log)) in runs.iter().enumerate() {
        if log.best_dev_qwk > runs[best].1.best_dev_qwk {
            best = i;
        }
    }
    let log = runs
        .iter()
        .enumerate()
        .map(|(i, (_, l))| SelectionEntry {
            stage: "base".into(),
            candidate: format!("run{i}"),
            dev_qwk: l.best_dev_qwk,
            selected: i == best,
        })
        .collect();
    Ok((runs.into_iter().nth(best).expect("non-empty runs").0, log))
}

/// Bootstrap resample of `data` (with replacement, same size).
pub fn bootstrap(data: &TrainingData, rng: &mut Rng) -> TrainingData {
    let n = data.len();
    let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    data.subset(&rows)
}

/// Bagged ensemble: member `i` trains on a bootstrap resample drawn from
/// `resample_seeds[i]` (or on the full set when `None`).
pub fn bagged(
    config: &RunConfig,
    layout: &Layout,
    train_set: &TrainingData,
    dev: &TrainingData,
    member_seeds: &[u64],
    resample_seeds: Option<&[u64]>,
) -> Result<Ensemble> {
    let members = member_seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let data = match resample_seeds {
                Some(r) => bootstrap(train_set, &mut rng_from(r[i], "bootstrap", 0)),
                None => train_set.clone(),
            };
            train_single(config, layout, &data, dev, s).map(|(m, _)| m)
        })
        .collect::<Result<_>>()?;
    Ok(Ensemble { members })
}

fn base_scorer(config: &RunConfig, unit: &UnitData, seed: u64) -> Result<(Scorer, Vec<SelectionEntry>)> {
    match config.strategy {
        Strategy::Single => {
            let (m, log) = train_single(config, &unit.layout, &unit.train, &unit.dev, seed)?;
            let entry = SelectionEntry {
                stage: "base".into(),
                candidate: "run0".into(),
                dev_qwk: log.best_dev_qwk,
                selected: true,
            };
            Ok((Scorer::Single(m), vec![entry]))
        }
        Strategy::FiveRuns => {
            let seeds: Vec<u64> = (0..config.ensemble.runs as u64)
                .map(|i| if i == 0 { seed } else { derive_seed(seed, "five_runs", i) })
                .collect();
            let (m, log) = best_of_runs(config, &unit.layout, &unit.train, &unit.dev, &seeds)?;
            Ok((Scorer::Single(m), log))
        }
        Strategy::Ensemble => {
            let n = config.ensemble.members as u64;
            let members: Vec<u64> = (0..n).map(|i| derive_seed(seed, "ensemble/member", i)).collect();
            let resample: Vec<u64> = (0..n).map(|i| derive_seed(seed, "ensemble/bootstrap", i)).collect();
            let e = bagged(config, &unit.layout, &unit.train, &unit.dev, &members, Some(&resample))?;
            let log = e
                .members
                .iter()
                .enumerate()
                .map(|(i, m)| -> Result<SelectionEntry> {
                    Ok(SelectionEntry {
                        stage: "base".into(),
                        candidate: format!("member{i}"),
                        dev_qwk: unit.dev.mean_qwk(&m.predict(unit.dev.features.view())?)?,
                        selected: true,
                    })
                })
                .collect::<Result<_>>()?;
            Ok((Scorer::Ensemble(e), log))
        }
    }
}

fn sweep_model(
    config: &RunConfig,
    model: &TraitModel,
    unit: &UnitData,
    seed: u64,
    stage: &str,
) -> Result<(TraitModel, SweepSummary)> {
    let outcome: SweepOutcome = two_stage_finetune(model, &unit.train, &unit.dev, &config.lora, &config.train, seed)?;
    let adopted = outcome.improves_on_base();
    let mut out = model.clone();
    if adopted {
        outcome.best.apply(&mut out)?;
    }
    let summary = SweepSummary {
        stage: stage.into(),
        base_dev_qwk: outcome.base_dev_qwk,
        targets: outcome.entries.iter().map(|e| (e.target.clone(), e.dev_qwk)).collect(),
        winner: outcome.best.target.clone(),
        winner_dev_qwk: outcome.best.dev_qwk,
        adopted,
        per_trait_winners: outcome.per_trait_winners.clone(),
    };
    Ok((out, summary))
}

/// Runs the adapter sweep on every model of the scorer.
fn sweep_scorer(config: &RunConfig, scorer: &Scorer, unit: &UnitData, seed: u64, stage: &str) -> Result<(Scorer, Vec<SweepSummary>)> {
    let label = format!("{stage}/lora");
    match scorer {
        Scorer::Single(m) => {
            let (m, s) = sweep_model(config, m, unit, derive_seed(seed, &label, 0), stage)?;
            Ok((Scorer::Single(m), vec![s]))
        }
        Scorer::Ensemble(e) => {
            let (members, summaries) = e
                .members
                .iter()
                .enumerate()
                .map(|(i, m)| sweep_model(config, m, unit, derive_seed(seed, &label, i as u64), stage))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            Ok((Scorer::Ensemble(Ensemble { members }), summaries))
        }
    }
}

/// Aligns `target_pred` cell by cell ((prompt, trait) pairs) using dev gold
/// and dev predictions. Cells without dev or target rows are left as is.
pub fn align_cells(
    dev: &TrainingData,
    dev_pred: &Array2<f64>,
    target: &TrainingData,
    target_pred: &Array2<f64>,
    percent: f64,
    mode: SubsetMode,
) -> Result<(Array2<f64>, Vec<(String, String, AlignmentParams)>)> {
    let mut out = target_pred.clone();
    let mut params = Vec::new();
    for (g, group) in target.group_ranges.iter().enumerate() {
        for (t, range) in group.ranges.iter().enumerate() {
            if range.is_none() {
                continue;
            }
            let dev_rows: Vec<usize> = (0..dev.len())
                .filter(|&i| dev.groups[i] == g && dev.mask[[i, t]] > 0.0)
                .collect();
            let rows: Vec<usize> = (0..target.len())
                .filter(|&i| target.groups[i] == g && target.mask[[i, t]] > 0.0)
                .collect();
            if dev_rows.is_empty() || rows.is_empty() {
                continue;
            }
            let gold: Vec<f64> = dev_rows.iter().map(|&i| dev.targets[[i, t]]).collect();
            let dp: Vec<f64> = dev_rows.iter().map(|&i| dev_pred[[i, t]]).collect();
            let tp: Vec<f64> = rows.iter().map(|&i| target_pred[[i, t]]).collect();
            let p = calibrate::fit_with_mode(&gold, &dp, &tp, percent, mode)?;
            for (&i, v) in rows.iter().zip(calibrate::apply(&tp, &p)) {
                out[[i, t]] = v;
            }
            params.push((group.name.clone(), target.traits[t].clone(), p));
        }
    }
    Ok((out, params))
}

fn digest(model: &TraitModel, config: &RunConfig, name: String, dir: Option<&Path>) -> Result<CheckpointDigest> {
    let mut ckpt = ModelCheckpoint::new(model.clone(), Some(config.encoder.clone()), Some(config.train.clone()));
    ckpt.provenance.insert("stage".into(), name.clone());
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = dir {
        let path = dir.join(format!("{}.json", name.replace('/', "_")));
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(CheckpointDigest {
        name,
        sha256: config::hex(&Sha256::digest(&bytes)),
    })
}

struct Chain<'a> {
    config: &'a RunConfig,
    unit: &'a UnitData,
    record: UnitRecord,
}

impl Chain<'_> {
    fn has(&self, label: &str) -> bool {
        self.record.stages.iter().any(|r| r.label == label)
    }

    fn row(&mut self, label: &str, pred: &Array2<f64>) -> Result<()> {
        if self.has(label) {
            return Ok(());
        }
        let report = self.unit.test.evaluate(pred)?;
        self.record.stages.push(StageRow {
            label: label.into(),
            report,
        });
        Ok(())
    }

    fn audit(&mut self, stage: &str, params: Vec<(String, String, AlignmentParams)>) {
        for (prompt, trait_name, p) in params {
            if p.is_inverted() {
                self.record
                    .warnings
                    .push(format!("{stage}: alignment for {prompt}/{trait_name} is inverted (b < a)"));
            }
            self.record.alignment.push(AlignmentAudit {
                stage: stage.into(),
                prompt,
                trait_name,
                params: p,
            });
        }
    }

    /// Test predictions aligned with dev statistics of the same scorer.
    fn aligned_test(&mut self, scorer: &Scorer, stage: &str) -> Result<Array2<f64>> {
        let cfg = &self.config.align;
        let dev_pred = scorer.predict(self.unit.dev.features.view())?;
        let test_pred = scorer.predict(self.unit.test.features.view())?;
        let (aligned, params) = align_cells(&self.unit.dev, &dev_pred, &self.unit.test, &test_pred, cfg.percent, cfg.mode)?;
        self.audit(stage, params);
        Ok(aligned)
    }

    /// Pseudo-labels from the unlabeled pool, self-training of a fresh model.
    fn self_train(&mut self, scorer: &Scorer, align: bool, seed: u64, stage: &str) -> Result<TraitModel> {
        let cfg = self.config;
        let unit = self.unit;
        let st = &cfg.selftrain;
        if unit.pool.is_empty() {
            return Err(Error::InsufficientPool {
                prompt: unit.layout.unit_name(),
                required: 1,
                available: 0,
            });
        }
        let mut estimate = estimate_uncertainty(scorer, &unit.pool, st.passes, derive_seed(seed, "ust/mc", 0))?;
        if align {
            let dev_pred = scorer.predict(unit.dev.features.view())?;
            let means = estimate.means();
            let (aligned, params) = align_cells(&unit.dev, &dev_pred, &unit.pool, &means, cfg.align.percent, cfg.align.mode)?;
            for (i, r) in estimate.records.iter_mut().enumerate() {
                r.mean = aligned.row(i).to_vec();
            }
            self.audit(&format!("{stage}/pseudo"), params);
        }
        let mut set = select_balanced(&estimate, st.bins, st.per_bin, &st.binning_trait)?;
        set.aligned = align;
        set.source = format!("{}/seed{seed}", unit.layout.unit_name());
        let pseudo = pseudo_training_data(&set, &unit.pool)?;
        let (model, log) = self_train(
            &cfg.model_config(&unit.layout),
            &cfg.train,
            &unit.train,
            &unit.dev,
            &pseudo,
            &cfg.loss_weights(&unit.layout.traits),
            derive_seed(seed, stage, 0),
        )?;
        self.record.selection.push(SelectionEntry {
            stage: stage.into(),
            candidate: "retrained".into(),
            dev_qwk: log.best_dev_qwk,
            selected: true,
        });
        self.record.pseudo.push(PseudoSummary {
            pool: unit.pool.len(),
            selected: set.len(),
            per_bin: set.bins.iter().map(|b| b.selected).collect(),
            aligned: align,
            binning_trait: set.binning_trait.clone(),
            augmented_train: unit.train.len() + pseudo.len(),
            source: set.source.clone(),
        });
        Ok(model)
    }
}

/// Every stage for one unit and one seed.
pub fn run_unit(config: &RunConfig, unit: &UnitData, seed: u64, checkpoint_dir: Option<&Path>) -> Result<UnitRecord> {
    let st = config.stages;
    let name = unit.layout.unit_name();
    let mut chain = Chain {
        config,
        unit,
        record: UnitRecord {
            unit: name.clone(),
            sizes: [unit.train.len(), unit.dev.len(), unit.test.len(), unit.pool.len()],
            ..UnitRecord::default()
        },
    };
    let test_x = unit.test.features.view();

    let (base, selection) = base_scorer(config, unit, seed)?;
    chain.record.selection.extend(selection);
    let base_pred = base.predict(test_x)?;
    chain.row("base", &base_pred)?;
    let mut label = String::new();
    let push = |label: &mut String, part: &str| {
        if !label.is_empty() {
            label.push('+');
        }
        label.push_str(part);
        label.clone()
    };

    let mut current = base.clone();
    if st.lora {
        let (adapted, sweeps) = sweep_scorer(config, &base, unit, seed, "stage2")?;
        for s in &sweeps {
            for (target, dev) in &s.targets {
                chain.record.selection.push(SelectionEntry {
                    stage: "stage2".into(),
                    candidate: target.to_string(),
                    dev_qwk: *dev,
                    selected: s.adopted && *target == s.winner,
                });
            }
        }
        chain.record.sweeps.extend(sweeps);
        current = adapted;
        let l = push(&mut label, "lora");
        chain.row(&l, &current.predict(test_x)?)?;
    }
    if st.sa {
        let aligned = chain.aligned_test(&current, "sa")?;
        let l = push(&mut label, "sa");
        chain.row(&l, &aligned)?;
    }
    if st.ust {
        let model = chain.self_train(&current, st.sa, seed, "ust")?;
        current = Scorer::Single(model);
        if st.lora_after_ust {
            let (adapted, sweeps) = sweep_scorer(config, &current, unit, seed, "ust/stage2")?;
            chain.record.sweeps.extend(sweeps);
            current = adapted;
        }
        let l = push(&mut label, "ust");
        chain.row(&l, &current.predict(test_x)?)?;
        if st.sa_after_ust {
            let aligned = chain.aligned_test(&current, "ust/sa")?;
            let l = push(&mut label, "sa");
            chain.row(&l, &aligned)?;
        }
    }

    if config.ablation {
        if st.sa && !chain.has("sa") {
            let aligned = chain.aligned_test(&base, "ablation/sa")?;
            chain.row("sa", &aligned)?;
        }
        if st.ust && !chain.has("ust") {
            let model = chain.self_train(&base, false, seed, "ablation/ust")?;
            chain.row("ust", &model.predict(test_x)?)?;
        }
    }

    if let Some(d) = &config.diagnostic {
        let k = d.k.min(unit.test.len());
        let report: UncertaintyGroupReport = uncertainty_group_report(
            &base,
            &unit.test,
            k,
            config.selftrain.passes,
            d.bins,
            derive_seed(seed, "diagnostic", 0),
        )?;
        chain.record.uncertainty = Some(report);
    }

    let dir = checkpoint_dir.map(|d| d.join(format!("seed{seed}")));
    for (i, m) in base.models().into_iter().enumerate() {
        let d = digest(m, config, format!("{name}/base{i}"), dir.as_deref())?;
        chain.record.checkpoints.push(d);
    }
    if current != base {
        for (i, m) in current.models().into_iter().enumerate() {
            let d = digest(m, config, format!("{name}/final{i}"), dir.as_deref())?;
            chain.record.checkpoints.push(d);
        }
    }
    Ok(chain.record)
}

/// Builds every unit of a run: one per prompt (STL) or one pooled (MTL).
pub fn build_units(
    config: &RunConfig,
    schema: &ScoreSchema,
    corpus: &Corpus,
    features: &FeatureStore,
    seed: u64,
) -> Result<Vec<UnitData>> {
    let split = config.split_for(corpus, seed)?;
    split.check_disjoint()?;
    let layouts = match config.mode {
        Mode::Stl => schema
            .prompts
            .iter()
            .filter(|p| corpus.for_prompt(&p.id).next().is_some())
            .map(|p| Layout::stl(schema, &p.id, features.dim))
            .collect::<Result<Vec<_>>>()?,
        Mode::Mtl => vec![Layout::mtl(schema, features.dim)],
    };
    layouts
        .into_iter()
        .map(|l| UnitData::build(l, corpus, &split, features))
        .collect()
}

/// Runs a configuration on an in-memory corpus.
pub fn run_with(
    config: &RunConfig,
    schema: &ScoreSchema,
    corpus: &Corpus,
    checkpoint_dir: Option<&Path>,
) -> Result<RunReport> {
    config.validate()?;
    let encoder = ReferenceEncoder::new(config.encoder.clone());
    let features = FeatureStore::encode(&encoder, corpus);
    let runs: Vec<SeedRecord> = config
        .seeds
        .par_iter()
        .map(|&seed| -> Result<SeedRecord> {
            let units = build_units(config, schema, corpus, &features, seed)?;
            let units: Vec<UnitRecord> = units
                .par_iter()
                .map(|u| run_unit(config, u, seed, checkpoint_dir))
                .collect::<Result<_>>()?;
            Ok(SeedRecord::merge(seed, units))
        })
        .collect::<Result<_>>()?;
    RunReport::assemble(config, runs)
}

/// Loads schema and corpus from the config's paths and runs it.
pub fn run(config: &RunConfig, checkpoint_dir: Option<&Path>) -> Result<RunReport> {
    config.validate()?;
    let schema = ScoreSchema::load(&config.schema)?;
    let corpus = ingest(&config.corpus, &schema)?;
    run_with(config, &schema, &corpus, checkpoint_dir)
}

/// Merges per-unit stage reports into one report per label.
pub(crate) fn merge_rows(units: &[UnitRecord]) -> Vec<StageRow> {
    let mut rows: Vec<StageRow> = Vec::new();
    for u in units {
        for r in &u.stages {
            match rows.iter_mut().find(|x| x.label == r.label) {
                Some(x) => x.report.cells.extend(r.report.cells.iter().cloned()),
                None => rows.push(StageRow {
                    label: r.label.clone(),
                    report: QwkReport::single(r.report.cells.clone()),
                }),
            }
        }
    }
    rows
}
