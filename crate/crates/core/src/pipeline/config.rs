use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::adapt::LoraConfig;
use crate::calibrate::SubsetMode;
use crate::corpus::{SplitPolicy, OVERALL};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One model per prompt.
    #[default]
    Stl,
    /// One model over all prompts, with a prompt one-hot appended to the
    /// features.
    Mtl,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stl" => Ok(Mode::Stl),
            "mtl" => Ok(Mode::Mtl),
            _ => Err(Error::Config(format!("mode `{s}` (expected `stl` or `mtl`)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Single,
    /// Several seeded trainings; the best on dev is kept.
    FiveRuns,
    /// Bagging over bootstrap resamples of the training set.
    Ensemble,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Strategy::Single),
            "five_runs" | "five-runs" => Ok(Strategy::FiveRuns),
            "ensemble" => Ok(Strategy::Ensemble),
            _ => Err(Error::Config(format!(
                "strategy `{s}` (expected `single`, `five_runs` or `ensemble`)"
            ))),
        }
    }
}

/// Which enhancement stages run after base training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Stages {
    pub lora: bool,
    /// Score alignment of the stage-1/2 predictions; also aligns the
    /// pseudo-labels when self-training follows.
    pub sa: bool,
    pub ust: bool,
    pub sa_after_ust: bool,
    /// Re-run the adapter sweep on the self-trained model.
    pub lora_after_ust: bool,
}

impl std::str::FromStr for Stages {
    type Err = Error;

    /// Parses an ordered list such as `lora,sa,ust,sa`; `none` disables all.
    fn from_str(s: &str) -> Result<Self> {
        let mut st = Stages::default();
        if s.trim() == "none" || s.trim().is_empty() {
            return Ok(st);
        }
        for part in s.split(',').map(str::trim) {
            match part {
                "lora" if st.ust => st.lora_after_ust = true,
                "lora" => st.lora = true,
                "sa" if st.ust => st.sa_after_ust = true,
                "sa" => st.sa = true,
                "ust" => st.ust = true,
                _ => return Err(Error::Config(format!("unknown stage `{part}`"))),
            }
        }
        Ok(st)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub hidden: usize,
    pub head_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            hidden: 128,
            head_hidden: 32,
            dropout: 0.1,
        }
    }
}

/// Stage-1 loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha_overall: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha_overall: 0.7,
            alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub percent: f64,
    pub mode: SubsetMode,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            percent: 5.0,
            mode: SubsetMode::Independent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfTrainConfig {
    /// Dropout-active forward passes per essay.
    pub passes: usize,
    pub bins: usize,
    pub per_bin: usize,
    pub binning_trait: String,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        SelfTrainConfig {
            passes: 10,
            bins: 8,
            per_bin: 32,
            binning_trait: OVERALL.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub runs: usize,
    pub members: usize,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig { runs: 5, members: 4 }
    }
}

/// Uncertainty-group diagnostic on the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticConfig {
    pub k: usize,
    pub bins: usize,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        DiagnosticConfig { k: 256, bins: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema: PathBuf,
    pub corpus: PathBuf,
    pub mode: Mode,
    #[serde(serialize_with = "ser_display", deserialize_with = "de_from_str")]
    pub split: SplitPolicy,
    /// Seed of the frozen test split, shared by every training seed.
    pub split_seed: u64,
    pub seeds: Vec<u64>,
    pub strategy: Strategy,
    /// Also report each stage applied alone on top of the base model.
    pub ablation: bool,
    pub stages: Stages,
    pub encoder: EncoderConfig,
    pub model: ModelDims,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub lora: LoraConfig,
    pub align: AlignConfig,
    pub selftrain: SelfTrainConfig,
    pub ensemble: StrategyConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<DiagnosticConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema: PathBuf::new(),
            corpus: PathBuf::new(),
            mode: Mode::Stl,
            split: SplitPolicy::Full,
            split_seed: 0,
            seeds: vec![0],
            strategy: Strategy::Single,
            ablation: false,
            stages: Stages::default(),
            encoder: EncoderConfig::default(),
            model: ModelDims::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            lora: LoraConfig::default(),
            align: AlignConfig::default(),
            selftrain: SelfTrainConfig::default(),
            ensemble: StrategyConfig::default(),
            diagnostic: None,
        }
    }
}

fn ser_display<S: Serializer>(v: &SplitPolicy, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn de_from_str<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<SplitPolicy, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    /// Loads a TOML config; relative data paths resolve against the config
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.schema, &mut config.corpus] {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.seeds.is_empty() {
            return fail("seed list is empty");
        }
        if self.stages.sa_after_ust && !self.stages.ust {
            return fail("score alignment after self-training requires the self-training stage");
        }
        if self.stages.lora_after_ust && !self.stages.ust {
            return fail("adapter sweep after self-training requires the self-training stage");
        }
        if self.stages.ust && self.split == SplitPolicy::Full {
            return fail("self-training needs an unlabeled pool; use a K-data split");
        }
        if !(self.align.percent > 0.0 && self.align.percent <= 100.0) {
            return fail("alignment percent must lie in (0, 100]");
        }
        if self.selftrain.passes < 2 {
            return fail("self-training needs at least 2 dropout passes");
        }
        if self.selftrain.bins == 0 || self.selftrain.per_bin == 0 {
            return fail("bins and per-bin count must be positive");
        }
        if self.ensemble.runs == 0 || self.ensemble.members == 0 {
            return fail("run and member counts must be positive");
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.loss.alpha_overall) || self.loss.alpha < 0.0 {
            return fail("loss weights out of range");
        }
        if let Some(d) = &self.diagnostic {
            if d.k == 0 || d.bins == 0 {
                return fail("diagnostic group size and bins must be positive");
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
