use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Mode;
use crate::corpus::{normalize_score, Corpus, ScoreSchema, OVERALL};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::model::{GroupRanges, TrainingData};

/// Encoded features per essay id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureStore {
    pub dim: usize,
    features: BTreeMap<String, Vec<f64>>,
}

impl FeatureStore {
    pub fn encode(encoder: &dyn Encoder, corpus: &Corpus) -> Self {
        let features = corpus
            .essays()
            .par_iter()
            .map(|e| (e.essay_id.clone(), encoder.encode(&e.text)))
            .collect();
        FeatureStore {
            dim: encoder.dim(),
            features,
        }
    }

    pub fn get(&self, essay_id: &str) -> Option<&[f64]> {
        self.features.get(essay_id).map(Vec::as_slice)
    }
}

/// Trait order, prompt groups and feature width for one modelling unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub mode: Mode,
    pub traits: Vec<String>,
    pub groups: Vec<GroupRanges>,
    pub encoder_dim: usize,
}

impl Layout {
    /// Single prompt: the prompt's own traits.
    pub fn stl(schema: &ScoreSchema, prompt_id: &str, encoder_dim: usize) -> Result<Self> {
        let prompt = schema.prompt(prompt_id)?;
        let traits: Vec<String> = prompt.trait_names().map(str::to_string).collect();
        Ok(Layout {
            mode: Mode::Stl,
            groups: vec![GroupRanges {
                name: prompt.id.clone(),
                ranges: prompt.traits.iter().map(|r| Some((r.min, r.max))).collect(),
            }],
            traits,
            encoder_dim,
        })
    }

    /// All prompts pooled; traits are the union in schema order.
    pub fn mtl(schema: &ScoreSchema, encoder_dim: usize) -> Self {
        let traits = schema.all_traits();
        let groups = schema
            .prompts
            .iter()
            .map(|p| GroupRanges {
                name: p.id.clone(),
                ranges: traits.iter().map(|t| p.range(t).map(|r| (r.min, r.max))).collect(),
            })
            .collect();
        Layout {
            mode: Mode::Mtl,
            traits,
            groups,
            encoder_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.mode {
            Mode::Stl => self.encoder_dim,
            Mode::Mtl => self.encoder_dim + self.groups.len(),
        }
    }

    pub fn unit_name(&self) -> String {
        match self.mode {
            Mode::Stl => self.groups[0].name.clone(),
            Mode::Mtl => "all".into(),
        }
    }

    /// Rows for `ids`. With `labeled`, targets are the normalized gold
    /// scores; otherwise targets are zero and the mask marks the traits the
    /// essay's prompt is scored on.
    pub fn data(&self, corpus: &Corpus, ids: &[String], features: &FeatureStore, labeled: bool) -> Result<TrainingData> {
        let n = ids.len();
        let t = self.traits.len();
        let dim = self.input_dim();
        let mut x = Array2::zeros((n, dim));
        let mut targets = Array2::zeros((n, t));
        let mut mask = Array2::zeros((n, t));
        let mut groups = Vec::with_capacity(n);
        for (i, id) in ids.iter().enumerate() {
            let essay = corpus
                .get(id)
                .ok_or_else(|| Error::InvalidArgument(format!("essay `{id}` not in corpus")))?;
            let g = self
                .groups
                .iter()
                .position(|gr| gr.name == essay.prompt_id)
                .ok_or_else(|| Error::UnknownPrompt(essay.prompt_id.clone()))?;
            let f = features
                .get(id)
                .ok_or_else(|| Error::InvalidArgument(format!("essay `{id}` was not encoded")))?;
            if f.len() != self.encoder_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.encoder_dim,
                    actual: f.len(),
                });
            }
            x.row_mut(i).as_slice_mut().expect("standard layout")[..f.len()].copy_from_slice(f);
            if self.mode == Mode::Mtl {
                x[[i, self.encoder_dim + g]] = 1.0;
            }
            for (j, range) in self.groups[g].ranges.iter().enumerate() {
                let Some((min, max)) = *range else { continue };
                mask[[i, j]] = 1.0;
                if labeled {
                    let score = essay
                        .gold_score(&self.traits[j])
                        .ok_or_else(|| Error::Unlabeled(id.clone()))?;
                    targets[[i, j]] = normalize_score(
                        score,
                        &crate::corpus::TraitRange {
                            name: self.traits[j].clone(),
                            min,
                            max,
                        },
                    );
                }
            }
            groups.push(g);
        }
        debug_assert_eq!(self.traits.first().map(String::as_str), Some(OVERALL));
        Ok(TrainingData {
            ids: ids.to_vec(),
            features: x,
            targets,
            mask,
            groups,
            group_ranges: self.groups.clone(),
            traits: self.traits.clone(),
        })
    }
}
