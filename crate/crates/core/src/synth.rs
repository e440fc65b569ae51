//! Synthetic corpora with known score generators.
//!
//! Essays are assembled from word lists so that every trait leaves a
//! measurable trace in the text: content drives essay length, organization
//! drives discourse connectives, word choice drives vocabulary, sentence
//! fluency drives sentence length and conventions drives capitalization and
//! punctuation errors. Gold scores are the latent trait qualities plus
//! label noise, rounded onto each trait's integer range.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Essay, PromptSchema, ScoreSchema, TraitRange, OVERALL};
use crate::error::Result;
use crate::model::{GroupRanges, TrainingData};
use crate::rng::{rng_from, Rng};

const BASIC: &[&str] = &[
    "the", "a", "it", "is", "was", "good", "bad", "people", "thing", "things", "go", "get", "make", "like", "very",
    "big", "small", "time", "day", "we", "they", "you", "can", "do", "have", "think", "lot", "some", "many", "more",
    "and", "but", "so", "then", "that", "this", "with", "for", "about", "really", "kids", "school", "home", "fun",
    "help", "use", "work", "play", "friends", "family",
];

const ADVANCED: &[&str] = &[
    "consequently", "perspective", "substantial", "demonstrate", "significant", "community", "technology",
    "communication", "beneficial", "detrimental", "interaction", "responsibility", "opportunity", "perception",
    "fundamental", "considerable", "development", "environment", "individuals", "relationship", "independence",
    "determination", "contribution", "appreciation", "circumstance", "accomplishment", "evidence", "analysis",
    "necessary", "particularly", "furthermore", "nevertheless", "remarkable", "consistent", "imagination",
    "experience", "knowledge", "influence", "encourage", "alternative",
];

const TOPIC: &[&str] = &[
    "computers", "internet", "library", "books", "research", "society", "online", "learning", "information",
    "education", "students", "teachers", "parents", "health", "exercise",
];

const CONNECTIVES: &[&str] = &[
    "First,", "Second,", "Furthermore,", "In addition,", "However,", "For example,", "Therefore,", "In conclusion,",
    "Moreover,", "Finally,",
];

/// Default prompt resembling an argumentative writing task.
pub fn default_prompt(id: &str) -> PromptSchema {
    let range = |name: &str, min, max| TraitRange {
        name: name.into(),
        min,
        max,
    };
    PromptSchema {
        id: id.into(),
        traits: vec![
            range(OVERALL, 2, 12),
            range("content", 1, 6),
            range("organization", 1, 6),
            range("word_choice", 1, 6),
            range("sentence_fluency", 1, 6),
            range("conventions", 1, 6),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub prompts: Vec<PromptSchema>,
    pub essays_per_prompt: usize,
    /// Standard deviation of label noise on the [0, 1] scale.
    pub label_noise: f64,
    /// Spread of each trait's quality around the essay's overall quality.
    pub trait_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            prompts: vec![default_prompt("P1")],
            essays_per_prompt: 600,
            label_noise: 0.15,
            trait_spread: 0.12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub schema: ScoreSchema,
    pub corpus: Corpus,
    /// Latent essay quality in [0, 1], keyed by essay id.
    pub quality: BTreeMap<String, f64>,
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn to_range(v: f64, range: &TraitRange) -> i64 {
    let raw = range.min as f64 + clip01(v) * range.span() as f64;
    (raw.round() as i64).clamp(range.min, range.max)
}

/// Latent trait qualities for one essay, keyed by trait name.
fn trait_qualities(prompt: &PromptSchema, quality: f64, spread: f64, rng: &mut Rng) -> BTreeMap<String, f64> {
    let normal = Normal::new(0.0, spread).expect("finite spread");
    let mut q: BTreeMap<String, f64> = prompt
        .trait_names()
        .filter(|t| *t != OVERALL)
        .map(|t| (t.to_string(), clip01(quality + normal.sample(rng))))
        .collect();
    let overall = if q.is_empty() {
        quality
    } else {
        q.values().sum::<f64>() / q.len() as f64
    };
    q.insert(OVERALL.into(), overall);
    q
}

/// Renders an essay whose surface statistics follow the trait qualities.
pub fn render_essay(q: &BTreeMap<String, f64>, rng: &mut Rng) -> String {
    let get = |t: &str| q.get(t).or_else(|| q.get(OVERALL)).copied().unwrap_or(0.5);
    let content = get("content");
    let organization = get("organization");
    let word_choice = get("word_choice");
    let fluency = get("sentence_fluency");
    let conventions = get("conventions");

    let sentences = 3 + (content * 14.0).round() as usize + rng.random_range(0..3);
    let mut out = Vec::with_capacity(sentences);
    for s in 0..sentences {
        let len = 4 + (fluency * 14.0).round() as usize + rng.random_range(0..4);
        let mut words: Vec<String> = Vec::with_capacity(len + 1);
        if rng.random::<f64>() < organization * 0.8 {
            words.push(CONNECTIVES[s % CONNECTIVES.len()].to_string());
        }
        for w in 0..len {
            let pool = if rng.random::<f64>() < word_choice * 0.6 {
                ADVANCED
            } else if rng.random::<f64>() < 0.1 + content * 0.3 {
                TOPIC
            } else {
                BASIC
            };
            let mut word = pool.choose(rng).expect("non-empty list").to_string();
            if w + 2 < len && rng.random::<f64>() < fluency * 0.08 {
                word.push(',');
            }
            words.push(word);
        }
        let mut sentence = words.join(" ");
        if rng.random::<f64>() < conventions * 0.9 + 0.1 {
            let mut chars = sentence.chars();
            if let Some(first) = chars.next() {
                sentence = first.to_uppercase().chain(chars).collect();
            }
        }
        if rng.random::<f64>() < conventions * 0.8 + 0.2 {
            sentence.push('.');
        } else if rng.random::<f64>() < 0.5 {
            sentence.push_str(" !!");
        }
        out.push(sentence);
    }
    out.join(" ")
}

/// A fully labeled synthetic corpus.
pub fn generate_corpus(config: &SynthConfig) -> Result<SyntheticCorpus> {
    let schema = ScoreSchema::new(config.prompts.clone())?;
    let noise = Normal::new(0.0, config.label_noise.max(0.0)).expect("finite noise");
    let mut essays = Vec::new();
    let mut quality = BTreeMap::new();
    for (pi, prompt) in schema.prompts.iter().enumerate() {
        let mut rng = rng_from(config.seed, "synth/corpus", pi as u64);
        for i in 0..config.essays_per_prompt {
            let id = format!("{}-{:05}", prompt.id, i);
            let base: f64 = 0.5 * (rng.random::<f64>() + rng.random::<f64>());
            let q = trait_qualities(prompt, base, config.trait_spread, &mut rng);
            let text = render_essay(&q, &mut rng);
            let gold = prompt
                .traits
                .iter()
                .map(|r| (r.name.clone(), to_range(q[&r.name] + noise.sample(&mut rng), r)))
                .collect();
            quality.insert(id.clone(), base);
            essays.push(Essay {
                essay_id: id,
                prompt_id: prompt.id.clone(),
                text,
                gold: Some(gold),
            });
        }
    }
    Ok(SyntheticCorpus {
        corpus: Corpus::validated(essays, &schema)?,
        schema,
        quality,
    })
}

/// Predictions shrunk toward the middle of the scale: `0.8 * gold + 0.1`
/// plus Gaussian noise with standard deviation `sigma`.
pub fn shrunk_predictions(gold: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    gold.iter().map(|g| 0.8 * g + 0.1 + noise.sample(rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeteroConfig {
    pub signal_dim: usize,
    pub nuisance_dim: usize,
    /// Label noise at latent 0 and at latent 1.
    pub noise_low: f64,
    pub noise_high: f64,
    /// Scale of the nuisance features at latent 1.
    pub nuisance_scale: f64,
}

impl Default for HeteroConfig {
    fn default() -> Self {
        HeteroConfig {
            signal_dim: 8,
            nuisance_dim: 16,
            noise_low: 0.01,
            noise_high: 0.25,
            nuisance_scale: 2.0,
        }
    }
}

/// Feature-space corpus with one trait-pair whose label noise grows with a
/// latent `u ~ U(0, 1)`. The same latent scales a block of nuisance
/// features, so noisy essays are also the ones that look unusual.
///
/// Returns the data and the latent per row.
pub fn heteroscedastic_data(config: &HeteroConfig, n: usize, seed: u64, label: &str) -> (TrainingData, Vec<f64>) {
    let mut rng = rng_from(seed, &format!("synth/hetero/{label}"), 0);
    let weights_rng = &mut rng_from(seed, "synth/hetero/weights", 0);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let w: Vec<f64> = (0..config.signal_dim).map(|_| std.sample(weights_rng)).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let traits = vec![OVERALL.to_string(), "content".to_string()];
    let dim = config.signal_dim + config.nuisance_dim;
    let mut features = Array2::zeros((n, dim));
    let mut targets = Array2::zeros((n, traits.len()));
    let mut latent = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = rng.random();
        let s: Vec<f64> = (0..config.signal_dim).map(|_| std.sample(&mut rng)).collect();
        let z = s.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / norm;
        let clean = 1.0 / (1.0 + (-1.2 * z).exp());
        let sd = config.noise_low + (config.noise_high - config.noise_low) * u;
        for (j, v) in s.iter().enumerate() {
            features[[i, j]] = *v;
        }
        for j in 0..config.nuisance_dim {
            features[[i, config.signal_dim + j]] = u * config.nuisance_scale * std.sample(&mut rng);
        }
        targets[[i, 0]] = clip01(clean + sd * std.sample(&mut rng));
        targets[[i, 1]] = clip01(clean + sd * std.sample(&mut rng));
        latent.push(u);
    }
    let data = TrainingData {
        ids: (0..n).map(|i| format!("{label}-{i:05}")).collect(),
        features,
        targets,
        mask: Array2::ones((n, traits.len())),
        groups: vec![0; n],
        group_ranges: vec![GroupRanges {
            name: "H".into(),
            ranges: vec![Some((0, 10)), Some((0, 6))],
        }],
        traits,
    };
    (data, latent)
}
