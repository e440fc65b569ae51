//! Text encoders.
//!
//! [`ReferenceEncoder`] is a dual-channel feature extractor: a hashed bag of
//! word and character n-grams (token level) concatenated with sixteen
//! sentence-level statistics.

use serde::{Deserialize, Serialize};

use crate::rng::fnv1a;

/// Maps essay text to a fixed-length finite feature vector.
pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<f64>;
}

pub const SENTENCE_FEATURES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Width of the hashed n-gram channel.
    pub hash_dim: usize,
    /// Include word bigrams in the hashed channel.
    pub word_bigrams: bool,
    /// Character n-gram length inside words; 0 disables.
    pub char_ngram: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hash_dim: 2048,
            word_bigrams: true,
            char_ngram: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReferenceEncoder {
    pub config: EncoderConfig,
}

impl ReferenceEncoder {
    pub fn new(config: EncoderConfig) -> Self {
        ReferenceEncoder { config }
    }

    fn hashed_channel(&self, sentences: &[Vec<&str>], out: &mut [f64]) {
        let dim = self.config.hash_dim;
        if dim == 0 {
            return;
        }
        let mut bump = |kind: u8, s: &str| {
            let mut bytes = Vec::with_capacity(s.len() + 1);
            bytes.push(kind);
            bytes.extend_from_slice(s.as_bytes());
            out[(fnv1a(&bytes) % dim as u64) as usize] += 1.0;
        };
        for sentence in sentences {
            let lower: Vec<String> = sentence.iter().map(|w| w.to_lowercase()).collect();
            for (i, w) in lower.iter().enumerate() {
                bump(b'w', w);
                if self.config.word_bigrams && i + 1 < lower.len() {
                    bump(b'b', &format!("{w} {}", lower[i + 1]));
                }
                let n = self.config.char_ngram;
                if n > 0 {
                    let padded: Vec<char> = format!("<{w}>").chars().collect();
                    for gram in padded.windows(n.min(padded.len())) {
                        bump(b'c', &gram.iter().collect::<String>());
                    }
                }
            }
        }
        let mut norm = 0.0;
        for v in out.iter_mut() {
            *v = v.ln_1p();
            norm += *v * *v;
        }
        if norm > 0.0 {
            let inv = 1.0 / norm.sqrt();
            out.iter_mut().for_each(|v| *v *= inv);
        }
    }
}

impl Encoder for ReferenceEncoder {
    fn dim(&self) -> usize {
        self.config.hash_dim + SENTENCE_FEATURES
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        let sentences = split_sentences(text);
        self.hashed_channel(&sentences, &mut out[..self.config.hash_dim]);
        sentence_statistics(text, &sentences, &mut out[self.config.hash_dim..]);
        out
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\'' || c == '@'
}

/// Splits text into sentences of word tokens. Sentences end at `.`, `!`,
/// `?` or a newline; empty sentences are dropped.
pub fn split_sentences(text: &str) -> Vec<Vec<&str>> {
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if is_word_char(c) {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            current.push(&text[s..i]);
        }
        if matches!(c, '.' | '!' | '?' | '\n') && !current.is_empty() {
            sentences.push(std::mem::take(&mut current));
        }
    }
    if let Some(s) = start {
        current.push(&text[s..]);
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    sentences
}

fn sentence_statistics(text: &str, sentences: &[Vec<&str>], out: &mut [f64]) {
    let tokens: Vec<&str> = sentences.iter().flatten().copied().collect();
    if tokens.is_empty() {
        return;
    }
    let n_sent = sentences.len() as f64;
    let n_tok = tokens.len() as f64;
    let lens: Vec<f64> = sentences.iter().map(|s| s.len() as f64).collect();
    let mean_len = n_tok / n_sent;
    let max_len = lens.iter().cloned().fold(0.0, f64::max);
    let sd_len = (lens.iter().map(|l| (l - mean_len).powi(2)).sum::<f64>() / n_sent).sqrt();

    let mut counts = std::collections::BTreeMap::new();
    for t in &tokens {
        *counts.entry(t.to_lowercase()).or_insert(0usize) += 1;
    }
    let n_types = counts.len() as f64;
    let hapax = counts.values().filter(|&&c| c == 1).count() as f64;

    let n_chars = text.chars().count().max(1) as f64;
    let punct = text.chars().filter(|c| c.is_ascii_punctuation()).count() as f64;
    let commas = text.chars().filter(|&c| c == ',').count() as f64;
    let digits = text.chars().filter(|c| c.is_ascii_digit()).count() as f64;
    let odd = text
        .chars()
        .filter(|&c| !(c.is_ascii_graphic() || c.is_ascii_whitespace()))
        .count() as f64;
    let word_chars: f64 = tokens.iter().map(|t| t.chars().count() as f64).sum();
    let long = tokens.iter().filter(|t| t.chars().count() >= 7).count() as f64;
    let capital = tokens
        .iter()
        .filter(|t| t.chars().next().is_some_and(char::is_uppercase))
        .count() as f64;
    let initial_caps = sentences
        .iter()
        .filter(|s| s[0].chars().next().is_some_and(char::is_uppercase))
        .count() as f64;

    let stats = [
        n_sent.ln_1p() / 3.0,
        mean_len / 20.0,
        max_len / 40.0,
        sd_len / 20.0,
        n_types / n_tok,
        hapax / n_types,
        punct / n_tok,
        commas / n_sent / 3.0,
        word_chars / n_tok / 8.0,
        long / n_tok,
        n_tok.ln_1p() / 7.0,
        n_types.ln_1p() / 7.0,
        capital / n_tok,
        digits / n_chars,
        odd / n_chars,
        initial_caps / n_sent,
    ];
    out.copy_from_slice(&stats);
}
