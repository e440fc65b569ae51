//! Quadratic weighted kappa and QWK report aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps a normalized prediction back to an integer score.
///
/// The value is clipped to `[0, 1]`, denormalized into `[min, max]` and
/// rounded half away from zero.
pub fn denorm_round(pred: f64, min: i64, max: i64) -> i64 {
    let p = if pred.is_nan() { 0.0 } else { pred.clamp(0.0, 1.0) };
    let raw = min as f64 + p * (max - min) as f64;
    (raw.round() as i64).clamp(min, max)
}

/// Weight, observed and expected matrices behind a kappa value.
#[derive(Debug, Clone, PartialEq)]
pub struct QwkMatrices {
    pub n: usize,
    pub weights: Vec<Vec<f64>>,
    pub observed: Vec<Vec<f64>>,
    pub expected: Vec<Vec<f64>>,
}

impl QwkMatrices {
    pub fn build(gold: &[i64], pred: &[i64], min: i64, max: i64) -> Result<Self> {
        check_inputs(gold, pred, min, max)?;
        let n = (max - min + 1) as usize;
        let denom = ((n - 1) * (n - 1)) as f64;
        let weights = (0..n)
            .map(|i| (0..n).map(|j| ((i as f64 - j as f64).powi(2)) / denom).collect())
            .collect();
        let mut observed = vec![vec![0.0; n]; n];
        let mut hist_gold = vec![0.0; n];
        let mut hist_pred = vec![0.0; n];
        for (&g, &p) in gold.iter().zip(pred) {
            let (i, j) = ((g - min) as usize, (p - min) as usize);
            observed[i][j] += 1.0;
            hist_gold[i] += 1.0;
            hist_pred[j] += 1.0;
        }
        let total = gold.len() as f64;
        let expected = hist_gold
            .iter()
            .map(|&hg| hist_pred.iter().map(|&hp| hg * hp / total).collect())
            .collect();
        Ok(QwkMatrices {
            n,
            weights,
            observed,
            expected,
        })
    }

    pub fn kappa(&self) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                num += self.weights[i][j] * self.observed[i][j];
                den += self.weights[i][j] * self.expected[i][j];
            }
        }
        if den == 0.0 {
            1.0
        } else {
            1.0 - num / den
        }
    }
}

fn check_inputs(gold: &[i64], pred: &[i64], min: i64, max: i64) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::LengthMismatch {
            left: gold.len(),
            right: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::EmptyInput("qwk input"));
    }
    if max <= min {
        return Err(Error::InvalidArgument(format!("score range [{min}, {max}]")));
    }
    if let Some(&v) = gold.iter().chain(pred).find(|&&v| v < min || v > max) {
        return Err(Error::ValueOutOfRange { value: v, min, max });
    }
    Ok(())
}

/// Quadratic weighted kappa of integer scores over the inclusive range
/// `[min, max]`. Returns 1.0 when the expected disagreement is zero, which
/// only happens when gold and predictions sit on one identical score.
pub fn qwk(gold: &[i64], pred: &[i64], min: i64, max: i64) -> Result<f64> {
    Ok(QwkMatrices::build(gold, pred, min, max)?.kappa())
}

/// QWK of normalized predictions against normalized gold values.
pub fn qwk_normalized(gold: &[f64], pred: &[f64], min: i64, max: i64) -> Result<f64> {
    let g: Vec<i64> = gold.iter().map(|&v| denorm_round(v, min, max)).collect();
    let p: Vec<i64> = pred.iter().map(|&v| denorm_round(v, min, max)).collect();
    qwk(&g, &p, min, max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QwkCell {
    pub prompt: String,
    #[serde(rename = "trait")]
    pub trait_name: String,
    pub kappa: f64,
    /// Population standard deviation across runs, when aggregated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sd: Option<f64>,
}

/// Per (prompt, trait) kappas plus their averages.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QwkReport {
    pub cells: Vec<QwkCell>,
    #[serde(default)]
    pub runs: usize,
}

/// A mean kappa with the mean of the constituent standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub kappa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sd: Option<f64>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl QwkReport {
    pub fn single(cells: Vec<QwkCell>) -> Self {
        QwkReport { cells, runs: 1 }
    }

    pub fn push(&mut self, prompt: &str, trait_name: &str, kappa: f64) {
        self.cells.push(QwkCell {
            prompt: prompt.to_string(),
            trait_name: trait_name.to_string(),
            kappa,
            sd: None,
        });
    }

    pub fn get(&self, prompt: &str, trait_name: &str) -> Option<&QwkCell> {
        self.cells
            .iter()
            .find(|c| c.prompt == prompt && c.trait_name == trait_name)
    }

    fn average_by<F: Fn(&QwkCell) -> &str>(&self, key: F) -> Vec<(String, Average)> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<String, Vec<&QwkCell>> = BTreeMap::new();
        for c in &self.cells {
            let k = key(c).to_string();
            if !groups.contains_key(&k) {
                order.push(k.clone());
            }
            groups.entry(k).or_default().push(c);
        }
        order
            .into_iter()
            .map(|k| {
                let cells = &groups[&k];
                let sd = cells
                    .iter()
                    .map(|c| c.sd)
                    .collect::<Option<Vec<f64>>>()
                    .map(mean);
                (k, Average {
                    kappa: mean(cells.iter().map(|c| c.kappa)),
                    sd,
                })
            })
            .collect()
    }

    /// Average across prompts for each trait, in first-seen trait order.
    pub fn trait_averages(&self) -> Vec<(String, Average)> {
        self.average_by(|c| &c.trait_name)
    }

    /// Average across traits for each prompt.
    pub fn prompt_averages(&self) -> Vec<(String, Average)> {
        self.average_by(|c| &c.prompt)
    }

    /// Mean over every (prompt, trait) cell.
    pub fn grand_average(&self) -> f64 {
        mean(self.cells.iter().map(|c| c.kappa))
    }

    /// Mean of the per-trait averages (the AVG column of a per-trait table).
    pub fn mean_of_trait_averages(&self) -> Average {
        mean_of(&self.trait_averages())
    }

    /// Mean of the per-prompt averages (the AVG column of a per-prompt table).
    pub fn mean_of_prompt_averages(&self) -> Average {
        mean_of(&self.prompt_averages())
    }
}

fn mean_of(avgs: &[(String, Average)]) -> Average {
    Average {
        kappa: mean(avgs.iter().map(|(_, a)| a.kappa)),
        sd: avgs
            .iter()
            .map(|(_, a)| a.sd)
            .collect::<Option<Vec<f64>>>()
            .map(mean),
    }
}

/// Mean kappa per cell and population standard deviation across runs.
pub fn aggregate(runs: &[QwkReport]) -> Result<QwkReport> {
    let first = runs.first().ok_or(Error::EmptyInput("runs"))?;
    let keys: Vec<(&str, &str)> = first
        .cells
        .iter()
        .map(|c| (c.prompt.as_str(), c.trait_name.as_str()))
        .collect();
    for (i, r) in runs.iter().enumerate().skip(1) {
        let other: Vec<(&str, &str)> = r
            .cells
            .iter()
            .map(|c| (c.prompt.as_str(), c.trait_name.as_str()))
            .collect();
        if other != keys {
            return Err(Error::KeyMismatch(format!("run {i} has a different (prompt, trait) layout")));
        }
    }
    let n = runs.len() as f64;
    let cells = keys
        .iter()
        .enumerate()
        .map(|(idx, (prompt, trait_name))| {
            let vals: Vec<f64> = runs.iter().map(|r| r.cells[idx].kappa).collect();
            let m = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            QwkCell {
                prompt: prompt.to_string(),
                trait_name: trait_name.to_string(),
                kappa: m,
                sd: Some(var.sqrt()),
            }
        })
        .collect();
    Ok(QwkReport { cells, runs: runs.len() })
}
