use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{denorm_round, qwk, QwkReport};

/// Score ranges of one prompt, aligned with the model's trait order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRanges {
    pub name: String,
    pub ranges: Vec<Option<(i64, i64)>>,
}

/// Features and normalized targets for a set of essays.
///
/// `mask[i][t]` is 1 where essay `i` is scored on trait `t`. `groups[i]`
/// indexes `group_ranges`, which supplies the integer ranges used for QWK.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub ids: Vec<String>,
    pub features: Array2<f64>,
    pub targets: Array2<f64>,
    pub mask: Array2<f64>,
    pub groups: Vec<usize>,
    pub group_ranges: Vec<GroupRanges>,
    pub traits: Vec<String>,
}

impl TrainingData {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Single-group data with every target set to `value`, scored on [0, 10].
    pub fn constant_targets(features: Array2<f64>, traits: &[String], value: f64) -> Self {
        let n = features.nrows();
        let t = traits.len();
        TrainingData {
            ids: (0..n).map(|i| format!("row{i}")).collect(),
            features,
            targets: Array2::from_elem((n, t), value),
            mask: Array2::ones((n, t)),
            groups: vec![0; n],
            group_ranges: vec![GroupRanges {
                name: "group".into(),
                ranges: vec![Some((0, 10)); t],
            }],
            traits: traits.to_vec(),
        }
    }

    pub fn subset(&self, rows: &[usize]) -> TrainingData {
        TrainingData {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            features: self.features.select(Axis(0), rows),
            targets: self.targets.select(Axis(0), rows),
            mask: self.mask.select(Axis(0), rows),
            groups: rows.iter().map(|&i| self.groups[i]).collect(),
            group_ranges: self.group_ranges.clone(),
            traits: self.traits.clone(),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &TrainingData) -> Result<TrainingData> {
        if self.group_ranges != other.group_ranges || self.traits != other.traits {
            return Err(Error::TraitMismatch("cannot concatenate data with different layouts".into()));
        }
        let cat = |a: &Array2<f64>, b: &Array2<f64>| {
            ndarray::concatenate(Axis(0), &[a.view(), b.view()]).map_err(|e| Error::InvalidArgument(e.to_string()))
        };
        Ok(TrainingData {
            ids: self.ids.iter().chain(&other.ids).cloned().collect(),
            features: cat(&self.features, &other.features)?,
            targets: cat(&self.targets, &other.targets)?,
            mask: cat(&self.mask, &other.mask)?,
            groups: self.groups.iter().chain(&other.groups).copied().collect(),
            group_ranges: self.group_ranges.clone(),
            traits: self.traits.clone(),
        })
    }

    /// Rows belonging to group `g`.
    pub fn rows_of_group(&self, g: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.groups[i] == g).collect()
    }

    /// Integer QWK per (group, trait) of `pred` against the targets.
    pub fn evaluate(&self, pred: &Array2<f64>) -> Result<QwkReport> {
        self.evaluate_rows(pred, &(0..self.len()).collect::<Vec<_>>())
    }

    /// Like [`TrainingData::evaluate`], restricted to `rows`.
    pub fn evaluate_rows(&self, pred: &Array2<f64>, rows: &[usize]) -> Result<QwkReport> {
        if pred.dim() != self.targets.dim() {
            return Err(Error::LengthMismatch {
                left: pred.nrows(),
                right: self.targets.nrows(),
            });
        }
        let mut report = QwkReport::single(Vec::new());
        for (g, group) in self.group_ranges.iter().enumerate() {
            for (t, range) in group.ranges.iter().enumerate() {
                let Some((min, max)) = *range else { continue };
                let (gold, predicted): (Vec<i64>, Vec<i64>) = rows
                    .iter()
                    .filter(|&&i| self.groups[i] == g && self.mask[[i, t]] > 0.0)
                    .map(|&i| {
                        (
                            denorm_round(self.targets[[i, t]], min, max),
                            denorm_round(pred[[i, t]], min, max),
                        )
                    })
                    .unzip();
                if gold.is_empty() {
                    continue;
                }
                report.push(&group.name, &self.traits[t], qwk(&gold, &predicted, min, max)?);
            }
        }
        Ok(report)
    }

    /// QWK averaged over every (group, trait) cell.
    pub fn mean_qwk(&self, pred: &Array2<f64>) -> Result<f64> {
        Ok(self.evaluate(pred)?.grand_average())
    }
}
