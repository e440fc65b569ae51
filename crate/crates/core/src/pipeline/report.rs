//! Run reports: a JSON dump plus tab-separated and plain-text tables.
//!
//! Every number in every format is written with the same shortest
//! round-trip formatting, so the formats agree byte for byte on numbers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{merge_rows, AlignmentAudit, CheckpointDigest, PseudoSummary, RunConfig, SelectionEntry, SweepSummary};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, Average, QwkReport};
use crate::selftrain::UncertaintyGroupReport;

const FORMAT: &str = "aes-run-report";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub label: String,
    pub report: QwkReport,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UnitRecord {
    pub unit: String,
    /// Train, dev, test and unlabeled sizes.
    pub sizes: [usize; 4],
    pub stages: Vec<StageRow>,
    pub selection: Vec<SelectionEntry>,
    pub sweeps: Vec<SweepSummary>,
    pub alignment: Vec<AlignmentAudit>,
    pub pseudo: Vec<PseudoSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<UncertaintyGroupReport>,
    pub checkpoints: Vec<CheckpointDigest>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    /// Stage reports with the cells of every unit.
    pub stages: Vec<StageRow>,
    pub units: Vec<UnitRecord>,
}

impl SeedRecord {
    pub fn merge(seed: u64, units: Vec<UnitRecord>) -> Self {
        SeedRecord {
            seed,
            stages: merge_rows(&units),
            units,
        }
    }

    pub fn stage(&self, label: &str) -> Option<&QwkReport> {
        self.stages.iter().find(|r| r.label == label).map(|r| &r.report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub label: String,
    /// Per-cell mean and SD across seeds.
    pub report: QwkReport,
    /// Grand average QWK per seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    /// `mean` minus the base stage's mean.
    pub delta: f64,
    /// Per-trait and per-prompt averages of `report`, with their means.
    pub by_trait: Vec<(String, Average)>,
    pub by_prompt: Vec<(String, Average)>,
    pub trait_mean: Average,
    pub prompt_mean: Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub stages: Vec<StageSummary>,
    pub runs: Vec<SeedRecord>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

impl RunReport {
    pub fn assemble(config: &RunConfig, runs: Vec<SeedRecord>) -> Result<Self> {
        let first = runs.first().ok_or(Error::EmptyInput("seed runs"))?;
        let mut stages = Vec::new();
        for row in &first.stages {
            let reports: Vec<QwkReport> = runs
                .iter()
                .map(|r| {
                    r.stage(&row.label)
                        .cloned()
                        .ok_or_else(|| Error::KeyMismatch(format!("stage `{}` missing for seed {}", row.label, r.seed)))
                })
                .collect::<Result<_>>()?;
            let per_seed: Vec<f64> = reports.iter().map(QwkReport::grand_average).collect();
            let (mean, sd) = mean_sd(&per_seed);
            let report = aggregate(&reports)?;
            stages.push(StageSummary {
                label: row.label.clone(),
                per_seed,
                mean,
                sd,
                delta: 0.0,
                by_trait: report.trait_averages(),
                by_prompt: report.prompt_averages(),
                trait_mean: report.mean_of_trait_averages(),
                prompt_mean: report.mean_of_prompt_averages(),
                report,
            });
        }
        let base = stages.first().map(|s| s.mean).unwrap_or_default();
        for s in &mut stages {
            s.delta = s.mean - base;
        }
        Ok(RunReport {
            format: FORMAT.into(),
            config_hash: config.hash(),
            config: config.clone(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            stages,
            runs,
        })
    }

    pub fn stage(&self, label: &str) -> Option<&StageSummary> {
        self.stages.iter().find(|s| s.label == label)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: RunReport = serde_json::from_str(s)?;
        if r.format != FORMAT {
            return Err(Error::Checkpoint(format!("expected `{FORMAT}`, found `{}`", r.format)));
        }
        Ok(r)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Tsv,
    Text,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "tsv" => Ok(Format::Tsv),
            "text" | "txt" => Ok(Format::Text),
            _ => Err(Error::Config(format!("report format `{s}` (expected json, tsv or text)"))),
        }
    }
}

/// Shortest round-trip form; `null` for non-finite values.
pub fn num(x: f64) -> String {
    serde_json::to_string(&x).expect("f64 serializes")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// One row per stage × prompt × trait.
pub fn cells_tsv(report: &RunReport) -> String {
    let mut out = format!("# config {}\nstage\tprompt\ttrait\tkappa\tsd\n", report.config_hash);
    for s in &report.stages {
        for c in &s.report.cells {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", s.label, c.prompt, c.trait_name, num(c.kappa), opt(c.sd));
        }
    }
    out
}

/// Stage means, SDs over seeds and deltas against the base stage.
pub fn stages_tsv(report: &RunReport) -> String {
    let mut out = format!("# config {}\nstage\tmean\tsd\tdelta\n", report.config_hash);
    for s in &report.stages {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", s.label, num(s.mean), num(s.sd), num(s.delta));
    }
    out
}

pub fn alignment_tsv(report: &RunReport) -> String {
    let mut out = format!(
        "# config {}\nseed\tunit\tstage\tprompt\ttrait\ta\tb\tpercent\tgold_bottom\tpred_bottom\tgold_top\tpred_top\ttest_min\ttest_max\n",
        report.config_hash
    );
    for run in &report.runs {
        for u in &run.units {
            for a in &u.alignment {
                let p = &a.params;
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    run.seed,
                    u.unit,
                    a.stage,
                    a.prompt,
                    a.trait_name,
                    num(p.a),
                    num(p.b),
                    num(p.percent),
                    num(p.gold_bottom_mean),
                    num(p.pred_bottom_mean),
                    num(p.gold_top_mean),
                    num(p.pred_top_mean),
                    num(p.test_min),
                    num(p.test_max)
                );
            }
        }
    }
    out
}

pub fn uncertainty_tsv(report: &RunReport) -> String {
    let mut out = format!(
        "# config {}\nseed\tunit\tk\ttop\tall\tbottom\tbalanced\tbalanced_count\tzero_variance\n",
        report.config_hash
    );
    for run in &report.runs {
        for u in &run.units {
            if let Some(g) = &u.uncertainty {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    run.seed,
                    u.unit,
                    g.k,
                    num(g.top),
                    num(g.all),
                    num(g.bottom),
                    num(g.balanced),
                    g.balanced_count,
                    g.zero_variance
                );
            }
        }
    }
    out
}

fn table(out: &mut String, title: &str, header: &[String], rows: &[(String, Vec<String>)]) {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for (label, cells) in rows {
        widths[0] = widths[0].max(label.len());
        for (i, c) in cells.iter().enumerate() {
            widths[i + 1] = widths[i + 1].max(c.len());
        }
    }
    let _ = writeln!(out, "{title}");
    let line = |cells: Vec<&str>| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let _ = writeln!(out, "{}", line(header.iter().map(String::as_str).collect()));
    for (label, cells) in rows {
        let mut all = vec![label.as_str()];
        all.extend(cells.iter().map(String::as_str));
        let _ = writeln!(out, "{}", line(all));
    }
    out.push('\n');
}

/// Per-trait, per-prompt and stage tables.
pub fn text_tables(report: &RunReport) -> String {
    let mut out = format!("config {}\nseeds {:?}\n\n", report.config_hash, report.seeds);
    let Some(first) = report.stages.first() else {
        return out;
    };
    for (title, by_trait) in [("QWK per trait (averaged over prompts)", true), ("QWK per prompt (averaged over traits)", false)] {
        let keys: Vec<String> = if by_trait { &first.by_trait } else { &first.by_prompt }
            .iter()
            .map(|(k, _)| k.clone())
            .collect();
        let mut header = vec!["stage".to_string()];
        header.extend(keys.iter().cloned());
        header.extend(["AVG".to_string(), "SD".to_string()]);
        let rows: Vec<(String, Vec<String>)> = report
            .stages
            .iter()
            .map(|s| {
                let (avgs, overall) = if by_trait {
                    (&s.by_trait, &s.trait_mean)
                } else {
                    (&s.by_prompt, &s.prompt_mean)
                };
                let mut cells: Vec<String> = keys
                    .iter()
                    .map(|k| avgs.iter().find(|(n, _)| n == k).map(|(_, a)| num(a.kappa)).unwrap_or_default())
                    .collect();
                cells.push(num(overall.kappa));
                cells.push(opt(overall.sd));
                (s.label.clone(), cells)
            })
            .collect();
        table(&mut out, title, &header, &rows);
    }
    let header: Vec<String> = ["stage", "mean", "sd", "delta"].map(String::from).to_vec();
    let rows: Vec<(String, Vec<String>)> = report
        .stages
        .iter()
        .map(|s| (s.label.clone(), vec![num(s.mean), num(s.sd), num(s.delta)]))
        .collect();
    table(&mut out, "Stage ablation (grand average QWK over seeds)", &header, &rows);
    out
}

/// Writes the requested formats into `dir`; returns the files written.
pub fn write_report(report: &RunReport, dir: impl AsRef<Path>, formats: &[Format]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(&str, String)> = Vec::new();
    for f in formats {
        match f {
            Format::Json => files.push(("report.json", report.to_json()?)),
            Format::Tsv => {
                files.push(("cells.tsv", cells_tsv(report)));
                files.push(("stages.tsv", stages_tsv(report)));
                files.push(("alignment.tsv", alignment_tsv(report)));
                files.push(("uncertainty.tsv", uncertainty_tsv(report)));
            }
            Format::Text => files.push(("tables.txt", text_tables(report))),
        }
    }
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
