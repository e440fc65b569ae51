//! `aes`: command-line front end for the essay-scoring pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use aes_core::adapt::two_stage_finetune;
use aes_core::corpus::{full_split, ingest, k_split, save_corpus, write_corpus_with, Corpus, DatasetSplit, ScoreSchema, SplitPolicy};
use aes_core::encoder::{EncoderConfig, ReferenceEncoder};
use aes_core::metrics::{denorm_round, QwkReport};
use aes_core::model::{AdapterCheckpoint, ModelCheckpoint, TrainingData, TraitModel};
use aes_core::pipeline::report::{num, write_report, Format};
use aes_core::pipeline::{align_cells, run, train_single, FeatureStore, Layout, Mode, RunConfig, RunReport, Stages, Strategy, UnitData};
use aes_core::rng::derive_seed;
use aes_core::selftrain::{estimate_uncertainty, pseudo_training_data, select_balanced, self_train};
use aes_core::synth::{default_prompt, generate_corpus, SynthConfig};
use anyhow::{bail, Context, Result};
use ndarray::Array2;
use clap::{Args, Parser, Subcommand};

/// Environment variable holding the worker-pool size.
const WORKERS_ENV: &str = "AES_WORKERS";

#[derive(Parser)]
#[command(name = "aes", version, about = "Multi-trait essay scoring experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus against its schema and print a summary.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        /// Re-write the corpus in canonical form.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partition a corpus into train/dev/test/unlabeled.
    Split {
        #[command(flatten)]
        data: DataArgs,
        /// `full` or `k:<K>`.
        #[arg(long, default_value = "full")]
        policy: SplitPolicy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seed of the test partition (K-data only).
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a base model.
    Train {
        #[command(flatten)]
        unit: UnitArgs,
        #[command(flatten)]
        hyper: HyperArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep low-rank adapters over a trained model.
    Adapt {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        hyper: HyperArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit score alignment on dev and apply it to test predictions.
    Align {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        hyper: HyperArgs,
        /// Write aligned test predictions here.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Pseudo-label the unlabeled pool and retrain a fresh model.
    Ust {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        hyper: HyperArgs,
        /// Align pseudo-labels with dev statistics before selection.
        #[arg(long)]
        align: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write the selected pseudo-labels (corpus format plus provenance).
        #[arg(long)]
        pseudo: Option<PathBuf>,
        /// Write per-essay, per-trait MC means and standard deviations.
        #[arg(long)]
        uncertainty: Option<PathBuf>,
    },
    /// Score a model on dev or test.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "test")]
        on: String,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run a full experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        hyper: HyperArgs,
        /// Output directory for reports.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated report formats: json, tsv, text.
        #[arg(long, default_value = "json,tsv,text")]
        format: String,
        /// Save model checkpoints under `<out>/checkpoints`.
        #[arg(long)]
        save_checkpoints: bool,
    },
    /// Re-emit tables from a machine-readable report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "tsv,text")]
        format: String,
    },
    /// Write a synthetic schema, corpus and run config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        essays: usize,
        #[arg(long, default_value_t = 1)]
        prompts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args, Clone)]
struct UnitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Split file written by `split`.
    #[arg(long)]
    split: PathBuf,
    /// Prompt to model alone; omit with `--mode mtl`.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long, default_value = "stl")]
    mode: Mode,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    adapter: Option<PathBuf>,
}

/// Overrides applied on top of a run config (or the defaults).
#[derive(Args, Clone, Default)]
struct HyperArgs {
    /// Base config whose hyperparameters are used.
    #[arg(long = "hyper-config")]
    hyper_config: Option<PathBuf>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Ordered stage list, e.g. `lora,sa,ust,sa`, or `none`.
    #[arg(long)]
    stages: Option<Stages>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long = "run-mode")]
    run_mode: Option<Mode>,
    #[arg(long = "split-policy")]
    split_policy: Option<SplitPolicy>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    ablation: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    hash_dim: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    percent: Option<f64>,
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    per_bin: Option<usize>,
}

impl HyperArgs {
    fn apply(&self, mut c: RunConfig) -> RunConfig {
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$src.clone() { c.$($dst).+ = v; })*
            };
        }
        set!(
            seeds => seeds,
            stages => stages,
            strategy => strategy,
            run_mode => mode,
            split_policy => split,
            split_seed => split_seed,
            ablation => ablation,
            epochs => train.max_epochs,
            patience => train.patience,
            batch_size => train.batch_size,
            lr => train.optimizer.lr,
            hidden => model.hidden,
            dropout => model.dropout,
            hash_dim => encoder.hash_dim,
            rank => lora.rank,
            alpha => lora.alpha,
            percent => align.percent,
            passes => selftrain.passes,
            bins => selftrain.bins,
            per_bin => selftrain.per_bin,
        );
        c
    }

    fn config(&self) -> Result<RunConfig> {
        let base = match &self.hyper_config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        let c = self.apply(base);
        c.validate()?;
        Ok(c)
    }
}

fn load_data(d: &DataArgs) -> Result<(ScoreSchema, Corpus)> {
    let schema = ScoreSchema::load(&d.schema).with_context(|| format!("loading schema {}", d.schema.display()))?;
    let corpus = ingest(&d.corpus, &schema).with_context(|| format!("ingesting {}", d.corpus.display()))?;
    Ok((schema, corpus))
}

fn load_split(path: &Path) -> Result<DatasetSplit> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let split: DatasetSplit = serde_json::from_str(&text)?;
    split.check_disjoint()?;
    Ok(split)
}

fn layout_for(schema: &ScoreSchema, unit: &str, dim: usize) -> Result<Layout> {
    Ok(if unit == "all" {
        Layout::mtl(schema, dim)
    } else {
        Layout::stl(schema, unit, dim)?
    })
}

fn unit_data(schema: &ScoreSchema, corpus: &Corpus, split: &DatasetSplit, encoder: &EncoderConfig, unit: &str) -> Result<UnitData> {
    let features = FeatureStore::encode(&ReferenceEncoder::new(encoder.clone()), corpus);
    let layout = layout_for(schema, unit, features.dim)?;
    Ok(UnitData::build(layout, corpus, split, &features)?)
}

/// A checkpointed model (with optional adapter) and the data it was built for.
struct Loaded {
    checkpoint: ModelCheckpoint,
    model: TraitModel,
    unit: UnitData,
    schema: ScoreSchema,
    corpus: Corpus,
}

fn load_model(args: &ModelArgs) -> Result<Loaded> {
    let (schema, corpus) = load_data(&args.data)?;
    let split = load_split(&args.split)?;
    let checkpoint = ModelCheckpoint::load(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let unit_name = checkpoint
        .provenance
        .get("unit")
        .cloned()
        .context("model checkpoint does not record its unit")?;
    let encoder = checkpoint.encoder.clone().unwrap_or_default();
    let unit = unit_data(&schema, &corpus, &split, &encoder, &unit_name)?;
    let mut model = checkpoint.model.clone();
    if let Some(path) = &args.adapter {
        let adapter = AdapterCheckpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        adapter.adapter.apply(&mut model)?;
    }
    Ok(Loaded {
        checkpoint,
        model,
        unit,
        schema,
        corpus,
    })
}

fn print_report(title: &str, report: &QwkReport) {
    println!("{title}");
    for c in &report.cells {
        println!("  {}\t{}\t{}", c.prompt, c.trait_name, num(c.kappa));
    }
    println!("  average\t{}", num(report.grand_average()));
}

fn write_predictions(path: &Path, data: &TrainingData, pred: &Array2<f64>) -> Result<()> {
    let mut out = String::from("essay_id\tprompt_id");
    for t in &data.traits {
        out.push('\t');
        out.push_str(t);
    }
    out.push('\n');
    for (i, id) in data.ids.iter().enumerate() {
        let group = &data.group_ranges[data.groups[i]];
        out.push_str(&format!("{id}\t{}", group.name));
        for (t, range) in group.ranges.iter().enumerate() {
            out.push('\t');
            if range.is_some() {
                out.push_str(&num(pred[[i, t]]));
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn parse_formats(s: &str) -> Result<Vec<Format>> {
    Ok(s.split(',').map(|f| f.trim().parse()).collect::<aes_core::Result<_>>()?)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { data, out } => {
            let (schema, corpus) = load_data(&data)?;
            let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
            for e in corpus.essays() {
                let c = counts.entry(&e.prompt_id).or_default();
                if e.is_labeled() {
                    c.0 += 1
                } else {
                    c.1 += 1
                }
            }
            println!("{} essays", corpus.len());
            for (p, (l, u)) in counts {
                println!("  {p}: {l} labeled, {u} unlabeled");
            }
            if let Some(out) = out {
                save_corpus(&out, &corpus, &schema)?;
            }
        }
        Command::Split {
            data,
            policy,
            seed,
            split_seed,
            out,
        } => {
            let (_, corpus) = load_data(&data)?;
            let split = match policy {
                SplitPolicy::Full => full_split(&corpus, seed)?,
                SplitPolicy::KData { k } => k_split(&corpus, seed, k, &full_split(&corpus, split_seed)?.test)?,
            };
            println!(
                "train {} dev {} test {} unlabeled {}",
                split.train.len(),
                split.dev.len(),
                split.test.len(),
                split.unlabeled.len()
            );
            std::fs::write(&out, serde_json::to_string_pretty(&split)?).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Train { unit, hyper, seed, out } => {
            let config = hyper.config()?;
            let (schema, corpus) = load_data(&unit.data)?;
            let split = load_split(&unit.split)?;
            let name = match (unit.mode, &unit.prompt) {
                (Mode::Mtl, _) => "all".to_string(),
                (Mode::Stl, Some(p)) => p.clone(),
                (Mode::Stl, None) => bail!("--prompt is required in stl mode"),
            };
            let data = unit_data(&schema, &corpus, &split, &config.encoder, &name)?;
            let (model, log) = train_single(&config, &data.layout, &data.train, &data.dev, seed)?;
            println!(
                "trained {} epochs; best epoch {} with dev QWK {}",
                log.epochs.len(),
                log.best_epoch,
                num(log.best_dev_qwk)
            );
            let mut ckpt = ModelCheckpoint::new(model, Some(config.encoder.clone()), Some(config.train.clone()));
            ckpt.provenance.insert("unit".into(), name);
            ckpt.provenance.insert("seed".into(), seed.to_string());
            ckpt.provenance.insert("split".into(), unit.split.display().to_string());
            ckpt.save(&out)?;
        }
        Command::Adapt { model, hyper, seed, out } => {
            let config = hyper.config()?;
            let l = load_model(&model)?;
            let outcome = two_stage_finetune(&l.model, &l.unit.train, &l.unit.dev, &config.lora, &config.train, seed)?;
            println!("base dev QWK {}", num(outcome.base_dev_qwk));
            for e in &outcome.entries {
                println!("  {}\t{}", e.target, num(e.dev_qwk));
            }
            println!("winner {} (improves on base: {})", outcome.best.target, outcome.improves_on_base());
            AdapterCheckpoint::new(outcome.best).save(&out)?;
        }
        Command::Align { model, hyper, predictions } => {
            let config = hyper.config()?;
            let l = load_model(&model)?;
            let u = &l.unit;
            let dev_pred = l.model.predict(u.dev.features.view())?;
            let test_pred = l.model.predict(u.test.features.view())?;
            let (aligned, params) = align_cells(&u.dev, &dev_pred, &u.test, &test_pred, config.align.percent, config.align.mode)?;
            for (prompt, t, p) in &params {
                println!("{prompt}\t{t}\ta={}\tb={}{}", num(p.a), num(p.b), if p.is_inverted() { "\tinverted" } else { "" });
            }
            print_report("test QWK before alignment", &u.test.evaluate(&test_pred)?);
            print_report("test QWK after alignment", &u.test.evaluate(&aligned)?);
            if let Some(path) = predictions {
                write_predictions(&path, &u.test, &aligned)?;
            }
        }
        Command::Ust {
            model,
            hyper,
            align,
            seed,
            out,
            pseudo,
            uncertainty,
        } => {
            let config = hyper.config()?;
            let l = load_model(&model)?;
            let u = &l.unit;
            let st = &config.selftrain;
            let mut estimate = estimate_uncertainty(&l.model, &u.pool, st.passes, derive_seed(seed, "ust/mc", 0))?;
            if align {
                let dev_pred = l.model.predict(u.dev.features.view())?;
                let (aligned, _) = align_cells(&u.dev, &dev_pred, &u.pool, &estimate.means(), config.align.percent, config.align.mode)?;
                for (i, r) in estimate.records.iter_mut().enumerate() {
                    r.mean = aligned.row(i).to_vec();
                }
            }
            if let Some(path) = uncertainty {
                let mut text = String::from("essay_id\ttrait\tmean\tsd\n");
                for r in &estimate.records {
                    for (t, name) in estimate.traits.iter().enumerate() {
                        text.push_str(&format!("{}\t{name}\t{}\t{}\n", r.essay_id, num(r.mean[t]), num(r.sd[t])));
                    }
                }
                std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            }
            let mut set = select_balanced(&estimate, st.bins, st.per_bin, &st.binning_trait)?;
            set.aligned = align;
            set.source = model.model.display().to_string();
            let pseudo_data = pseudo_training_data(&set, &u.pool)?;
            if let Some(path) = pseudo {
                let by_id: BTreeMap<&str, &aes_core::selftrain::PseudoLabel> =
                    set.labels.iter().map(|p| (p.essay_id.as_str(), p)).collect();
                let essays: Vec<_> = set
                    .labels
                    .iter()
                    .map(|p| {
                        let mut e = l.corpus.get(&p.essay_id).expect("pool essay").clone();
                        let prompt = l.schema.prompt(&e.prompt_id).expect("validated prompt");
                        e.gold = Some(
                            prompt
                                .traits
                                .iter()
                                .map(|r| {
                                    let t = set.traits.iter().position(|n| *n == r.name).expect("trait in layout");
                                    (r.name.clone(), denorm_round(p.scores[t], r.min, r.max))
                                })
                                .collect(),
                        );
                        e
                    })
                    .collect();
                let file = std::fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
                write_corpus_with(file, &essays, &l.schema, &["provenance"], |e| {
                    let p = by_id[e.essay_id.as_str()];
                    vec![format!("{};bin={};uncertainty={};aligned={}", set.source, p.bin, num(p.uncertainty), set.aligned)]
                })?;
            }
            let (retrained, log) = self_train(
                &l.model.config,
                &config.train,
                &u.train,
                &u.dev,
                &pseudo_data,
                &config.loss_weights(&u.layout.traits),
                seed,
            )?;
            println!(
                "selected {} pseudo-labels from {} unlabeled essays; augmented train {}; dev QWK {}",
                set.len(),
                u.pool.len(),
                u.train.len() + pseudo_data.len(),
                num(log.best_dev_qwk)
            );
            let mut ckpt = ModelCheckpoint::new(retrained, l.checkpoint.encoder.clone(), Some(config.train.clone()));
            ckpt.provenance = l.checkpoint.provenance.clone();
            ckpt.provenance.insert("pseudo_labels".into(), format!("{} ({})", set.len(), set.source));
            ckpt.save(&out)?;
        }
        Command::Evaluate { model, on, predictions } => {
            let l = load_model(&model)?;
            let data = match on.as_str() {
                "test" => &l.unit.test,
                "dev" => &l.unit.dev,
                other => bail!("--on must be `test` or `dev`, not `{other}`"),
            };
            let pred = l.model.predict(data.features.view())?;
            print_report(&format!("{on} QWK"), &data.evaluate(&pred)?);
            if let Some(path) = predictions {
                write_predictions(&path, data, &pred)?;
            }
        }
        Command::Run {
            config,
            hyper,
            out,
            format,
            save_checkpoints,
        } => {
            let formats = parse_formats(&format)?;
            let base = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let cfg = hyper.apply(base);
            cfg.validate()?;
            let ckpt_dir = save_checkpoints.then(|| out.join("checkpoints"));
            let report = run(&cfg, ckpt_dir.as_deref())?;
            for s in &report.stages {
                println!("{}\t{}\t{}", s.label, num(s.mean), num(s.delta));
            }
            for path in write_report(&report, &out, &formats)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Report { input, out, format } => {
            let report = RunReport::load(&input)?;
            for path in write_report(&report, &out, &parse_formats(&format)?)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Synth {
            out,
            essays,
            prompts,
            seed,
        } => {
            let config = SynthConfig {
                prompts: (1..=prompts).map(|i| default_prompt(&format!("P{i}"))).collect(),
                essays_per_prompt: essays,
                seed,
                ..SynthConfig::default()
            };
            let synth = generate_corpus(&config)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            std::fs::write(out.join("schema.toml"), synth.schema.to_toml_string()?)?;
            save_corpus(out.join("corpus.tsv"), &synth.corpus, &synth.schema)?;
            let run = RunConfig {
                schema: "schema.toml".into(),
                corpus: "corpus.tsv".into(),
                split: SplitPolicy::KData { k: 32 },
                seeds: vec![1, 2, 3],
                stages: "lora,sa,ust,sa".parse()?,
                ..RunConfig::default()
            };
            std::fs::write(out.join("run.toml"), run.to_toml_string()?)?;
            println!("wrote {} essays to {}", synth.corpus.len(), out.display());
        }
    }
    Ok(())
}

fn init_pool() -> Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{WORKERS_ENV} must be a positive integer"))?;
        if n == 0 {
            bail!("{WORKERS_ENV} must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = init_pool().and_then(|_| dispatch(cli)) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
