mod common;

use aes_core::model::{train, GroupRanges, LossWeights, ModelConfig, TrainingData, TraitModel};
use aes_core::rng::{derive_seed, fnv1a, Rng};
use aes_core::selftrain::*;
use aes_core::synth::{heteroscedastic_data, HeteroConfig};
use aes_core::Error;
use common::*;
use ndarray::{Array2, ArrayView2};
use rand::{Rng as _, SeedableRng};

/// Each pass draws one uniform per row from that row's stream; the second
/// trait is twice the first.
struct Scripted {
    traits: Vec<String>,
}

impl Predictor for Scripted {
    fn traits(&self) -> &[String] {
        &self.traits
    }
    fn dropout_rate(&self) -> f64 {
        0.5
    }
    fn predict(&self, x: ArrayView2<'_, f64>) -> aes_core::Result<Array2<f64>> {
        Ok(Array2::from_elem((x.nrows(), 2), 0.5))
    }
    fn predict_stochastic(&self, x: ArrayView2<'_, f64>, rngs: &mut [Rng]) -> aes_core::Result<Array2<f64>> {
        let mut out = Array2::zeros((x.nrows(), 2));
        for (r, rng) in rngs.iter_mut().enumerate() {
            let u: f64 = rng.random();
            out[[r, 0]] = u;
            out[[r, 1]] = 2.0 * u;
        }
        Ok(out)
    }
}

fn pool(n: usize) -> TrainingData {
    let traits = names(&["overall", "content"]);
    let mut d = TrainingData::constant_targets(Array2::zeros((n, 1)), &traits, 0.0);
    d.ids = (0..n).map(|i| format!("u{i:04}")).collect();
    d
}

#[test]
fn recorded_sd_matches_replayed_streams() {
    let data = pool(300);
    let predictor = Scripted { traits: names(&["overall", "content"]) };
    for passes in [2, 3, 10] {
        let est = estimate_uncertainty(&predictor, &data, passes, 42).unwrap();
        for rec in &est.records {
            let mut r = Rng::seed_from_u64(derive_seed(42, "mc", fnv1a(rec.essay_id.as_bytes())));
            let ys: Vec<f64> = (0..passes).map(|_| r.random::<f64>()).collect();
            let t = passes as f64;
            let mean = ys.iter().sum::<f64>() / t;
            // Raw-moment form, independent of the estimator's two-pass form.
            let var = ys.iter().map(|y| y * y).sum::<f64>() / t - mean * mean;
            let sd = var.max(0.0).sqrt();
            assert!((rec.mean[0] - mean).abs() <= 1e-12);
            assert!((rec.sd[0] - sd).abs() <= 1e-12, "{} vs {sd}", rec.sd[0]);
            assert!((rec.sd[1] - 2.0 * sd).abs() <= 1e-12);
            assert!((rec.uncertainty - 1.5 * sd).abs() <= 1e-12);
            if passes == 2 {
                assert!((rec.sd[0] - (ys[0] - ys[1]).abs() / 2.0).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn hand_case_and_trait_average() {
    assert!((mc_std(&[0.4, 0.6, 0.5, 0.5]) - 0.070711).abs() < 1e-6);
    assert!((mc_std(&[0.4, 0.6, 0.5, 0.5]) - 0.005f64.sqrt()).abs() <= 1e-9);
    // One trait inactive for the essay's prompt: only the active one counts.
    let mut data = pool(4);
    data.group_ranges = vec![GroupRanges {
        name: "P".into(),
        ranges: vec![Some((0, 10)), None],
    }];
    let predictor = Scripted { traits: names(&["overall", "content"]) };
    let est = estimate_uncertainty(&predictor, &data, 5, 1).unwrap();
    for r in &est.records {
        assert_eq!(r.uncertainty, r.sd[0]);
    }
}

#[test]
fn dropout_off_gives_zero_uncertainty() {
    let (mut model, _, dev) = trained_base(3);
    model.config.dropout = 0.0;
    let est = estimate_uncertainty(&model, &dev, 10, 5).unwrap();
    assert!(est.is_zero_variance());
    assert!(est.records.iter().all(|r| r.sd.iter().all(|&s| s == 0.0)));
    model.config.dropout = 0.1;
    assert!(!estimate_uncertainty(&model, &dev, 10, 5).unwrap().is_zero_variance());
}

#[test]
fn too_few_passes_rejected() {
    let (model, _, dev) = trained_base(3);
    assert!(matches!(estimate_uncertainty(&model, &dev, 1, 0), Err(Error::InvalidArgument(_))));
}

fn random_estimate(n: usize, seed: u64) -> UncertaintyEstimate {
    let mut r = rng(seed);
    UncertaintyEstimate {
        traits: names(&["overall", "content"]),
        records: (0..n)
            .map(|i| {
                let m = r.random_range(0.0..1.0);
                // Coarse uncertainties so ties occur and the id tie-break matters.
                let u = (r.random_range(0.0..0.1) * 200.0_f64).round() / 200.0;
                UncertaintyRecord {
                    essay_id: format!("e{:04}", (i * 7919) % n),
                    mean: vec![m, 1.0 - m],
                    sd: vec![u, u],
                    uncertainty: u,
                    passes: 10,
                }
            })
            .collect(),
    }
}

#[test]
fn per_bin_selection_is_minimal_by_exhaustive_scan() {
    for seed in 0..10 {
        let est = random_estimate(600, seed);
        let (n_b, n_s) = (8, 32);
        let set = select_balanced(&est, n_b, n_s, "overall").unwrap();
        let vals: Vec<f64> = est.records.iter().map(|r| r.mean[0]).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let bin = |v: f64| (((v - lo) / ((hi - lo) / n_b as f64)).floor() as usize).min(n_b - 1);
        let chosen: std::collections::HashSet<&str> = set.labels.iter().map(|l| l.essay_id.as_str()).collect();
        let mut expected_total = 0;
        for b in 0..n_b {
            let members: Vec<&UncertaintyRecord> = est.records.iter().filter(|r| bin(r.mean[0]) == b).collect();
            let (sel, rej): (Vec<&UncertaintyRecord>, Vec<&UncertaintyRecord>) = members.iter().copied().partition(|r| chosen.contains(r.essay_id.as_str()));
            assert_eq!(sel.len(), members.len().min(n_s));
            expected_total += sel.len();
            for s in &sel {
                for r in &rej {
                    let key = |x: &UncertaintyRecord| (x.uncertainty, x.essay_id.clone());
                    assert!(key(s) < key(r), "bin {b}: {} kept over {}", s.essay_id, r.essay_id);
                }
            }
            assert!(set.labels.iter().filter(|l| l.bin == b).all(|l| bin(est.records.iter().find(|r| r.essay_id == l.essay_id).unwrap().mean[0]) == b));
        }
        assert_eq!(set.len(), expected_total);
    }
}

#[test]
fn dense_pool_gives_eight_times_thirty_two_plus_k() {
    let est = random_estimate(2000, 7);
    let set = select_balanced(&est, 8, 32, "overall").unwrap();
    assert_eq!(set.len(), 256);
    let mut unlabeled = pool(2000);
    unlabeled.ids = est.records.iter().map(|r| r.essay_id.clone()).collect();
    let pseudo = pseudo_training_data(&set, &unlabeled).unwrap();
    let mut labeled = pool(32);
    labeled.ids = (0..32).map(|i| format!("k{i}")).collect();
    labeled.targets.fill(0.5);
    let augmented = labeled.concat(&pseudo).unwrap();
    assert_eq!(augmented.len(), 8 * 32 + 32);
    for (row, label) in set.labels.iter().enumerate() {
        assert_eq!(pseudo.ids[row], label.essay_id);
        assert_eq!(pseudo.targets.row(row).to_vec(), label.scores);
    }
}

#[test]
fn single_bin_is_global_lowest() {
    let est = random_estimate(100, 8);
    let set = select_balanced(&est, 1, 10, "overall").unwrap();
    let mut all: Vec<(f64, String)> = est.records.iter().map(|r| (r.uncertainty, r.essay_id.clone())).collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let want: Vec<String> = all.into_iter().take(10).map(|x| x.1).collect();
    let got: Vec<String> = set.labels.iter().map(|l| l.essay_id.clone()).collect();
    assert_eq!(got, want);
}

fn model_config(dim: usize, traits: &[String]) -> ModelConfig {
    ModelConfig {
        input_dim: dim,
        hidden: 16,
        head_hidden: 8,
        dropout: 0.1,
        traits: traits.to_vec(),
    }
}

#[test]
fn overlap_with_labeled_rejected() {
    let hc = HeteroConfig::default();
    let (labeled, _) = heteroscedastic_data(&hc, 32, 1, "k");
    let (dev, _) = heteroscedastic_data(&hc, 32, 1, "dev");
    let cfg = model_config(labeled.features.ncols(), &labeled.traits);
    let w = LossWeights::balance(&labeled.traits);
    let err = self_train(&cfg, &quick_train_config(0), &labeled, &dev, &dev, &w, 0).unwrap_err();
    assert!(matches!(err, Error::PseudoLabelOverlap(_)));
}

/// Pseudo-labels that equal the hidden gold scores must help a K-only model.
#[test]
fn gold_pseudo_labels_beat_k_only() {
    let hc = HeteroConfig::default();
    let mut wins = 0;
    for seed in 0..20 {
        let (labeled, _) = heteroscedastic_data(&hc, 32, seed, "k");
        let (dev, _) = heteroscedastic_data(&hc, 32, seed, "dev");
        let (gold_pool, _) = heteroscedastic_data(&hc, 256, seed, "pool");
        let cfg = model_config(labeled.features.ncols(), &labeled.traits);
        let w = LossWeights::balance(&labeled.traits);
        let tc = quick_train_config(seed);
        let mut k_only = TraitModel::new(cfg.clone(), derive_seed(seed, "k-only", 0)).unwrap();
        let k_log = train(&mut k_only, &labeled, &dev, &w, &tc).unwrap();
        let (_, st_log) = self_train(&cfg, &tc, &labeled, &dev, &gold_pool, &w, seed).unwrap();
        if st_log.best_dev_qwk >= k_log.best_dev_qwk {
            wins += 1;
        }
    }
    assert!(wins >= 18, "{wins}/20");
}
