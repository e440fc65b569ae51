use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Corpus, Essay, OVERALL};
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum SplitPolicy {
    Full,
    KData { k: usize },
}

impl std::fmt::Display for SplitPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitPolicy::Full => f.write_str("full"),
            SplitPolicy::KData { k } => write!(f, "k:{k}"),
        }
    }
}

impl std::str::FromStr for SplitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(SplitPolicy::Full);
        }
        s.strip_prefix("k:")
            .or_else(|| s.strip_prefix("k="))
            .and_then(|k| k.parse().ok())
            .filter(|&k: &usize| k > 0)
            .map(|k| SplitPolicy::KData { k })
            .ok_or_else(|| Error::Config(format!("split policy `{s}` (expected `full` or `k:<K>`)")))
    }
}

/// Train/dev/test/unlabeled partition of a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
    pub unlabeled: Vec<String>,
    pub seed: u64,
    #[serde(flatten)]
    pub policy: SplitPolicy,
    /// How K-data train and dev were balanced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balancing: Option<String>,
}

impl DatasetSplit {
    /// Restricts every partition to the essays of one prompt.
    pub fn for_prompt(&self, corpus: &Corpus, prompt_id: &str) -> DatasetSplit {
        let keep = |ids: &[String]| -> Vec<String> {
            ids.iter()
                .filter(|id| corpus.get(id).is_some_and(|e| e.prompt_id == prompt_id))
                .cloned()
                .collect()
        };
        DatasetSplit {
            train: keep(&self.train),
            dev: keep(&self.dev),
            test: keep(&self.test),
            unlabeled: keep(&self.unlabeled),
            ..self.clone()
        }
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.dev).chain(&self.test).chain(&self.unlabeled) {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidArgument(format!("essay `{id}` appears in two partitions")));
            }
        }
        Ok(())
    }
}

fn prompts_in_order(corpus: &Corpus) -> Vec<&str> {
    let mut out: Vec<&str> = Vec::new();
    for e in corpus.essays() {
        if !out.contains(&e.prompt_id.as_str()) {
            out.push(&e.prompt_id);
        }
    }
    out
}

/// 3:1:1 split of the labeled essays of each prompt.
///
/// Sizes are `floor(3n/5)`, `floor(n/5)`, `floor(n/5)`; the leftover essays
/// (at most two) are handed out one at a time to train, then dev.
pub fn full_split(corpus: &Corpus, seed: u64) -> Result<DatasetSplit> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("corpus"));
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        unlabeled: Vec::new(),
        seed,
        policy: SplitPolicy::Full,
        balancing: None,
    };
    for (pi, prompt) in prompts_in_order(corpus).into_iter().enumerate() {
        let mut ids: Vec<&str> = corpus
            .for_prompt(prompt)
            .filter(|e| e.is_labeled())
            .map(|e| e.essay_id.as_str())
            .collect();
        ids.shuffle(&mut rng_from(seed, &format!("full_split/{prompt}"), pi as u64));
        let (n_train, n_dev, _) = full_sizes(ids.len());
        split.train.extend(ids[..n_train].iter().map(|s| s.to_string()));
        split.dev.extend(ids[n_train..n_train + n_dev].iter().map(|s| s.to_string()));
        split.test.extend(ids[n_train + n_dev..].iter().map(|s| s.to_string()));
    }
    Ok(split)
}

pub(crate) fn full_sizes(n: usize) -> (usize, usize, usize) {
    let mut sizes = [n * 3 / 5, n / 5, n / 5];
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut slot = 0;
    while rest > 0 {
        sizes[slot % 3] += 1;
        slot += 1;
        rest -= 1;
    }
    (sizes[0], sizes[1], sizes[2])
}

/// K-data split: per prompt, K balanced essays for train and K for dev.
///
/// The labeled pool (prompt essays minus `test`) is stratified by gold
/// overall score. Strata are visited round-robin in ascending score order,
/// each shuffled by the seed, until K essays are drawn for train; dev is then
/// drawn the same way, restarting at the lowest stratum. Everything else that
/// is not in `test` becomes unlabeled.
pub fn k_split(corpus: &Corpus, seed: u64, k: usize, test: &[String]) -> Result<DatasetSplit> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("corpus"));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    let test_set: HashSet<&str> = test.iter().map(String::as_str).collect();
    for id in test {
        if corpus.get(id).is_none() {
            return Err(Error::InvalidArgument(format!("test essay `{id}` not in corpus")));
        }
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        dev: Vec::new(),
        test: test.to_vec(),
        unlabeled: Vec::new(),
        seed,
        policy: SplitPolicy::KData { k },
        balancing: Some("round-robin over overall-score strata; train and dev balanced independently".into()),
    };
    for (pi, prompt) in prompts_in_order(corpus).into_iter().enumerate() {
        let pool: Vec<&Essay> = corpus
            .for_prompt(prompt)
            .filter(|e| e.is_labeled() && !test_set.contains(e.essay_id.as_str()))
            .collect();
        if pool.len() < 2 * k {
            return Err(Error::InsufficientPool {
                prompt: prompt.to_string(),
                required: 2 * k,
                available: pool.len(),
            });
        }
        let mut strata: BTreeMap<i64, Vec<&str>> = BTreeMap::new();
        for e in &pool {
            let score = e.gold_score(OVERALL).unwrap_or_default();
            strata.entry(score).or_default().push(&e.essay_id);
        }
        let mut strata: Vec<Vec<&str>> = strata
            .into_iter()
            .map(|(score, mut ids)| {
                ids.shuffle(&mut rng_from(seed, &format!("k_split/{prompt}"), (score as u64) ^ ((pi as u64) << 32)));
                // Reverse so `pop` yields the shuffled order.
                ids.reverse();
                ids
            })
            .collect();
        let train = round_robin(&mut strata, k);
        let dev = round_robin(&mut strata, k);
        let chosen: HashSet<&str> = train.iter().chain(&dev).copied().collect();
        split.train.extend(train.iter().map(|s| s.to_string()));
        split.dev.extend(dev.iter().map(|s| s.to_string()));
        split.unlabeled.extend(
            corpus
                .for_prompt(prompt)
                .filter(|e| !test_set.contains(e.essay_id.as_str()) && !chosen.contains(e.essay_id.as_str()))
                .map(|e| e.essay_id.clone()),
        );
    }
    Ok(split)
}

fn round_robin<'a>(strata: &mut [Vec<&'a str>], k: usize) -> Vec<&'a str> {
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let before = out.len();
        for stratum in strata.iter_mut() {
            if out.len() == k {
                break;
            }
            if let Some(id) = stratum.pop() {
                out.push(id);
            }
        }
        if out.len() == before {
            break;
        }
    }
    out
}
