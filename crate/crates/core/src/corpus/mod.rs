//! Essays, score schemas and corpus files.
//!
//! A corpus file is UTF-8, tab separated, with the header
//! `essay_id  prompt_id  essay_text  <trait>...`. Score cells hold integers
//! or are empty; an essay is either fully scored for its prompt or not
//! scored at all.

mod split;

pub use split::{full_split, k_split, DatasetSplit, SplitPolicy};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OVERALL: &str = "overall";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraitRange {
    pub name: String,
    pub min: i64,
    pub max: i64,
}

impl TraitRange {
    pub fn span(&self) -> i64 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSchema {
    pub id: String,
    #[serde(rename = "trait")]
    pub traits: Vec<TraitRange>,
}

impl PromptSchema {
    pub fn trait_names(&self) -> impl Iterator<Item = &str> {
        self.traits.iter().map(|t| t.name.as_str())
    }

    pub fn range(&self, trait_name: &str) -> Option<&TraitRange> {
        self.traits.iter().find(|t| t.name == trait_name)
    }
}

/// Prompts, their ordered trait lists and inclusive integer score ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreSchema {
    #[serde(rename = "prompt")]
    pub prompts: Vec<PromptSchema>,
}

impl ScoreSchema {
    pub fn new(prompts: Vec<PromptSchema>) -> Result<Self> {
        let schema = ScoreSchema { prompts };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::InvalidSchema("no prompts".into()));
        }
        let mut ids = HashSet::new();
        for prompt in &self.prompts {
            if !ids.insert(prompt.id.as_str()) {
                return Err(Error::InvalidSchema(format!("duplicate prompt `{}`", prompt.id)));
            }
            match prompt.traits.first() {
                Some(t) if t.name == OVERALL => {}
                _ => {
                    return Err(Error::InvalidSchema(format!(
                        "prompt `{}` must list `{OVERALL}` as its first trait",
                        prompt.id
                    )))
                }
            }
            let mut names = HashSet::new();
            for t in &prompt.traits {
                if !names.insert(t.name.as_str()) {
                    return Err(Error::InvalidSchema(format!(
                        "duplicate trait `{}` in prompt `{}`",
                        t.name, prompt.id
                    )));
                }
                if t.max <= t.min {
                    return Err(Error::InvalidSchema(format!(
                        "trait `{}` of prompt `{}` has max {} <= min {}",
                        t.name, prompt.id, t.max, t.min
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let schema: ScoreSchema = toml::from_str(s)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn prompt(&self, id: &str) -> Result<&PromptSchema> {
        self.prompts
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::UnknownPrompt(id.to_string()))
    }

    /// Union of trait names in first-seen order; `overall` is always first.
    pub fn all_traits(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.prompts {
            for t in &p.traits {
                if !out.contains(&t.name) {
                    out.push(t.name.clone());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Essay {
    pub essay_id: String,
    pub prompt_id: String,
    pub text: String,
    pub gold: Option<BTreeMap<String, i64>>,
}

impl Essay {
    pub fn is_labeled(&self) -> bool {
        self.gold.is_some()
    }

    pub fn gold_score(&self, trait_name: &str) -> Option<i64> {
        self.gold.as_ref().and_then(|g| g.get(trait_name).copied())
    }
}

/// Min-max normalized gold scores, one value in `[0, 1]` per trait.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedScores {
    pub values: BTreeMap<String, f64>,
}

pub fn normalize_score(score: i64, range: &TraitRange) -> f64 {
    (score - range.min) as f64 / range.span() as f64
}

pub fn normalize(essay: &Essay, schema: &ScoreSchema) -> Result<NormalizedScores> {
    let gold = essay
        .gold
        .as_ref()
        .ok_or_else(|| Error::Unlabeled(essay.essay_id.clone()))?;
    let prompt = schema.prompt(&essay.prompt_id)?;
    let values = prompt
        .traits
        .iter()
        .map(|t| {
            let score = gold.get(&t.name).copied().ok_or_else(|| {
                Error::TraitMismatch(format!("essay {} lacks trait `{}`", essay.essay_id, t.name))
            })?;
            Ok((t.name.clone(), normalize_score(score, t)))
        })
        .collect::<Result<_>>()?;
    Ok(NormalizedScores { values })
}

/// An immutable collection of essays with unique ids.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Corpus {
    essays: Vec<Essay>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(essays: Vec<Essay>) -> Result<Self> {
        let mut index = HashMap::with_capacity(essays.len());
        for (i, e) in essays.iter().enumerate() {
            if index.insert(e.essay_id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate essay id `{}`",
                    e.essay_id
                )));
            }
        }
        Ok(Corpus { essays, index })
    }

    /// Builds a corpus after checking every essay against `schema`.
    pub fn validated(essays: Vec<Essay>, schema: &ScoreSchema) -> Result<Self> {
        for e in &essays {
            validate_essay(e, schema)?;
        }
        Self::new(essays)
    }

    pub fn essays(&self) -> &[Essay] {
        &self.essays
    }

    pub fn len(&self) -> usize {
        self.essays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.essays.is_empty()
    }

    pub fn get(&self, essay_id: &str) -> Option<&Essay> {
        self.index.get(essay_id).map(|&i| &self.essays[i])
    }

    pub fn position(&self, essay_id: &str) -> Option<usize> {
        self.index.get(essay_id).copied()
    }

    pub fn for_prompt<'a>(&'a self, prompt_id: &'a str) -> impl Iterator<Item = &'a Essay> + 'a {
        self.essays.iter().filter(move |e| e.prompt_id == prompt_id)
    }
}

fn validate_essay(essay: &Essay, schema: &ScoreSchema) -> Result<()> {
    let prompt = schema.prompt(&essay.prompt_id)?;
    if let Some(gold) = &essay.gold {
        for t in &prompt.traits {
            let score = gold.get(&t.name).copied().ok_or_else(|| {
                Error::TraitMismatch(format!("essay {} lacks trait `{}`", essay.essay_id, t.name))
            })?;
            if score < t.min || score > t.max {
                return Err(Error::ScoreOutOfRange {
                    essay_id: essay.essay_id.clone(),
                    trait_name: t.name.clone(),
                    score,
                    min: t.min,
                    max: t.max,
                });
            }
        }
        if gold.len() != prompt.traits.len() {
            return Err(Error::TraitMismatch(format!(
                "essay {} carries traits outside prompt `{}`",
                essay.essay_id, prompt.id
            )));
        }
    }
    Ok(())
}

const FIXED_COLUMNS: [&str; 3] = ["essay_id", "prompt_id", "essay_text"];

/// Reads a corpus file and validates it against `schema`.
pub fn ingest(path: impl AsRef<Path>, schema: &ScoreSchema) -> Result<Corpus> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, schema)
}

pub fn ingest_reader<R: std::io::Read>(reader: R, schema: &ScoreSchema) -> Result<Corpus> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 3 || header.iter().take(3).ne(FIXED_COLUMNS.iter().copied()) {
        return Err(Error::MalformedRow {
            row: 1,
            message: format!("header must start with {}", FIXED_COLUMNS.join(", ")),
        });
    }
    let trait_columns: Vec<String> = header.iter().skip(3).map(str::to_string).collect();

    let mut essays = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let row = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != header.len() {
            return Err(Error::MalformedRow {
                row,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let essay_id = record[0].to_string();
        let prompt_id = record[1].to_string();
        if essay_id.is_empty() {
            return Err(Error::MalformedRow {
                row,
                message: "empty essay_id".into(),
            });
        }
        let prompt = schema.prompt(&prompt_id)?;

        let mut scores = BTreeMap::new();
        for (name, cell) in trait_columns.iter().zip(record.iter().skip(3)) {
            let cell = cell.trim();
            if cell.is_empty() {
                continue;
            }
            let score: i64 = cell.parse().map_err(|_| Error::MalformedRow {
                row,
                message: format!("score `{cell}` for trait `{name}` is not an integer"),
            })?;
            let Some(range) = prompt.range(name) else {
                return Err(Error::MalformedRow {
                    row,
                    message: format!("trait `{name}` is not scored for prompt `{prompt_id}`"),
                });
            };
            if score < range.min || score > range.max {
                return Err(Error::ScoreOutOfRange {
                    essay_id,
                    trait_name: name.clone(),
                    score,
                    min: range.min,
                    max: range.max,
                });
            }
            scores.insert(name.clone(), score);
        }
        let gold = if scores.is_empty() {
            None
        } else {
            if let Some(missing) = prompt.trait_names().find(|t| !scores.contains_key(*t)) {
                return Err(Error::MalformedRow {
                    row,
                    message: format!(
                        "essay {essay_id} is partially scored (missing `{missing}`)"
                    ),
                });
            }
            Some(scores)
        };
        essays.push(Essay {
            essay_id,
            prompt_id,
            text: record[2].to_string(),
            gold,
        });
    }
    Corpus::new(essays)
}

/// Writes essays in the corpus file format, one trait column per trait in
/// the schema's union order.
pub fn write_corpus<W: std::io::Write>(writer: W, essays: &[Essay], schema: &ScoreSchema) -> Result<()> {
    write_corpus_with(writer, essays, schema, &[], |_| Vec::new())
}

/// Like [`write_corpus`], with extra trailing columns produced per essay.
pub fn write_corpus_with<W, F>(
    writer: W,
    essays: &[Essay],
    schema: &ScoreSchema,
    extra_columns: &[&str],
    mut extra: F,
) -> Result<()>
where
    W: std::io::Write,
    F: FnMut(&Essay) -> Vec<String>,
{
    let traits = schema.all_traits();
    let mut wtr = csv::WriterBuilder::new().delimiter(b'\t').from_writer(writer);
    let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
    header.extend(traits.iter().map(String::as_str));
    header.extend_from_slice(extra_columns);
    wtr.write_record(&header)?;
    for e in essays {
        let mut row = vec![e.essay_id.clone(), e.prompt_id.clone(), e.text.clone()];
        for t in &traits {
            row.push(e.gold_score(t).map(|s| s.to_string()).unwrap_or_default());
        }
        row.extend(extra(e));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("<corpus writer>", e))?;
    Ok(())
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &Corpus, schema: &ScoreSchema) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_corpus(std::io::BufWriter::new(file), corpus.essays(), schema)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn schema_p1() -> ScoreSchema {
        ScoreSchema::from_toml_str(
            r#"
[[prompt]]
id = "P1"
[[prompt.trait]]
name = "overall"
min = 2
max = 12
[[prompt.trait]]
name = "content"
min = 1
max = 6

[[prompt]]
id = "P2"
[[prompt.trait]]
name = "overall"
min = 0
max = 3
"#,
        )
        .unwrap()
    }

    fn read(text: &str) -> Result<Corpus> {
        ingest_reader(text.as_bytes(), &schema_p1())
    }

    #[test]
    fn in_range_score_passes_through() {
        let c = read("essay_id\tprompt_id\tessay_text\toverall\tcontent\ne1\tP1\tHello there.\t8\t3\n").unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.essays()[0].gold_score("overall"), Some(8));
    }

    #[test]
    fn out_of_range_names_the_essay() {
        let err = read("essay_id\tprompt_id\tessay_text\toverall\tcontent\ne9\tP1\tx\t13\t3\n").unwrap_err();
        match err {
            Error::ScoreOutOfRange { essay_id, trait_name, .. } => {
                assert_eq!(essay_id, "e9");
                assert_eq!(trait_name, "overall");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_prompt_rejected() {
        let err = read("essay_id\tprompt_id\tessay_text\toverall\tcontent\ne1\tP7\tx\t\t\n").unwrap_err();
        assert!(matches!(err, Error::UnknownPrompt(p) if p == "P7"));
    }

    #[test]
    fn malformed_row_reports_row_number() {
        let err = read("essay_id\tprompt_id\tessay_text\toverall\tcontent\ne1\tP1\tx\t8\t3\ne2\tP1\tx\n").unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 3, .. }), "{err:?}");
        let err = read("essay_id\tprompt_id\tessay_text\toverall\tcontent\ne1\tP1\tx\teight\t3\n").unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 2, .. }), "{err:?}");
    }

    #[test]
    fn partial_scores_rejected_and_empty_rows_unlabeled() {
        let err = read("essay_id\tprompt_id\tessay_text\toverall\tcontent\ne1\tP1\tx\t8\t\n").unwrap_err();
        assert!(matches!(err, Error::MalformedRow { .. }));
        let c = read("essay_id\tprompt_id\tessay_text\toverall\tcontent\ne1\tP1\tx\t\t\ne2\tP2\ty\t2\t\n").unwrap();
        assert!(!c.essays()[0].is_labeled());
        assert_eq!(c.essays()[1].gold_score("overall"), Some(2));
    }

    #[test]
    fn trait_outside_prompt_rejected() {
        let err = read("essay_id\tprompt_id\tessay_text\toverall\tcontent\ne1\tP2\tx\t2\t3\n").unwrap_err();
        assert!(matches!(err, Error::MalformedRow { .. }));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = read("essay_id\tprompt_id\tessay_text\toverall\tcontent\ne1\tP2\tx\t2\t\ne1\tP2\ty\t1\t\n").unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let schema = schema_p1();
        let essay = |o| Essay {
            essay_id: "e".into(),
            prompt_id: "P1".into(),
            text: String::new(),
            gold: Some(BTreeMap::from([("overall".into(), o), ("content".into(), 1)])),
        };
        assert_eq!(normalize(&essay(2), &schema).unwrap().values["overall"], 0.0);
        assert_eq!(normalize(&essay(12), &schema).unwrap().values["overall"], 1.0);
        assert_eq!(normalize(&essay(7), &schema).unwrap().values["overall"], 0.5);
        let unlabeled = Essay { gold: None, ..essay(2) };
        assert!(matches!(normalize(&unlabeled, &schema), Err(Error::Unlabeled(_))));
    }

    #[test]
    fn schema_invariants_enforced() {
        let bad_first = "[[prompt]]\nid='A'\n[[prompt.trait]]\nname='content'\nmin=0\nmax=3\n";
        assert!(ScoreSchema::from_toml_str(bad_first).is_err());
        let bad_range = "[[prompt]]\nid='A'\n[[prompt.trait]]\nname='overall'\nmin=3\nmax=3\n";
        assert!(ScoreSchema::from_toml_str(bad_range).is_err());
        let dup = "[[prompt]]\nid='A'\n[[prompt.trait]]\nname='overall'\nmin=0\nmax=3\n[[prompt.trait]]\nname='overall'\nmin=0\nmax=3\n";
        assert!(ScoreSchema::from_toml_str(dup).is_err());
    }

    #[test]
    fn text_with_tabs_quotes_and_newlines_round_trips() {
        let schema = schema_p1();
        let essays = vec![
            Essay {
                essay_id: "a".into(),
                prompt_id: "P1".into(),
                text: "\"Quoted\" start,\tthen a tab\nand a newline.".into(),
                gold: Some(BTreeMap::from([("overall".into(), 5), ("content".into(), 2)])),
            },
            Essay {
                essay_id: "b".into(),
                prompt_id: "P2".into(),
                text: "plain".into(),
                gold: None,
            },
        ];
        let mut buf = Vec::new();
        write_corpus(&mut buf, &essays, &schema).unwrap();
        let back = ingest_reader(buf.as_slice(), &schema).unwrap();
        assert_eq!(back.essays(), essays.as_slice());
    }
}
