//! Dialogue and knowledge data model, corpus ingestion, splitting and
//! datapoint extraction.

mod synthetic;
mod vocab;

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{GcnError, Result};
use crate::retriever::TfidfIndex;
use crate::seed;

pub use synthetic::{generate_synthetic_corpus, SyntheticSpec};
pub use vocab::{build_vocabulary, vocabulary_from_counts, Vocabulary, RESERVED_TOKENS};

/// Lowercases and splits on whitespace and punctuation. Every
/// non-alphanumeric, non-whitespace character becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    pub fn other(self) -> Speaker {
        match self {
            Speaker::A => Speaker::B,
            Speaker::B => Speaker::A,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub speaker: Speaker,
    pub tokens: Vec<String>,
    pub raw_text: String,
}

impl Utterance {
    pub fn new(speaker: Speaker, raw_text: impl Into<String>) -> Result<Self> {
        let raw_text = raw_text.into();
        let tokens = tokenize(&raw_text);
        if tokens.is_empty() {
            return Err(GcnError::InvalidInput(format!(
                "utterance has no tokens: {raw_text:?}"
            )));
        }
        Ok(Utterance {
            speaker,
            tokens,
            raw_text,
        })
    }

    /// Builds an utterance from already-tokenized output; the raw text is
    /// the space-joined tokens, which re-tokenizes to the same sequence.
    pub fn from_tokens(speaker: Speaker, tokens: &[String]) -> Result<Self> {
        Utterance::new(speaker, tokens.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgePiece {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
}

impl KnowledgePiece {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let tokens = tokenize(&text);
        if tokens.is_empty() {
            return Err(GcnError::InvalidInput("knowledge piece has no tokens".into()));
        }
        Ok(KnowledgePiece {
            id: id.into(),
            text,
            tokens,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Utterance>,
    /// Ordered as in the source record.
    pub knowledge_refs: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Seed,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub context: Vec<Utterance>,
    pub knowledge: Vec<KnowledgePiece>,
    pub response: Utterance,
    pub origin: Origin,
    /// Pieces the source dialogue actually references. Empty for synthetic
    /// datapoints and in open-domain mode.
    pub gold_knowledge: Vec<KnowledgePiece>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OpenDomain,
    KnowledgeGrounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub seed_fraction: f64,
    pub val_fraction: f64,
    pub rng_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            seed_fraction: 0.1,
            val_fraction: 0.1,
            rng_seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.seed_fraction > 0.0 && self.seed_fraction <= 1.0) {
            return Err(GcnError::Config(format!(
                "seed_fraction must be in (0, 1], got {}",
                self.seed_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.val_fraction) {
            return Err(GcnError::Config(format!(
                "val_fraction must be in [0, 1], got {}",
                self.val_fraction
            )));
        }
        if self.seed_fraction + self.val_fraction > 1.0 + 1e-12 {
            return Err(GcnError::Config(
                "seed_fraction + val_fraction must not exceed 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub seed: Vec<Dialogue>,
    pub val: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

/// Partitions dialogues into seed, validation and test sets. Sizes are
/// `floor(fraction * total)`; the remainder goes to test.
pub fn split(dialogues: &[Dialogue], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let total = dialogues.len();
    let n_seed = (spec.seed_fraction * total as f64).floor() as usize;
    let n_val = (spec.val_fraction * total as f64).floor() as usize;
    if n_seed == 0 {
        return Err(GcnError::Config(format!(
            "seed_fraction {} of {total} dialogues yields an empty seed set",
            spec.seed_fraction
        )));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut seed::rng_for(spec.rng_seed, "split", 0));
    let pick = |idx: &[usize]| idx.iter().map(|&i| dialogues[i].clone()).collect();
    Ok(Splits {
        seed: pick(&order[..n_seed]),
        val: pick(&order[n_seed..n_seed + n_val]),
        test: pick(&order[n_seed + n_val..]),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub datapoints: Vec<DataPoint>,
    /// Dialogues too short to yield a single datapoint.
    pub skipped: usize,
}

/// Emits one datapoint per turn index `i >= t` with the previous `t` turns
/// as context. In knowledge-grounded mode the top-`m` retrieved pieces
/// become the datapoint's knowledge.
pub fn extract_datapoints(
    dialogues: &[Dialogue],
    t: usize,
    mode: Mode,
    retriever: Option<&TfidfIndex>,
    m: usize,
) -> Result<Extraction> {
    if t == 0 {
        return Err(GcnError::Config("context window t must be at least 1".into()));
    }
    let index = match mode {
        Mode::KnowledgeGrounded => Some(retriever.ok_or_else(|| {
            GcnError::Config("knowledge-grounded extraction requires a retriever".into())
        })?),
        Mode::OpenDomain => None,
    };
    let mut out = Extraction::default();
    for dialogue in dialogues {
        if dialogue.turns.len() < t + 1 {
            out.skipped += 1;
            continue;
        }
        for i in t..dialogue.turns.len() {
            let context = dialogue.turns[i - t..i].to_vec();
            let (knowledge, gold_knowledge) = match index {
                Some(index) => (
                    retrieve_knowledge(index, &context, m),
                    index.lookup(&dialogue.knowledge_refs),
                ),
                None => (Vec::new(), Vec::new()),
            };
            out.datapoints.push(DataPoint {
                context,
                knowledge,
                response: dialogue.turns[i].clone(),
                origin: Origin::Seed,
                gold_knowledge,
            });
        }
    }
    Ok(out)
}

pub(crate) fn retrieve_knowledge(
    index: &TfidfIndex,
    context: &[Utterance],
    m: usize,
) -> Vec<KnowledgePiece> {
    index
        .top_m(context, m)
        .into_iter()
        .map(|(piece, _)| piece.clone())
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
    pub knowledge: Vec<KnowledgePiece>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    Fact {
        id: String,
        text: String,
    },
    Dialogue {
        id: String,
        turns: Vec<TurnRecord>,
        knowledge_refs: Vec<String>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct TurnRecord {
    speaker: Speaker,
    text: String,
}

/// Reads a line-delimited corpus file of fact and dialogue records.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| GcnError::io(path, e))?;
    parse_corpus(BufReader::new(file), path)
}

pub fn parse_corpus(reader: impl BufRead, path: &Path) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    let mut fact_ids = HashSet::new();
    let mut dialogue_ids = HashSet::new();
    let parse_err = |line: usize, message: String| GcnError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| GcnError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        match record {
            Record::Fact { id, text } => {
                if !fact_ids.insert(id.clone()) {
                    return Err(GcnError::Integrity(format!(
                        "duplicate fact id {id:?} on line {lineno}"
                    )));
                }
                let piece = KnowledgePiece::new(id, text)
                    .map_err(|e| parse_err(lineno, e.to_string()))?;
                corpus.knowledge.push(piece);
            }
            Record::Dialogue {
                id,
                turns,
                knowledge_refs,
            } => {
                if !dialogue_ids.insert(id.clone()) {
                    return Err(GcnError::Integrity(format!(
                        "duplicate dialogue id {id:?} on line {lineno}"
                    )));
                }
                if turns.len() < 2 {
                    return Err(parse_err(lineno, "dialogue needs at least 2 turns".into()));
                }
                let turns = turns
                    .into_iter()
                    .map(|t| Utterance::new(t.speaker, t.text))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| parse_err(lineno, e.to_string()))?;
                if turns.windows(2).any(|w| w[0].speaker == w[1].speaker) {
                    return Err(parse_err(lineno, "turns must alternate speakers".into()));
                }
                corpus.dialogues.push(Dialogue {
                    id,
                    turns,
                    knowledge_refs,
                });
            }
        }
    }
    for d in &corpus.dialogues {
        if let Some(missing) = d.knowledge_refs.iter().find(|r| !fact_ids.contains(*r)) {
            return Err(GcnError::Integrity(format!(
                "dialogue {:?} references unknown fact {missing:?}",
                d.id
            )));
        }
    }
    Ok(corpus)
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| GcnError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| GcnError::io(path, e);
    for k in &corpus.knowledge {
        let rec = Record::Fact {
            id: k.id.clone(),
            text: k.text.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(io)?;
    }
    for d in &corpus.dialogues {
        let rec = Record::Dialogue {
            id: d.id.clone(),
            turns: d
                .turns
                .iter()
                .map(|u| TurnRecord {
                    speaker: u.speaker,
                    text: u.raw_text.clone(),
                })
                .collect(),
            knowledge_refs: d.knowledge_refs.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Sidecar written next to a dataset file in corpus format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub origin: Origin,
    pub datapoints: usize,
    pub context_turns: usize,
    pub source: String,
}

/// Stores datapoints in corpus format: each datapoint is a dialogue whose
/// turns are the context followed by the response and whose knowledge refs
/// are the datapoint's knowledge in retrieval order.
pub fn datapoints_to_corpus(prefix: &str, datapoints: &[DataPoint]) -> Corpus {
    let mut knowledge: Vec<KnowledgePiece> = Vec::new();
    let mut seen = HashSet::new();
    let mut dialogues = Vec::with_capacity(datapoints.len());
    for (i, dp) in datapoints.iter().enumerate() {
        for k in &dp.knowledge {
            if seen.insert(k.id.clone()) {
                knowledge.push(k.clone());
            }
        }
        let mut turns = dp.context.clone();
        turns.push(dp.response.clone());
        dialogues.push(Dialogue {
            id: format!("{prefix}-{i:06}"),
            turns,
            knowledge_refs: dp.knowledge.iter().map(|k| k.id.clone()).collect(),
        });
    }
    knowledge.sort_by(|a, b| a.id.cmp(&b.id));
    Corpus {
        dialogues,
        knowledge,
    }
}

/// Inverse of [`datapoints_to_corpus`].
pub fn corpus_to_datapoints(corpus: &Corpus, origin: Origin) -> Result<Vec<DataPoint>> {
    let by_id: HashMap<&str, &KnowledgePiece> =
        corpus.knowledge.iter().map(|k| (k.id.as_str(), k)).collect();
    corpus
        .dialogues
        .iter()
        .map(|d| {
            let (response, context) = d
                .turns
                .split_last()
                .ok_or_else(|| GcnError::InvalidInput(format!("dialogue {} is empty", d.id)))?;
            let knowledge = d
                .knowledge_refs
                .iter()
                .map(|r| {
                    by_id.get(r.as_str()).map(|k| (*k).clone()).ok_or_else(|| {
                        GcnError::Integrity(format!("unknown knowledge ref {r:?}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(DataPoint {
                context: context.to_vec(),
                knowledge,
                response: response.clone(),
                origin,
                gold_knowledge: Vec::new(),
            })
        })
        .collect()
}
