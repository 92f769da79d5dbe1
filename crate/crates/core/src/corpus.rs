//! Labeled utterance datasets and token frequency statistics.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Utterance, Vocabulary};

/// Utterances plus their distinct labels in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    utterances: Vec<Utterance>,
    labels: Vec<String>,
    label_index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_utterances(utterances: impl IntoIterator<Item = Utterance>) -> Self {
        let mut ds = Self::new();
        for u in utterances {
            ds.push(u);
        }
        ds
    }

    pub fn push(&mut self, utterance: Utterance) {
        if !self.label_index.contains_key(&utterance.label) {
            self.label_index
                .insert(utterance.label.clone(), self.labels.len());
            self.labels.push(utterance.label.clone());
        }
        self.utterances.push(utterance);
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_id(&self, label: &str) -> Option<usize> {
        self.label_index.get(label).copied()
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Utterance texts carrying `label`, in dataset order.
    pub fn texts_for(&self, label: &str) -> Vec<&str> {
        self.utterances
            .iter()
            .filter(|u| u.label == label)
            .map(|u| u.text.as_str())
            .collect()
    }

    /// Appends every utterance of `other`; labels new to `self` go last.
    pub fn extend(&mut self, other: &Dataset) {
        for u in other.utterances() {
            self.push(u.clone());
        }
    }

    /// JSON-lines rendering, one `{"text","label"}` object per utterance.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            out.push_str(&serde_json::to_string(u).expect("utterance serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(serde::Deserialize)]
struct RawLine {
    text: Option<String>,
    label: Option<String>,
}

/// Parses JSON-lines corpus text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_corpus(text: &str, context: &str) -> Result<Dataset> {
    let mut ds = Dataset::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLine = serde_json::from_str(line)
            .map_err(|e| Error::format(context, format!("line {lineno}: malformed JSON: {e}")))?;
        let text = raw.text.ok_or_else(|| {
            Error::format(context, format!("line {lineno}: missing field \"text\""))
        })?;
        let label = raw.label.ok_or_else(|| {
            Error::format(context, format!("line {lineno}: missing field \"label\""))
        })?;
        let u = Utterance::new(text, label)
            .map_err(|_| Error::format(context, format!("line {lineno}: empty \"text\"")))?;
        ds.push(u);
    }
    Ok(ds)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let context = format!("corpus {}", path.display());
    let text = String::from_utf8(bytes).map_err(|e| Error::Decode {
        context: context.clone(),
        offset: e.utf8_error().valid_up_to(),
    })?;
    parse_corpus(&text, &context)
}

pub fn save_corpus(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(dataset.to_jsonl().as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Occurrence counts of non-special tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FrequencyTable {
    counts: BTreeMap<TokenId, u64>,
    total: u64,
}

impl FrequencyTable {
    pub fn counts(&self) -> &BTreeMap<TokenId, u64> {
        &self.counts
    }

    pub fn count(&self, id: TokenId) -> u64 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    fn add(&mut self, id: TokenId, n: u64) {
        *self.counts.entry(id).or_insert(0) += n;
        self.total += n;
    }

    pub fn merge(mut self, other: FrequencyTable) -> FrequencyTable {
        for (id, n) in other.counts {
            self.add(id, n);
        }
        self
    }
}

/// Counts token occurrences over every utterance, excluding special tokens.
///
/// Work is sharded across the current rayon pool; the merged table is identical
/// for any thread count.
pub fn count_token_frequencies(dataset: &Dataset, vocab: &Vocabulary) -> FrequencyTable {
    dataset
        .utterances()
        .par_iter()
        .fold(FrequencyTable::default, |mut table, u| {
            for &id in vocab.tokenize(&u.text).ids() {
                if !vocab.is_special(id) {
                    table.add(id, 1);
                }
            }
            table
        })
        .reduce(FrequencyTable::default, FrequencyTable::merge)
}
