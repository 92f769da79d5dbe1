//! Task vocabulary selection and nearest-kept-token remapping.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::FrequencyTable;
use crate::error::{Error, Result};
use crate::matrix::EmbeddingMatrix;
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

/// Kept tokens: specials first (ascending id), then content tokens by
/// descending frequency with ties on ascending id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrunedVocabulary {
    kept: Vec<(TokenId, String)>,
    num_specials: usize,
}

impl PrunedVocabulary {
    pub fn kept(&self) -> &[(TokenId, String)] {
        &self.kept
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn num_specials(&self) -> usize {
        self.num_specials
    }

    pub fn content_tokens(&self) -> &[(TokenId, String)] {
        &self.kept[self.num_specials..]
    }

    pub fn original_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.kept.iter().map(|(id, _)| *id)
    }

    /// Embedding rows of the kept tokens, in pruned index order.
    pub fn gather_rows(&self, emb: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        let mut data = Vec::with_capacity(self.kept.len() * emb.dim());
        for (id, _) in &self.kept {
            if *id as usize >= emb.rows() {
                return Err(Error::DimensionMismatch(format!(
                    "kept id {id} outside embedding matrix of {} rows",
                    emb.rows()
                )));
            }
            data.extend_from_slice(emb.row(*id as usize));
        }
        EmbeddingMatrix::new(self.kept.len(), emb.dim(), data)
    }
}

/// Keeps every special token plus the `k` most frequent content tokens.
///
/// Only tokens with a positive count are eligible, so fewer than `k` content
/// tokens survive when the corpus is small.
pub fn select_top_k(
    freq: &FrequencyTable,
    vocab: &Vocabulary,
    k: usize,
) -> Result<PrunedVocabulary> {
    if k == 0 {
        return Err(Error::Precondition("K must be at least 1".into()));
    }
    let mut content: Vec<(TokenId, u64)> = freq
        .counts()
        .iter()
        .filter(|(id, n)| **n > 0 && !vocab.is_special(**id) && (**id as usize) < vocab.len())
        .map(|(id, n)| (*id, *n))
        .collect();
    content.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    content.truncate(k);

    let mut kept: Vec<(TokenId, String)> = vocab
        .special_ids()
        .iter()
        .map(|&id| (id, vocab.token(id).unwrap().to_string()))
        .collect();
    let num_specials = kept.len();
    kept.extend(
        content
            .into_iter()
            .map(|(id, _)| (id, vocab.token(id).unwrap().to_string())),
    );
    Ok(PrunedVocabulary { kept, num_specials })
}

/// Dense map from every original token id to an index into the kept tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemapTable {
    map: Vec<u32>,
}

impl RemapTable {
    pub fn map(&self) -> &[u32] {
        &self.map
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, id: TokenId) -> Option<u32> {
        self.map.get(id as usize).copied()
    }
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum()
}

/// Maps each original token to its Euclidean-nearest kept token.
///
/// Distances use the full embedding rows. Kept tokens map to themselves; among
/// equidistant candidates the smallest original id wins. The search runs in
/// parallel over original ids and the result does not depend on thread count.
pub fn build_remap(
    vocab: &Vocabulary,
    pruned: &PrunedVocabulary,
    emb: &EmbeddingMatrix,
) -> Result<RemapTable> {
    if emb.rows() != vocab.len() {
        return Err(Error::DimensionMismatch(format!(
            "embedding matrix has {} rows, vocabulary has {} tokens",
            emb.rows(),
            vocab.len()
        )));
    }
    if pruned.is_empty() {
        return Err(Error::Precondition("pruned vocabulary is empty".into()));
    }
    let mut self_index = vec![None; vocab.len()];
    for (idx, (id, _)) in pruned.kept().iter().enumerate() {
        let slot = self_index
            .get_mut(*id as usize)
            .ok_or_else(|| Error::DimensionMismatch(format!("kept id {id} not in vocabulary")))?;
        if slot.is_some() {
            return Err(Error::Precondition(format!("kept id {id} listed twice")));
        }
        *slot = Some(idx as u32);
    }
    // candidates in ascending original id so a strict `<` keeps the smallest id on ties
    let mut candidates: Vec<(TokenId, u32)> = pruned
        .kept()
        .iter()
        .enumerate()
        .map(|(idx, (id, _))| (*id, idx as u32))
        .collect();
    candidates.sort_unstable();

    let map = (0..vocab.len())
        .into_par_iter()
        .map(|t| {
            if let Some(idx) = self_index[t] {
                return idx;
            }
            let row = emb.row(t);
            let mut best = (f64::INFINITY, candidates[0].1);
            for &(id, idx) in &candidates {
                let d = squared_distance(row, emb.row(id as usize));
                if d < best.0 {
                    best = (d, idx);
                }
            }
            best.1
        })
        .collect();
    Ok(RemapTable { map })
}

/// Rewrites original ids into pruned index space.
pub fn remap_tokens(table: &RemapTable, seq: &TokenSequence) -> Result<TokenSequence> {
    seq.ids()
        .iter()
        .map(|&id| {
            table.get(id).ok_or_else(|| {
                Error::Precondition(format!(
                    "token id {id} outside remap table of {} entries",
                    table.len()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(TokenSequence)
}

/// On-disk form: `{"kept": [[original_id, "token"], ...], "map": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemapArtifact {
    pub kept: Vec<(TokenId, String)>,
    pub map: Vec<u32>,
}

impl RemapArtifact {
    pub fn new(pruned: &PrunedVocabulary, table: &RemapTable) -> Self {
        Self {
            kept: pruned.kept().to_vec(),
            map: table.map().to_vec(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("remap artifact serializes")
    }

    /// Validates the artifact against `vocab` and splits it back into its parts.
    pub fn into_parts(self, vocab: &Vocabulary) -> Result<(PrunedVocabulary, RemapTable)> {
        let ctx = "remap artifact";
        if self.map.len() != vocab.len() {
            return Err(Error::format(
                ctx,
                format!(
                    "map has {} entries, vocabulary has {}",
                    self.map.len(),
                    vocab.len()
                ),
            ));
        }
        let mut ids = HashSet::new();
        for (id, tok) in &self.kept {
            if vocab.token(*id) != Some(tok.as_str()) {
                return Err(Error::format(
                    ctx,
                    format!("kept entry ({id}, {tok:?}) does not match vocabulary"),
                ));
            }
            if !ids.insert(*id) {
                return Err(Error::format(ctx, format!("kept id {id} repeated")));
            }
        }
        if let Some(missing) = vocab.special_ids().iter().find(|s| !ids.contains(s)) {
            return Err(Error::format(ctx, format!("special id {missing} not kept")));
        }
        if let Some(bad) = self.map.iter().find(|&&m| m as usize >= self.kept.len()) {
            return Err(Error::format(
                ctx,
                format!("map entry {bad} outside kept list"),
            ));
        }
        for (idx, (id, _)) in self.kept.iter().enumerate() {
            if self.map[*id as usize] as usize != idx {
                return Err(Error::format(
                    ctx,
                    format!("kept id {id} does not map to itself"),
                ));
            }
        }
        let num_specials = self
            .kept
            .iter()
            .take_while(|(id, _)| vocab.is_special(*id))
            .count();
        Ok((
            PrunedVocabulary {
                kept: self.kept,
                num_specials,
            },
            RemapTable { map: self.map },
        ))
    }
}

pub fn load_remap(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
) -> Result<(PrunedVocabulary, RemapTable)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let artifact: RemapArtifact = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("remap {}", path.display()), e.to_string()))?;
    artifact.into_parts(vocab)
}
