//! Subword vocabulary and greedy longest-match tokenizer.
//!
//! Vocabulary files are BERT-style: one token per line, token id equal to the
//! zero-based line index, word continuations carrying a `##` prefix.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

/// Reserved token strings recognised as special, in no particular order.
pub const SPECIAL_TOKENS: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN];

const CONTINUATION_PREFIX: &str = "##";

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    special_ids: BTreeSet<TokenId>,
    unk_id: TokenId,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered token list.
    ///
    /// Fails when a token repeats (both 1-based positions are reported) or when
    /// `[UNK]` is absent.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        Self::build(tokens, "vocab")
    }

    fn build(tokens: Vec<String>, context: &str) -> Result<Self> {
        if tokens.len() > TokenId::MAX as usize {
            return Err(Error::format(context, "vocabulary too large"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::format(
                    context,
                    format!("empty token on line {}", i + 1),
                ));
            }
            if let Some(prev) = index.insert(tok.clone(), i as TokenId) {
                return Err(Error::format(
                    context,
                    format!(
                        "duplicate token {tok:?} on lines {} and {}",
                        prev as usize + 1,
                        i + 1
                    ),
                ));
            }
        }
        let special_ids: BTreeSet<TokenId> = SPECIAL_TOKENS
            .iter()
            .filter_map(|s| index.get(*s).copied())
            .collect();
        let unk_id = *index
            .get(UNK_TOKEN)
            .ok_or_else(|| Error::format(context, format!("missing required token {UNK_TOKEN}")))?;
        Ok(Self {
            tokens,
            index,
            special_ids,
            unk_id,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn special_ids(&self) -> &BTreeSet<TokenId> {
        &self.special_ids
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.special_ids.contains(&id)
    }

    pub fn unk_id(&self) -> TokenId {
        self.unk_id
    }

    /// Segments `text` into vocabulary ids.
    ///
    /// Text is lowercased and split on whitespace, with every punctuation
    /// character forming its own word. Each word is matched greedily against the
    /// longest vocabulary prefix, later pieces using the `##` continuation form.
    /// A word with any unmatched position becomes a single `[UNK]`.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::new();
        for word in split_words(&text.to_lowercase()) {
            self.segment_word(word, &mut ids);
        }
        TokenSequence(ids)
    }

    fn segment_word(&self, word: &str, out: &mut Vec<TokenId>) {
        let start_len = out.len();
        let mut start = 0;
        let mut piece = String::with_capacity(word.len() + CONTINUATION_PREFIX.len());
        while start < word.len() {
            let rest = &word[start..];
            let mut found = None;
            // candidate ends at char boundaries, longest first
            let ends: Vec<usize> = rest
                .char_indices()
                .skip(1)
                .map(|(i, _)| i)
                .chain(std::iter::once(rest.len()))
                .collect();
            for &end in ends.iter().rev() {
                piece.clear();
                if start > 0 {
                    piece.push_str(CONTINUATION_PREFIX);
                }
                piece.push_str(&rest[..end]);
                if let Some(&id) = self.index.get(piece.as_str()) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start += end;
                }
                None => {
                    out.truncate(start_len);
                    out.push(self.unk_id);
                    return;
                }
            }
        }
    }
}

/// Reads a vocabulary file: UTF-8, one token per line, trailing newline optional.
pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocabulary> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let context = format!("vocab {}", path.display());
    let text = String::from_utf8(bytes).map_err(|e| Error::Decode {
        context: context.clone(),
        offset: e.utf8_error().valid_up_to(),
    })?;
    let body = text.strip_suffix('\n').unwrap_or(&text);
    let tokens: Vec<String> = if body.is_empty() {
        Vec::new()
    } else {
        body.split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
            .collect()
    };
    Vocabulary::build(tokens, &context)
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32,
            0x00A1..=0x00BF
            | 0x2010..=0x2027
            | 0x2030..=0x205E
            | 0x3001..=0x3003
            | 0x3008..=0x3011
            | 0xFF01..=0xFF0F)
}

/// Whitespace/punctuation pre-tokenization over already-normalised text.
fn split_words(text: &str) -> Vec<&str> {
    let mut words = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() || c.is_control() {
            if let Some(s) = word_start.take() {
                words.push(&text[s..i]);
            }
        } else if is_punctuation(c) {
            if let Some(s) = word_start.take() {
                words.push(&text[s..i]);
            }
            words.push(&text[i..i + c.len_utf8()]);
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    if let Some(s) = word_start {
        words.push(&text[s..]);
    }
    words
}

/// Token ids valid for the vocabulary (or pruned index space) that produced them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Utterance {
    pub text: String,
    pub label: String,
}

impl Utterance {
    pub fn new(text: impl Into<String>, label: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Precondition("utterance text is empty".into()));
        }
        Ok(Self {
            text,
            label: label.into(),
        })
    }
}
