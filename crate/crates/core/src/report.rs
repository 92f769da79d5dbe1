//! Parameter accounting for BERT-style encoders before and after compression.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_ffn_multiplier() -> usize {
    4
}

fn default_keep_fraction() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    #[serde(default = "default_ffn_multiplier")]
    pub ffn_multiplier: usize,
    pub max_positions: usize,
    pub type_vocab: usize,
    #[serde(default)]
    pub pruned_vocab: Option<usize>,
    #[serde(default)]
    pub pruned_dim: Option<usize>,
    #[serde(default = "default_keep_fraction")]
    pub transformer_keep_fraction: f64,
    #[serde(default)]
    pub num_classes: Option<usize>,
}

impl ModelConfig {
    pub fn bert_base() -> Self {
        Self {
            vocab_size: 30522,
            emb_dim: 768,
            layers: 12,
            hidden: 768,
            ffn_multiplier: 4,
            max_positions: 512,
            type_vocab: 2,
            pruned_vocab: None,
            pruned_dim: None,
            transformer_keep_fraction: 1.0,
            num_classes: None,
        }
    }

    /// BERT-base with a 2000-token, 400-dimension vocabulary and 95% of the
    /// encoder pruned away.
    pub fn bert_base_compressed() -> Self {
        Self {
            pruned_vocab: Some(2000),
            pruned_dim: Some(400),
            transformer_keep_fraction: 0.05,
            ..Self::bert_base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("emb_dim", self.emb_dim),
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("ffn_multiplier", self.ffn_multiplier),
            ("max_positions", self.max_positions),
            ("type_vocab", self.type_vocab),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Precondition(format!("{name} must be at least 1")));
        }
        match (self.pruned_vocab, self.pruned_dim) {
            (Some(0), _) | (_, Some(0)) => {
                return Err(Error::Precondition(
                    "pruned sizes must be at least 1".into(),
                ))
            }
            (Some(_), None) | (None, Some(_)) => {
                return Err(Error::Precondition(
                    "pruned_vocab and pruned_dim must be set together".into(),
                ))
            }
            _ => {}
        }
        if !(self.transformer_keep_fraction > 0.0 && self.transformer_keep_fraction <= 1.0) {
            return Err(Error::Precondition(format!(
                "transformer_keep_fraction {} outside (0, 1]",
                self.transformer_keep_fraction
            )));
        }
        if self.num_classes == Some(0) {
            return Err(Error::Precondition("num_classes must be at least 1".into()));
        }
        Ok(())
    }
}

pub const GROUP_NAMES: [&str; 6] = [
    "token_embeddings",
    "position_embeddings",
    "type_embeddings",
    "transformer",
    "pca_inverse_map",
    "classifier",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub token_embeddings: u64,
    pub position_embeddings: u64,
    pub type_embeddings: u64,
    pub transformer: u64,
    pub pca_inverse_map: u64,
    pub classifier: u64,
}

impl ParamBreakdown {
    pub fn total(&self) -> u64 {
        self.groups().iter().map(|(_, v)| v).sum()
    }

    pub fn groups(&self) -> [(&'static str, u64); 6] {
        [
            (GROUP_NAMES[0], self.token_embeddings),
            (GROUP_NAMES[1], self.position_embeddings),
            (GROUP_NAMES[2], self.type_embeddings),
            (GROUP_NAMES[3], self.transformer),
            (GROUP_NAMES[4], self.pca_inverse_map),
            (GROUP_NAMES[5], self.classifier),
        ]
    }

    pub fn scaled(&self, k: u64) -> Self {
        Self {
            token_embeddings: self.token_embeddings * k,
            position_embeddings: self.position_embeddings * k,
            type_embeddings: self.type_embeddings * k,
            transformer: self.transformer * k,
            pca_inverse_map: self.pca_inverse_map * k,
            classifier: self.classifier * k,
        }
    }
}

fn scale(count: u64, fraction: f64) -> u64 {
    if fraction == 1.0 {
        count
    } else {
        (count as f64 * fraction).round() as u64
    }
}

/// Parameter counts per group.
///
/// One encoder layer is `12 h^2 + 13 h` (QKV and output projections, the
/// feed-forward pair at 4x width, two layer norms). The keep fraction shrinks
/// the encoder stack and the position/type tables, which share its hidden width.
pub fn count_params(config: &ModelConfig) -> Result<ParamBreakdown> {
    config.validate()?;
    let h = config.hidden as u64;
    let ffn = config.ffn_multiplier as u64 * h;
    // attention 4(h^2 + h), ffn 2*h*ffn + ffn + h, two layer norms 4h
    let per_layer = 4 * (h * h + h) + 2 * h * ffn + ffn + h + 4 * h;
    let emb_dim = config.emb_dim as u64;
    let keep = config.transformer_keep_fraction;

    let (token_embeddings, pca_inverse_map) = match (config.pruned_vocab, config.pruned_dim) {
        (Some(v), Some(d)) => (v as u64 * d as u64, d as u64 * emb_dim + emb_dim),
        _ => (config.vocab_size as u64 * emb_dim, 0),
    };
    Ok(ParamBreakdown {
        token_embeddings,
        position_embeddings: scale(config.max_positions as u64 * emb_dim, keep),
        type_embeddings: scale(config.type_vocab as u64 * emb_dim, keep),
        transformer: scale(config.layers as u64 * per_layer, keep),
        pca_inverse_map,
        classifier: config.num_classes.map_or(0, |c| c as u64 * h + c as u64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub groups_before: BTreeMap<String, u64>,
    pub groups_after: BTreeMap<String, u64>,
    /// after / before as a percentage, 2 decimals; `None` where before is 0.
    pub ratios_pct: BTreeMap<String, Option<f64>>,
    /// before / after, 1 decimal; `None` where either side is 0.
    pub shrink_factors: BTreeMap<String, Option<f64>>,
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let p = 10f64.powi(decimals);
    (v * p).round() / p
}

fn pct(after: u64, before: u64) -> Option<f64> {
    (before > 0).then(|| round_to(after as f64 / before as f64 * 100.0, 2))
}

fn factor(before: u64, after: u64) -> Option<f64> {
    (before > 0 && after > 0).then(|| round_to(before as f64 / after as f64, 1))
}

pub const VOCABULARY_KEY: &str = "vocabulary";
pub const TOTAL_KEY: &str = "total";

/// Per-group, vocabulary and total retention ratios.
///
/// The vocabulary entry compares token embeddings only; the PCA inverse map is
/// reported as its own group.
pub fn compression_report(
    before: &ParamBreakdown,
    after: &ParamBreakdown,
) -> Result<CompressionReport> {
    if before.total() == 0 {
        return Err(Error::Precondition("baseline has no parameters".into()));
    }
    let mut report = CompressionReport {
        groups_before: BTreeMap::new(),
        groups_after: BTreeMap::new(),
        ratios_pct: BTreeMap::new(),
        shrink_factors: BTreeMap::new(),
    };
    let mut rows: Vec<(&str, u64, u64)> = before
        .groups()
        .iter()
        .zip(after.groups())
        .map(|((name, b), (_, a))| (*name, *b, a))
        .collect();
    rows.push((
        VOCABULARY_KEY,
        before.token_embeddings,
        after.token_embeddings,
    ));
    rows.push((TOTAL_KEY, before.total(), after.total()));
    for (name, b, a) in rows {
        if name != VOCABULARY_KEY {
            report.groups_before.insert(name.to_string(), b);
            report.groups_after.insert(name.to_string(), a);
        }
        report.ratios_pct.insert(name.to_string(), pct(a, b));
        report.shrink_factors.insert(name.to_string(), factor(b, a));
    }
    Ok(report)
}

impl CompressionReport {
    pub fn vocabulary_pct(&self) -> f64 {
        self.ratios_pct[VOCABULARY_KEY].expect("vocabulary baseline is non-zero")
    }

    pub fn vocabulary_shrink(&self) -> Option<f64> {
        self.shrink_factors[VOCABULARY_KEY]
    }

    pub fn total_after(&self) -> u64 {
        self.groups_after[TOTAL_KEY]
    }

    pub fn total_shrink(&self) -> Option<f64> {
        self.shrink_factors[TOTAL_KEY]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for CompressionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn opt(v: Option<f64>, decimals: usize, suffix: &str) -> String {
            v.map_or_else(|| "-".to_string(), |x| format!("{x:.decimals$}{suffix}"))
        }
        writeln!(
            f,
            "{:<22} {:>14} {:>14} {:>10} {:>9}",
            "group", "before", "after", "kept", "shrink"
        )?;
        let names = GROUP_NAMES
            .iter()
            .copied()
            .chain([VOCABULARY_KEY, TOTAL_KEY]);
        for name in names {
            let (b, a) = if name == VOCABULARY_KEY {
                (
                    self.groups_before[GROUP_NAMES[0]],
                    self.groups_after[GROUP_NAMES[0]],
                )
            } else {
                (self.groups_before[name], self.groups_after[name])
            };
            writeln!(
                f,
                "{:<22} {:>14} {:>14} {:>10} {:>9}",
                name,
                b,
                a,
                opt(self.ratios_pct[name], 2, "%"),
                opt(self.shrink_factors[name], 1, "x")
            )?;
        }
        Ok(())
    }
}
