//! Prompt construction and synthetic utterance collection.
//!
//! Generations come either from a remote completion endpoint speaking a small
//! JSON protocol or from an offline file of pre-generated completions.

use std::collections::{HashSet, VecDeque};
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::vocab::Utterance;

pub const DEFAULT_API_KEY_ENV: &str = "VPRUNE_GEN_API_KEY";

/// Prompts issued per intent before giving up on a shortfall.
pub const PROMPT_BUDGET: usize = 5;

const BODY_EXCERPT_CHARS: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub intent_name: String,
    pub seed_examples: Vec<String>,
    pub n_new: usize,
}

impl PromptSpec {
    pub fn new(
        intent_name: impl Into<String>,
        seed_examples: Vec<String>,
        n_new: usize,
    ) -> Result<Self> {
        let spec = Self {
            intent_name: intent_name.into(),
            seed_examples,
            n_new,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.seed_examples.is_empty() {
            return Err(Error::Precondition(format!(
                "prompt for intent {:?} has no seed examples",
                self.intent_name
            )));
        }
        if self.n_new == 0 {
            return Err(Error::Precondition("n_new must be at least 1".into()));
        }
        Ok(())
    }
}

/// Renders the few-shot generation prompt for one intent.
///
/// ```text
/// The following are utterances expressing the intent '<intent>'.
/// Example 1: <seed 1>
/// ...
/// Example k+1:
/// ```
pub fn build_prompt(spec: &PromptSpec) -> Result<String> {
    spec.validate()?;
    let mut out = format!(
        "The following are utterances expressing the intent '{}'.\n",
        spec.intent_name
    );
    for (i, seed) in spec.seed_examples.iter().enumerate() {
        out.push_str(&format!("Example {}: {}\n", i + 1, seed));
    }
    out.push_str(&format!("Example {}:", spec.seed_examples.len() + 1));
    Ok(out)
}

/// Text after an `Example <digits>:` marker, or `None` when the line has no marker.
fn strip_example_marker(line: &str) -> Option<&str> {
    let rest = line.strip_prefix("Example ")?;
    let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    rest[digits..].strip_prefix(':')
}

/// Extracts utterances from raw generated text.
///
/// `Example N: text` lines always contribute; bare lines contribute only before
/// the first marker. Output is trimmed, non-empty and free of case-insensitive
/// duplicates (first occurrence wins).
pub fn parse_completions(raw: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut marker_seen = false;
    for line in raw.lines() {
        let line = line.trim();
        let text = match strip_example_marker(line) {
            Some(t) => {
                marker_seen = true;
                t.trim()
            }
            None if !marker_seen => line,
            None => continue,
        };
        if !text.is_empty() && seen.insert(text.to_lowercase()) {
            out.push(text.to_string());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenClientConfig {
    /// Remote completion endpoint. Mutually exclusive with `offline_file`.
    pub endpoint_url: Option<String>,
    /// Pre-generated completions, one per line.
    pub offline_file: Option<PathBuf>,
    pub max_tokens: u32,
    pub timeout: Duration,
    pub api_key_env_var: String,
    pub max_retries: u32,
    /// First retry delay; doubles on each further retry.
    pub retry_base_delay: Duration,
}

impl Default for GenClientConfig {
    fn default() -> Self {
        Self {
            endpoint_url: None,
            offline_file: None,
            max_tokens: 128,
            timeout: Duration::from_secs(30),
            api_key_env_var: DEFAULT_API_KEY_ENV.to_string(),
            max_retries: 3,
            retry_base_delay: Duration::from_secs(1),
        }
    }
}

/// Anything that turns a prompt into candidate utterances.
pub trait CompletionSource {
    fn generate(&mut self, prompt: &str, n: usize) -> Result<Vec<String>>;
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
    n: usize,
}

#[derive(Deserialize)]
struct CompletionResponse {
    completions: Vec<String>,
}

pub struct RemoteClient {
    endpoint_url: String,
    max_tokens: u32,
    api_key: Option<String>,
    max_retries: u32,
    retry_base_delay: Duration,
    http: reqwest::blocking::Client,
}

impl RemoteClient {
    pub fn new(config: &GenClientConfig) -> Result<Self> {
        let endpoint_url = config
            .endpoint_url
            .clone()
            .filter(|u| !u.is_empty())
            .ok_or_else(|| {
                Error::Precondition("remote mode requires a non-empty endpoint URL".into())
            })?;
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            endpoint_url,
            max_tokens: config.max_tokens,
            api_key: std::env::var(&config.api_key_env_var).ok(),
            max_retries: config.max_retries,
            retry_base_delay: config.retry_base_delay,
            http,
        })
    }

    fn attempt(&self, body: &CompletionRequest<'_>) -> Result<Vec<String>> {
        let mut req = self.http.post(&self.endpoint_url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Error::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::Protocol {
                status: status.as_u16(),
                body: excerpt(&text),
            });
        }
        let parsed: CompletionResponse =
            serde_json::from_str(&text).map_err(|_| Error::Protocol {
                status: status.as_u16(),
                body: excerpt(&text),
            })?;
        Ok(parsed
            .completions
            .iter()
            .flat_map(|c| parse_completions(c))
            .collect())
    }
}

fn is_retryable(err: &Error) -> bool {
    match err {
        Error::Transport(_) => true,
        Error::Protocol { status, .. } => *status >= 500,
        _ => false,
    }
}

fn excerpt(body: &str) -> String {
    body.chars().take(BODY_EXCERPT_CHARS).collect()
}

impl CompletionSource for RemoteClient {
    fn generate(&mut self, prompt: &str, n: usize) -> Result<Vec<String>> {
        let body = CompletionRequest {
            prompt,
            max_tokens: self.max_tokens,
            n,
        };
        let mut delay = self.retry_base_delay;
        let mut retries = 0;
        loop {
            match self.attempt(&body) {
                Ok(out) => return Ok(out),
                Err(e) if is_retryable(&e) && retries < self.max_retries => {
                    debug!("generation attempt failed ({e}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    retries += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Serves pre-generated completions in file order, `n` at a time.
#[derive(Debug, Clone, Default)]
pub struct OfflineSource {
    lines: VecDeque<String>,
}

impl OfflineSource {
    pub fn from_lines<I, S>(lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            lines: lines
                .into_iter()
                .map(|l| l.as_ref().trim().to_string())
                .filter(|l| !l.is_empty())
                .collect(),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_lines(text.lines()))
    }

    pub fn remaining(&self) -> usize {
        self.lines.len()
    }
}

impl CompletionSource for OfflineSource {
    fn generate(&mut self, _prompt: &str, n: usize) -> Result<Vec<String>> {
        let take = n.min(self.lines.len());
        Ok(self.lines.drain(..take).collect())
    }
}

/// Source selected by a [`GenClientConfig`].
pub enum Generator {
    Remote(RemoteClient),
    Offline(OfflineSource),
}

impl Generator {
    pub fn from_config(config: &GenClientConfig) -> Result<Self> {
        match (&config.endpoint_url, &config.offline_file) {
            (Some(_), Some(_)) => Err(Error::Precondition(
                "endpoint and offline file are mutually exclusive".into(),
            )),
            (Some(_), None) => Ok(Generator::Remote(RemoteClient::new(config)?)),
            (None, Some(path)) => Ok(Generator::Offline(OfflineSource::from_file(path)?)),
            (None, None) => Err(Error::Precondition(
                "either an endpoint or an offline completions file is required".into(),
            )),
        }
    }
}

impl CompletionSource for Generator {
    fn generate(&mut self, prompt: &str, n: usize) -> Result<Vec<String>> {
        match self {
            Generator::Remote(c) => c.generate(prompt, n),
            Generator::Offline(s) => s.generate(prompt, n),
        }
    }
}

/// Calls the generator configured by `config` once.
pub fn generate(config: &GenClientConfig, prompt: &str, n: usize) -> Result<Vec<String>> {
    Generator::from_config(config)?.generate(prompt, n)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Shortfall {
    pub label: String,
    pub requested: usize,
    pub collected: usize,
}

#[derive(Debug, Clone)]
pub struct AugmentOutcome {
    pub dataset: Dataset,
    pub shortfalls: Vec<Shortfall>,
}

/// Grows `dataset` with up to `per_intent` new utterances per label.
///
/// Original utterances are kept verbatim as the prefix of the result. New
/// utterances are deduplicated case-insensitively against everything already in
/// the output, so a seed echoed back by the generator is dropped.
pub fn augment_dataset(
    dataset: &Dataset,
    per_intent: usize,
    source: &mut dyn CompletionSource,
) -> Result<AugmentOutcome> {
    if per_intent == 0 {
        return Err(Error::Precondition("per_intent must be at least 1".into()));
    }
    let mut seen: HashSet<String> = dataset
        .utterances()
        .iter()
        .map(|u| u.text.trim().to_lowercase())
        .collect();
    let mut out = dataset.clone();
    let mut shortfalls = Vec::new();

    for label in dataset.labels() {
        let seeds: Vec<String> = dataset
            .texts_for(label)
            .into_iter()
            .map(String::from)
            .collect();
        let prompt = build_prompt(&PromptSpec::new(label.clone(), seeds, per_intent)?)?;
        let mut collected = Vec::new();
        for _ in 0..PROMPT_BUDGET {
            if collected.len() == per_intent {
                break;
            }
            for cand in source.generate(&prompt, per_intent - collected.len())? {
                let text = cand.trim();
                if collected.len() == per_intent {
                    break;
                }
                if !text.is_empty() && seen.insert(text.to_lowercase()) {
                    collected.push(text.to_string());
                }
            }
        }
        if collected.len() < per_intent {
            warn!(
                "intent {label:?}: collected {} of {per_intent} requested utterances",
                collected.len()
            );
            shortfalls.push(Shortfall {
                label: label.clone(),
                requested: per_intent,
                collected: collected.len(),
            });
        }
        for text in collected {
            out.push(Utterance::new(text, label.clone())?);
        }
    }
    Ok(AugmentOutcome {
        dataset: out,
        shortfalls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds(rows: &[(&str, &str)]) -> Dataset {
        Dataset::from_utterances(rows.iter().map(|(t, l)| Utterance::new(*t, *l).unwrap()))
    }

    #[test]
    fn prompt_single_seed() {
        let spec = PromptSpec::new("transfer_money", vec!["send 50 to mom".into()], 2).unwrap();
        assert_eq!(
            build_prompt(&spec).unwrap(),
            "The following are utterances expressing the intent 'transfer_money'.\nExample 1: send 50 to mom\nExample 2:"
        );
    }

    #[test]
    fn prompt_two_seeds() {
        let spec = PromptSpec::new("x", vec!["a".into(), "b".into()], 1).unwrap();
        let p = build_prompt(&spec).unwrap();
        assert!(
            p.ends_with("\nExample 1: a\nExample 2: b\nExample 3:"),
            "{p}"
        );
    }

    #[test]
    fn prompt_rejects_empty_seeds() {
        assert!(PromptSpec::new("x", vec![], 1).is_err());
        let spec = PromptSpec {
            intent_name: "x".into(),
            seed_examples: vec![],
            n_new: 1,
        };
        assert!(matches!(build_prompt(&spec), Err(Error::Precondition(_))));
    }

    #[test]
    fn parse_bare_then_marked() {
        assert_eq!(
            parse_completions("how do I reset my pin\nExample 4: card not working"),
            vec!["how do I reset my pin", "card not working"]
        );
    }

    #[test]
    fn parse_empty() {
        assert!(parse_completions("").is_empty());
    }

    #[test]
    fn parse_dedups_case_insensitively() {
        assert_eq!(
            parse_completions("Example 3: pay rent\nExample 4: pay rent"),
            vec!["pay rent"]
        );
        assert_eq!(parse_completions("Pay Rent\npay rent"), vec!["Pay Rent"]);
    }

    #[test]
    fn parse_ignores_bare_lines_after_marker() {
        assert_eq!(
            parse_completions("Example 2: a\nchatter\nExample 3:   \nExample 4: b"),
            vec!["a", "b"]
        );
    }

    #[test]
    fn offline_generate_passthrough() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gen.txt");
        std::fs::write(&p, "one\ntwo\nthree\nfour\nfive\n").unwrap();
        let cfg = GenClientConfig {
            offline_file: Some(p),
            ..Default::default()
        };
        assert_eq!(
            generate(&cfg, "ignored", 10).unwrap(),
            ["one", "two", "three", "four", "five"]
        );
    }

    #[test]
    fn config_requires_exactly_one_mode() {
        assert!(matches!(
            Generator::from_config(&GenClientConfig::default()),
            Err(Error::Precondition(_))
        ));
        let both = GenClientConfig {
            endpoint_url: Some("http://localhost:1".into()),
            offline_file: Some("x".into()),
            ..Default::default()
        };
        assert!(Generator::from_config(&both).is_err());
        let empty_url = GenClientConfig {
            endpoint_url: Some(String::new()),
            ..Default::default()
        };
        assert!(Generator::from_config(&empty_url).is_err());
    }

    #[test]
    fn augment_zero_per_intent_rejected() {
        let d = ds(&[("a", "x")]);
        let mut src = OfflineSource::default();
        assert!(matches!(
            augment_dataset(&d, 0, &mut src),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn augment_cooperative_source() {
        let d = ds(&[
            ("check balance", "balance"),
            ("lost card", "card"),
            ("my balance?", "balance"),
        ]);
        let mut src = OfflineSource::from_lines(["b1", "b2", "b3", "c1", "c2", "c3"]);
        let out = augment_dataset(&d, 3, &mut src).unwrap();
        assert!(out.shortfalls.is_empty());
        assert_eq!(out.dataset.len(), d.len() + 6);
        assert_eq!(&out.dataset.utterances()[..3], d.utterances());
        let tail: Vec<_> = out.dataset.utterances()[3..]
            .iter()
            .map(|u| (u.text.as_str(), u.label.as_str()))
            .collect();
        assert_eq!(
            tail,
            [
                ("b1", "balance"),
                ("b2", "balance"),
                ("b3", "balance"),
                ("c1", "card"),
                ("c2", "card"),
                ("c3", "card")
            ]
        );
    }

    #[test]
    fn augment_drops_seed_echo_and_records_shortfall() {
        let d = ds(&[("Lost Card", "card")]);
        let mut src = OfflineSource::from_lines(["lost card", "card gone"]);
        let out = augment_dataset(&d, 2, &mut src).unwrap();
        assert_eq!(out.dataset.len(), 2);
        assert_eq!(out.dataset.utterances()[1].text, "card gone");
        assert_eq!(
            out.shortfalls,
            [Shortfall {
                label: "card".into(),
                requested: 2,
                collected: 1
            }]
        );
    }

    #[test]
    fn augment_stops_after_prompt_budget() {
        struct Echo(usize);
        impl CompletionSource for Echo {
            fn generate(&mut self, _: &str, _: usize) -> Result<Vec<String>> {
                self.0 += 1;
                Ok(vec!["same".into()])
            }
        }
        let d = ds(&[("a", "x")]);
        let mut src = Echo(0);
        let out = augment_dataset(&d, 3, &mut src).unwrap();
        assert_eq!(src.0, PROMPT_BUDGET);
        assert_eq!(out.dataset.len(), 2);
        assert_eq!(out.shortfalls[0].collected, 1);
    }

    proptest! {
        #[test]
        fn parse_output_is_clean(raw in "([a-zA-Z ]{0,8}|Example [0-9]{1,2}: [a-zA-Z ]{0,8})(\n([a-zA-Z ]{0,8}|Example [0-9]{1,2}: [a-zA-Z ]{0,8})){0,10}") {
            let out = parse_completions(&raw);
            let mut lower = HashSet::new();
            for u in &out {
                prop_assert!(!u.is_empty());
                prop_assert_eq!(u.trim(), u.as_str());
                prop_assert!(lower.insert(u.to_lowercase()));
            }
        }

        #[test]
        fn prompt_is_injective(
            a_intent in "[a-z_]{1,6}", a_seeds in proptest::collection::vec("[a-z ]{1,8}", 1..4),
            b_intent in "[a-z_]{1,6}", b_seeds in proptest::collection::vec("[a-z ]{1,8}", 1..4),
        ) {
            let a = build_prompt(&PromptSpec::new(a_intent.clone(), a_seeds.clone(), 1).unwrap()).unwrap();
            let b = build_prompt(&PromptSpec::new(b_intent.clone(), b_seeds.clone(), 1).unwrap()).unwrap();
            prop_assert_eq!(a == b, a_intent == b_intent && a_seeds == b_seeds);
        }
    }
}
