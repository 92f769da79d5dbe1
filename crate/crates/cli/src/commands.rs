use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use log::warn;
use serde::Serialize;

use vprune_core::augment::{augment_dataset, GenClientConfig, Generator};
use vprune_core::corpus::{count_token_frequencies, load_corpus, Dataset};
use vprune_core::distill::{
    evaluate_accuracy, load_teacher, train_student, DistillConfig, Encoder, LossOrder, StudentModel,
};
use vprune_core::matrix::load_embeddings;
use vprune_core::pca::{self, embedding_to_matrix, fit_pca, load_pca, matrix_to_embedding};
use vprune_core::prune::{build_remap, load_remap, remap_tokens, select_top_k, RemapArtifact};
use vprune_core::report::{compression_report, count_params, ModelConfig};
use vprune_core::vocab::load_vocab;
use vprune_core::Error as CoreError;

use crate::artifacts::{write_atomic, ArtifactSet};
use crate::{AugmentArgs, DistillArgs, LossOrderArg, PruneArgs, ReportArgs, TokenizeArgs};

pub const REMAP_FILE: &str = "remap.json";
pub const LOWDIM_FILE: &str = "embeddings_lowdim.vpem";
pub const STUDENT_WEIGHTS_FILE: &str = "student_weights.vpem";
pub const STUDENT_BIAS_FILE: &str = "student_bias.vpem";
pub const STUDENT_META_FILE: &str = "student.json";

/// Bad flag values caught before any module runs.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 config, 3 transport/protocol, 4 misaligned data, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Precondition(_) => 2,
                CoreError::Transport(_) | CoreError::Protocol { .. } => 3,
                CoreError::Misaligned(_) => 4,
                _ => 1,
            };
        }
    }
    1
}

fn load_corpora(paths: &[PathBuf]) -> Result<Dataset> {
    let mut ds = Dataset::new();
    for p in paths {
        ds.extend(&load_corpus(p).context("corpus")?);
    }
    Ok(ds)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

pub fn augment(args: &AugmentArgs) -> Result<()> {
    if args.per_intent == 0 {
        return Err(usage("--per-intent must be at least 1"));
    }
    let dataset = load_corpus(&args.corpus).context("augment: corpus")?;
    let config = GenClientConfig {
        endpoint_url: args.endpoint.clone(),
        offline_file: args.offline_file.clone(),
        max_tokens: args.max_tokens,
        timeout: Duration::from_secs(args.timeout_secs),
        api_key_env_var: args.api_key_env.clone(),
        ..Default::default()
    };
    let mut generator = Generator::from_config(&config).context("augment: generator")?;
    let outcome = augment_dataset(&dataset, args.per_intent, &mut generator).context("augment")?;
    write_atomic(&args.out, outcome.dataset.to_jsonl().as_bytes())?;
    if !outcome.shortfalls.is_empty() {
        warn!(
            "generation shortfall for {} of {} intents",
            outcome.shortfalls.len(),
            dataset.labels().len()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct PruneEcho {
    vocab: String,
    embeddings: String,
    corpus: Vec<String>,
    k: usize,
    pca_dim_requested: usize,
    pca_dim: usize,
    kept_tokens: usize,
    kept_content_tokens: usize,
}

pub fn prune(args: &PruneArgs) -> Result<()> {
    if args.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    if args.pca_dim == 0 {
        return Err(usage("--pca-dim must be at least 1"));
    }
    let vocab = load_vocab(&args.vocab).context("prune: vocabulary")?;
    let emb = load_embeddings(&args.embeddings).context("prune: embeddings")?;
    let corpus = load_corpora(&args.corpus).context("prune")?;

    let freq = count_token_frequencies(&corpus, &vocab);
    let pruned = select_top_k(&freq, &vocab, args.k).context("prune: top-k")?;
    let remap = build_remap(&vocab, &pruned, &emb).context("prune: remap")?;

    let kept = embedding_to_matrix(&pruned.gather_rows(&emb)?);
    let max_dim = kept.nrows().min(kept.ncols());
    let d_prime = args.pca_dim.min(max_dim);
    if d_prime < args.pca_dim {
        warn!(
            "--pca-dim {} exceeds the {}x{} kept embedding rows; using {d_prime}",
            args.pca_dim,
            kept.nrows(),
            kept.ncols()
        );
    }
    let model = fit_pca(&kept, d_prime).context("prune: pca")?;
    let low = matrix_to_embedding(&model.project(&kept)?)?;

    let mut set = ArtifactSet::default();
    let mut remap_json = RemapArtifact::new(&pruned, &remap).to_json();
    remap_json.push('\n');
    set.add(REMAP_FILE, remap_json.into_bytes());
    set.add(pca::MEAN_FILE, model.mean_matrix()?.to_bytes());
    set.add(pca::COMPONENTS_FILE, model.components_matrix()?.to_bytes());
    let mut sidecar = serde_json::to_string_pretty(&model.sidecar())?;
    sidecar.push('\n');
    set.add(pca::SIDECAR_FILE, sidecar.into_bytes());
    set.add(LOWDIM_FILE, low.to_bytes());
    set.add_manifest(
        "prune",
        &PruneEcho {
            vocab: display(&args.vocab),
            embeddings: display(&args.embeddings),
            corpus: args.corpus.iter().map(|p| display(p)).collect(),
            k: args.k,
            pca_dim_requested: args.pca_dim,
            pca_dim: d_prime,
            kept_tokens: pruned.len(),
            kept_content_tokens: pruned.content_tokens().len(),
        },
    );
    set.commit(&args.out_dir)?;
    Ok(())
}

#[derive(Serialize)]
struct StudentMeta<'a> {
    labels: &'a [String],
    config: &'a DistillConfig,
    initial_loss: f64,
    final_loss: f64,
    train_accuracy: f64,
    kept_tokens: usize,
    dim: usize,
}

#[derive(Serialize)]
struct DistillEcho<'a> {
    vocab: String,
    corpus: Vec<String>,
    teacher_logits: String,
    teacher_labels: String,
    prune_dir: String,
    config: &'a DistillConfig,
}

pub fn distill(args: &DistillArgs) -> Result<()> {
    let defaults = DistillConfig::default();
    let config = DistillConfig {
        temperature: args.temperature,
        loss_order: match args.loss_order {
            LossOrderArg::TeacherRef => LossOrder::TeacherRef,
            LossOrderArg::StudentRef => LossOrder::StudentRef,
        },
        learning_rate: args.lr.unwrap_or(defaults.learning_rate),
        epochs: args.epochs.unwrap_or(defaults.epochs),
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        seed: args.seed,
        ce_weight: args.ce_weight,
    };
    config.validate().context("distill: config")?;

    let vocab = load_vocab(&args.vocab).context("distill: vocabulary")?;
    let corpus = load_corpora(&args.corpus).context("distill")?;
    let labels_path = args.teacher_labels.clone().unwrap_or_else(|| {
        let mut p = args.teacher_logits.clone().into_os_string();
        p.push(".json");
        PathBuf::from(p)
    });
    let teacher =
        load_teacher(&args.teacher_logits, &labels_path).context("distill: teacher logits")?;
    if teacher.len() != corpus.len() {
        return Err(CoreError::Misaligned(format!(
            "teacher has {} rows, corpus has {} utterances",
            teacher.len(),
            corpus.len()
        )))
        .context("distill");
    }

    let (pruned, remap) =
        load_remap(args.prune_dir.join(REMAP_FILE), &vocab).context("distill: remap")?;
    let pca_model = load_pca(&args.prune_dir).context("distill: pca")?;
    let low = load_embeddings(args.prune_dir.join(LOWDIM_FILE))
        .context("distill: compressed embeddings")?;
    if low.rows() != pruned.len() {
        bail!(
            "distill: compressed table has {} rows but {} tokens are kept",
            low.rows(),
            pruned.len()
        );
    }
    let init = StudentModel::from_compressed(
        teacher.labels().to_vec(),
        &embedding_to_matrix(&low),
        &pca_model,
    )
    .context("distill: student")?;
    let encoder = Encoder::new(&vocab, &remap);
    let run =
        train_student(&corpus, &teacher, &encoder, init, &config).context("distill: training")?;
    let acc = evaluate_accuracy(&run.model, &corpus, &encoder).context("distill: evaluation")?;

    let mut set = ArtifactSet::default();
    set.add(STUDENT_WEIGHTS_FILE, run.model.weights_matrix()?.to_bytes());
    set.add(STUDENT_BIAS_FILE, run.model.bias_matrix()?.to_bytes());
    let mut meta = serde_json::to_string_pretty(&StudentMeta {
        labels: run.model.labels(),
        config: &config,
        initial_loss: run.initial_loss,
        final_loss: run.epoch_losses.last().copied().unwrap_or(run.initial_loss),
        train_accuracy: acc.accuracy,
        kept_tokens: pruned.len(),
        dim: run.model.dim(),
    })?;
    meta.push('\n');
    set.add(STUDENT_META_FILE, meta.into_bytes());
    set.add_manifest(
        "distill",
        &DistillEcho {
            vocab: display(&args.vocab),
            corpus: args.corpus.iter().map(|p| display(p)).collect(),
            teacher_logits: display(&args.teacher_logits),
            teacher_labels: display(&labels_path),
            prune_dir: display(&args.prune_dir),
            config: &config,
        },
    );
    set.commit(&args.out_dir)?;
    Ok(())
}

fn model_config(spec: &str) -> Result<ModelConfig> {
    match spec {
        "bert-base" => Ok(ModelConfig::bert_base()),
        "bert-base-compressed" => Ok(ModelConfig::bert_base_compressed()),
        path => {
            let text =
                std::fs::read_to_string(path).with_context(|| format!("report: reading {path}"))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("report: model config {path}: {e}")))
        }
    }
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let before = count_params(&model_config(&args.before)?).context("report: before")?;
    let after = count_params(&model_config(&args.after)?).context("report: after")?;
    let report = compression_report(&before, &after).context("report")?;
    let mut json = report.to_json();
    json.push('\n');
    if let Some(out) = &args.out {
        write_atomic(out, json.as_bytes())?;
    }
    let mut stdout = std::io::stdout().lock();
    if args.json {
        stdout.write_all(json.as_bytes())?;
    } else {
        write!(stdout, "{report}")?;
    }
    Ok(())
}

pub fn tokenize(args: &TokenizeArgs) -> Result<()> {
    let vocab = load_vocab(&args.vocab).context("tokenize: vocabulary")?;
    let remap = match &args.remap {
        Some(p) => Some(load_remap(p, &vocab).context("tokenize: remap")?.1),
        None => None,
    };
    let reader: Box<dyn BufRead> = match &args.input {
        Some(p) => Box::new(std::io::BufReader::new(
            std::fs::File::open(p).with_context(|| format!("tokenize: opening {}", p.display()))?,
        )),
        None => Box::new(std::io::stdin().lock()),
    };
    let mut out = std::io::BufWriter::new(std::io::stdout().lock());
    for line in reader.lines() {
        let line = line.context("tokenize: reading input")?;
        let mut seq = vocab.tokenize(&line);
        if let Some(table) = &remap {
            seq = remap_tokens(table, &seq)?;
        }
        let ids: Vec<String> = seq.ids().iter().map(u32::to_string).collect();
        writeln!(out, "{}", ids.join(" "))?;
    }
    out.flush()?;
    Ok(())
}
