//! Temperature-scaled KL distillation of a small intent classifier.
//!
//! The student averages the (PCA-reconstructed) embeddings of its pruned tokens
//! and applies one affine layer. Gradients are closed-form; training is plain
//! mini-batch gradient descent with a seeded shuffle, so a fixed seed gives
//! bit-identical parameters.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::matrix::{load_embeddings, EmbeddingMatrix};
use crate::pca::{matrix_to_embedding, PcaModel};
use crate::prune::{remap_tokens, RemapTable};
use crate::vocab::{TokenSequence, Vocabulary};

pub const DEFAULT_TEMPERATURE: f64 = 10.0;

/// Which distribution is the reference (first argument) of the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossOrder {
    /// `KL(teacher || student)`
    #[default]
    TeacherRef,
    /// `KL(student || teacher)`
    StudentRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    pub loss_order: LossOrder,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of an optional hard-label cross-entropy term (temperature 1).
    pub ce_weight: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            loss_order: LossOrder::TeacherRef,
            learning_rate: 0.5,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            ce_weight: 0.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Precondition(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Precondition(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Precondition("batch size must be at least 1".into()));
        }
        if !(self.ce_weight >= 0.0 && self.ce_weight.is_finite()) {
            return Err(Error::Precondition(format!(
                "ce_weight must be non-negative, got {}",
                self.ce_weight
            )));
        }
        Ok(())
    }
}

fn log_softmax(logits: &[f64], t: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|z| (z - max) / t).collect();
    let lse = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    shifted.into_iter().map(|s| s - lse).collect()
}

/// `exp(z_i / t) / sum_j exp(z_j / t)`, evaluated after subtracting the max.
pub fn softmax_with_temperature(logits: &[f64], t: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / t).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_pair(student: &[f64], teacher: &[f64]) {
    assert_eq!(
        student.len(),
        teacher.len(),
        "student and teacher logits must have the same class count"
    );
}

/// `sum a_i (ln a_i - ln b_i)` from log-probabilities; `0 ln 0` counts as 0.
fn kl_from_logs(log_a: &[f64], log_b: &[f64]) -> f64 {
    log_a
        .iter()
        .zip(log_b)
        .map(|(la, lb)| {
            let a = la.exp();
            if a == 0.0 {
                0.0
            } else {
                a * (la - lb)
            }
        })
        .sum()
}

/// `T^2 * KL` between the temperature-softened teacher and student distributions.
///
/// # Panics
/// If the two logit vectors differ in length.
pub fn kd_loss(student_logits: &[f64], teacher_logits: &[f64], config: &DistillConfig) -> f64 {
    check_pair(student_logits, teacher_logits);
    let t = config.temperature;
    let log_p = log_softmax(teacher_logits, t);
    let log_q = log_softmax(student_logits, t);
    let kl = match config.loss_order {
        LossOrder::TeacherRef => kl_from_logs(&log_p, &log_q),
        LossOrder::StudentRef => kl_from_logs(&log_q, &log_p),
    };
    // rounding can leave a tiny negative value when the distributions coincide
    t * t * kl.max(0.0)
}

/// Gradient of [`kd_loss`] with respect to the student logits.
///
/// Teacher-referenced: `T (q - p)`. Student-referenced:
/// `T q_j (ln q_j - ln p_j - KL(q || p))`.
pub fn kd_loss_grad(
    student_logits: &[f64],
    teacher_logits: &[f64],
    config: &DistillConfig,
) -> Vec<f64> {
    check_pair(student_logits, teacher_logits);
    let t = config.temperature;
    let log_p = log_softmax(teacher_logits, t);
    let log_q = log_softmax(student_logits, t);
    match config.loss_order {
        LossOrder::TeacherRef => log_q
            .iter()
            .zip(&log_p)
            .map(|(lq, lp)| t * (lq.exp() - lp.exp()))
            .collect(),
        LossOrder::StudentRef => {
            let kl = kl_from_logs(&log_q, &log_p);
            log_q
                .iter()
                .zip(&log_p)
                .map(|(lq, lp)| t * lq.exp() * (lq - lp - kl))
                .collect()
        }
    }
}

/// Teacher outputs, one row per dataset utterance, columns in `labels` order.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLogits {
    labels: Vec<String>,
    rows: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherSidecar {
    pub labels: Vec<String>,
}

impl TeacherLogits {
    pub fn new(labels: Vec<String>, rows: DMatrix<f64>) -> Result<Self> {
        if labels.len() != rows.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "teacher has {} columns but {} labels",
                rows.ncols(),
                labels.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition(
                "teacher logits contain non-finite values".into(),
            ));
        }
        Ok(Self { labels, rows })
    }

    pub fn from_parts(matrix: &EmbeddingMatrix, sidecar: TeacherSidecar) -> Result<Self> {
        Self::new(sidecar.labels, crate::pca::embedding_to_matrix(matrix))
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.rows.row(i).iter().copied().collect()
    }
}

/// Loads a teacher VPEM matrix and its `{"labels": [...]}` sidecar.
pub fn load_teacher(
    logits_path: impl AsRef<Path>,
    sidecar_path: impl AsRef<Path>,
) -> Result<TeacherLogits> {
    let matrix = load_embeddings(logits_path)?;
    let side = sidecar_path.as_ref();
    let text = std::fs::read_to_string(side).map_err(|e| Error::io(side, e))?;
    let sidecar: TeacherSidecar = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("teacher sidecar {}", side.display()), e.to_string()))?;
    TeacherLogits::from_parts(&matrix, sidecar)
}

/// Mean-of-embeddings linear classifier over the pruned vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    labels: Vec<String>,
    /// Reconstructed embeddings, one row per kept token.
    table: DMatrix<f64>,
    weights: DMatrix<f64>,
    bias: DVector<f64>,
}

impl StudentModel {
    /// Zero-initialised student over an explicit embedding table.
    pub fn new(labels: Vec<String>, table: DMatrix<f64>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Precondition(
                "student needs at least one class".into(),
            ));
        }
        if table.nrows() == 0 || table.ncols() == 0 {
            return Err(Error::Precondition(
                "student embedding table is empty".into(),
            ));
        }
        let c = labels.len();
        let d = table.ncols();
        Ok(Self {
            labels,
            table,
            weights: DMatrix::zeros(c, d),
            bias: DVector::zeros(c),
        })
    }

    /// Student whose embeddings are the PCA reconstruction of `compressed` (K' x d').
    pub fn from_compressed(
        labels: Vec<String>,
        compressed: &DMatrix<f64>,
        pca: &PcaModel,
    ) -> Result<Self> {
        Self::new(labels, pca.reconstruct(compressed)?)
    }

    pub fn with_params(mut self, weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weights.shape() != self.weights.shape() || bias.len() != self.bias.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected W {:?} and b of {}, got W {:?} and b of {}",
                self.weights.shape(),
                self.bias.len(),
                weights.shape(),
                bias.len()
            )));
        }
        self.weights = weights;
        self.bias = bias;
        Ok(self)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn table(&self) -> &DMatrix<f64> {
        &self.table
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    /// Mean embedding of a pruned-space token sequence.
    pub fn features(&self, seq: &TokenSequence) -> Result<DVector<f64>> {
        if seq.is_empty() {
            return Err(Error::Precondition(
                "student input sequence is empty".into(),
            ));
        }
        let mut acc = DVector::zeros(self.dim());
        for &id in seq.ids() {
            if id as usize >= self.table.nrows() {
                return Err(Error::Precondition(format!(
                    "pruned id {id} outside embedding table of {} rows",
                    self.table.nrows()
                )));
            }
            acc += self.table.row(id as usize).transpose();
        }
        Ok(acc / seq.len() as f64)
    }

    fn logits_for(&self, features: &DVector<f64>) -> Vec<f64> {
        (&self.weights * features + &self.bias)
            .iter()
            .copied()
            .collect()
    }

    pub fn weights_matrix(&self) -> Result<EmbeddingMatrix> {
        matrix_to_embedding(&self.weights)
    }

    pub fn bias_matrix(&self) -> Result<EmbeddingMatrix> {
        matrix_to_embedding(&DMatrix::from_row_slice(
            1,
            self.bias.len(),
            self.bias.as_slice(),
        ))
    }
}

/// `W * mean(embeddings of seq) + b`
pub fn student_forward(model: &StudentModel, seq: &TokenSequence) -> Result<Vec<f64>> {
    Ok(model.logits_for(&model.features(seq)?))
}

/// Index of the largest value, first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Text to pruned-space ids: tokenize against the full vocabulary, then remap.
#[derive(Debug, Clone, Copy)]
pub struct Encoder<'a> {
    pub vocab: &'a Vocabulary,
    pub remap: &'a RemapTable,
}

impl<'a> Encoder<'a> {
    pub fn new(vocab: &'a Vocabulary, remap: &'a RemapTable) -> Self {
        Self { vocab, remap }
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        remap_tokens(self.remap, &self.vocab.tokenize(text))
    }
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub model: StudentModel,
    /// Mean objective over the dataset before any update.
    pub initial_loss: f64,
    /// Mean objective over the dataset after each epoch.
    pub epoch_losses: Vec<f64>,
}

struct Example {
    features: DVector<f64>,
    teacher: Vec<f64>,
    gold: Option<usize>,
}

fn example_loss(logits: &[f64], ex: &Example, config: &DistillConfig) -> f64 {
    let mut loss = kd_loss(logits, &ex.teacher, config);
    if let Some(y) = ex.gold {
        loss += config.ce_weight * -log_softmax(logits, 1.0)[y];
    }
    loss
}

fn example_grad(logits: &[f64], ex: &Example, config: &DistillConfig) -> Vec<f64> {
    let mut g = kd_loss_grad(logits, &ex.teacher, config);
    if let Some(y) = ex.gold {
        let q = softmax_with_temperature(logits, 1.0);
        for (i, gi) in g.iter_mut().enumerate() {
            let target = if i == y { 1.0 } else { 0.0 };
            *gi += config.ce_weight * (q[i] - target);
        }
    }
    g
}

fn mean_loss(model: &StudentModel, examples: &[Example], config: &DistillConfig) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    examples
        .iter()
        .map(|ex| example_loss(&model.logits_for(&ex.features), ex, config))
        .sum::<f64>()
        / examples.len() as f64
}

/// Fits the student's affine layer to the teacher's softened outputs.
///
/// Each epoch reshuffles the examples with a generator seeded from
/// `config.seed` and the epoch index, then steps once per mini-batch on the
/// batch-mean gradient.
pub fn train_student(
    dataset: &Dataset,
    teacher: &TeacherLogits,
    encoder: &Encoder<'_>,
    init: StudentModel,
    config: &DistillConfig,
) -> Result<TrainingRun> {
    config.validate()?;
    if dataset.len() != teacher.len() {
        return Err(Error::Misaligned(format!(
            "teacher has {} rows, dataset has {} utterances",
            teacher.len(),
            dataset.len()
        )));
    }
    if teacher.labels() != init.labels() {
        return Err(Error::Misaligned(format!(
            "teacher classes {:?} differ from student classes {:?}",
            teacher.labels(),
            init.labels()
        )));
    }
    let examples = dataset
        .utterances()
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let gold = if config.ce_weight > 0.0 {
                Some(
                    init.labels()
                        .iter()
                        .position(|l| *l == u.label)
                        .ok_or_else(|| {
                            Error::Misaligned(format!(
                                "utterance {i} label {:?} is not a student class",
                                u.label
                            ))
                        })?,
                )
            } else {
                None
            };
            Ok(Example {
                features: init.features(&encoder.encode(&u.text)?)?,
                teacher: teacher.row(i),
                gold,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut model = init;
    let initial_loss = mean_loss(&model, &examples, config);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let c = model.num_classes();

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grad_w = DMatrix::zeros(c, model.dim());
            let mut grad_b = DVector::zeros(c);
            for &i in batch {
                let ex = &examples[i];
                let g =
                    DVector::from_vec(example_grad(&model.logits_for(&ex.features), ex, config));
                grad_w += &g * ex.features.transpose();
                grad_b += g;
            }
            let step = config.learning_rate / batch.len() as f64;
            model.weights -= grad_w * step;
            model.bias -= grad_b * step;
        }
        epoch_losses.push(mean_loss(&model, &examples, config));
    }
    Ok(TrainingRun {
        model,
        initial_loss,
        epoch_losses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub correct: usize,
    pub total: usize,
    /// `correct / total`, or 0 when the dataset is empty.
    pub accuracy: f64,
    pub empty: bool,
}

/// Fraction of utterances whose predicted label equals the gold label.
pub fn evaluate_accuracy(
    model: &StudentModel,
    dataset: &Dataset,
    encoder: &Encoder<'_>,
) -> Result<AccuracyReport> {
    let mut correct = 0;
    for u in dataset.utterances() {
        let logits = student_forward(model, &encoder.encode(&u.text)?)?;
        if model.labels()[argmax(&logits)] == u.label {
            correct += 1;
        }
    }
    let total = dataset.len();
    Ok(AccuracyReport {
        correct,
        total,
        accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        empty: total == 0,
    })
}
