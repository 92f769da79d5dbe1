//! Seeded synthetic fixtures for benchmarks and end-to-end checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::Dataset;
use crate::distill::TeacherLogits;
use crate::matrix::EmbeddingMatrix;
use crate::vocab::{Utterance, Vocabulary, SPECIAL_TOKENS};

/// Specials followed by `w0 .. w{n-1}`.
pub fn word_vocab(n_words: usize) -> Vocabulary {
    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain((0..n_words).map(|i| format!("w{i}")))
        .collect();
    Vocabulary::new(tokens).expect("generated tokens are unique")
}

pub fn gaussian_embeddings(rows: usize, dim: usize, rng: &mut impl Rng) -> EmbeddingMatrix {
    let data = (0..rows * dim)
        .map(|_| StandardNormal.sample(rng))
        .collect::<Vec<f32>>();
    EmbeddingMatrix::new(rows, dim, data).expect("gaussian entries are finite")
}

fn random_text(vocab_words: usize, rng: &mut impl Rng) -> String {
    let len = rng.gen_range(3..=6);
    (0..len)
        .map(|_| format!("w{}", rng.gen_range(0..vocab_words)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `n` utterances over `w0..w{n_words-1}` with a few labels and occasional
/// out-of-vocabulary words.
pub fn random_corpus(seed: u64, n_words: usize, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset::from_utterances((0..n).map(|_| {
        let mut text = random_text(n_words, &mut rng);
        if rng.gen_bool(0.1) {
            text.push_str(" qqq");
        }
        let label = format!("intent_{}", rng.gen_range(0..5));
        Utterance::new(text, label).expect("non-empty text")
    }))
}

/// Two-intent task whose labels come from a known linear teacher over mean
/// token embeddings.
pub struct LinearIntentTask {
    pub vocab: Vocabulary,
    pub embeddings: EmbeddingMatrix,
    pub train: Dataset,
    pub test: Dataset,
    pub teacher_train: TeacherLogits,
    pub teacher_test: TeacherLogits,
}

pub const LINEAR_TASK_LABELS: [&str; 2] = ["intent_a", "intent_b"];

/// Builds a linearly separable task. Utterances whose teacher margin falls
/// below `0.25` are redrawn.
pub fn linear_intent_task(
    seed: u64,
    n_words: usize,
    dim: usize,
    n_train: usize,
    n_test: usize,
) -> LinearIntentTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = word_vocab(n_words);
    let embeddings = gaussian_embeddings(vocab.len(), dim, &mut rng);
    let weights = DMatrix::from_fn(2, dim, |_, _| {
        let s: f64 = StandardNormal.sample(&mut rng);
        2.0 * s
    });

    let features = |text: &str| -> DVector<f64> {
        let ids = vocab.tokenize(text);
        let mut acc = DVector::zeros(dim);
        for &id in ids.ids() {
            acc += DVector::from_iterator(
                dim,
                embeddings.row(id as usize).iter().map(|v| f64::from(*v)),
            );
        }
        acc / ids.len() as f64
    };

    // centre the decision boundary on the average utterance
    let centre = (0..256)
        .map(|_| features(&random_text(n_words, &mut rng)))
        .fold(DVector::zeros(dim), |a, f| a + f)
        / 256.0;
    let bias = -(&weights * &centre);

    let mut draw = |n: usize| {
        let mut ds = Dataset::new();
        let mut logits = Vec::with_capacity(n * 2);
        while ds.len() < n {
            let text = random_text(n_words, &mut rng);
            let z = &weights * features(&text) + &bias;
            if (z[0] - z[1]).abs() < 0.25 {
                continue;
            }
            let label = LINEAR_TASK_LABELS[if z[0] >= z[1] { 0 } else { 1 }];
            ds.push(Utterance::new(text, label).expect("non-empty text"));
            logits.extend([z[0], z[1]]);
        }
        let teacher = TeacherLogits::new(
            LINEAR_TASK_LABELS.iter().map(|s| s.to_string()).collect(),
            DMatrix::from_row_slice(n, 2, &logits),
        )
        .expect("finite teacher logits");
        (ds, teacher)
    };
    let (train, teacher_train) = draw(n_train);
    let (test, teacher_test) = draw(n_test);
    LinearIntentTask {
        vocab,
        embeddings,
        train,
        test,
        teacher_train,
        teacher_test,
    }
}
