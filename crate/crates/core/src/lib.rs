//! Task-specific compression of subword vocabularies and embedding tables, and
//! distillation of small intent classifiers from teacher logits.
//!
//! Pipeline, module by module:
//!
//! * [`vocab`] / [`matrix`]: vocabulary files, the tokenizer, VPEM matrices.
//! * [`corpus`]: JSON-lines intent datasets and token frequencies.
//! * [`augment`]: few-shot prompts and synthetic utterance collection.
//! * [`prune`]: top-K token selection and the nearest-kept-token remap.
//! * [`pca`]: low-dimensional embedding storage with a linear inverse map.
//! * [`distill`]: temperature-scaled KL loss and the student trainer.
//! * [`report`]: parameter accounting and compression ratios.

pub mod augment;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod matrix;
pub mod pca;
pub mod prune;
pub mod report;
pub mod synthetic;
pub mod vocab;

pub use error::{Error, Result};
