//! A desk-scale laboratory for compositional zero-shot object detection.
//!
//! The crate builds a complete, deterministic pipeline small enough to run
//! in seconds on a CPU while keeping the moving parts of the full-scale
//! problem intact:
//!
//! - [`compspace`] — attribute/object vocabularies, composition ids, and
//!   pretrain/increment/unseen splits with primitive-coverage checks.
//! - [`scenegen`] — a synthetic renderer for colored-shape scenes with
//!   exact bounding-box annotations, plus a blob-based region proposer.
//! - [`tokenmodel`] — a toy detector: a frozen featurizer and composition
//!   embeddings assembled from trainable attribute/object tokens, scored by
//!   a temperature-scaled dot product.
//! - [`complosses`] — the training objective: composition-aware target
//!   smoothing, binary cross-entropy, token-separation regularizers, and an
//!   HSIC decorrelation penalty, all with analytic gradients.
//! - [`evalkit`] — class-agnostic NMS, average precision over an IoU
//!   sweep, harmonic-mean summaries, and confusion matrices.
//! - [`checkpoint`] — a documented binary format that round-trips the model
//!   bit-exactly.
//! - [`trainer`] — deterministic SGD over rendered datasets with
//!   configurable parameter masks.
//! - [`incrementer`] — confusion mining and contrastive-prompt construction
//!   for incremental updates that must not touch frozen parameters.
//! - [`expcli`] — config-driven experiment orchestration behind the
//!   `czsl-lab` binary (`gen`, `train`, `eval`, `confusions`, `increment`,
//!   `report`).
//!
//! Everything downstream of a seed is reproducible: datasets regenerate
//! byte-identically and training runs bit-identically for the same config.

pub mod checkpoint;
pub mod complosses;
pub mod compspace;
pub mod error;
pub mod evalkit;
pub mod expcli;
pub mod incrementer;
pub mod scenegen;
pub mod seeds;
pub mod tokenmodel;
pub mod trainer;

pub use error::{Error, Result};
