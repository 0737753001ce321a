//! Open-world semi-supervised classification with semantic-capture pseudo
//! labels.
//!
//! The pipeline has three training-time stages and one evaluation stage:
//!
//! * [`ncsc`] builds a fixed, globally selected set of pseudo-labeled novel
//!   samples from a frozen teacher's confidences.
//! * [`bwsr`] recaptures per-batch pseudo labels (known or novel) from the
//!   intersection of intra-instance and inter-instance candidate sets.
//! * [`adapter_net`] aligns a frozen visual backbone with class text
//!   embeddings through parallel bottleneck adapters and a projector.
//! * [`evaluator`] scores predictions both directly against the candidate
//!   labels and after optimal Hungarian relabeling.
//!
//! [`trainer`] orchestrates the stages and [`experiment`] wires them into
//! reproducible presets. Data-parallel inner loops go through [`par`], which
//! falls back to sequential iteration when the `parallel` feature is off.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter_net;
pub mod bwsr;
pub mod datamodel;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod ncsc;
pub mod optim;
pub mod par;
pub mod seed;
pub mod trainer;

pub use error::{Result, SecosError};
