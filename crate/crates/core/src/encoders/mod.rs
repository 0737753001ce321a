//! Image/text encoder abstraction, class embeddings and confidence matrices.
//!
//! Encoders are read-only after construction and may be shared across
//! threads. The synthetic backend in [`synthetic`] stands in for a
//! pre-trained vision-language model at desk scale; a real model plugs in by
//! implementing [`InputSource`], [`ImageEncoder`] and [`TextEncoder`].

mod confidence;
mod ema;
mod embeddings;
mod prompts;
pub mod synthetic;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub use confidence::{confidence_matrix, ConfidenceMatrix, Provenance};
pub use ema::ema_update;
pub use embeddings::{build_class_embeddings, ClassEmbeddings};
pub use prompts::PromptBank;

use crate::adapter_net::{visual_forward, AdapterParams, FrozenBackbone};
use crate::datamodel::SampleRecord;
use crate::error::{Result, SecosError};
use crate::par;

/// Augmentation applied when an input is materialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Weak,
    Strong,
    None,
}

impl View {
    pub(crate) fn code(self) -> u64 {
        match self {
            View::Weak => 1,
            View::Strong => 2,
            View::None => 0,
        }
    }
}

/// Materializes raw model inputs from sample records.
pub trait InputSource: Sync {
    fn input_dim(&self) -> usize;

    /// Raw input vector for `record` under `view`. Deterministic in
    /// `(record, view, seed)`.
    fn load(&self, record: &SampleRecord, view: View, seed: u64) -> Result<Array1<f64>>;
}

pub trait ImageEncoder: Sync {
    fn feature_dim(&self) -> usize;

    fn encode(&self, record: &SampleRecord, view: View, seed: u64) -> Result<Array1<f64>>;
}

pub trait TextEncoder: Sync {
    fn text_dim(&self) -> usize;

    fn encode_text(&self, prompt: &str) -> Result<Array1<f64>>;
}

/// One feature row per record.
pub fn encode_images(encoder: &dyn ImageEncoder, records: &[SampleRecord], view: View, seed: u64) -> Result<Array2<f64>> {
    if records.is_empty() {
        return Err(SecosError::param("cannot encode an empty record list"));
    }
    let rows = par::try_map(records, |r| encoder.encode(r, view, seed))?;
    let dim = encoder.feature_dim();
    let mut out = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        if src.len() != dim {
            return Err(SecosError::structure(format!("encoder returned {} dims, declared {dim}", src.len())));
        }
        dst.assign(&src);
    }
    Ok(out)
}

/// Frozen teacher whose image features are the raw inputs themselves, i.e.
/// an encoder already aligned with the text space.
pub struct AlignedTeacher<'a, S: InputSource> {
    pub source: &'a S,
}

impl<S: InputSource> ImageEncoder for AlignedTeacher<'_, S> {
    fn feature_dim(&self) -> usize {
        self.source.input_dim()
    }

    fn encode(&self, record: &SampleRecord, view: View, seed: u64) -> Result<Array1<f64>> {
        self.source.load(record, view, seed)
    }
}

/// Student model (frozen backbone plus adapters and projector) as an encoder.
pub struct StudentEncoder<'a, S: InputSource> {
    pub source: &'a S,
    pub backbone: &'a FrozenBackbone,
    pub params: &'a AdapterParams,
}

impl<S: InputSource> ImageEncoder for StudentEncoder<'_, S> {
    fn feature_dim(&self) -> usize {
        self.params.d_text()
    }

    fn encode(&self, record: &SampleRecord, view: View, seed: u64) -> Result<Array1<f64>> {
        let x = self.source.load(record, view, seed)?;
        visual_forward(self.backbone, self.params, x.view())
    }
}
