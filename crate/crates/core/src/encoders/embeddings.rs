use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};

use super::{PromptBank, TextEncoder};
use crate::datamodel::LabelSpace;
use crate::error::{Result, SecosError};

const NORM_TOL: f64 = 1e-6;
const CACHE_MAGIC: &[u8; 8] = b"SECOSEMB";
const CACHE_VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;

/// One unit-norm text embedding per class, in label-space order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    matrix: Array2<f64>,
}

impl ClassEmbeddings {
    pub fn from_rows(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(SecosError::param("class embeddings must be non-empty"));
        }
        for (i, row) in matrix.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > NORM_TOL {
                return Err(SecosError::Validation(format!("class embedding {i} has norm {n}")));
            }
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn row(&self, class: usize) -> ArrayView1<'_, f64> {
        self.matrix.row(class)
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Cache file: magic, version, rows, dim, element type (1 = f32), then
    /// row-major little-endian f32 data.
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.matrix.len() * 4);
        out.extend(CACHE_MAGIC);
        for v in [CACHE_VERSION, self.num_classes() as u32, self.dim() as u32, DTYPE_F32] {
            out.extend(v.to_le_bytes());
        }
        for &v in self.matrix.iter() {
            out.extend((v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_cache_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| SecosError::Format(format!("embedding cache: {m}"));
        if bytes.len() < 24 || &bytes[..8] != CACHE_MAGIC {
            return Err(fmt("bad magic or truncated header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        let (version, rows, dim, dtype) = (word(0), word(1) as usize, word(2) as usize, word(3));
        if version != CACHE_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        if dtype != DTYPE_F32 {
            return Err(fmt(&format!("unsupported element type {dtype}")));
        }
        let body = &bytes[24..];
        if body.len() != rows * dim * 4 {
            return Err(fmt(&format!("expected {} data bytes, found {}", rows * dim * 4, body.len())));
        }
        let data: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let matrix = Array2::from_shape_vec((rows, dim), data).map_err(|e| fmt(&e.to_string()))?;
        Self::from_rows(matrix)
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_cache_bytes())?;
        Ok(())
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        Self::from_cache_bytes(&std::fs::read(path)?)
    }
}

/// Encodes every prompt of every class, L2-normalizes each embedding,
/// averages them and re-normalizes the mean.
pub fn build_class_embeddings(encoder: &dyn TextEncoder, bank: &PromptBank, labels: &LabelSpace) -> Result<ClassEmbeddings> {
    bank.check_covers(labels)?;
    let dim = encoder.text_dim();
    let mut matrix = Array2::zeros((labels.len(), dim));
    for (c, name) in labels.names().enumerate() {
        let prompts = bank.prompts(name).expect("coverage checked");
        let mut mean = Array1::<f64>::zeros(dim);
        for p in prompts {
            let e = encoder.encode_text(p)?;
            if e.len() != dim {
                return Err(SecosError::structure(format!("text encoder returned {} dims, declared {dim}", e.len())));
            }
            let n = e.dot(&e).sqrt();
            if !(n > 0.0) {
                return Err(SecosError::DegenerateEmbedding(name.to_owned()));
            }
            mean.scaled_add(1.0 / n, &e);
        }
        mean /= prompts.len() as f64;
        let n = mean.dot(&mean).sqrt();
        if n < 1e-8 {
            return Err(SecosError::DegenerateEmbedding(name.to_owned()));
        }
        matrix.row_mut(c).assign(&(mean / n));
    }
    ClassEmbeddings::from_rows(matrix)
}
