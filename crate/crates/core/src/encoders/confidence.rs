use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::ClassEmbeddings;
use crate::adapter_net::ops::{l2_norm, softmax};
use crate::error::{Result, SecosError};
use crate::par;

const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Teacher,
    Student,
    Ema,
}

/// Per-sample probability distributions over all candidate classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMatrix {
    probs: Array2<f64>,
    provenance: Provenance,
}

impl ConfidenceMatrix {
    /// Validates that every entry is in `[0, 1]` and every row sums to one.
    pub fn new(probs: Array2<f64>, provenance: Provenance) -> Result<Self> {
        if probs.ncols() == 0 {
            return Err(SecosError::param("confidence matrix needs at least one class"));
        }
        for (i, row) in probs.rows().into_iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(SecosError::Validation(format!("confidence row {i} has an entry outside [0, 1]")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(SecosError::Validation(format!("confidence row {i} sums to {s}")));
            }
        }
        Ok(Self { probs, provenance })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.probs.row(i)
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn num_samples(&self) -> usize {
        self.probs.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.ncols()
    }

    /// Sub-matrix of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self { probs: self.probs.select(ndarray::Axis(0), rows), provenance: self.provenance }
    }
}

/// Row `i` is `softmax_j(scale * cos(features_i, E_j))`.
pub fn confidence_matrix(
    features: &Array2<f64>,
    embeds: &ClassEmbeddings,
    scale: f64,
    provenance: Provenance,
) -> Result<ConfidenceMatrix> {
    if features.ncols() != embeds.dim() {
        return Err(SecosError::structure(format!(
            "feature dim {} does not match embedding dim {}",
            features.ncols(),
            embeds.dim()
        )));
    }
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(SecosError::param(format!("logit scale must be finite and >= 0, got {scale}")));
    }
    let rows: Vec<usize> = (0..features.nrows()).collect();
    let out = par::try_map(&rows, |&i| {
        let f = features.row(i);
        let n = l2_norm(f);
        if !(n > 0.0) || !n.is_finite() {
            return Err(SecosError::DegenerateFeature(i));
        }
        let logits = embeds.matrix().dot(&f) * (scale / n);
        Ok(softmax(logits.view()))
    })?;
    let mut probs = Array2::zeros((features.nrows(), embeds.num_classes()));
    for (mut dst, src) in probs.rows_mut().into_iter().zip(out) {
        dst.assign(&src);
    }
    ConfidenceMatrix::new(probs, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    fn axes(n: usize) -> ClassEmbeddings {
        ClassEmbeddings::from_rows(Array2::eye(n)).unwrap()
    }

    #[test]
    fn equidistant_feature_is_uniform() {
        let f = array![[1.0, 1.0, 1.0, 1.0]];
        let c = confidence_matrix(&f, &axes(4), 100.0, Provenance::Teacher).unwrap();
        assert!(c.row(0).iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn aligned_feature_with_large_scale_is_one_hot() {
        let f = array![[2.0, 0.0, 0.0]];
        let c = confidence_matrix(&f, &axes(3), 100.0, Provenance::Teacher).unwrap();
        // Oracle: 1 / (1 + 2 e^-100) and e^-100 / (1 + 2 e^-100).
        let tail = (-100f64).exp();
        assert!((c.row(0)[0] - 1.0 / (1.0 + 2.0 * tail)).abs() < 1e-15);
        assert!((c.row(0)[0] - 1.0).abs() < 1e-6);
        assert!((c.row(0)[1] - tail / (1.0 + 2.0 * tail)).abs() < 1e-50);
    }

    #[test]
    fn zero_scale_is_uniform() {
        let f = array![[0.3, -2.0, 5.0]];
        let c = confidence_matrix(&f, &axes(3), 0.0, Provenance::Student).unwrap();
        assert!(c.row(0).iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn zero_feature_row_is_degenerate() {
        let f = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(matches!(
            confidence_matrix(&f, &axes(2), 1.0, Provenance::Teacher),
            Err(SecosError::DegenerateFeature(1))
        ));
    }

    #[test]
    fn rejects_invalid_rows() {
        assert!(ConfidenceMatrix::new(array![[0.5, 0.6]], Provenance::Teacher).is_err());
        assert!(ConfidenceMatrix::new(array![[1.5, -0.5]], Provenance::Teacher).is_err());
    }

    proptest! {
        #[test]
        fn rows_sum_to_one_and_scale_invariant(
            v in proptest::collection::vec(-3.0f64..3.0, 5 * 4),
            e in proptest::collection::vec(-1.0f64..1.0, 3 * 4),
            k in 0.01f64..50.0, scale in 0.0f64..200.0,
        ) {
            let f = Array2::from_shape_vec((5, 4), v).unwrap();
            prop_assume!(f.rows().into_iter().all(|r| r.dot(&r) > 1e-6));
            let mut em = Array2::from_shape_vec((3, 4), e).unwrap();
            for mut r in em.rows_mut() {
                let n = r.dot(&r).sqrt();
                prop_assume!(n > 1e-3);
                r /= n;
            }
            let embeds = ClassEmbeddings::from_rows(em).unwrap();
            let a = confidence_matrix(&f, &embeds, scale, Provenance::Teacher).unwrap();
            let b = confidence_matrix(&(&f * k), &embeds, scale, Provenance::Teacher).unwrap();
            for i in 0..5 {
                prop_assert!((a.row(i).sum() - 1.0).abs() < 1e-6);
                let d: Array1<f64> = &a.row(i) - &b.row(i);
                prop_assert!(d.iter().all(|x| x.abs() < 1e-9));
            }
        }
    }
}
