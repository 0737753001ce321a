//! Batch-wise semantic recapture.
//!
//! For every unlabeled batch:
//!
//! 1. `tau` is the `alpha` quantile of the per-sample maximum confidences.
//! 2. A sample's intra-instance set collects classes in descending
//!    confidence until the running sum strictly exceeds `tau`.
//! 3. Each class threshold `theta_c` is the `beta` quantile of that class's
//!    confidences across the batch.
//! 4. A sample's inter-instance set holds the classes whose confidence
//!    strictly exceeds their threshold.
//! 5. A sample is pseudo-labeled only when the two sets intersect in
//!    exactly one class.
//!
//! Quantiles follow a [`QuantileRule`]. Under the nearest-rank rule a batch
//! smaller than `1 / (1 - beta)` has every `theta_c` equal to the column
//! maximum, so no sample passes the strict inter-instance test; linear
//! interpolation keeps small batches productive.

use serde::{Deserialize, Serialize};

use crate::encoders::ConfidenceMatrix;
use crate::error::{Result, SecosError};
use crate::ncsc::{Origin, PseudoLabel, PseudoLabelSet};
use crate::seed::nearest_rank;

/// How a `q` quantile is read off `B` ascending values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileRule {
    /// The value at rank `ceil(q * B)` (1-based).
    NearestRank,
    /// Interpolates between the values at 0-based positions
    /// `floor(q * (B - 1))` and the next one.
    #[default]
    Linear,
}

impl QuantileRule {
    /// `q` quantile of `values`, which need not be sorted. Panics on empty
    /// input.
    pub fn quantile(self, mut values: Vec<f64>, q: f64) -> f64 {
        values.sort_by(f64::total_cmp);
        match self {
            QuantileRule::NearestRank => values[nearest_rank(q, values.len()) - 1],
            QuantileRule::Linear => {
                let pos = q * (values.len() - 1) as f64;
                let lo = pos.floor() as usize;
                match values.get(lo + 1) {
                    Some(&hi) => values[lo] + (pos - lo as f64) * (hi - values[lo]),
                    None => values[lo],
                }
            }
        }
    }
}

/// Quantile levels for the two candidate sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecaptureConfig {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub quantile: QuantileRule,
}

impl Default for RecaptureConfig {
    fn default() -> Self {
        Self { alpha: 0.6, beta: 0.95, quantile: QuantileRule::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchThresholds {
    pub tau: f64,
    pub theta: Vec<f64>,
}

/// Per-sample candidate label sets. `intra` is in insertion (descending
/// confidence) order; `inter` is in ascending class order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSets {
    pub intra: Vec<Vec<usize>>,
    pub inter: Vec<Vec<usize>>,
}

fn check_quantile(name: &str, q: f64) -> Result<()> {
    if q > 0.0 && q <= 1.0 {
        Ok(())
    } else {
        Err(SecosError::param(format!("{name} must be in (0, 1], got {q}")))
    }
}

/// `alpha` quantile of the row maxima.
pub fn batch_tau(conf: &ConfidenceMatrix, alpha: f64, rule: QuantileRule) -> Result<f64> {
    check_quantile("alpha", alpha)?;
    if conf.num_samples() == 0 {
        return Err(SecosError::param("empty batch"));
    }
    let maxima = conf.probs().rows().into_iter().map(|r| r.fold(f64::NEG_INFINITY, |m, &v| m.max(v))).collect();
    Ok(rule.quantile(maxima, alpha))
}

/// Classes in descending confidence (ties by class index) until the running
/// sum strictly exceeds `tau`; every class if it never does.
pub fn intra_sets(conf: &ConfidenceMatrix, tau: f64) -> Vec<Vec<usize>> {
    let k = conf.num_classes();
    conf.probs()
        .rows()
        .into_iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let mut sum = 0.0;
            let mut out = Vec::new();
            for c in order {
                out.push(c);
                sum += row[c];
                if sum > tau {
                    break;
                }
            }
            out
        })
        .collect()
}

/// Per-class `beta` quantile of the batch's confidences.
pub fn class_thresholds(conf: &ConfidenceMatrix, beta: f64, rule: QuantileRule) -> Result<Vec<f64>> {
    check_quantile("beta", beta)?;
    if conf.num_samples() == 0 {
        return Err(SecosError::param("empty batch"));
    }
    Ok(conf.probs().columns().into_iter().map(|col| rule.quantile(col.to_vec(), beta)).collect())
}

/// `{ c : conf[i][c] > theta[c] }` for every sample.
pub fn inter_sets(conf: &ConfidenceMatrix, theta: &[f64]) -> Result<Vec<Vec<usize>>> {
    if theta.len() != conf.num_classes() {
        return Err(SecosError::structure(format!(
            "{} thresholds for {} classes",
            theta.len(),
            conf.num_classes()
        )));
    }
    Ok(conf
        .probs()
        .rows()
        .into_iter()
        .map(|row| (0..theta.len()).filter(|&c| row[c] > theta[c]).collect())
        .collect())
}

fn intersection(intra: &[usize], inter: &[usize]) -> Vec<usize> {
    intra.iter().copied().filter(|c| inter.binary_search(c).is_ok()).collect()
}

/// `(row, label)` for every sample whose candidate intersection is a
/// singleton.
pub fn select_batch_pseudo(candidates: &CandidateSets) -> Result<Vec<(usize, usize)>> {
    if candidates.intra.len() != candidates.inter.len() {
        return Err(SecosError::structure("intra and inter sets cover different batches"));
    }
    Ok(candidates
        .intra
        .iter()
        .zip(&candidates.inter)
        .enumerate()
        .filter_map(|(i, (a, b))| match intersection(a, b).as_slice() {
            [only] => Some((i, *only)),
            _ => None,
        })
        .collect())
}

/// Full (unfiltered) intersections, one per sample.
pub fn raw_intersections(candidates: &CandidateSets) -> Vec<Vec<usize>> {
    candidates.intra.iter().zip(&candidates.inter).map(|(a, b)| intersection(a, b)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecapture {
    pub pseudo: PseudoLabelSet,
    pub thresholds: BatchThresholds,
    pub candidates: CandidateSets,
}

/// Candidate sets, thresholds and the singleton-filtered pseudo labels for
/// one batch. `sample_ids` is aligned with the rows of `conf`.
pub fn recapture_batch(sample_ids: &[String], conf: &ConfidenceMatrix, cfg: RecaptureConfig) -> Result<BatchRecapture> {
    if sample_ids.len() != conf.num_samples() {
        return Err(SecosError::structure(format!(
            "{} sample ids for {} confidence rows",
            sample_ids.len(),
            conf.num_samples()
        )));
    }
    let tau = batch_tau(conf, cfg.alpha, cfg.quantile)?;
    let intra = intra_sets(conf, tau);
    let theta = class_thresholds(conf, cfg.beta, cfg.quantile)?;
    let inter = inter_sets(conf, &theta)?;
    let candidates = CandidateSets { intra, inter };
    let entries = select_batch_pseudo(&candidates)?
        .into_iter()
        .map(|(i, label)| PseudoLabel { sample_id: sample_ids[i].clone(), label, confidence: conf.row(i)[label] })
        .collect();
    Ok(BatchRecapture {
        pseudo: PseudoLabelSet::new(Origin::Batch, entries),
        thresholds: BatchThresholds { tau, theta },
        candidates,
    })
}

/// Pseudo-label precision of the two selection strategies on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrecisionCounts {
    /// Correct singleton selections / singleton selections.
    pub singleton_hits: usize,
    pub singleton_total: usize,
    /// Correct (sample, label) pairs / all pairs in the raw intersections.
    pub raw_hits: usize,
    pub raw_total: usize,
}

impl PrecisionCounts {
    pub fn add(&mut self, o: &PrecisionCounts) {
        self.singleton_hits += o.singleton_hits;
        self.singleton_total += o.singleton_total;
        self.raw_hits += o.raw_hits;
        self.raw_total += o.raw_total;
    }

    pub fn singleton_precision(&self) -> Option<f64> {
        (self.singleton_total > 0).then(|| self.singleton_hits as f64 / self.singleton_total as f64)
    }

    pub fn raw_precision(&self) -> Option<f64> {
        (self.raw_total > 0).then(|| self.raw_hits as f64 / self.raw_total as f64)
    }
}

/// Scores both strategies against ground truth aligned with the batch rows.
pub fn precision_counts(candidates: &CandidateSets, truth: &[usize]) -> Result<PrecisionCounts> {
    if truth.len() != candidates.intra.len() {
        return Err(SecosError::structure("ground truth is not aligned with the batch"));
    }
    let mut out = PrecisionCounts::default();
    for (i, label) in select_batch_pseudo(candidates)? {
        out.singleton_total += 1;
        out.singleton_hits += usize::from(truth[i] == label);
    }
    for (set, &y) in raw_intersections(candidates).iter().zip(truth) {
        out.raw_total += set.len();
        out.raw_hits += set.iter().filter(|&&c| c == y).count();
    }
    Ok(out)
}

/// Serializable per-batch record of thresholds and candidate sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchDebug {
    pub batch: usize,
    pub tau: f64,
    pub theta: Vec<f64>,
    pub samples: Vec<SampleDebug>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDebug {
    pub sample_id: String,
    pub intra: Vec<usize>,
    pub inter: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<usize>,
}

impl BatchDebug {
    pub fn new(batch: usize, sample_ids: &[String], rec: &BatchRecapture, truth: Option<&[usize]>) -> Self {
        let selected: std::collections::HashMap<&str, usize> =
            rec.pseudo.entries.iter().map(|e| (e.sample_id.as_str(), e.label)).collect();
        let samples = sample_ids
            .iter()
            .enumerate()
            .map(|(i, id)| SampleDebug {
                sample_id: id.clone(),
                intra: rec.candidates.intra[i].clone(),
                inter: rec.candidates.inter[i].clone(),
                pseudo_label: selected.get(id.as_str()).copied(),
                truth: truth.map(|t| t[i]),
            })
            .collect();
        Self { batch, tau: rec.thresholds.tau, theta: rec.thresholds.theta.clone(), samples }
    }
}
