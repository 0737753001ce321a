//! Test-set accuracy: direct classification and cluster accuracy under the
//! best one-to-one relabeling of predictions.

mod hungarian;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use hungarian::max_weight_assignment;

use crate::datamodel::{LabelSpace, SampleRecord};
use crate::encoders::{confidence_matrix, encode_images, ClassEmbeddings, ImageEncoder, Provenance, View};
use crate::error::{Result, SecosError};
use crate::ncsc::argmax;

/// Accuracy on the whole test set and on its known/novel subsets. A subset
/// with no test samples has no accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub all: f64,
    pub known: Option<f64>,
    pub novel: Option<f64>,
}

fn check_inputs(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(SecosError::structure(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(SecosError::param("accuracy of an empty test set is undefined"));
    }
    if let Some(&c) = pred.iter().chain(truth).find(|&&c| c >= num_classes) {
        return Err(SecosError::param(format!("class index {c} out of range for {num_classes} classes")));
    }
    Ok(())
}

fn subset_accuracies(hits: impl Iterator<Item = (bool, bool)>) -> Accuracies {
    // (is_known, hit)
    let mut n = [0usize; 2];
    let mut h = [0usize; 2];
    for (known, hit) in hits {
        let k = usize::from(!known);
        n[k] += 1;
        h[k] += usize::from(hit);
    }
    let frac = |h: usize, n: usize| (n > 0).then(|| h as f64 / n as f64);
    Accuracies {
        all: (h[0] + h[1]) as f64 / (n[0] + n[1]) as f64,
        known: frac(h[0], n[0]),
        novel: frac(h[1], n[1]),
    }
}

/// Fraction of exact matches, split by the ground-truth class being known or
/// novel.
pub fn acc_classify(pred: &[usize], truth: &[usize], labels: &LabelSpace) -> Result<Accuracies> {
    check_inputs(pred, truth, labels.len())?;
    Ok(subset_accuracies(pred.iter().zip(truth).map(|(p, t)| (labels.is_known(*t), p == t))))
}

/// Confusion counts with rows indexed by ground truth and columns by
/// prediction.
pub fn confusion(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    check_inputs(pred, truth, num_classes)?;
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        m[t][p] += 1;
    }
    Ok(m)
}

/// Permutation `w` with `w[predicted] = ground truth` maximizing the number of
/// agreements. Ties resolve to the lexicographically smallest `w`.
pub fn hungarian_match(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<Vec<usize>> {
    let conf = confusion(pred, truth, num_classes)?;
    let weight: Vec<Vec<i64>> = (0..num_classes)
        .map(|p| (0..num_classes).map(|t| conf[t][p] as i64).collect())
        .collect();
    Ok(max_weight_assignment(&weight))
}

/// Accuracy after relabeling predictions with the single best permutation
/// found on the whole test set. The same permutation scores the known and
/// novel subsets.
pub fn acc_cluster(pred: &[usize], truth: &[usize], labels: &LabelSpace) -> Result<(Accuracies, Vec<usize>)> {
    let w = hungarian_match(pred, truth, labels.len())?;
    let acc = subset_accuracies(pred.iter().zip(truth).map(|(&p, &t)| (labels.is_known(t), w[p] == t)));
    Ok((acc, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub num_known: usize,
    pub num_novel: usize,
    pub acc_classify: Accuracies,
    pub acc_cluster: Accuracies,
    /// `matching[predicted] = ground truth`.
    pub matching: Vec<usize>,
    /// Rows are ground truth, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Full report from predictions and ground truth.
pub fn evaluate_predictions(pred: &[usize], truth: &[usize], labels: &LabelSpace) -> Result<EvalReport> {
    let acc_classify = acc_classify(pred, truth, labels)?;
    let (acc_cluster, matching) = acc_cluster(pred, truth, labels)?;
    let num_known = truth.iter().filter(|&&t| labels.is_known(t)).count();
    Ok(EvalReport {
        num_samples: truth.len(),
        num_known,
        num_novel: truth.len() - num_known,
        acc_classify,
        acc_cluster,
        matching,
        confusion: confusion(pred, truth, labels.len())?,
        class_names: labels.names().map(str::to_owned).collect(),
    })
}

/// Arg-max class of each record under `encoder`, scored against all class
/// embeddings on the un-augmented view.
pub fn predict(
    encoder: &dyn ImageEncoder,
    records: &[SampleRecord],
    embeds: &ClassEmbeddings,
    logit_scale: f64,
) -> Result<Vec<usize>> {
    let features = encode_images(encoder, records, View::None, 0)?;
    let conf = confidence_matrix(&features, embeds, logit_scale, Provenance::Student)?;
    Ok((0..conf.num_samples()).map(|i| argmax(conf.row(i)).0).collect())
}

/// Encodes the test records and reports both accuracy metrics. Every record
/// must carry its ground-truth label.
pub fn evaluate(
    encoder: &dyn ImageEncoder,
    test: &[SampleRecord],
    labels: &LabelSpace,
    embeds: &ClassEmbeddings,
    logit_scale: f64,
) -> Result<EvalReport> {
    if embeds.num_classes() != labels.len() {
        return Err(SecosError::structure(format!(
            "{} class embeddings for {} classes",
            embeds.num_classes(),
            labels.len()
        )));
    }
    let truth = test
        .iter()
        .map(|r| r.true_label.ok_or_else(|| SecosError::Input(format!("test sample `{}` has no label", r.sample_id))))
        .collect::<Result<Vec<_>>>()?;
    let pred = predict(encoder, test, embeds, logit_scale)?;
    evaluate_predictions(&pred, &truth, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(k: usize, n: usize) -> LabelSpace {
        let names: Vec<String> = (0..k + n).map(|i| format!("c{i}")).collect();
        LabelSpace::new(names[..k].to_vec(), names[k..].to_vec()).unwrap()
    }

    /// Oracle: best relabeling by enumerating every permutation.
    fn brute_cluster(pred: &[usize], truth: &[usize], m: usize) -> (usize, Vec<usize>) {
        let mut perm: Vec<usize> = (0..m).collect();
        let mut best = (0, perm.clone());
        let mut first = true;
        loop {
            let hits = pred.iter().zip(truth).filter(|(&p, &t)| perm[p] == t).count();
            if first || hits > best.0 {
                best = (hits, perm.clone());
                first = false;
            }
            // next lexicographic permutation
            let Some(i) = (1..m).rev().find(|&i| perm[i - 1] < perm[i]) else { break };
            let j = (i..m).rev().find(|&j| perm[j] > perm[i - 1]).unwrap();
            perm.swap(i - 1, j);
            perm[i..].reverse();
        }
        best
    }

    #[test]
    fn swapped_novel_clusters() {
        let ls = labels(2, 2);
        let truth = [0, 1, 2, 2, 3, 3];
        let pred = [0, 1, 3, 3, 2, 2];
        let ac = acc_classify(&pred, &truth, &ls).unwrap();
        assert_eq!(ac.known, Some(1.0));
        assert_eq!(ac.novel, Some(0.0));
        assert!((ac.all - 1.0 / 3.0).abs() < 1e-12);
        let (cl, w) = acc_cluster(&pred, &truth, &ls).unwrap();
        assert_eq!(w, vec![0, 1, 3, 2]);
        assert_eq!(cl, Accuracies { all: 1.0, known: Some(1.0), novel: Some(1.0) });
    }

    #[test]
    fn no_novel_samples_is_undefined() {
        let ls = labels(2, 1);
        let a = acc_classify(&[0, 1], &[0, 0], &ls).unwrap();
        assert_eq!(a.novel, None);
        assert_eq!(a.known, Some(0.5));
    }

    #[test]
    fn rejects_mismatched_lengths_and_empty() {
        let ls = labels(1, 1);
        assert!(acc_classify(&[0], &[0, 1], &ls).is_err());
        assert!(acc_classify(&[], &[], &ls).is_err());
        assert!(acc_classify(&[2], &[0], &ls).is_err());
    }

    #[test]
    fn confusion_rows_are_truth() {
        let m = confusion(&[1, 1, 0], &[0, 1, 1], 2).unwrap();
        assert_eq!(m, vec![vec![0, 1], vec![1, 1]]);
    }

    proptest! {
        #[test]
        fn cluster_matches_brute_force(
            m in 2usize..=6,
            raw in proptest::collection::vec((0usize..6, 0usize..6), 1..40),
        ) {
            let pairs: Vec<(usize, usize)> = raw.into_iter().map(|(p, t)| (p % m, t % m)).collect();
            let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let ls = labels(m.div_ceil(2), m / 2);
            let (acc, w) = acc_cluster(&pred, &truth, &ls).unwrap();
            let (hits, best) = brute_cluster(&pred, &truth, m);
            prop_assert_eq!(w, best);
            prop_assert!((acc.all - hits as f64 / pred.len() as f64).abs() < 1e-12);
            let direct = acc_classify(&pred, &truth, &ls).unwrap();
            prop_assert!(acc.all >= direct.all - 1e-12);
        }
    }
}
