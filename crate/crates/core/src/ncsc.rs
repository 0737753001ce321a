//! Novel class semantic compensation.
//!
//! The frozen teacher assigns every unlabeled sample its argmax class. The
//! samples are grouped by that class, and within each *novel* class group
//! the top `phi` percent by confidence are kept as a fixed, global set of
//! pseudo-labeled novel samples. Known-class groups are discarded.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{DatasetSplit, LabelSpace};
use crate::encoders::ConfidenceMatrix;
use crate::error::{Result, SecosError};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Global,
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub sample_id: String,
    pub label: usize,
    pub confidence: f64,
}

/// Samples paired with hard pseudo labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub origin: Origin,
    pub entries: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn new(origin: Origin, entries: Vec<PseudoLabel>) -> Self {
        Self { origin, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.sample_id.as_str())
    }

    /// Checks id uniqueness, confidence range and, for global sets, that
    /// every label is a novel class.
    pub fn validate(&self, labels: &LabelSpace) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for e in &self.entries {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(SecosError::Validation(format!("duplicate pseudo-labeled sample `{}`", e.sample_id)));
            }
            if !(0.0..=1.0).contains(&e.confidence) {
                return Err(SecosError::Validation(format!("confidence {} of `{}` outside [0, 1]", e.confidence, e.sample_id)));
            }
            let ok = match self.origin {
                Origin::Global => labels.is_novel(e.label),
                Origin::Batch => e.label < labels.len(),
            };
            if !ok {
                return Err(SecosError::Validation(format!("pseudo label {} of `{}` not allowed", e.label, e.sample_id)));
            }
        }
        Ok(())
    }

    /// Fraction of entries whose label matches `truth`, over entries with
    /// known truth. `None` when no entry can be scored.
    pub fn precision<F: Fn(&str) -> Option<usize>>(&self, truth: F) -> Option<f64> {
        let (hit, total) = self.entries.iter().fold((0usize, 0usize), |(h, t), e| match truth(&e.sample_id) {
            Some(y) => (h + usize::from(y == e.label), t + 1),
            None => (h, t),
        });
        (total > 0).then(|| hit as f64 / total as f64)
    }

    /// One JSON object per line: `{"sample_id", "class", "confidence"}`.
    pub fn write_jsonl<W: Write>(&self, labels: &LabelSpace, mut out: W) -> Result<()> {
        for e in &self.entries {
            let class = labels.name(e.label).ok_or_else(|| SecosError::param(format!("label {} out of range", e.label)))?;
            let line = ExportLine { sample_id: e.sample_id.clone(), class: class.to_owned(), confidence: e.confidence };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(origin: Origin, labels: &LabelSpace, input: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ExportLine = serde_json::from_str(&line)
                .map_err(|e| SecosError::Format(format!("line {}: {e}", n + 1)))?;
            let label = labels
                .index_of(&rec.class)
                .ok_or_else(|| SecosError::Format(format!("line {}: unknown class `{}`", n + 1, rec.class)))?;
            entries.push(PseudoLabel { sample_id: rec.sample_id, label, confidence: rec.confidence });
        }
        let set = Self { origin, entries };
        set.validate(labels)?;
        Ok(set)
    }

    pub fn save(&self, labels: &LabelSpace, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(labels, &mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(origin: Origin, labels: &LabelSpace, path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(origin, labels, std::io::BufReader::new(f))
    }
}

#[derive(Serialize, Deserialize)]
struct ExportLine {
    sample_id: String,
    class: String,
    confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardLabel {
    pub sample_id: String,
    pub class: usize,
    pub confidence: f64,
}

/// Argmax class of a probability row; ties go to the lowest index.
pub fn argmax(row: ndarray::ArrayView1<'_, f64>) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (c, &p) in row.iter().enumerate().skip(1) {
        if p > best.1 {
            best = (c, p);
        }
    }
    best
}

/// Argmax class and its confidence for every row, aligned with `sample_ids`.
pub fn assign_hard_pseudo_labels(sample_ids: &[String], conf: &ConfidenceMatrix) -> Result<Vec<HardLabel>> {
    if sample_ids.len() != conf.num_samples() {
        return Err(SecosError::structure(format!(
            "{} sample ids for {} confidence rows",
            sample_ids.len(),
            conf.num_samples()
        )));
    }
    Ok(sample_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let (class, confidence) = argmax(conf.row(i));
            HardLabel { sample_id: id.clone(), class, confidence }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMember {
    pub sample_id: String,
    pub confidence: f64,
}

/// Samples whose argmax is `class`, by descending confidence then ascending
/// sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGroup {
    pub class: usize,
    pub members: Vec<ClassMember>,
}

impl ClassGroup {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

fn member_order(a: &ClassMember, b: &ClassMember) -> Ordering {
    b.confidence.total_cmp(&a.confidence).then_with(|| a.sample_id.cmp(&b.sample_id))
}

/// Exactly `num_classes` groups, group `c` holding the samples with argmax `c`.
pub fn group_by_class(hard: &[HardLabel], num_classes: usize) -> Result<Vec<ClassGroup>> {
    let mut groups: Vec<ClassGroup> = (0..num_classes).map(|class| ClassGroup { class, members: Vec::new() }).collect();
    for h in hard {
        let g = groups
            .get_mut(h.class)
            .ok_or_else(|| SecosError::param(format!("class {} outside [0, {num_classes})", h.class)))?;
        g.members.push(ClassMember { sample_id: h.sample_id.clone(), confidence: h.confidence });
    }
    for g in &mut groups {
        g.members.sort_by(member_order);
    }
    Ok(groups)
}

/// `ceil(phi / 100 * m)`, at least one for a non-empty group.
pub fn top_phi_count(group_len: usize, phi: f64) -> usize {
    if group_len == 0 {
        return 0;
    }
    let c = (phi / 100.0 * group_len as f64 - 1e-9).ceil() as usize;
    c.clamp(1, group_len)
}

fn check_phi(phi: f64) -> Result<()> {
    if phi > 0.0 && phi <= 100.0 {
        Ok(())
    } else {
        Err(SecosError::param(format!("phi must be in (0, 100], got {phi}")))
    }
}

/// The highest-confidence `phi` percent of a sorted group.
pub fn select_top_phi(group: &ClassGroup, phi: f64) -> Result<&[ClassMember]> {
    check_phi(phi)?;
    Ok(&group.members[..top_phi_count(group.len(), phi)])
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DnDiagnostics {
    /// Argmax group size per class.
    pub group_sizes: Vec<usize>,
    /// Selected count per class (zero for known classes).
    pub selected: Vec<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPseudoLabels {
    pub set: PseudoLabelSet,
    pub diagnostics: DnDiagnostics,
}

/// Builds the global pseudo-labeled novel set from confidences over the
/// unlabeled set (rows aligned with `split.unlabeled`).
pub fn build_dn(split: &DatasetSplit, conf: &ConfidenceMatrix, phi: f64) -> Result<GlobalPseudoLabels> {
    check_phi(phi)?;
    let labels = &split.label_space;
    if conf.num_classes() != labels.len() {
        return Err(SecosError::structure(format!(
            "confidence matrix has {} classes, label space {}",
            conf.num_classes(),
            labels.len()
        )));
    }
    let ids: Vec<String> = split.unlabeled.iter().map(|r| r.sample_id.clone()).collect();
    let hard = assign_hard_pseudo_labels(&ids, conf)?;
    let groups = group_by_class(&hard, labels.len())?;
    let novel = &groups[labels.novel_range()];
    let picked = par::map(novel, |g| {
        select_top_phi(g, phi)
            .expect("phi checked")
            .iter()
            .map(|m| PseudoLabel { sample_id: m.sample_id.clone(), label: g.class, confidence: m.confidence })
            .collect::<Vec<_>>()
    });
    let mut diagnostics = DnDiagnostics {
        group_sizes: groups.iter().map(ClassGroup::len).collect(),
        selected: vec![0; labels.len()],
        warnings: Vec::new(),
    };
    for (g, p) in novel.iter().zip(&picked) {
        diagnostics.selected[g.class] = p.len();
    }
    let entries: Vec<PseudoLabel> = picked.into_iter().flatten().collect();
    if entries.is_empty() {
        let msg = "no unlabeled sample has a novel argmax; the global novel set is empty".to_string();
        log::warn!("{msg}");
        diagnostics.warnings.push(msg);
    }
    Ok(GlobalPseudoLabels { set: PseudoLabelSet::new(Origin::Global, entries), diagnostics })
}
