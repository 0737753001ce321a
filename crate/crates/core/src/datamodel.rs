//! Label space, sample records and dataset splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SecosError};
use crate::seed::{derive, fnv1a, rng_from};

/// Candidate textual labels, known classes first.
///
/// Indices `[0, k)` are known classes and `[k, k + n)` are novel classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LabelSpaceRepr", into = "LabelSpaceRepr")]
pub struct LabelSpace {
    known: Vec<String>,
    novel: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct LabelSpaceRepr {
    known: Vec<String>,
    novel: Vec<String>,
}

impl TryFrom<LabelSpaceRepr> for LabelSpace {
    type Error = SecosError;

    fn try_from(r: LabelSpaceRepr) -> Result<Self> {
        LabelSpace::new(r.known, r.novel)
    }
}

impl From<LabelSpace> for LabelSpaceRepr {
    fn from(ls: LabelSpace) -> Self {
        LabelSpaceRepr { known: ls.known, novel: ls.novel }
    }
}

impl LabelSpace {
    pub fn new(known: Vec<String>, novel: Vec<String>) -> Result<Self> {
        if known.is_empty() || novel.is_empty() {
            return Err(SecosError::Validation(format!(
                "label space needs at least one known and one novel class (got k={}, n={})",
                known.len(),
                novel.len()
            )));
        }
        let mut index = HashMap::with_capacity(known.len() + novel.len());
        for (i, name) in known.iter().chain(novel.iter()).enumerate() {
            if name.is_empty() {
                return Err(SecosError::Validation("empty class name".into()));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(SecosError::Validation(format!("duplicate class name `{name}`")));
            }
        }
        Ok(Self { known, novel, index })
    }

    pub fn num_known(&self) -> usize {
        self.known.len()
    }

    pub fn num_novel(&self) -> usize {
        self.novel.len()
    }

    pub fn len(&self) -> usize {
        self.known.len() + self.novel.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_known(&self, class: usize) -> bool {
        class < self.known.len()
    }

    pub fn is_novel(&self, class: usize) -> bool {
        class >= self.known.len() && class < self.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, class: usize) -> Option<&str> {
        if class < self.known.len() {
            Some(&self.known[class])
        } else {
            self.novel.get(class - self.known.len()).map(String::as_str)
        }
    }

    pub fn known(&self) -> &[String] {
        &self.known
    }

    pub fn novel(&self) -> &[String] {
        &self.novel
    }

    /// All class names in index order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.known.iter().chain(self.novel.iter()).map(String::as_str)
    }

    pub fn novel_range(&self) -> std::ops::Range<usize> {
        self.known.len()..self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    /// Opaque locator of the raw input: an image path or a synthetic seed.
    pub payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub label_space: LabelSpace,
    pub labeled: Vec<SampleRecord>,
    pub unlabeled: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
    /// Ground truth of `unlabeled`, index-aligned. Only diagnostics (pseudo
    /// label precision) read it; training never does.
    #[serde(default)]
    pub unlabeled_truth: Vec<usize>,
}

impl DatasetSplit {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Held ground truth for an unlabeled sample, if recorded.
    pub fn truth_map(&self) -> HashMap<&str, usize> {
        self.unlabeled
            .iter()
            .zip(&self.unlabeled_truth)
            .map(|(r, &c)| (r.sample_id.as_str(), c))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: String,
    pub payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitTag>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestClass {
    pub name: String,
    pub samples: Vec<ManifestSample>,
}

/// Dataset manifest: classes in declaration order, each with its samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<ManifestClass>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn has_predefined_test(&self) -> bool {
        self.classes
            .iter()
            .flat_map(|c| &c.samples)
            .any(|s| s.split == Some(SplitTag::Test))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub ratio_labeled: f64,
    pub known_fraction: f64,
    pub test_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self { ratio_labeled: 0.5, known_fraction: 0.5, test_fraction: None, seed: 0 }
    }
}

/// Partitions a manifest into labeled, unlabeled and test sets.
///
/// The first `floor(known_fraction * classes)` classes in manifest order are
/// known. Each known class contributes `max(1, floor(ratio_labeled * m))` of
/// its training samples to the labeled set; everything else goes to the
/// unlabeled set. Without predefined test samples, `test_fraction` draws a
/// class-balanced test set out of the unlabeled pool.
pub fn build_split(manifest: &Manifest, opts: &SplitOptions) -> Result<DatasetSplit> {
    let SplitOptions { ratio_labeled, known_fraction, test_fraction, seed } = *opts;
    if manifest.classes.len() < 2 {
        return Err(SecosError::Validation("manifest must list at least two classes".into()));
    }
    if let Some(c) = manifest.classes.iter().find(|c| c.samples.is_empty()) {
        return Err(SecosError::Validation(format!("class `{}` has zero samples", c.name)));
    }
    if let Some(c) = manifest.classes.iter().find(|c| c.samples.len() < 2) {
        return Err(SecosError::Validation(format!("class `{}` has fewer than two samples", c.name)));
    }
    if !(ratio_labeled > 0.0 && ratio_labeled < 1.0) {
        return Err(SecosError::param(format!("ratio_labeled must be in (0, 1), got {ratio_labeled}")));
    }
    if let Some(tf) = test_fraction {
        if !(tf > 0.0 && tf < 1.0) {
            return Err(SecosError::param(format!("test_fraction must be in (0, 1), got {tf}")));
        }
    }
    let total = manifest.classes.len();
    let k = ((known_fraction * total as f64) + 1e-9).floor() as usize;
    if k == 0 || k >= total {
        return Err(SecosError::param(format!(
            "known_fraction {known_fraction} over {total} classes gives k={k}, n={}",
            total.saturating_sub(k)
        )));
    }
    let names: Vec<String> = manifest.classes.iter().map(|c| c.name.clone()).collect();
    let label_space = LabelSpace::new(names[..k].to_vec(), names[k..].to_vec())?;

    let mut seen = BTreeSet::new();
    for s in manifest.classes.iter().flat_map(|c| &c.samples) {
        if !seen.insert(s.id.as_str()) {
            return Err(SecosError::Validation(format!("duplicate sample id `{}`", s.id)));
        }
    }

    let predefined_test = manifest.has_predefined_test();
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut unlabeled_truth = Vec::new();
    let mut test = Vec::new();

    for (class, entry) in manifest.classes.iter().enumerate() {
        let class_seed = derive(seed, &[fnv1a(entry.name.as_bytes())]);
        let record = |s: &ManifestSample, label: Option<usize>| SampleRecord {
            sample_id: s.id.clone(),
            payload: s.payload.clone(),
            true_label: label,
        };
        let train: Vec<usize> = (0..entry.samples.len())
            .filter(|&i| entry.samples[i].split != Some(SplitTag::Test))
            .collect();
        for s in entry.samples.iter().filter(|s| s.split == Some(SplitTag::Test)) {
            test.push(record(s, Some(class)));
        }

        let mut pool = train.clone();
        let mut in_labeled = BTreeSet::new();
        if class < k {
            let m = train.len();
            let count = ((ratio_labeled * m as f64 + 1e-9).floor() as usize).max(1).min(m);
            let mut order = train.clone();
            order.shuffle(&mut rng_from(derive(class_seed, &[1])));
            in_labeled.extend(order[..count].iter().copied());
            pool.retain(|i| !in_labeled.contains(i));
        }

        let mut in_test = BTreeSet::new();
        if !predefined_test {
            if let Some(tf) = test_fraction {
                let quota = ((tf * train.len() as f64).round() as usize).min(pool.len());
                let mut order = pool.clone();
                order.shuffle(&mut rng_from(derive(class_seed, &[2])));
                in_test.extend(order[..quota].iter().copied());
            }
        }

        for &i in &train {
            let s = &entry.samples[i];
            if in_labeled.contains(&i) {
                labeled.push(record(s, Some(class)));
            } else if in_test.contains(&i) {
                test.push(record(s, Some(class)));
            } else {
                unlabeled.push(record(s, None));
                unlabeled_truth.push(class);
            }
        }
    }

    Ok(DatasetSplit { label_space, labeled, unlabeled, test, unlabeled_truth })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub sample_id: Option<String>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.sample_id {
            Some(id) => write!(f, "{id}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Lists every broken split invariant. An empty list means the split is valid.
pub fn validate_split(split: &DatasetSplit) -> Vec<Violation> {
    let ls = &split.label_space;
    let mut out = Vec::new();
    let mut push = |id: Option<&str>, message: String| {
        out.push(Violation { sample_id: id.map(str::to_owned), message })
    };

    for r in &split.labeled {
        match r.true_label {
            None => push(Some(&r.sample_id), "labeled record has no label".into()),
            Some(c) if !ls.is_known(c) => {
                push(Some(&r.sample_id), format!("labeled record has non-known label {c}"))
            }
            _ => {}
        }
    }
    for r in &split.test {
        match r.true_label {
            None => push(Some(&r.sample_id), "test record has no ground truth".into()),
            Some(c) if c >= ls.len() => {
                push(Some(&r.sample_id), format!("test label {c} outside [0, {})", ls.len()))
            }
            _ => {}
        }
    }
    for r in &split.unlabeled {
        if let Some(c) = r.true_label {
            if c >= ls.len() {
                push(Some(&r.sample_id), format!("label {c} outside [0, {})", ls.len()));
            }
        }
    }
    if !split.unlabeled_truth.is_empty() && split.unlabeled_truth.len() != split.unlabeled.len() {
        push(None, "held unlabeled ground truth is not aligned with the unlabeled set".into());
    }

    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    for (set, records) in
        [("labeled", &split.labeled), ("unlabeled", &split.unlabeled), ("test", &split.test)]
    {
        for r in records {
            if let Some(prev) = owner.insert(&r.sample_id, set) {
                push(Some(&r.sample_id), format!("sample id appears in both {prev} and {set}"));
            }
        }
    }
    out
}
