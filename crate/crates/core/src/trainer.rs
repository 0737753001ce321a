//! Training loop over labeled, global pseudo-labeled and batch pseudo-labeled
//! data.
//!
//! Every optimizer step draws three sub-batches: `B_L` from the labeled set,
//! `B_N` from the global novel set built once before training, and `B_U` from
//! the unlabeled set, which the pseudo-label source turns into `B_P` by batch
//! recapture. Each sample contributes the loss of a weak and a strong view;
//! the step loss is the sum of the three per-source means.
//!
//! Epochs are defined over the unlabeled set. The labeled and global streams
//! cycle and reshuffle independently when they run out.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapter_net::{loss_gradients, AdapterParams, FrozenBackbone, ViewedExample};
use crate::bwsr::{
    precision_counts, recapture_batch, BatchDebug, BatchRecapture, PrecisionCounts, QuantileRule, RecaptureConfig,
};
use crate::datamodel::{DatasetSplit, SampleRecord};
use crate::encoders::{
    confidence_matrix, ema_update, encode_images, ClassEmbeddings, ImageEncoder, InputSource, Provenance,
    StudentEncoder, View,
};
use crate::error::{Result, SecosError};
use crate::ncsc::{build_dn, GlobalPseudoLabels};
use crate::optim::{AdamW, AdamWConfig, Schedule, TrainableMask};
use crate::seed::{derive, fnv1a, rng_from};

/// Where pseudo labels for the unlabeled data come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    /// A fixed external encoder builds the global set and scores batches.
    #[default]
    ExternalTeacher,
    /// The initial student builds the global set; a moving average of the
    /// student scores batches.
    Ema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub alpha: f64,
    pub beta: f64,
    /// Quantile convention for the batch thresholds.
    pub quantile: QuantileRule,
    pub phi: f64,
    pub logit_scale: f64,
    pub teacher_mode: TeacherMode,
    pub ema_decay: f64,
    /// Train on the global novel set.
    pub use_dn: bool,
    /// Train on batch pseudo labels.
    pub use_bp: bool,
    /// Let the optimizer update the adapter output scale.
    pub learn_scale: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-5,
            schedule: Schedule::Linear,
            alpha: 0.6,
            beta: 0.95,
            quantile: QuantileRule::Linear,
            phi: 50.0,
            logit_scale: 100.0,
            teacher_mode: TeacherMode::ExternalTeacher,
            ema_decay: 0.999,
            use_dn: true,
            use_bp: true,
            learn_scale: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SecosError::param("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(SecosError::param(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(SecosError::param("weight_decay must be >= 0"));
        }
        if !(self.logit_scale > 0.0) || !self.logit_scale.is_finite() {
            return Err(SecosError::param("logit_scale must be finite and > 0"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(SecosError::param(format!("ema_decay must be in [0, 1], got {}", self.ema_decay)));
        }
        if !(self.phi > 0.0 && self.phi <= 100.0) {
            return Err(SecosError::param(format!("phi must be in (0, 100], got {}", self.phi)));
        }
        for (n, q) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(q > 0.0 && q <= 1.0) {
                return Err(SecosError::param(format!("{n} must be in (0, 1], got {q}")));
            }
        }
        self.schedule.validate()
    }

    pub fn recapture(&self) -> RecaptureConfig {
        RecaptureConfig { alpha: self.alpha, beta: self.beta, quantile: self.quantile }
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// Models that never change during training.
pub struct FrozenParts<'a, S: InputSource> {
    pub source: &'a S,
    pub backbone: &'a FrozenBackbone,
    pub embeds: &'a ClassEmbeddings,
    /// Required in external-teacher mode.
    pub teacher: Option<&'a dyn ImageEncoder>,
}

/// Trainable state: the student, its optimizer and, in EMA mode, the moving
/// average copy.
#[derive(Debug, Clone)]
pub struct StudentState {
    pub params: AdapterParams,
    pub optimizer: AdamW,
    pub ema: Option<AdapterParams>,
}

impl StudentState {
    pub fn new(params: AdapterParams, config: &TrainConfig) -> Result<Self> {
        let optimizer = AdamW::new(&params, config.optimizer(), TrainableMask { scale: config.learn_scale })?;
        let ema = (config.teacher_mode == TeacherMode::Ema).then(|| params.clone());
        Ok(Self { params, optimizer, ema })
    }
}

/// One step's worth of data. `unlabeled_truth`, when present, is only used
/// to log pseudo-label precision.
#[derive(Debug, Clone, Default)]
pub struct StepBatch<'a> {
    pub labeled: Vec<(&'a SampleRecord, usize)>,
    pub global: Vec<(&'a SampleRecord, usize)>,
    pub unlabeled: Vec<&'a SampleRecord>,
    pub unlabeled_truth: Option<Vec<usize>>,
    /// Seed of this step's augmentations.
    pub view_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: usize,
    pub loss_l: Option<f64>,
    pub loss_n: Option<f64>,
    pub loss_p: Option<f64>,
    pub loss: f64,
    pub n_l: usize,
    pub n_n: usize,
    pub n_u: usize,
    pub n_p: usize,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub singleton_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_precision: Option<f64>,
    /// No source had any sample, so no update was made.
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision_counts: Option<PrecisionCounts>,
}

fn viewed<S: InputSource>(
    source: &S,
    items: &[(&SampleRecord, usize)],
    seed: u64,
) -> Result<Vec<ViewedExample>> {
    crate::par::try_map(items, |&(r, label)| {
        Ok(ViewedExample {
            sample_id: r.sample_id.clone(),
            views: vec![source.load(r, View::Weak, seed)?, source.load(r, View::Strong, seed)?],
            label,
        })
    })
}

/// Batch recapture of `B_U` from the configured source, plus precision
/// counts when truth is known. `B_U` must be non-empty.
fn recapture_unlabeled<S: InputSource>(
    frozen: &FrozenParts<'_, S>,
    state: &StudentState,
    batch: &StepBatch<'_>,
    config: &TrainConfig,
) -> Result<(BatchRecapture, Option<PrecisionCounts>)> {
    let records: Vec<SampleRecord> = batch.unlabeled.iter().map(|r| (*r).clone()).collect();
    let (features, provenance) = match (config.teacher_mode, &state.ema) {
        (TeacherMode::Ema, Some(ema)) => {
            let enc = StudentEncoder { source: frozen.source, backbone: frozen.backbone, params: ema };
            (encode_images(&enc, &records, View::Weak, batch.view_seed)?, Provenance::Ema)
        }
        (TeacherMode::Ema, None) => return Err(SecosError::param("EMA mode without an EMA copy")),
        (TeacherMode::ExternalTeacher, _) => {
            let teacher = frozen.teacher.ok_or_else(|| SecosError::param("external-teacher mode needs a teacher"))?;
            (encode_images(teacher, &records, View::Weak, batch.view_seed)?, Provenance::Teacher)
        }
    };
    let conf = confidence_matrix(&features, frozen.embeds, config.logit_scale, provenance)?;
    let ids: Vec<String> = records.iter().map(|r| r.sample_id.clone()).collect();
    let rec = recapture_batch(&ids, &conf, config.recapture())?;
    let counts = match &batch.unlabeled_truth {
        Some(t) => Some(precision_counts(&rec.candidates, t)?),
        None => None,
    };
    Ok((rec, counts))
}

/// `(batch row, class)` pairs plus precision counts when truth is known.
type Scored = (Vec<(usize, usize)>, Option<PrecisionCounts>);

/// Pseudo labels for `B_U`.
fn score_unlabeled<S: InputSource>(
    frozen: &FrozenParts<'_, S>,
    state: &StudentState,
    batch: &StepBatch<'_>,
    config: &TrainConfig,
) -> Result<Scored> {
    if batch.unlabeled.is_empty() {
        return Ok((Vec::new(), None));
    }
    let (rec, counts) = recapture_unlabeled(frozen, state, batch, config)?;
    Ok((crate::bwsr::select_batch_pseudo(&rec.candidates)?, counts))
}

/// Unlabeled-set order of `epoch`.
fn epoch_order(config: &TrainConfig, n: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(derive(config.seed, &[fnv1a(b"unlabeled-stream"), epoch as u64])));
    order
}

fn view_seed(config: &TrainConfig, global_step: usize) -> u64 {
    derive(config.seed, &[fnv1a(b"views"), global_step as u64])
}

/// Scores `B_U`, takes one optimizer step on `B_L ∪ B_N ∪ B_P` and, in EMA
/// mode, updates the moving average.
pub fn train_step<S: InputSource>(
    frozen: &FrozenParts<'_, S>,
    state: &mut StudentState,
    batch: &StepBatch<'_>,
    config: &TrainConfig,
    lr: f64,
) -> Result<StepMetrics> {
    let (pairs, counts) =
        if config.use_bp { score_unlabeled(frozen, state, batch, config)? } else { (Vec::new(), None) };
    let pseudo: Vec<(&SampleRecord, usize)> = pairs.iter().map(|&(i, c)| (batch.unlabeled[i], c)).collect();

    let global: &[(&SampleRecord, usize)] = if config.use_dn { &batch.global } else { &[] };
    let mut metrics = StepMetrics {
        epoch: 0,
        step: 0,
        loss_l: None,
        loss_n: None,
        loss_p: None,
        loss: 0.0,
        n_l: batch.labeled.len(),
        n_n: global.len(),
        n_u: batch.unlabeled.len(),
        n_p: pseudo.len(),
        lr,
        singleton_precision: counts.and_then(|c| c.singleton_precision()),
        raw_precision: counts.and_then(|c| c.raw_precision()),
        skipped: false,
        precision_counts: counts,
    };
    if batch.labeled.is_empty() && global.is_empty() && pseudo.is_empty() {
        log::warn!("empty step: no labeled, global or batch pseudo-labeled samples; skipping update");
        metrics.skipped = true;
        return Ok(metrics);
    }

    let mut grads = state.params.zeros_like();
    let sources = [(&batch.labeled[..], &mut metrics.loss_l), (global, &mut metrics.loss_n), (&pseudo[..], &mut metrics.loss_p)];
    let mut total = 0.0;
    for (items, slot) in sources {
        if items.is_empty() {
            continue;
        }
        let examples = viewed(frozen.source, items, batch.view_seed)?;
        let lg = loss_gradients(frozen.backbone, &state.params, frozen.embeds, &examples, config.logit_scale)?;
        grads.add_scaled(1.0, &lg.grads);
        total += lg.loss;
        *slot = Some(lg.loss);
    }
    metrics.loss = total;
    state.optimizer.step(&mut state.params, &grads, lr)?;
    if let Some(ema) = &mut state.ema {
        ema_update(ema, &state.params, config.ema_decay)?;
    }
    Ok(metrics)
}

/// Endless shuffled stream over `0..n`, reshuffled on every pass.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    pass: u64,
    seed: u64,
}

impl Cycler {
    fn new(n: usize, seed: u64) -> Self {
        let mut c = Self { order: (0..n).collect(), pos: 0, pass: 0, seed };
        c.shuffle();
        c
    }

    fn shuffle(&mut self) {
        let mut rng = rng_from(derive(self.seed, &[self.pass]));
        self.order.shuffle(&mut rng);
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(k);
        while out.len() < k.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.pass += 1;
                self.pos = 0;
                self.shuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: AdapterParams,
    pub ema: Option<AdapterParams>,
    pub global: GlobalPseudoLabels,
    pub log: Vec<StepMetrics>,
}

impl TrainOutcome {
    /// Parameters used for evaluation: the student itself.
    pub fn model(&self) -> &AdapterParams {
        &self.params
    }

    /// Singleton and raw-intersection precision summed over the run.
    pub fn precision_totals(&self) -> PrecisionCounts {
        let mut c = PrecisionCounts::default();
        for m in &self.log {
            if let Some(p) = &m.precision_counts {
                c.add(p);
            }
        }
        c
    }
}

/// Builds the global novel set with the configured source: the external
/// teacher, or the initial student in EMA mode.
pub fn global_pseudo_labels<S: InputSource>(
    split: &DatasetSplit,
    frozen: &FrozenParts<'_, S>,
    init: &AdapterParams,
    config: &TrainConfig,
) -> Result<GlobalPseudoLabels> {
    let (features, provenance) = match config.teacher_mode {
        TeacherMode::ExternalTeacher => {
            let teacher = frozen.teacher.ok_or_else(|| SecosError::param("external-teacher mode needs a teacher"))?;
            (encode_images(teacher, &split.unlabeled, View::None, 0)?, Provenance::Teacher)
        }
        TeacherMode::Ema => {
            let enc = StudentEncoder { source: frozen.source, backbone: frozen.backbone, params: init };
            (encode_images(&enc, &split.unlabeled, View::None, 0)?, Provenance::Student)
        }
    };
    let conf = confidence_matrix(&features, frozen.embeds, config.logit_scale, provenance)?;
    build_dn(split, &conf, config.phi)
}

/// Runs the full schedule. Each step's metrics are also written as one JSON
/// line to `log_sink` when given, so a failed run keeps its partial log.
pub fn run_training<S: InputSource>(
    split: &DatasetSplit,
    frozen: &FrozenParts<'_, S>,
    init: AdapterParams,
    config: &TrainConfig,
    global: Option<GlobalPseudoLabels>,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if split.unlabeled.is_empty() && config.epochs > 0 {
        return Err(SecosError::param("training needs a non-empty unlabeled set"));
    }
    let global = match global {
        Some(g) => g,
        None if split.unlabeled.is_empty() => GlobalPseudoLabels {
            set: crate::ncsc::PseudoLabelSet::new(crate::ncsc::Origin::Global, Vec::new()),
            diagnostics: Default::default(),
        },
        None => global_pseudo_labels(split, frozen, &init, config)?,
    };
    global.set.validate(&split.label_space)?;
    let by_id: std::collections::HashMap<&str, &SampleRecord> =
        split.unlabeled.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let global_items: Vec<(&SampleRecord, usize)> = global
        .set
        .entries
        .iter()
        .map(|e| {
            by_id
                .get(e.sample_id.as_str())
                .map(|r| (*r, e.label))
                .ok_or_else(|| SecosError::Input(format!("global pseudo label for unknown sample `{}`", e.sample_id)))
        })
        .collect::<Result<_>>()?;
    let labeled_items: Vec<(&SampleRecord, usize)> = split
        .labeled
        .iter()
        .map(|r| {
            r.true_label
                .map(|c| (r, c))
                .ok_or_else(|| SecosError::Input(format!("labeled sample `{}` has no label", r.sample_id)))
        })
        .collect::<Result<_>>()?;
    let has_truth = split.unlabeled_truth.len() == split.unlabeled.len();

    let mut state = StudentState::new(init, config)?;
    let mut labeled_stream = Cycler::new(labeled_items.len(), derive(config.seed, &[fnv1a(b"labeled-stream")]));
    let mut global_stream = Cycler::new(global_items.len(), derive(config.seed, &[fnv1a(b"global-stream")]));
    let mut log = Vec::new();
    let mut global_step = 0usize;
    for epoch in 0..config.epochs {
        let lr = config.schedule.lr(config.lr, epoch, config.epochs);
        let order = epoch_order(config, split.unlabeled.len(), epoch);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = StepBatch {
                labeled: labeled_stream.take(config.batch_size).into_iter().map(|i| labeled_items[i]).collect(),
                global: if config.use_dn {
                    global_stream.take(config.batch_size).into_iter().map(|i| global_items[i]).collect()
                } else {
                    Vec::new()
                },
                unlabeled: chunk.iter().map(|&i| &split.unlabeled[i]).collect(),
                unlabeled_truth: has_truth.then(|| chunk.iter().map(|&i| split.unlabeled_truth[i]).collect()),
                view_seed: view_seed(config, global_step),
            };
            let mut m = train_step(frozen, &mut state, &batch, config, lr)?;
            m.epoch = epoch;
            m.step = step;
            if let Some(sink) = log_sink.as_deref_mut() {
                writeln!(sink, "{}", serde_json::to_string(&m)?)?;
            }
            log.push(m);
            global_step += 1;
        }
        if let Some(last) = log.last() {
            log::info!("epoch {epoch}: lr {lr:.2e}, last loss {:.4}", last.loss);
        }
    }
    Ok(TrainOutcome { params: state.params, ema: state.ema, global, log })
}

/// Batch recapture over the first epoch's unlabeled batches with `params`
/// as the student (and EMA copy), without any update. Batches, views and the
/// pseudo-label source match what training would see at epoch 0.
pub fn recapture_pass<S: InputSource>(
    split: &DatasetSplit,
    frozen: &FrozenParts<'_, S>,
    params: &AdapterParams,
    config: &TrainConfig,
) -> Result<Vec<BatchDebug>> {
    config.validate()?;
    let state = StudentState::new(params.clone(), config)?;
    let has_truth = split.unlabeled_truth.len() == split.unlabeled.len();
    let order = epoch_order(config, split.unlabeled.len(), 0);
    order
        .chunks(config.batch_size)
        .enumerate()
        .map(|(step, chunk)| {
            let batch = StepBatch {
                unlabeled: chunk.iter().map(|&i| &split.unlabeled[i]).collect(),
                unlabeled_truth: has_truth.then(|| chunk.iter().map(|&i| split.unlabeled_truth[i]).collect()),
                view_seed: view_seed(config, step),
                ..Default::default()
            };
            let (rec, _) = recapture_unlabeled(frozen, &state, &batch, config)?;
            let ids: Vec<String> = batch.unlabeled.iter().map(|r| r.sample_id.clone()).collect();
            Ok(BatchDebug::new(step, &ids, &rec, batch.unlabeled_truth.as_deref()))
        })
        .collect()
}
