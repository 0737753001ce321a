//! Experiment configuration, presets and the synthetic end-to-end pipeline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter_net::{AdapterInit, AdapterParams, FrozenBackbone, Projector};
use crate::datamodel::{build_split, DatasetSplit, Manifest, SplitOptions};
use crate::encoders::synthetic::{self, SyntheticEncoderConfig, SyntheticWorld, PROMPT_TEMPLATES};
use crate::encoders::{build_class_embeddings, AlignedTeacher, ClassEmbeddings, PromptBank, StudentEncoder};
use crate::error::{Result, SecosError};
use crate::evaluator::{evaluate, EvalReport};
use crate::seed::SeedBank;
use crate::trainer::{run_training, FrozenParts, TeacherMode, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub known_fraction: f64,
    pub ratio_labeled: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { classes: 10, samples_per_class: 200, known_fraction: 0.5, ratio_labeled: 0.1, test_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub scale: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        let d = AdapterInit::default();
        Self { rank: d.rank, scale: d.scale }
    }
}

/// Everything one run needs. Serialized as TOML with one table per section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: SyntheticEncoderConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: the synthetic benchmark trains in seconds.
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            encoder: SyntheticEncoderConfig::default(),
            adapter: AdapterConfig::default(),
            train: TrainConfig { epochs: 10, lr: 2e-3, ema_decay: 0.99, ..TrainConfig::default() },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SecosError::Format(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SecosError::Format(e.to_string()))
    }

    /// Applies `key=value` with a dotted key, e.g. `train.phi=25`. The value
    /// is parsed as a TOML value, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| SecosError::param(format!("override `{assignment}` is not KEY=VALUE")))?;
        let key = key.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
        let mut doc = toml::Value::try_from(&*self).map_err(|e| SecosError::Format(e.to_string()))?;
        let mut slot = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| SecosError::param(format!("override key `{key}`: `{part}` is not inside a table")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            slot = table
                .get_mut(*part)
                .ok_or_else(|| SecosError::param(format!("override key `{key}`: unknown section `{part}`")))?;
        }
        *self = doc.try_into().map_err(|e: toml::de::Error| SecosError::param(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        if self.data.classes < 2 || self.data.samples_per_class == 0 {
            return Err(SecosError::param("need at least two classes and one sample per class"));
        }
        if self.adapter.rank == 0 {
            return Err(SecosError::param("adapter rank must be >= 1"));
        }
        Ok(())
    }

    pub fn split_options(&self) -> SplitOptions {
        SplitOptions {
            ratio_labeled: self.data.ratio_labeled,
            known_fraction: self.data.known_fraction,
            test_fraction: Some(self.data.test_fraction),
            seed: self.seeds().sub("split"),
        }
    }

    pub fn seeds(&self) -> SeedBank {
        SeedBank::new(self.seed)
    }

    /// Encoder settings with seeds fanned out from the root seed.
    pub fn seeded_encoder(&self) -> SyntheticEncoderConfig {
        let bank = self.seeds();
        SyntheticEncoderConfig {
            prototype_seed: bank.sub("prototypes"),
            backbone_seed: bank.sub("backbone"),
            ..self.encoder.clone()
        }
    }

    /// Training settings with the shuffling/augmentation seed fanned out from
    /// the root seed.
    pub fn seeded_train(&self) -> TrainConfig {
        TrainConfig { seed: self.seeds().sub("train"), ..self.train.clone() }
    }
}

/// Named sweep or ablation: a list of runs, each a set of overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    /// Name of the swept quantity, as shown in tables and plots.
    pub axis: &'static str,
    pub runs: Vec<PresetRun>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresetRun {
    pub name: String,
    /// Value on the sweep axis, as text.
    pub value: String,
    pub overrides: Vec<String>,
}

fn sweep(name: &'static str, axis: &'static str, key: &str, values: &[&str]) -> Preset {
    Preset {
        name,
        axis,
        runs: values
            .iter()
            .map(|v| PresetRun { name: format!("{axis}-{v}"), value: v.to_string(), overrides: vec![format!("{key}={v}")] })
            .collect(),
    }
}

pub fn presets() -> Vec<Preset> {
    let ablation = [("none", false, false), ("N", true, false), ("B", false, true), ("N+B", true, true)];
    vec![
        sweep("phi-sweep", "phi", "train.phi", &["10", "25", "50", "75", "90"]),
        sweep("rank-sweep", "rank", "adapter.rank", &["2", "4", "10", "16", "32", "64"]),
        sweep("batch-sweep", "batch_size", "train.batch_size", &["8", "16", "32", "64"]),
        Preset {
            name: "ablation",
            axis: "stages",
            runs: ablation
                .iter()
                .map(|&(n, dn, bp)| PresetRun {
                    name: format!("stages-{}", n.replace('+', "")),
                    value: n.to_string(),
                    overrides: vec![format!("train.use_dn={dn}"), format!("train.use_bp={bp}")],
                })
                .collect(),
        },
        sweep("teacher-free", "teacher_mode", "train.teacher_mode", &["external-teacher", "ema"]),
    ]
}

pub fn preset(name: &str) -> Result<Preset> {
    presets().into_iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<&str> = presets().iter().map(|p| p.name).collect();
        SecosError::param(format!("unknown preset `{name}`; available: {}", names.join(", ")))
    })
}

/// Deterministic inputs of a synthetic run.
pub struct SyntheticSetup {
    pub manifest: Manifest,
    pub split: DatasetSplit,
    pub world: SyntheticWorld,
    pub backbone: FrozenBackbone,
    pub reference: Projector,
    pub prompts: PromptBank,
    pub embeds: ClassEmbeddings,
}

impl SyntheticSetup {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let classes = synthetic::class_names(config.data.classes);
        let manifest = synthetic::manifest(&classes, config.data.samples_per_class);
        let split = build_split(&manifest, &config.split_options())?;
        let world = SyntheticWorld::new(config.seeded_encoder(), &classes)?;
        let backbone = world.backbone()?;
        let reference = world.reference_projector(&backbone)?;
        let prompts = PromptBank::from_template(&split.label_space, &PROMPT_TEMPLATES)?;
        let embeds = build_class_embeddings(&world, &prompts, &split.label_space)?;
        Ok(Self { manifest, split, world, backbone, reference, prompts, embeds })
    }

    /// Adapters at initialization on top of the reference projector.
    pub fn initial_params(&self, config: &ExperimentConfig) -> Result<AdapterParams> {
        AdapterParams::init(
            self.backbone.num_blocks(),
            self.backbone.d_model(),
            AdapterInit { rank: config.adapter.rank, scale: config.adapter.scale },
            self.reference.clone(),
            config.seeds().sub("init"),
        )
    }

    pub fn teacher(&self) -> AlignedTeacher<'_, SyntheticWorld> {
        AlignedTeacher { source: &self.world }
    }

    pub fn evaluate(&self, params: &AdapterParams, logit_scale: f64) -> Result<EvalReport> {
        let student = StudentEncoder { source: &self.world, backbone: &self.backbone, params };
        evaluate(&student, &self.split.test, &self.split.label_space, &self.embeds, logit_scale)
    }

    pub fn train(
        &self,
        config: &ExperimentConfig,
        log_sink: Option<&mut dyn std::io::Write>,
    ) -> Result<TrainOutcome> {
        let teacher = self.teacher();
        let frozen = FrozenParts {
            source: &self.world,
            backbone: &self.backbone,
            embeds: &self.embeds,
            teacher: (config.train.teacher_mode == TeacherMode::ExternalTeacher).then_some(&teacher as _),
        };
        run_training(&self.split, &frozen, self.initial_params(config)?, &config.seeded_train(), None, log_sink)
    }
}

/// Result of one synthetic run.
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

/// Builds the benchmark, trains and evaluates.
pub fn run_synthetic(config: &ExperimentConfig) -> Result<RunResult> {
    let setup = SyntheticSetup::new(config)?;
    let outcome = setup.train(config, None)?;
    let report = setup.evaluate(&outcome.params, config.train.logit_scale)?;
    Ok(RunResult { outcome, report })
}

/// Preset-run name to config, applying the run's overrides to `base`.
pub fn expand_preset(base: &ExperimentConfig, preset: &Preset) -> Result<BTreeMap<String, ExperimentConfig>> {
    if preset.runs.is_empty() {
        return Err(SecosError::param(format!("preset `{}` has no runs", preset.name)));
    }
    let mut out = BTreeMap::new();
    for run in &preset.runs {
        let mut cfg = base.clone();
        for o in &run.overrides {
            cfg.apply_override(o)?;
        }
        if out.insert(run.name.clone(), cfg).is_some() {
            return Err(SecosError::param(format!("duplicate run `{}` in preset `{}`", run.name, preset.name)));
        }
    }
    Ok(out)
}
