//! Desk-scale stand-in for a pre-trained vision-language model.
//!
//! Every class owns a unit-norm prototype in a `dim`-dimensional semantic
//! space. A synthetic "image" is its class prototype plus a fixed
//! per-instance offset; augmented views add isotropic Gaussian noise at a
//! weak or a strong scale. Text prompts that mention a class name embed near
//! that class's prototype, so the raw inputs are already aligned with the
//! text space and serve as the teacher's features.
//!
//! The student sees the same inputs through a seeded random
//! [`FrozenBackbone`]; its reference projector is fitted by ridge regression
//! from backbone features back to the semantic space on class-agnostic
//! inputs, which plays the role of contrastive pre-training.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{InputSource, TextEncoder, View};
use crate::adapter_net::{BackboneConfig, FrozenBackbone, Projector};
use crate::datamodel::{Manifest, ManifestClass, ManifestSample, SampleRecord};
use crate::error::{Result, SecosError};
use crate::seed::{derive, fnv1a, rng_from};

pub const PAYLOAD_SCHEME: &str = "syn";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticEncoderConfig {
    /// Semantic (input and text) dimension.
    pub dim: usize,
    /// Set by the experiment from its root seed.
    #[serde(skip)]
    pub prototype_seed: u64,
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    /// Per-dimension scale of the fixed per-instance offset.
    pub instance_sigma: f64,
    /// Per-dimension scale of the prompt-specific text offset.
    pub text_sigma: f64,
    /// Prototypes are resampled until every pairwise cosine is below this.
    pub max_prototype_cos: f64,
    pub backbone_depth: usize,
    pub backbone_width: usize,
    pub backbone_tokens: usize,
    pub backbone_mlp_hidden: usize,
    pub backbone_residual_gain: f64,
    #[serde(skip)]
    pub backbone_seed: u64,
    /// Class-agnostic samples used to fit the reference projector.
    pub reference_fit_samples: usize,
}

impl Default for SyntheticEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            prototype_seed: 0,
            weak_sigma: 0.05,
            strong_sigma: 0.20,
            instance_sigma: 0.2,
            text_sigma: 0.15,
            max_prototype_cos: 0.5,
            backbone_depth: 2,
            backbone_width: 64,
            backbone_tokens: 4,
            backbone_mlp_hidden: 128,
            backbone_residual_gain: 0.3,
            backbone_seed: 0,
            reference_fit_samples: 2048,
        }
    }
}

impl SyntheticEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(SecosError::param(format!("synthetic dim must be >= 2, got {}", self.dim)));
        }
        if !(0.0 <= self.weak_sigma && self.weak_sigma < self.strong_sigma) {
            return Err(SecosError::param(format!(
                "need 0 <= weak_sigma < strong_sigma, got {} and {}",
                self.weak_sigma, self.strong_sigma
            )));
        }
        if self.instance_sigma < 0.0 || self.text_sigma < 0.0 {
            return Err(SecosError::param("noise scales must be non-negative"));
        }
        if !(self.max_prototype_cos > -1.0 && self.max_prototype_cos <= 1.0) {
            return Err(SecosError::param("max_prototype_cos must be in (-1, 1]"));
        }
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            input_dim: self.dim,
            d_model: self.backbone_width,
            tokens: self.backbone_tokens,
            blocks: self.backbone_depth,
            mlp_hidden: self.backbone_mlp_hidden,
            residual_gain: self.backbone_residual_gain,
        }
    }
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize, sigma: f64) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| sigma * rng.sample::<f64, _>(StandardNormal))
}

fn unit_vec(rng: &mut impl Rng, dim: usize) -> Array1<f64> {
    loop {
        let v = gaussian_vec(rng, dim, 1.0);
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Parses `syn:<class>:<instance>`.
pub fn parse_payload(payload: &str) -> Option<(&str, u64)> {
    let rest = payload.strip_prefix(PAYLOAD_SCHEME)?.strip_prefix(':')?;
    let (class, instance) = rest.rsplit_once(':')?;
    Some((class, instance.parse().ok()?))
}

pub fn payload(class: &str, instance: u64) -> String {
    format!("{PAYLOAD_SCHEME}:{class}:{instance}")
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    config: SyntheticEncoderConfig,
    prototypes: BTreeMap<String, Array1<f64>>,
    /// Class names, longest first, for prompt matching.
    match_order: Vec<String>,
}

impl SyntheticWorld {
    pub fn new(config: SyntheticEncoderConfig, classes: &[String]) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(derive(config.prototype_seed, &[fnv1a(b"prototypes")]));
        let mut accepted: Vec<Array1<f64>> = Vec::with_capacity(classes.len());
        for name in classes {
            let mut tries = 0;
            let v = loop {
                let v = unit_vec(&mut rng, config.dim);
                if accepted.iter().all(|p| p.dot(&v) < config.max_prototype_cos) {
                    break v;
                }
                tries += 1;
                if tries > 100_000 {
                    return Err(SecosError::param(format!(
                        "cannot place prototype for `{name}` with pairwise cosine < {} in {} dims",
                        config.max_prototype_cos, config.dim
                    )));
                }
            };
            accepted.push(v);
        }
        let prototypes: BTreeMap<_, _> = classes.iter().cloned().zip(accepted).collect();
        if prototypes.len() != classes.len() {
            return Err(SecosError::Validation("duplicate class names".into()));
        }
        let mut match_order = classes.to_vec();
        match_order.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        Ok(Self { config, prototypes, match_order })
    }

    pub fn config(&self) -> &SyntheticEncoderConfig {
        &self.config
    }

    pub fn prototype(&self, class: &str) -> Option<&Array1<f64>> {
        self.prototypes.get(class)
    }

    /// The image before augmentation: prototype plus instance offset.
    pub fn clean_input(&self, payload_ref: &str) -> Result<Array1<f64>> {
        let (class, instance) = parse_payload(payload_ref)
            .ok_or_else(|| SecosError::Input(format!("unrecognized payload locator `{payload_ref}`")))?;
        let proto = self
            .prototypes
            .get(class)
            .ok_or_else(|| SecosError::Input(format!("payload `{payload_ref}` names unknown class `{class}`")))?;
        if self.config.instance_sigma == 0.0 {
            return Ok(proto.clone());
        }
        let mut rng = rng_from(derive(self.config.prototype_seed, &[fnv1a(class.as_bytes()), instance]));
        Ok(proto + &gaussian_vec(&mut rng, self.config.dim, self.config.instance_sigma))
    }

    /// The frozen student backbone shared by every run on this world.
    pub fn backbone(&self) -> Result<FrozenBackbone> {
        FrozenBackbone::random(self.config.backbone_config(), self.config.backbone_seed)
    }

    /// Ridge fit of `projector(backbone(x)) ~ x` over class-agnostic inputs.
    pub fn reference_projector(&self, backbone: &FrozenBackbone) -> Result<Projector> {
        let n = self.config.reference_fit_samples.max(backbone.d_model() + 2);
        let d = backbone.d_model();
        let out = self.config.dim;
        let mut rng = rng_from(derive(self.config.backbone_seed, &[fnv1a(b"reference-fit")]));
        let mut design = DMatrix::<f64>::zeros(n, d + 1);
        let mut target = DMatrix::<f64>::zeros(n, out);
        for i in 0..n {
            let x = unit_vec(&mut rng, out) + gaussian_vec(&mut rng, out, self.config.instance_sigma);
            let h = backbone.features(x.view())?;
            for j in 0..d {
                design[(i, j)] = h[j];
            }
            design[(i, d)] = 1.0;
            for j in 0..out {
                target[(i, j)] = x[j];
            }
        }
        let mut gram = design.transpose() * &design;
        let ridge = 1e-6 * n as f64;
        for j in 0..d {
            gram[(j, j)] += ridge;
        }
        let rhs = design.transpose() * target;
        let solution = gram
            .cholesky()
            .ok_or_else(|| SecosError::Numeric("reference projector normal equations are singular".into()))?
            .solve(&rhs);
        let weight = Array2::from_shape_fn((out, d), |(i, j)| solution[(j, i)]);
        let bias = Array1::from_shape_fn(out, |i| solution[(d, i)]);
        Ok(Projector { weight, bias })
    }

    fn class_in_prompt(&self, prompt: &str) -> Option<&str> {
        let boundary = |c: Option<char>| c.is_none_or(|c| !c.is_alphanumeric() && c != '_');
        self.match_order.iter().map(String::as_str).find(|name| {
            prompt.match_indices(*name).any(|(i, _)| {
                boundary(prompt[..i].chars().next_back()) && boundary(prompt[i + name.len()..].chars().next())
            })
        })
    }
}

impl InputSource for SyntheticWorld {
    fn input_dim(&self) -> usize {
        self.config.dim
    }

    fn load(&self, record: &SampleRecord, view: View, seed: u64) -> Result<Array1<f64>> {
        let clean = self.clean_input(&record.payload)?;
        let sigma = match view {
            View::None => return Ok(clean),
            View::Weak => self.config.weak_sigma,
            View::Strong => self.config.strong_sigma,
        };
        let mut rng = rng_from(derive(seed, &[fnv1a(record.sample_id.as_bytes()), view.code()]));
        Ok(clean + gaussian_vec(&mut rng, self.config.dim, sigma))
    }
}

impl TextEncoder for SyntheticWorld {
    fn text_dim(&self) -> usize {
        self.config.dim
    }

    /// Prototype of the (longest) class named in the prompt plus a
    /// prompt-specific offset; prompts naming no class embed at random.
    fn encode_text(&self, prompt: &str) -> Result<Array1<f64>> {
        let mut rng = rng_from(derive(self.config.prototype_seed, &[fnv1a(b"text"), fnv1a(prompt.as_bytes())]));
        match self.class_in_prompt(prompt) {
            Some(class) => Ok(&self.prototypes[class] + &gaussian_vec(&mut rng, self.config.dim, self.config.text_sigma)),
            None => Ok(unit_vec(&mut rng, self.config.dim)),
        }
    }
}

/// Class names `class00, class01, ...`.
pub fn class_names(count: usize) -> Vec<String> {
    let width = count.saturating_sub(1).to_string().len().max(2);
    (0..count).map(|c| format!("class{c:0width$}")).collect()
}

/// Manifest with `per_class` synthetic samples per class, no predefined test
/// split.
pub fn manifest(classes: &[String], per_class: usize) -> Manifest {
    Manifest {
        classes: classes
            .iter()
            .map(|name| ManifestClass {
                name: name.clone(),
                samples: (0..per_class as u64)
                    .map(|i| ManifestSample { id: format!("{name}-{i:04}"), payload: payload(name, i), split: None })
                    .collect(),
            })
            .collect(),
    }
}

pub const PROMPT_TEMPLATES: [&str; 4] = [
    "a photo of a {}.",
    "a blurry photo of the {}.",
    "a close-up photo of a {}, a kind of object.",
    "an illustration of a {} in its natural setting.",
];
