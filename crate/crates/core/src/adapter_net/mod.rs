//! Frozen backbone with parallel bottleneck adapters and a projector.
//!
//! Each residual block computes
//!
//! ```text
//! h      = f + Attention(f)
//! f_next = h + Mlp(h) + Adapter(h)
//! ```
//!
//! where only the adapter (and the final projector) are trainable. Visual
//! features are `normalize(Projector(pool(f_S)))` and are scored against the
//! class text embeddings with scaled cosine logits.

pub mod backbone;
pub mod checkpoint;
pub mod ops;
pub mod params;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use backbone::{BackboneConfig, FrozenBackbone, FrozenBlock};
pub use params::{AdapterBlock, AdapterInit, AdapterParams, Projector};

use crate::encoders::ClassEmbeddings;
use crate::error::{Result, SecosError};
use crate::par;
use backbone::{AttentionCache, MlpCache};
use ops::{gelu, gelu_grad, l2_norm, layer_norm, layer_norm_backward, log_sum_exp, softmax, LayerNormCache};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Logit scale applied to cosine similarities.
    pub logit_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { logit_scale: 100.0 }
    }
}

#[derive(Debug, Clone)]
struct AdapterCache {
    ln: LayerNormCache,
    normed: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    up: Array2<f64>,
}

fn adapter_tokens(h: ArrayView2<'_, f64>, p: &AdapterBlock) -> (Array2<f64>, AdapterCache) {
    let (normed, ln) = layer_norm(h, p.ln_gain.view(), p.ln_bias.view());
    let pre = normed.dot(&p.down_weight.t()) + &p.down_bias;
    let act = pre.mapv(gelu);
    let up = act.dot(&p.up_weight.t()) + &p.up_bias;
    let out = &up * p.scale[0];
    (out, AdapterCache { ln, normed, pre, act, up })
}

fn adapter_backward(dout: ArrayView2<'_, f64>, p: &AdapterBlock, c: &AdapterCache, g: &mut AdapterBlock) -> Array2<f64> {
    let gamma = p.scale[0];
    g.scale[0] += (&dout * &c.up).sum();
    let du = &dout * gamma;
    g.up_weight += &du.t().dot(&c.act);
    g.up_bias += &du.sum_axis(Axis(0));
    let dact = du.dot(&p.up_weight);
    let dpre = dact * c.pre.mapv(gelu_grad);
    g.down_weight += &dpre.t().dot(&c.normed);
    g.down_bias += &dpre.sum_axis(Axis(0));
    let dnormed = dpre.dot(&p.down_weight);
    layer_norm_backward(dnormed.view(), p.ln_gain.view(), &c.ln, Some(&mut g.ln_gain), Some(&mut g.ln_bias))
}

fn check_finite(z: ArrayView1<'_, f64>) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SecosError::Numeric("non-finite adapter input".into()))
    }
}

/// Adapter applied to a single `d_model` vector.
pub fn adapter_forward(z: ArrayView1<'_, f64>, block: &AdapterBlock) -> Result<Array1<f64>> {
    check_finite(z)?;
    if z.len() != block.ln_gain.len() {
        return Err(SecosError::structure(format!(
            "adapter width {} does not match input {}",
            block.ln_gain.len(),
            z.len()
        )));
    }
    let row = z.insert_axis(Axis(0));
    Ok(adapter_tokens(row, block).0.index_axis_move(Axis(0), 0))
}

/// One adapter residual block over a token matrix.
pub fn block_forward(f: ArrayView2<'_, f64>, frozen: &FrozenBlock, adapter: &AdapterBlock) -> Result<Array2<f64>> {
    let width = frozen.attention.wq.ncols();
    if f.ncols() != width || adapter.ln_gain.len() != width {
        return Err(SecosError::structure(format!(
            "token width {} / adapter width {} / block width {width}",
            f.ncols(),
            adapter.ln_gain.len()
        )));
    }
    Ok(block_step(f, frozen, adapter).0)
}

struct BlockCache {
    attention: AttentionCache,
    mlp: MlpCache,
    adapter: AdapterCache,
}

fn block_step(f: ArrayView2<'_, f64>, frozen: &FrozenBlock, adapter: &AdapterBlock) -> (Array2<f64>, BlockCache) {
    let (attn, attention) = frozen.attention.forward(f);
    let h = &f + &attn;
    let (mlp_out, mlp) = frozen.mlp.forward(h.view());
    let (ad_out, adapter_cache) = adapter_tokens(h.view(), adapter);
    let next = h + mlp_out + ad_out;
    (next, BlockCache { attention, mlp, adapter: adapter_cache })
}

/// Intermediate states of one visual forward pass.
pub struct VisualTrace {
    /// Token states `f_0 ..= f_S`.
    pub states: Vec<Array2<f64>>,
    caches: Vec<BlockCache>,
    pub pooled: Array1<f64>,
    /// Projector output before normalization.
    pub projected: Array1<f64>,
    /// Unit-norm visual feature.
    pub feature: Array1<f64>,
}

fn check_params(backbone: &FrozenBackbone, params: &AdapterParams) -> Result<()> {
    if params.num_blocks() != backbone.num_blocks() || params.d_model() != backbone.d_model() {
        return Err(SecosError::structure(format!(
            "adapter set ({} blocks, width {}) does not fit backbone ({} blocks, width {})",
            params.num_blocks(),
            params.d_model(),
            backbone.num_blocks(),
            backbone.d_model()
        )));
    }
    Ok(())
}

fn normalize(z: Array1<f64>) -> Result<Array1<f64>> {
    let n = l2_norm(z.view());
    if !(n > 0.0) || !n.is_finite() {
        return Err(SecosError::Numeric(format!("cannot normalize vector with norm {n}")));
    }
    Ok(z / n)
}

pub fn visual_trace(backbone: &FrozenBackbone, params: &AdapterParams, x: ArrayView1<'_, f64>) -> Result<VisualTrace> {
    check_params(backbone, params)?;
    let mut states = Vec::with_capacity(backbone.num_blocks() + 1);
    let mut caches = Vec::with_capacity(backbone.num_blocks());
    states.push(backbone.embed(x)?);
    for (frozen, adapter) in backbone.blocks.iter().zip(&params.blocks) {
        let (next, cache) = block_step(states.last().unwrap().view(), frozen, adapter);
        states.push(next);
        caches.push(cache);
    }
    let pooled = backbone.readout(states.last().unwrap().view());
    let projected = params.projector.weight.dot(&pooled) + &params.projector.bias;
    let feature = normalize(projected.clone())?;
    Ok(VisualTrace { states, caches, pooled, projected, feature })
}

/// Unit-norm visual feature `V_x`.
pub fn visual_forward(backbone: &FrozenBackbone, params: &AdapterParams, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    Ok(visual_trace(backbone, params, x)?.feature)
}

/// The frozen model's feature: backbone without adapters, then `projector`.
pub fn reference_forward(backbone: &FrozenBackbone, projector: &Projector, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let pooled = backbone.features(x)?;
    normalize(projector.weight.dot(&pooled) + &projector.bias)
}

/// Scaled cosine logits `eps * <v, E_c>` for every class.
pub fn logits(feature: ArrayView1<'_, f64>, embeds: &ClassEmbeddings, logit_scale: f64) -> Array1<f64> {
    embeds.matrix().dot(&feature) * logit_scale
}

/// Cross-entropy of the scaled cosine logits against class `label`.
///
/// The loss as literally printed in the method description is
/// `-sum_i 1[i = y] log(exp(eps) * <V_x, E_i>)`, which has no softmax
/// normalization and is unbounded below. The standard CLIP reading,
/// `-log softmax_y(eps * <V_x, E_i>)`, is what gets optimized here.
pub fn classification_loss(feature: ArrayView1<'_, f64>, embeds: &ClassEmbeddings, label: usize, logit_scale: f64) -> Result<f64> {
    if label >= embeds.num_classes() {
        return Err(SecosError::param(format!("label {label} outside [0, {})", embeds.num_classes())));
    }
    let z = logits(feature, embeds, logit_scale);
    Ok(log_sum_exp(z.view()) - z[label])
}

/// A labeled sample with one or more augmented inputs. Its loss is the sum
/// over views.
#[derive(Debug, Clone)]
pub struct ViewedExample {
    pub sample_id: String,
    pub views: Vec<Array1<f64>>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    /// Mean over examples of the per-example (view-summed) loss.
    pub loss: f64,
    pub grads: AdapterParams,
    pub count: usize,
}

fn example_backward(
    backbone: &FrozenBackbone,
    params: &AdapterParams,
    embeds: &ClassEmbeddings,
    x: ArrayView1<'_, f64>,
    label: usize,
    logit_scale: f64,
    g: &mut AdapterParams,
) -> Result<f64> {
    let trace = visual_trace(backbone, params, x)?;
    let z = logits(trace.feature.view(), embeds, logit_scale);
    let loss = log_sum_exp(z.view()) - z[label];

    let mut dz = softmax(z.view());
    dz[label] -= 1.0;
    let dv = embeds.matrix().t().dot(&dz) * logit_scale;
    let v = &trace.feature;
    let norm = l2_norm(trace.projected.view());
    let dproj = (&dv - &(v * v.dot(&dv))) / norm;

    let pr = &mut g.projector;
    pr.weight += &dproj.view().insert_axis(Axis(1)).dot(&trace.pooled.view().insert_axis(Axis(0)));
    pr.bias += &dproj;
    let dpooled = params.projector.weight.t().dot(&dproj);

    let tokens = backbone.config().tokens;
    let mut df = Array2::from_shape_fn((tokens, backbone.d_model()), |(_, j)| dpooled[j] / tokens as f64);
    for t in (0..backbone.num_blocks()).rev() {
        let frozen = &backbone.blocks[t];
        let cache = &trace.caches[t];
        let mut dh = df.clone();
        dh += &frozen.mlp.backward(df.view(), &cache.mlp);
        dh += &adapter_backward(df.view(), &params.blocks[t], &cache.adapter, &mut g.blocks[t]);
        df = &dh + &frozen.attention.backward(dh.view(), &cache.attention);
    }
    Ok(loss)
}

/// Mean view-summed loss over `examples` and its gradient with respect to
/// every adapter and projector tensor. The backbone and the text embeddings
/// receive no gradient.
///
/// Per-example gradients are reduced in a fixed chunked order, so the result
/// is bit-identical with and without the `parallel` feature.
pub fn loss_gradients(
    backbone: &FrozenBackbone,
    params: &AdapterParams,
    embeds: &ClassEmbeddings,
    examples: &[ViewedExample],
    logit_scale: f64,
) -> Result<LossGrad> {
    check_params(backbone, params)?;
    if params.d_text() != embeds.dim() {
        return Err(SecosError::structure(format!(
            "projector emits {} dims, class embeddings have {}",
            params.d_text(),
            embeds.dim()
        )));
    }
    if let Some(bad) = examples.iter().find(|e| e.label >= embeds.num_classes()) {
        return Err(SecosError::param(format!("label {} of `{}` out of range", bad.label, bad.sample_id)));
    }
    let zero = params.zeros_like();
    let reduced = par::chunked_reduce(
        examples,
        || Ok((0.0, zero.clone())),
        |acc: Result<(f64, AdapterParams)>, ex| {
            let (mut total, mut g) = acc?;
            for x in &ex.views {
                let l = example_backward(backbone, params, embeds, x.view(), ex.label, logit_scale, &mut g)?;
                if !l.is_finite() {
                    return Err(SecosError::Numeric(format!("non-finite loss for sample `{}`", ex.sample_id)));
                }
                total += l;
            }
            Ok((total, g))
        },
        |a, b| {
            let (la, mut ga) = a?;
            let (lb, gb) = b?;
            ga.add_scaled(1.0, &gb);
            Ok((la + lb, ga))
        },
    );
    match reduced {
        None => Ok(LossGrad { loss: 0.0, grads: zero, count: 0 }),
        Some(r) => {
            let (total, mut grads) = r?;
            let n = examples.len() as f64;
            grads.scale_all(1.0 / n);
            Ok(LossGrad { loss: total / n, grads, count: examples.len() })
        }
    }
}

/// Mean view-summed loss without gradients.
pub fn mean_loss(
    backbone: &FrozenBackbone,
    params: &AdapterParams,
    embeds: &ClassEmbeddings,
    examples: &[ViewedExample],
    logit_scale: f64,
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let per = par::try_map(examples, |ex| {
        ex.views.iter().try_fold(0.0, |acc, x| {
            let v = visual_forward(backbone, params, x.view())?;
            Ok::<_, SecosError>(acc + classification_loss(v.view(), embeds, ex.label, logit_scale)?)
        })
    })?;
    Ok(per.iter().sum::<f64>() / examples.len() as f64)
}
