//! Frozen transformer-style visual backbone.
//!
//! Input vectors are embedded into a short token sequence, passed through
//! pre-norm residual blocks (single-head self-attention, then a GeLU MLP) and
//! mean-pooled. Every tensor here is frozen: the backward passes only
//! propagate gradients to the block inputs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_rows, LayerNormCache};
use crate::error::{Result, SecosError};
use crate::seed::{derive, fnv1a, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub d_model: usize,
    pub tokens: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    /// Multiplier on the attention and MLP output projections.
    pub residual_gain: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { input_dim: 64, d_model: 32, tokens: 4, blocks: 2, mlp_hidden: 64, residual_gain: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub ln_gain: Array1<f64>,
    pub ln_bias: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    ln: LayerNormCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Array2<f64>,
}

impl Attention {
    pub fn forward(&self, f: ArrayView2<'_, f64>) -> (Array2<f64>, AttentionCache) {
        let (a, ln) = layer_norm(f, self.ln_gain.view(), self.ln_bias.view());
        let q = a.dot(&self.wq.t());
        let k = a.dot(&self.wk.t());
        let v = a.dot(&self.wv.t());
        let mut probs = q.dot(&k.t()) / (f.ncols() as f64).sqrt();
        softmax_rows(&mut probs);
        let out = probs.dot(&v).dot(&self.wo.t()) + &self.bo;
        (out, AttentionCache { ln, q, k, v, probs })
    }

    pub fn backward(&self, dout: ArrayView2<'_, f64>, cache: &AttentionCache) -> Array2<f64> {
        let d_o = dout.dot(&self.wo);
        let dp = d_o.dot(&cache.v.t());
        let dv = cache.probs.t().dot(&d_o);
        let mut ds = &cache.probs * &dp;
        let row_dot = ds.sum_axis(Axis(1));
        ds -= &(&cache.probs * &row_dot.insert_axis(Axis(1)));
        ds /= (dout.ncols() as f64).sqrt();
        let dq = ds.dot(&cache.k);
        let dk = ds.t().dot(&cache.q);
        let da = dq.dot(&self.wq) + dk.dot(&self.wk) + dv.dot(&self.wv);
        layer_norm_backward(da.view(), self.ln_gain.view(), &cache.ln, None, None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub ln_gain: Array1<f64>,
    pub ln_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    ln: LayerNormCache,
    pre: Array2<f64>,
}

impl Mlp {
    pub fn forward(&self, h: ArrayView2<'_, f64>) -> (Array2<f64>, MlpCache) {
        let (a, ln) = layer_norm(h, self.ln_gain.view(), self.ln_bias.view());
        let pre = a.dot(&self.w1.t()) + &self.b1;
        let out = pre.mapv(gelu).dot(&self.w2.t()) + &self.b2;
        (out, MlpCache { ln, pre })
    }

    pub fn backward(&self, dout: ArrayView2<'_, f64>, cache: &MlpCache) -> Array2<f64> {
        let dg = dout.dot(&self.w2);
        let du = dg * cache.pre.mapv(gelu_grad);
        let da = du.dot(&self.w1);
        layer_norm_backward(da.view(), self.ln_gain.view(), &cache.ln, None, None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBlock {
    pub attention: Attention,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    /// `(tokens * d_model) x input_dim`
    pub embed: Array2<f64>,
    /// `tokens x d_model`
    pub position: Array2<f64>,
    pub blocks: Vec<FrozenBlock>,
}

fn gaussian(rng: &mut impl Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

impl FrozenBackbone {
    /// Seeded random backbone. Weights are fixed for the lifetime of the
    /// value; nothing in this crate mutates them.
    pub fn random(config: BackboneConfig, seed: u64) -> Result<Self> {
        let BackboneConfig { input_dim, d_model: d, tokens, blocks, mlp_hidden: hd, residual_gain } = config;
        if input_dim == 0 || d < 2 || tokens == 0 || hd == 0 {
            return Err(SecosError::param(format!("invalid backbone shape {config:?}")));
        }
        let mut rng = rng_from(derive(seed, &[fnv1a(b"backbone")]));
        let embed = gaussian(&mut rng, (tokens * d, input_dim), 1.0 / (input_dim as f64).sqrt());
        let position = gaussian(&mut rng, (tokens, d), 0.1);
        let s = 1.0 / (d as f64).sqrt();
        let blocks = (0..blocks)
            .map(|_| FrozenBlock {
                attention: Attention {
                    ln_gain: Array1::ones(d),
                    ln_bias: Array1::zeros(d),
                    wq: gaussian(&mut rng, (d, d), s),
                    wk: gaussian(&mut rng, (d, d), s),
                    wv: gaussian(&mut rng, (d, d), s),
                    wo: gaussian(&mut rng, (d, d), residual_gain * s),
                    bo: Array1::zeros(d),
                },
                mlp: Mlp {
                    ln_gain: Array1::ones(d),
                    ln_bias: Array1::zeros(d),
                    w1: gaussian(&mut rng, (hd, d), s),
                    b1: Array1::zeros(hd),
                    w2: gaussian(&mut rng, (d, hd), residual_gain / (hd as f64).sqrt()),
                    b2: Array1::zeros(d),
                },
            })
            .collect();
        Ok(Self { config, embed, position, blocks })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Input embedding stage: `x -> tokens x d_model`.
    pub fn embed(&self, x: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
        if x.len() != self.config.input_dim {
            return Err(SecosError::structure(format!(
                "input has dimension {}, backbone expects {}",
                x.len(),
                self.config.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SecosError::Numeric("non-finite input to backbone".into()));
        }
        let flat = self.embed.dot(&x);
        let tokens = flat
            .into_shape_with_order((self.config.tokens, self.config.d_model))
            .map_err(|e| SecosError::structure(e.to_string()))?;
        Ok(tokens + &self.position)
    }

    /// Mean over tokens.
    pub fn readout(&self, f: ArrayView2<'_, f64>) -> Array1<f64> {
        f.mean_axis(Axis(0)).expect("at least one token")
    }

    /// Backbone features without any adapter.
    pub fn features(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let mut f = self.embed(x)?;
        for b in &self.blocks {
            let h = &f + &b.attention.forward(f.view()).0;
            f = &h + &b.mlp.forward(h.view()).0;
        }
        Ok(self.readout(f.view()))
    }

    /// FNV-1a over every frozen tensor.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        let mut put = |a: &[f64]| a.iter().for_each(|v| bytes.extend(v.to_le_bytes()));
        put(self.embed.as_slice().unwrap());
        put(self.position.as_slice().unwrap());
        for b in &self.blocks {
            let at = &b.attention;
            for m in [&at.wq, &at.wk, &at.wv, &at.wo, &b.mlp.w1, &b.mlp.w2] {
                put(m.as_slice().unwrap());
            }
            for v in [&at.ln_gain, &at.ln_bias, &at.bo, &b.mlp.ln_gain, &b.mlp.ln_bias, &b.mlp.b1, &b.mlp.b2] {
                put(v.as_slice().unwrap());
            }
        }
        fnv1a(&bytes)
    }
}
