//! Trainable adapter and projector tensors.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SecosError};
use crate::seed::{fnv1a, rng_from};

/// One bottleneck adapter: `scale * up(gelu(down(layer_norm(z))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBlock {
    pub ln_gain: Array1<f64>,
    pub ln_bias: Array1<f64>,
    /// `r x d_model`
    pub down_weight: Array2<f64>,
    pub down_bias: Array1<f64>,
    /// `d_model x r`
    pub up_weight: Array2<f64>,
    pub up_bias: Array1<f64>,
    /// The adapter scaling factor, stored as a length-1 tensor.
    pub scale: Array1<f64>,
}

/// Affine map from backbone width to text-embedding width.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    /// `d_text x d_model`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Projector {
    pub fn d_model(&self) -> usize {
        self.weight.ncols()
    }

    pub fn d_text(&self) -> usize {
        self.weight.nrows()
    }

    /// Seeded random orthogonal-ish map (rows orthonormalized by Gram-Schmidt
    /// when `d_text <= d_model`, columns otherwise) with zero bias.
    pub fn random_orthogonal(d_text: usize, d_model: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let mut w = Array2::from_shape_fn((d_text, d_model), |_| rng.sample::<f64, _>(StandardNormal));
        let transpose = d_text > d_model;
        if transpose {
            w = w.reversed_axes().as_standard_layout().to_owned();
        }
        for i in 0..w.nrows() {
            for j in 0..i {
                let proj = w.row(i).dot(&w.row(j));
                let prev = w.row(j).to_owned();
                w.row_mut(i).scaled_add(-proj, &prev);
            }
            let n = w.row(i).dot(&w.row(i)).sqrt();
            w.row_mut(i).mapv_inplace(|v| v / n);
        }
        if transpose {
            w = w.reversed_axes().as_standard_layout().to_owned();
        }
        Self { weight: w, bias: Array1::zeros(d_text) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterInit {
    /// Downsampling dimension `r`.
    pub rank: usize,
    /// Initial adapter scale.
    pub scale: f64,
}

impl Default for AdapterInit {
    fn default() -> Self {
        Self { rank: 10, scale: 1.0 }
    }
}

/// All trainable tensors: one adapter per backbone block plus the projector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub blocks: Vec<AdapterBlock>,
    pub projector: Projector,
}

/// Borrowed view of one named tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

impl AdapterParams {
    /// Small random down projections (scale `1/sqrt(d_model)`), zero up
    /// projections, identity layer-norm affine. The network therefore starts
    /// out computing exactly the frozen model.
    pub fn init(blocks: usize, d_model: usize, init: AdapterInit, projector: Projector, seed: u64) -> Result<Self> {
        if init.rank == 0 {
            return Err(SecosError::param("adapter rank must be >= 1"));
        }
        if projector.d_model() != d_model {
            return Err(SecosError::structure(format!(
                "projector expects width {}, backbone has {d_model}",
                projector.d_model()
            )));
        }
        let r = init.rank;
        let std = 1.0 / (d_model as f64).sqrt();
        let blocks = (0..blocks)
            .map(|t| {
                let mut rng = rng_from(seed ^ fnv1a(format!("adapter.{t}").as_bytes()));
                AdapterBlock {
                    ln_gain: Array1::ones(d_model),
                    ln_bias: Array1::zeros(d_model),
                    down_weight: Array2::from_shape_fn((r, d_model), |_| {
                        std * rng.sample::<f64, _>(StandardNormal)
                    }),
                    down_bias: Array1::zeros(r),
                    up_weight: Array2::zeros((d_model, r)),
                    up_bias: Array1::zeros(d_model),
                    scale: Array1::from_elem(1, init.scale),
                }
            })
            .collect();
        Ok(Self { blocks, projector })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn d_model(&self) -> usize {
        self.projector.d_model()
    }

    pub fn d_text(&self) -> usize {
        self.projector.d_text()
    }

    pub fn rank(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.down_weight.nrows())
    }

    /// A zero-valued tensor set with the same shapes, used for gradients and
    /// optimizer moments.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    /// Named tensors in their declared (checkpoint) order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::with_capacity(7 * self.blocks.len() + 2);
        fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
            a.as_slice().expect("parameters are kept in standard layout")
        }
        for (t, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("adapter.{t}.{n}");
            out.push(TensorRef { name: p("ln.gain"), shape: b.ln_gain.shape().to_vec(), data: slice(&b.ln_gain) });
            out.push(TensorRef { name: p("ln.bias"), shape: b.ln_bias.shape().to_vec(), data: slice(&b.ln_bias) });
            out.push(TensorRef { name: p("down.weight"), shape: b.down_weight.shape().to_vec(), data: slice(&b.down_weight) });
            out.push(TensorRef { name: p("down.bias"), shape: b.down_bias.shape().to_vec(), data: slice(&b.down_bias) });
            out.push(TensorRef { name: p("up.weight"), shape: b.up_weight.shape().to_vec(), data: slice(&b.up_weight) });
            out.push(TensorRef { name: p("up.bias"), shape: b.up_bias.shape().to_vec(), data: slice(&b.up_bias) });
            out.push(TensorRef { name: p("scale"), shape: b.scale.shape().to_vec(), data: slice(&b.scale) });
        }
        let pr = &self.projector;
        out.push(TensorRef { name: "projector.weight".into(), shape: pr.weight.shape().to_vec(), data: slice(&pr.weight) });
        out.push(TensorRef { name: "projector.bias".into(), shape: pr.bias.shape().to_vec(), data: slice(&pr.bias) });
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::with_capacity(7 * self.blocks.len() + 2);
        type Field<'a> = (Vec<usize>, &'a mut [f64]);
        fn slice<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> Field<'_> {
            let shape = a.shape().to_vec();
            (shape, a.as_slice_mut().expect("parameters are kept in standard layout"))
        }
        for (t, b) in self.blocks.iter_mut().enumerate() {
            let fields: [(&str, Field<'_>); 7] = [
                ("ln.gain", slice(&mut b.ln_gain)),
                ("ln.bias", slice(&mut b.ln_bias)),
                ("down.weight", slice(&mut b.down_weight)),
                ("down.bias", slice(&mut b.down_bias)),
                ("up.weight", slice(&mut b.up_weight)),
                ("up.bias", slice(&mut b.up_bias)),
                ("scale", slice(&mut b.scale)),
            ];
            for (n, (shape, data)) in fields {
                out.push(TensorMut { name: format!("adapter.{t}.{n}"), shape, data });
            }
        }
        let (shape, data) = slice(&mut self.projector.weight);
        out.push(TensorMut { name: "projector.weight".into(), shape, data });
        let (shape, data) = slice(&mut self.projector.bias);
        out.push(TensorMut { name: "projector.bias".into(), shape, data });
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.name == y.name && x.shape == y.shape)
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(b.data) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale_all(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.data.iter().zip(b.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// FNV-1a over the little-endian bytes of every tensor.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.num_scalars() * 8);
        for t in self.tensors() {
            bytes.extend(t.name.as_bytes());
            for v in t.data {
                bytes.extend(v.to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_orthogonal_has_orthonormal_rows() {
        let p = Projector::random_orthogonal(4, 6, 3);
        let g = p.weight.dot(&p.weight.t());
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - e).abs() < 1e-12);
            }
        }
        let q = Projector::random_orthogonal(6, 4, 3);
        let g = q.weight.t().dot(&q.weight);
        assert!((g[[2, 2]] - 1.0).abs() < 1e-12 && g[[0, 3]].abs() < 1e-12);
    }

    #[test]
    fn tensors_are_declared_in_fixed_order() {
        let p = AdapterParams::init(2, 8, AdapterInit { rank: 4, scale: 1.0 }, Projector::random_orthogonal(5, 8, 0), 1).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|t| t.name).collect();
        assert_eq!(names.len(), 16);
        assert_eq!(names[0], "adapter.0.ln.gain");
        assert_eq!(names[13], "adapter.1.scale");
        assert_eq!(names[15], "projector.bias");
        assert_eq!(p.num_scalars(), 2 * (8 + 8 + 32 + 4 + 32 + 8 + 1) + 40 + 5);
        assert!(p.blocks.iter().all(|b| b.up_weight.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_rank_is_rejected() {
        let pr = Projector::random_orthogonal(3, 4, 0);
        assert!(AdapterParams::init(1, 4, AdapterInit { rank: 0, scale: 1.0 }, pr, 0).is_err());
    }
}
