//! Building blocks shared by the model stages.

mod attention;
mod lstm;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Init, Linear, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub use attention::{AttentionHook, MultiHeadAttention};
pub use lstm::StackedLstm;

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(xs: &Tensor) -> Result<Tensor> {
    let max = xs.max_keepdim(D::Minus1)?.detach();
    let e = xs.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn sigmoid(xs: &Tensor) -> Result<Tensor> {
    Ok((xs.neg()?.exp()? + 1.0)?.recip()?)
}

/// Layer normalization over the last dimension with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            gamma: vb.get_with_hints(dim, "gamma", Init::Const(1.0))?,
            beta: vb.get_with_hints(dim, "beta", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mean = xs.mean_keepdim(D::Minus1)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

/// `Relu(LayerNorm(Linear(x)))`.
#[derive(Clone, Debug)]
pub struct LinearNormRelu {
    linear: Linear,
    norm: LayerNorm,
}

impl LinearNormRelu {
    pub fn new(in_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            linear: candle_nn::linear(in_dim, out_dim, vb.pp("linear"))?,
            norm: LayerNorm::new(out_dim, vb.pp("norm"))?,
        })
    }
}

impl Module for LinearNormRelu {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        self.norm.forward(&self.linear.forward(xs)?)?.relu()
    }
}

/// Re-initializes every variable from a seeded generator, in name order, so
/// a model is a pure function of its seed.
///
/// Names ending in `gamma` become ones, `beta` and biases zeros, 4-d conv
/// kernels He-uniform and other weights uniform in `±1/sqrt(fan_in)`.
pub fn init_parameters(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().expect("variable map lock poisoned");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in names {
        let var = &data[name];
        let dims = var.dims().to_vec();
        let count: usize = dims.iter().product();
        let leaf = name.rsplit('.').next().unwrap_or(name);
        let values: Vec<f64> = if leaf == "gamma" {
            vec![1.0; count]
        } else if leaf == "beta" || leaf.starts_with("bias") {
            vec![0.0; count]
        } else {
            let fan_in: usize = dims.iter().skip(1).product::<usize>().max(1);
            let bound = if dims.len() == 4 {
                (6.0 / fan_in as f64).sqrt()
            } else {
                1.0 / (fan_in as f64).sqrt()
            };
            (0..count).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let t = Tensor::from_vec(values, dims, var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

/// Constant tensor in the requested dtype.
pub(crate) fn constant(values: Vec<f64>, shape: &[usize], dtype: DType, dev: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, dev)?.to_dtype(dtype)?)
}

/// `(in_h*in_w, out_h*out_w)` matrix whose product with a flattened map
/// performs adaptive average pooling (bins `[floor(i*In/Out), ceil((i+1)*In/Out))`).
pub fn adaptive_pool_matrix(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let bins = |inp: usize, out: usize, i: usize| {
        let lo = i * inp / out;
        let hi = ((i + 1) * inp).div_ceil(out);
        lo..hi
    };
    let cols = out_h * out_w;
    let mut m = vec![0.0; in_h * in_w * cols];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let ys = bins(in_h, out_h, oy);
            let xs = bins(in_w, out_w, ox);
            let w = 1.0 / (ys.len() * xs.len()) as f64;
            for y in ys {
                for x in xs.clone() {
                    m[(y * in_w + x) * cols + oy * out_w + ox] = w;
                }
            }
        }
    }
    m
}
