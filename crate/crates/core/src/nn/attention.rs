use candle_core::{Module, Tensor};
use candle_nn::{Linear, VarBuilder};

use super::softmax_last;
use crate::error::{Error, Result};

/// Test hook replacing an attention branch's output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionHook {
    #[default]
    Active,
    /// The branch returns its query tokens unchanged.
    Identity,
    /// The branch returns zeros shaped like its query tokens.
    Zero,
}

/// Multi-head scaled dot-product attention with input and output projections.
///
/// Inputs are `(batch, tokens, dim)`; self-attention passes the same tensor
/// as query and key/value.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: candle_nn::linear(dim, dim, vb.pp("q"))?,
            k: candle_nn::linear(dim, dim, vb.pp("k"))?,
            v: candle_nn::linear(dim, dim, vb.pp("v"))?,
            out: candle_nn::linear(dim, dim, vb.pp("out"))?,
            heads,
            dim,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, self.dim / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    fn check(&self, x: &Tensor, what: &str) -> Result<()> {
        let (_, _, d) = x.dims3()?;
        if d != self.dim {
            return Err(Error::Shape(format!(
                "{what} width {d}, attention expects {}",
                self.dim
            )));
        }
        Ok(())
    }

    /// Attention weights `(batch, heads, Lq, Lk)` and projected per-head values.
    fn attend(&self, query: &Tensor, kv: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(query, "query")?;
        self.check(kv, "key/value")?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(kv)?)?;
        let v = self.split_heads(&self.v.forward(kv)?)?;
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        Ok((softmax_last(&scores)?, v))
    }

    pub fn attention_weights(&self, query: &Tensor, kv: &Tensor) -> Result<Tensor> {
        Ok(self.attend(query, kv)?.0)
    }

    pub fn forward(&self, query: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let (weights, v) = self.attend(query, kv)?;
        let (b, l, _) = query.dims3()?;
        let mixed = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, l, self.dim))?;
        Ok(self.out.forward(&mixed)?)
    }

    pub fn forward_hooked(&self, query: &Tensor, kv: &Tensor, hook: AttentionHook) -> Result<Tensor> {
        match hook {
            AttentionHook::Active => self.forward(query, kv),
            AttentionHook::Identity => Ok(query.clone()),
            AttentionHook::Zero => Ok(query.zeros_like()?),
        }
    }
}
