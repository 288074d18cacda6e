//! Traffic rule guidance: a scene-level lane embedding, per-object
//! object-lane cross-attention, and an adaptive gate that suppresses the
//! interaction feature of objects the lanes say little about.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Linear, VarBuilder};

use crate::config::ModelConfig;
use crate::dataset::LaneInput;
use crate::error::{Error, Result};
use crate::nn::{constant, sigmoid, AttentionHook, LinearNormRelu, MultiHeadAttention};

/// How gate scores become penalty coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateMode {
    /// `1` below 0.5, `alpha` otherwise. Used for evaluation.
    Hard,
    /// `1 + (alpha - 1) * sigmoid(k (p - 0.5))`, a differentiable stand-in
    /// used for training.
    Soft { k: f64 },
}

/// Penalty coefficients `p_c` for gate scores `p` of shape `(N,)`.
pub fn penalty_coefficient(p: &Tensor, alpha: f64, mode: GateMode) -> Result<Tensor> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    match mode {
        GateMode::Hard => {
            let ones = p.ones_like()?;
            let penalized = (ones.clone() * alpha)?;
            Ok(p.detach().ge(0.5)?.where_cond(&penalized, &ones)?)
        }
        GateMode::Soft { k } => {
            let s = sigmoid(&((p - 0.5)? * k)?)?;
            Ok(((s * (alpha - 1.0))? + 1.0)?)
        }
    }
}

/// Row-wise scaling `f_ol[i] = p_c[i] * f_ol_m[i]`.
pub fn apply_gate(f_ol_m: &Tensor, p_c: &Tensor) -> Result<Tensor> {
    let (n, _) = f_ol_m.dims2()?;
    if p_c.dims() != [n] {
        return Err(Error::Shape(format!(
            "{n} feature rows but gate coefficients {:?}",
            p_c.dims()
        )));
    }
    Ok(f_ol_m.broadcast_mul(&p_c.unsqueeze(1)?)?)
}

/// Everything the lane pathway produced for one clip.
#[derive(Clone, Debug)]
pub struct LaneGate {
    /// `(N, C')` lane embedding, identical rows.
    pub f_l: Tensor,
    /// `(N, C')` interaction feature before gating.
    pub f_ol_m: Tensor,
    /// `(N,)` gate scores in (0, 1).
    pub p: Tensor,
    /// `(N,)` penalty coefficients.
    pub p_c: Tensor,
    /// `(N, C')` gated interaction feature.
    pub f_ol: Tensor,
}

#[derive(Clone, Debug)]
pub struct Trg {
    lane: LinearNormRelu,
    attn: MultiHeadAttention,
    gate: Linear,
    image_size: usize,
    max_lanes: usize,
    alpha: f64,
}

impl Trg {
    pub fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            lane: LinearNormRelu::new(cfg.lane_input_dim(), cfg.hidden, vb.pp("lane"))?,
            attn: MultiHeadAttention::new(cfg.hidden, cfg.heads, vb.pp("cross_attn"))?,
            gate: candle_nn::linear(cfg.hidden, 1, vb.pp("gate"))?,
            image_size: cfg.image_size,
            max_lanes: cfg.max_lanes,
            alpha: cfg.trg.alpha,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Lane coordinates divided by the image side, as a `(1, 4 * max_lanes)`
    /// row.
    pub fn lane_tensor(&self, lanes: &LaneInput, dtype: DType, dev: &Device) -> Result<Tensor> {
        if lanes.capacity() != self.max_lanes {
            return Err(Error::Shape(format!(
                "lane input has {} rows, model expects {}",
                lanes.capacity(),
                self.max_lanes
            )));
        }
        let scale = 1.0 / self.image_size as f64;
        let values = lanes.flattened().iter().map(|&v| v as f64 * scale).collect();
        constant(values, &[1, 4 * self.max_lanes], dtype, dev)
    }

    /// `(N, C')` lane feature, one shared embedding per object.
    pub fn lane_feature(&self, lane_row: &Tensor, n: usize) -> Result<Tensor> {
        let f = self.lane.forward(lane_row)?;
        let (_, c) = f.dims2()?;
        Ok(f.broadcast_as((n, c))?.contiguous()?)
    }

    /// `f_ol_m = MHCA(query f_l[i], key/value f_ot[i]) + f_ot`, one token
    /// per object.
    pub fn object_lane_interaction(&self, f_l: &Tensor, f_ot: &Tensor, hook: AttentionHook) -> Result<Tensor> {
        if f_l.dims() != f_ot.dims() {
            return Err(Error::Shape(format!(
                "lane feature {:?} does not match temporal feature {:?}",
                f_l.dims(),
                f_ot.dims()
            )));
        }
        let q = f_l.unsqueeze(1)?;
        let kv = f_ot.unsqueeze(1)?;
        let attended = self.attn.forward_hooked(&q, &kv, hook)?.squeeze(1)?;
        Ok((attended + f_ot)?)
    }

    pub fn attention_weights(&self, f_l: &Tensor, f_ot: &Tensor) -> Result<Tensor> {
        self.attn.attention_weights(&f_l.unsqueeze(1)?, &f_ot.unsqueeze(1)?)
    }

    /// Gate scores `p = sigmoid(Linear(f_ol_m))`, shape `(N,)`.
    pub fn gate_score(&self, f_ol_m: &Tensor) -> Result<Tensor> {
        sigmoid(&self.gate.forward(f_ol_m)?.squeeze(1)?)
    }

    /// Full lane pathway for `f_ot` `(N, C')`.
    pub fn forward(
        &self,
        lanes: &LaneInput,
        f_ot: &Tensor,
        mode: GateMode,
        weighting: bool,
        hook: AttentionHook,
    ) -> Result<LaneGate> {
        let (n, _) = f_ot.dims2()?;
        let row = self.lane_tensor(lanes, f_ot.dtype(), f_ot.device())?;
        let f_l = self.lane_feature(&row, n)?;
        let f_ol_m = self.object_lane_interaction(&f_l, f_ot, hook)?;
        let p = self.gate_score(&f_ol_m)?;
        let (p_c, f_ol) = if weighting {
            let p_c = penalty_coefficient(&p, self.alpha, mode)?;
            let f_ol = apply_gate(&f_ol_m, &p_c)?;
            (p_c, f_ol)
        } else {
            (p.ones_like()?, f_ol_m.clone())
        };
        Ok(LaneGate {
            f_l,
            f_ol_m,
            p,
            p_c,
            f_ol,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn hard_gate_branches() {
        let p = t(&[0.3, 0.7, 0.5, 0.4999]);
        let pc = penalty_coefficient(&p, 0.001, GateMode::Hard).unwrap();
        assert_eq!(pc.to_vec1::<f64>().unwrap(), vec![1.0, 0.001, 0.001, 1.0]);
    }

    #[test]
    fn soft_gate_at_half_is_midpoint() {
        let pc = penalty_coefficient(&t(&[0.5]), 0.001, GateMode::Soft { k: 50.0 }).unwrap();
        assert_eq!(pc.to_vec1::<f64>().unwrap()[0], (1.0 + 0.001) / 2.0);
    }

    #[test]
    fn steep_soft_gate_approaches_hard_gate() {
        let ps: Vec<f64> = (0..=200)
            .map(|i| i as f64 / 200.0)
            .filter(|p| (p - 0.5).abs() > 0.01)
            .collect();
        let p = t(&ps);
        let soft = penalty_coefficient(&p, 0.001, GateMode::Soft { k: 1e4 }).unwrap();
        let hard = penalty_coefficient(&p, 0.001, GateMode::Hard).unwrap();
        let diff = (soft - hard).unwrap().abs().unwrap().max(0).unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-3);
    }

    #[test]
    fn invalid_alpha_is_a_config_error() {
        for alpha in [0.0, 1.0, 1.5] {
            assert!(matches!(
                penalty_coefficient(&t(&[0.2]), alpha, GateMode::Hard),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn gate_scales_rows() {
        let f = Tensor::new(&[[2.0f64, 0.0], [0.0, 3.0], [1.0, 1.0]], &Device::Cpu).unwrap();
        let out = apply_gate(&f, &t(&[1.0, 0.001, 1.0])).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(out, vec![vec![2.0, 0.0], vec![0.0, 3.0 * 0.001], vec![1.0, 1.0]]);
        assert!(apply_gate(&f, &t(&[1.0])).is_err());
    }
}
