//! Driver intention and scene semantics guidance.
//!
//! The final frame's segmentation map is encoded into a semantic guiding
//! feature `f_s`. The ego yaw rate picks one of three fixed intention masks,
//! which reweights `f_s` spatially. Object spatial features then attend to
//! the result, with a residual connection.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, VarBuilder};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{adaptive_pool_matrix, constant, AttentionHook, MultiHeadAttention};
use crate::ofe::{feature_side, Backbone};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Left,
    Straight,
    Right,
}

/// Fixed two-valued spatial mask, row-major over `height` rows of `width`
/// columns.
#[derive(Clone, Debug, PartialEq)]
pub struct IntentionMask {
    pub kind: MaskKind,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl IntentionMask {
    fn from_columns(kind: MaskKind, width: usize, height: usize, high: impl Fn(usize) -> bool, a: f64, b: f64) -> Self {
        let values = (0..height)
            .flat_map(|_| (0..width).map(|j| if high(j) { b } else { a }))
            .collect();
        Self {
            kind,
            width,
            height,
            values,
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn to_tensor(&self, dtype: candle_core::DType, dev: &candle_core::Device) -> Result<Tensor> {
        constant(self.values.clone(), &[self.height, self.width], dtype, dev)
    }
}

/// The three intention masks.
#[derive(Clone, Debug, PartialEq)]
pub struct IntentionMasks {
    pub left: IntentionMask,
    pub straight: IntentionMask,
    pub right: IntentionMask,
}

impl IntentionMasks {
    pub fn get(&self, kind: MaskKind) -> &IntentionMask {
        match kind {
            MaskKind::Left => &self.left,
            MaskKind::Straight => &self.straight,
            MaskKind::Right => &self.right,
        }
    }
}

/// Builds `(m_l, m_s, m_r)` for a `width x height` grid.
///
/// `m_l` holds `b` on the right half (the middle column included for odd
/// widths), since a driver turning left watches the right side; `m_r` is
/// its mirror; `m_s` holds `b` on a centered band leaving `floor(width/3)`
/// columns of `a` on each side.
pub fn build_masks(a: f64, b: f64, width: usize, height: usize) -> Result<IntentionMasks> {
    if !(a > 0.0 && b > a && b.is_finite()) {
        return Err(Error::Config(format!(
            "intention mask values need b > a > 0, got a={a}, b={b}"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Config("intention mask grid must be non-empty".into()));
    }
    let half = width / 2;
    let edge = width / 3;
    Ok(IntentionMasks {
        left: IntentionMask::from_columns(MaskKind::Left, width, height, |j| j >= half, a, b),
        straight: IntentionMask::from_columns(
            MaskKind::Straight,
            width,
            height,
            |j| j >= edge && j < width - edge,
            a,
            b,
        ),
        right: IntentionMask::from_columns(MaskKind::Right, width, height, |j| width - 1 - j >= half, a, b),
    })
}

/// Intention from the ego yaw rate: strictly above `beta` is a left turn,
/// strictly below `-beta` a right turn, anything else straight.
pub fn select_mask_kind(e: f64, beta: f64) -> Result<MaskKind> {
    if !e.is_finite() {
        return Err(Error::Input(format!("ego angular velocity is not finite: {e}")));
    }
    Ok(if e > beta {
        MaskKind::Left
    } else if e < -beta {
        MaskKind::Right
    } else {
        MaskKind::Straight
    })
}

pub fn select_mask(e: f64, beta: f64, masks: &IntentionMasks) -> Result<&IntentionMask> {
    Ok(masks.get(select_mask_kind(e, beta)?))
}

/// `f_is = f_s ⊙ m`, broadcast over channels. `f_s` is `(1, 2C, H', W')`.
pub fn fuse_intention_semantics(f_s: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = f_s.dims4()?;
    if mask.dims() != [h, w] {
        return Err(Error::Shape(format!(
            "mask {:?} does not match feature grid {h}x{w}",
            mask.dims()
        )));
    }
    Ok(f_s.broadcast_mul(&mask.reshape((1, 1, h, w))?)?)
}

#[derive(Clone, Debug)]
pub struct Disg {
    backbone: Backbone,
    proj: Conv2d,
    attn: MultiHeadAttention,
    masks: IntentionMasks,
    feat_side: usize,
    roi_size: usize,
    beta: f64,
}

impl Disg {
    pub fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let c = cfg.channels;
        let bias = cfg.ofe.backbone_bias;
        let conv_cfg = Conv2dConfig::default();
        let proj = if bias {
            candle_nn::conv2d(c, 2 * c, 1, conv_cfg, vb.pp("proj"))?
        } else {
            candle_nn::conv2d_no_bias(c, 2 * c, 1, conv_cfg, vb.pp("proj"))?
        };
        Ok(Self {
            backbone: Backbone::new(
                cfg.ofe.backbone,
                c,
                cfg.ofe.tiny_strides,
                bias,
                vb.pp("seg_backbone"),
            )?,
            proj,
            attn: MultiHeadAttention::new(2 * c, cfg.heads, vb.pp("cross_attn"))?,
            masks: build_masks(cfg.disg.a, cfg.disg.b, cfg.roi_size, cfg.roi_size)?,
            feat_side: feature_side(cfg.ofe.backbone, cfg.ofe.tiny_strides, cfg.image_size),
            roi_size: cfg.roi_size,
            beta: cfg.disg.beta,
        })
    }

    pub fn masks(&self) -> &IntentionMasks {
        &self.masks
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Semantic guiding feature `(1, 2C, W', H')` from a `(3, H, W)` map:
    /// backbone, 1x1 projection to 2C channels, adaptive average pooling.
    pub fn semantic_feature(&self, seg: &Tensor) -> Result<Tensor> {
        let maps = self.proj.forward(&self.backbone.forward(&seg.unsqueeze(0)?)?)?;
        let (_, c2, fh, fw) = maps.dims4()?;
        debug_assert_eq!((fh, fw), (self.feat_side, self.feat_side));
        let r = self.roi_size;
        let pool = constant(adaptive_pool_matrix(fh, fw, r, r), &[fh * fw, r * r], maps.dtype(), maps.device())?;
        Ok(maps.reshape((c2, fh * fw))?.matmul(&pool)?.reshape((1, c2, r, r))?)
    }

    /// `f_ois = MHCA(query f_os, key/value f_is) + f_os`, `(N, 2C, W', H')`.
    pub fn object_intention_semantics(&self, f_os: &Tensor, f_is: &Tensor, hook: AttentionHook) -> Result<Tensor> {
        let (n, c2, h, w) = f_os.dims4()?;
        let (one, c2s, hs, ws) = f_is.dims4()?;
        if one != 1 || (c2s, hs, ws) != (c2, h, w) {
            return Err(Error::Shape(format!(
                "f_is {:?} does not match f_os {:?}",
                f_is.dims(),
                f_os.dims()
            )));
        }
        let tokens = |x: &Tensor, b: usize| -> Result<Tensor> {
            Ok(x.reshape((b, c2, h * w))?.transpose(1, 2)?.contiguous()?)
        };
        let q = tokens(f_os, n)?;
        let kv = tokens(f_is, 1)?.broadcast_as((n, h * w, c2))?.contiguous()?;
        let attended = self.attn.forward_hooked(&q, &kv, hook)?;
        let attended = attended.transpose(1, 2)?.contiguous()?.reshape((n, c2, h, w))?;
        Ok((attended + f_os)?)
    }

    /// Token-level attention weights of the cross-attention, for inspection.
    pub fn attention_weights(&self, f_os: &Tensor, f_is: &Tensor) -> Result<Tensor> {
        let (n, c2, h, w) = f_os.dims4()?;
        let q = f_os.reshape((n, c2, h * w))?.transpose(1, 2)?.contiguous()?;
        let kv = f_is
            .reshape((1, c2, h * w))?
            .transpose(1, 2)?
            .broadcast_as((n, h * w, c2))?
            .contiguous()?;
        self.attn.attention_weights(&q, &kv)
    }
}
