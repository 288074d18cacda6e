//! Bottom-up object features: two backbone streams (RGB and rendered flow),
//! per-object ROI align at every frame, a spatial branch and a temporal
//! branch.

mod backbone;
pub mod roi;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::VarBuilder;

use crate::config::ModelConfig;
use crate::dataset::ClipBoxes;
use crate::error::{Error, Result};
use crate::nn::{constant, AttentionHook, LinearNormRelu, MultiHeadAttention, StackedLstm};

pub use backbone::{feature_side, Backbone, ResNet18, TinyBackbone};

/// Per-object ROI features of both streams.
#[derive(Clone, Debug)]
pub struct StreamFeatures {
    /// `(N, T, C, W', H')` appearance features.
    pub f_v: Tensor,
    /// `(N, T, C, W', H')` motion features.
    pub f_m: Tensor,
    /// `(N, T)` validity, 1 where the track has a box.
    pub valid: Tensor,
}

/// Samples `(N, T, C, R, R)` ROI features from per-frame maps `(T, C, h, w)`.
/// Invalid frames give zero features.
pub fn roi_features(
    maps: &Tensor,
    boxes: &ClipBoxes,
    image_size: usize,
    out_size: usize,
) -> Result<Tensor> {
    let (t, c, fh, fw) = maps.dims4()?;
    if t != boxes.frames() {
        return Err(Error::Shape(format!(
            "{t} feature maps for a clip of {} frames",
            boxes.frames()
        )));
    }
    let n = boxes.objects();
    let cols = n * out_size * out_size;
    let scale = fw as f64 / image_size as f64;
    let mut sampling = vec![0.0; t * fh * fw * cols];
    for frame in 0..t {
        let block = &mut sampling[frame * fh * fw * cols..(frame + 1) * fh * fw * cols];
        for obj in 0..n {
            let Some(b) = boxes.get(obj, frame) else {
                continue;
            };
            let (b, widened) = roi::enforce_min_size(b);
            if widened {
                log::warn!("object {obj}, frame {frame}: degenerate box widened to 1 px");
            }
            roi::add_box_weights(block, cols, obj * out_size * out_size, &b, fh, fw, scale, out_size);
        }
    }
    let sampling = constant(sampling, &[t, fh * fw, cols], maps.dtype(), maps.device())?;
    let pooled = maps.reshape((t, c, fh * fw))?.matmul(&sampling)?;
    Ok(pooled
        .reshape((t, c, n, out_size, out_size))?
        .permute((2, 0, 1, 3, 4))?
        .contiguous()?)
}

fn validity(boxes: &ClipBoxes, dtype: DType, dev: &Device) -> Result<Tensor> {
    let (n, t) = (boxes.objects(), boxes.frames());
    let v: Vec<f64> = (0..n)
        .flat_map(|i| (0..t).map(move |k| (i, k)))
        .map(|(i, k)| if boxes.is_valid(i, k) { 1.0 } else { 0.0 })
        .collect();
    constant(v, &[n, t], dtype, dev)
}

#[derive(Clone, Debug)]
pub struct Ofe {
    rgb: Backbone,
    flow: Backbone,
    spatial_attn: MultiHeadAttention,
    lstm_rgb: StackedLstm,
    lstm_flow: StackedLstm,
    temporal_attn: MultiHeadAttention,
    temporal_out: LinearNormRelu,
    image_size: usize,
    roi_size: usize,
    spatial_residual: bool,
}

impl Ofe {
    pub fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let c = cfg.channels;
        let backbone = |name: &str| {
            Backbone::new(
                cfg.ofe.backbone,
                c,
                cfg.ofe.tiny_strides,
                cfg.ofe.backbone_bias,
                vb.pp(name),
            )
        };
        let roi_dim = c * cfg.roi_size * cfg.roi_size;
        Ok(Self {
            rgb: backbone("rgb_backbone")?,
            flow: backbone("flow_backbone")?,
            spatial_attn: MultiHeadAttention::new(2 * c, cfg.heads, vb.pp("spatial_attn"))?,
            lstm_rgb: StackedLstm::new(roi_dim, cfg.hidden, 2, vb.pp("lstm_rgb"))?,
            lstm_flow: StackedLstm::new(roi_dim, cfg.hidden, 2, vb.pp("lstm_flow"))?,
            temporal_attn: MultiHeadAttention::new(2 * cfg.hidden, cfg.heads, vb.pp("temporal_attn"))?,
            temporal_out: LinearNormRelu::new(2 * cfg.hidden, cfg.hidden, vb.pp("temporal_out"))?,
            image_size: cfg.image_size,
            roi_size: cfg.roi_size,
            spatial_residual: cfg.ofe.spatial_residual,
        })
    }

    /// Runs both backbones over the clip and pools every object at every
    /// frame. `frames` and `flow` are `(T, 3, H, W)` in the model dtype.
    pub fn extract_stream_features(
        &self,
        frames: &Tensor,
        flow: &Tensor,
        boxes: &ClipBoxes,
    ) -> Result<StreamFeatures> {
        let (t, ch, h, w) = frames.dims4()?;
        if flow.dims() != frames.dims() {
            return Err(Error::Shape(format!(
                "flow {:?} does not match frames {:?}",
                flow.dims(),
                frames.dims()
            )));
        }
        if ch != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::Shape(format!(
                "expected (T, 3, {s}, {s}) frames, got {:?}",
                frames.dims(),
                s = self.image_size
            )));
        }
        if boxes.frames() != t || boxes.objects() == 0 {
            return Err(Error::Shape(format!(
                "boxes cover {} objects x {} frames for a {t}-frame clip",
                boxes.objects(),
                boxes.frames()
            )));
        }
        if let Some(i) = (0..boxes.objects()).find(|&i| !boxes.is_valid(i, t - 1)) {
            return Err(Error::Input(format!("object {i} has no box at the last frame")));
        }
        let f_v = roi_features(&self.rgb.forward(frames)?, boxes, self.image_size, self.roi_size)?;
        let f_m = roi_features(&self.flow.forward(flow)?, boxes, self.image_size, self.roi_size)?;
        let valid = validity(boxes, frames.dtype(), frames.device())?;
        Ok(StreamFeatures { f_v, f_m, valid })
    }

    /// Time average of each stream over valid frames, concatenated on
    /// channels: `(N, 2C, W', H')`.
    pub fn time_average(sf: &StreamFeatures) -> Result<Tensor> {
        let (n, t) = sf.valid.dims2()?;
        let mask = sf.valid.reshape((n, t, 1, 1, 1))?;
        let count = sf.valid.sum_keepdim(1)?.reshape((n, 1, 1, 1))?;
        let avg = |f: &Tensor| -> Result<Tensor> {
            Ok(f.broadcast_mul(&mask)?.sum(1)?.broadcast_div(&count)?)
        };
        Ok(Tensor::cat(&[avg(&sf.f_v)?, avg(&sf.f_m)?], 1)?)
    }

    /// Spatial object feature `f_os`, `(N, 2C, W', H')`: self-attention over
    /// the W'·H' positions of the time-averaged streams.
    pub fn spatial_feature(&self, sf: &StreamFeatures, hook: AttentionHook) -> Result<Tensor> {
        let avg = Self::time_average(sf)?;
        let (n, c2, rh, rw) = avg.dims4()?;
        let tokens = avg.reshape((n, c2, rh * rw))?.transpose(1, 2)?.contiguous()?;
        let mut out = self.spatial_attn.forward_hooked(&tokens, &tokens, hook)?;
        if self.spatial_residual {
            out = (out + &tokens)?;
        }
        Ok(out.transpose(1, 2)?.contiguous()?.reshape((n, c2, rh, rw))?)
    }

    /// Temporal object feature `f_ot`, `(N, C')`.
    pub fn temporal_feature(&self, sf: &StreamFeatures) -> Result<Tensor> {
        let (n, t, _, _, _) = sf.f_v.dims5()?;
        let seq = |f: &Tensor| f.reshape((n, t, ())).map_err(Error::from);
        let h_v = self.lstm_rgb.forward(&seq(&sf.f_v)?)?;
        let h_m = self.lstm_flow.forward(&seq(&sf.f_m)?)?;
        let h = Tensor::cat(&[h_v, h_m], D::Minus1)?;
        let attended = self.temporal_attn.forward(&h, &h)?;
        let last = attended.narrow(1, t - 1, 1)?.squeeze(1)?;
        Ok(self.temporal_out.forward(&last)?)
    }
}
