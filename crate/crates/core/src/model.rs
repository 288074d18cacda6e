//! Full forward composition: bottom-up features, intention and semantics
//! guidance on the spatial branch, lane guidance on the temporal branch,
//! and the importance head.

use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};

use crate::config::ModelConfig;
use crate::dataset::ClipSample;
use crate::disg::{fuse_intention_semantics, select_mask_kind, Disg, MaskKind};
use crate::error::{Error, Result};
use crate::head::{importance_loss, Head, ImportanceScores};
use crate::nn::{init_parameters, AttentionHook};
use crate::ofe::{Ofe, StreamFeatures};
use crate::trg::{GateMode, LaneGate, Trg};

/// Attention overrides for tests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Hooks {
    pub spatial: AttentionHook,
    pub disg: AttentionHook,
    pub trg: AttentionHook,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub gate: GateMode,
    pub hooks: Hooks,
}

impl ForwardOptions {
    /// Hard gate, no hooks.
    pub fn eval() -> Self {
        Self {
            gate: GateMode::Hard,
            hooks: Hooks::default(),
        }
    }

    /// Soft gate of slope `k`, no hooks.
    pub fn train(k: f64) -> Self {
        Self {
            gate: GateMode::Soft { k },
            hooks: Hooks::default(),
        }
    }
}

/// Intention and semantics guidance intermediates.
#[derive(Clone, Debug)]
pub struct GuidanceState {
    /// `None` when the intention mask is disabled.
    pub mask_kind: Option<MaskKind>,
    /// `(W', H')` mask actually applied (ones when disabled).
    pub mask: Tensor,
    /// `(1, 2C, W', H')`, ones when semantics are disabled.
    pub f_s: Tensor,
    pub f_is: Tensor,
    pub f_ois: Tensor,
}

/// Every intermediate of one forward pass. Disabled branches are `None`.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub streams: StreamFeatures,
    pub f_os: Option<Tensor>,
    pub f_ot: Option<Tensor>,
    pub guidance: Option<GuidanceState>,
    pub lane: Option<LaneGate>,
    pub scores: ImportanceScores,
}

impl ForwardTrace {
    /// Penalty coefficients per object when the lane gate ran.
    pub fn gate_coefficients(&self) -> Result<Option<Vec<f64>>> {
        match &self.lane {
            Some(l) => Ok(Some(l.p_c.to_dtype(DType::F64)?.to_vec1::<f64>()?)),
            None => Ok(None),
        }
    }
}

pub struct ImportanceModel {
    cfg: ModelConfig,
    varmap: VarMap,
    dtype: DType,
    device: Device,
    ofe: Ofe,
    disg: Disg,
    trg: Trg,
    head: Head,
}

impl ImportanceModel {
    /// Builds a model with parameters drawn from `seed`.
    pub fn new(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, &device);
        let model = Self {
            ofe: Ofe::new(cfg, vb.pp("ofe"))?,
            disg: Disg::new(cfg, vb.pp("disg"))?,
            trg: Trg::new(cfg, vb.pp("trg"))?,
            head: Head::new(cfg, vb.pp("head"))?,
            cfg: cfg.clone(),
            varmap,
            dtype,
            device,
        };
        init_parameters(&model.varmap, seed)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn ofe(&self) -> &Ofe {
        &self.ofe
    }

    pub fn disg(&self) -> &Disg {
        &self.disg
    }

    pub fn trg(&self) -> &Trg {
        &self.trg
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    fn check_sample(&self, sample: &ClipSample) -> Result<()> {
        let t = self.cfg.clip_len;
        let s = self.cfg.image_size;
        if sample.frames.dims() != [t, 3, s, s] {
            return Err(Error::Shape(format!(
                "clip frames {:?}, model expects [{t}, 3, {s}, {s}]",
                sample.frames.dims()
            )));
        }
        if sample.seg_map.dims() != [3, s, s] {
            return Err(Error::Shape(format!(
                "segmentation map {:?}, model expects [3, {s}, {s}]",
                sample.seg_map.dims()
            )));
        }
        if sample.num_objects() == 0 || sample.boxes.objects() != sample.num_objects() {
            return Err(Error::Shape(format!(
                "{} labels for {} boxed objects",
                sample.num_objects(),
                sample.boxes.objects()
            )));
        }
        Ok(())
    }

    /// Forward pass keeping every intermediate.
    pub fn forward_trace(&self, sample: &ClipSample, opts: &ForwardOptions) -> Result<ForwardTrace> {
        self.check_sample(sample)?;
        let cast = |t: &Tensor| t.to_dtype(self.dtype).map_err(Error::from);
        let frames = cast(&sample.frames)?;
        let flow = cast(&sample.flow)?;
        let streams = self.ofe.extract_stream_features(&frames, &flow, &sample.boxes)?;

        let mut f_os = None;
        let mut guidance = None;
        let mut f_ois = None;
        if self.cfg.ofe.use_spatial {
            let spatial = self.ofe.spatial_feature(&streams, opts.hooks.spatial)?;
            if self.cfg.disg.enabled() {
                let g = self.guidance(&spatial, sample, opts.hooks.disg)?;
                f_ois = Some(g.f_ois.clone());
                guidance = Some(g);
            } else {
                f_ois = Some(spatial.clone());
            }
            f_os = Some(spatial);
        }

        let mut f_ot = None;
        let mut lane = None;
        let mut f_ol = None;
        if self.cfg.ofe.use_temporal {
            let temporal = self.ofe.temporal_feature(&streams)?;
            if self.cfg.trg.use_interaction {
                let gate = self.trg.forward(
                    &sample.lanes,
                    &temporal,
                    opts.gate,
                    self.cfg.trg.use_weighting,
                    opts.hooks.trg,
                )?;
                f_ol = Some(gate.f_ol.clone());
                lane = Some(gate);
            } else {
                f_ol = Some(temporal.clone());
            }
            f_ot = Some(temporal);
        }

        let scores = self.head.estimate_importance(f_ois.as_ref(), f_ol.as_ref())?;
        Ok(ForwardTrace {
            streams,
            f_os,
            f_ot,
            guidance,
            lane,
            scores,
        })
    }

    fn guidance(&self, f_os: &Tensor, sample: &ClipSample, hook: AttentionHook) -> Result<GuidanceState> {
        let (_, c2, h, w) = f_os.dims4()?;
        let f_s = if self.cfg.disg.use_semantics {
            self.disg.semantic_feature(&sample.seg_map.to_dtype(self.dtype)?)?
        } else {
            Tensor::ones((1, c2, h, w), self.dtype, &self.device)?
        };
        let (mask_kind, mask) = if self.cfg.disg.use_intention {
            let kind = select_mask_kind(sample.ego_velocity, self.disg.beta())?;
            let mask = self.disg.masks().get(kind).to_tensor(self.dtype, &self.device)?;
            (Some(kind), mask)
        } else {
            (None, Tensor::ones((h, w), self.dtype, &self.device)?)
        };
        let f_is = fuse_intention_semantics(&f_s, &mask)?;
        let f_ois = self.disg.object_intention_semantics(f_os, &f_is, hook)?;
        Ok(GuidanceState {
            mask_kind,
            mask,
            f_s,
            f_is,
            f_ois,
        })
    }

    pub fn forward(&self, sample: &ClipSample, opts: &ForwardOptions) -> Result<ImportanceScores> {
        Ok(self.forward_trace(sample, opts)?.scores)
    }

    /// Importance scores with the evaluation gate.
    pub fn predict(&self, sample: &ClipSample) -> Result<Vec<f64>> {
        self.forward(sample, &ForwardOptions::eval())?.to_vec()
    }

    /// Training loss of one clip under the soft gate.
    pub fn clip_loss(&self, sample: &ClipSample) -> Result<Tensor> {
        let scores = self.forward(sample, &ForwardOptions::train(self.cfg.trg.soft_k))?;
        importance_loss(&scores.a, &sample.labels)
    }

    /// Variables sorted by name.
    pub fn named_vars(&self) -> Vec<(String, candle_core::Var)> {
        let data = self.varmap.data().lock().expect("variable map lock poisoned");
        let mut vars: Vec<(String, candle_core::Var)> =
            data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    pub fn parameter_count(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }
}
