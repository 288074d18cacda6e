//! Model, training and experiment configuration.
//!
//! Two profiles ship with the crate: [`ModelConfig::standard`] holds the
//! full-size constants (T=16, 320x320 input, C=512, C'=256, 10x10 ROI grid),
//! [`ModelConfig::micro`] shrinks every dimension so the whole pipeline trains
//! on a CPU in minutes. All shapes are derived from the config, never
//! hard-coded.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::dataset::SyntheticConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// Three strided conv stages ending in `channels` maps.
    Tiny,
    /// ResNet18 trunk without the classifier, frozen batch-norm affine layers.
    Resnet18,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfeConfig {
    pub backbone: BackboneKind,
    /// Per-stage strides of the tiny backbone.
    pub tiny_strides: [usize; 3],
    /// Conv biases in the backbones (disable for linearity checks).
    pub backbone_bias: bool,
    pub use_spatial: bool,
    pub use_temporal: bool,
    /// Add a residual around the spatial self-attention. Off by default.
    pub spatial_residual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisgConfig {
    /// Low mask value.
    pub a: f64,
    /// High mask value.
    pub b: f64,
    /// Turning threshold on the ego angular velocity.
    pub beta: f64,
    pub use_semantics: bool,
    pub use_intention: bool,
}

impl DisgConfig {
    pub fn enabled(&self) -> bool {
        self.use_semantics || self.use_intention
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrgConfig {
    /// Penalty applied to objects whose gate score is >= 0.5.
    pub alpha: f64,
    /// Slope of the differentiable gate used while training.
    pub soft_k: f64,
    pub use_interaction: bool,
    pub use_weighting: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Frames per clip (T).
    pub clip_len: usize,
    /// Square input resolution (W = H).
    pub image_size: usize,
    /// Backbone channels (C).
    pub channels: usize,
    /// Object feature width (C').
    pub hidden: usize,
    /// ROI grid side (W' = H').
    pub roi_size: usize,
    pub heads: usize,
    pub max_lanes: usize,
    /// Flow magnitude (pixels at `image_size`) rendered at full brightness.
    pub flow_scale: f32,
    pub normalization: Normalization,
    pub ofe: OfeConfig,
    pub disg: DisgConfig,
    pub trg: TrgConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl ModelConfig {
    pub fn standard() -> Self {
        Self {
            clip_len: 16,
            image_size: 320,
            channels: 512,
            hidden: 256,
            roi_size: 10,
            heads: 8,
            max_lanes: 20,
            flow_scale: 16.0,
            normalization: Normalization::default(),
            ofe: OfeConfig {
                backbone: BackboneKind::Resnet18,
                tiny_strides: [4, 4, 2],
                backbone_bias: true,
                use_spatial: true,
                use_temporal: true,
                spatial_residual: false,
            },
            disg: DisgConfig {
                a: 1.0,
                b: 1.5,
                beta: 2.2,
                use_semantics: true,
                use_intention: true,
            },
            trg: TrgConfig {
                alpha: 0.001,
                soft_k: 50.0,
                use_interaction: true,
                use_weighting: true,
            },
        }
    }

    /// CPU-scale profile: T=4, 64x64 input, C=64, C'=32, 4x4 ROI grid.
    pub fn micro() -> Self {
        let mut cfg = Self::standard();
        cfg.clip_len = 4;
        cfg.image_size = 64;
        cfg.channels = 64;
        cfg.hidden = 32;
        cfg.roi_size = 4;
        cfg.flow_scale = 4.0;
        cfg.ofe.backbone = BackboneKind::Tiny;
        cfg.ofe.tiny_strides = [2, 2, 1];
        cfg
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "standard" | "default" => Ok(Self::standard()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }

    /// Width of the spatial tokens (2C).
    pub fn spatial_dim(&self) -> usize {
        2 * self.channels
    }

    pub fn lane_input_dim(&self) -> usize {
        self.max_lanes * 4
    }

    /// Hidden width of the final perceptron (128 for C'=256).
    pub fn head_hidden(&self) -> usize {
        (self.hidden / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clip_len", self.clip_len),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("hidden", self.hidden),
            ("roi_size", self.roi_size),
            ("heads", self.heads),
            ("max_lanes", self.max_lanes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, dim) in [
            ("2*channels", self.spatial_dim()),
            ("hidden", self.hidden),
            ("2*hidden", 2 * self.hidden),
        ] {
            if dim % self.heads != 0 {
                return Err(Error::Config(format!(
                    "{name}={dim} is not divisible by heads={}",
                    self.heads
                )));
            }
        }
        if self.ofe.backbone == BackboneKind::Tiny && self.channels % 4 != 0 {
            return Err(Error::Config(
                "tiny backbone needs channels divisible by 4".into(),
            ));
        }
        if self.ofe.tiny_strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("tiny backbone strides must be positive".into()));
        }
        if !(self.disg.a > 0.0 && self.disg.b > self.disg.a) {
            return Err(Error::Config(format!(
                "intention mask values need b > a > 0, got a={}, b={}",
                self.disg.a, self.disg.b
            )));
        }
        if !(self.disg.beta > 0.0 && self.disg.beta.is_finite()) {
            return Err(Error::Config(format!(
                "turning threshold beta must be positive, got {}",
                self.disg.beta
            )));
        }
        if !(self.trg.alpha > 0.0 && self.trg.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.trg.alpha
            )));
        }
        if !(self.trg.soft_k > 0.0) {
            return Err(Error::Config("trg.soft_k must be positive".into()));
        }
        if self.trg.use_weighting && !self.trg.use_interaction {
            return Err(Error::Config(
                "trg.use_weighting requires trg.use_interaction".into(),
            ));
        }
        if !self.ofe.use_spatial && !self.ofe.use_temporal {
            return Err(Error::Config(
                "at least one of ofe.use_spatial / ofe.use_temporal must be set".into(),
            ));
        }
        if !self.flow_scale.is_finite() || self.flow_scale <= 0.0 {
            return Err(Error::Config("flow_scale must be positive".into()));
        }
        if self.normalization.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }
}

/// Named ablation configurations. Each preset flips switches on top of a base
/// config; the full model is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationPreset {
    /// Bottom-up pathway only.
    Bu,
    BuTrg,
    BuDisg,
    Full,
    /// Spatial object feature only (temporal branch and lane path dropped).
    OfeSpatial,
    /// Temporal object feature only.
    OfeTemporal,
    /// Semantic guiding feature without the intention mask.
    DisgSemantics,
    /// Intention mask without the semantic guiding feature.
    DisgIntention,
    /// Object-lane interaction without the adaptive weighting.
    TrgInteraction,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 9] = [
        AblationPreset::Bu,
        AblationPreset::BuTrg,
        AblationPreset::BuDisg,
        AblationPreset::Full,
        AblationPreset::OfeSpatial,
        AblationPreset::OfeTemporal,
        AblationPreset::DisgSemantics,
        AblationPreset::DisgIntention,
        AblationPreset::TrgInteraction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationPreset::Bu => "bu",
            AblationPreset::BuTrg => "bu+trg",
            AblationPreset::BuDisg => "bu+disg",
            AblationPreset::Full => "full",
            AblationPreset::OfeSpatial => "ofe-spatial",
            AblationPreset::OfeTemporal => "ofe-temporal",
            AblationPreset::DisgSemantics => "disg-semantics",
            AblationPreset::DisgIntention => "disg-intention",
            AblationPreset::TrgInteraction => "trg-interaction",
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        let set_disg = |cfg: &mut ModelConfig, sem: bool, int: bool| {
            cfg.disg.use_semantics = sem;
            cfg.disg.use_intention = int;
        };
        let set_trg = |cfg: &mut ModelConfig, inter: bool, weight: bool| {
            cfg.trg.use_interaction = inter;
            cfg.trg.use_weighting = weight;
        };
        match self {
            AblationPreset::Bu => {
                set_disg(&mut cfg, false, false);
                set_trg(&mut cfg, false, false);
            }
            AblationPreset::BuTrg => set_disg(&mut cfg, false, false),
            AblationPreset::BuDisg => set_trg(&mut cfg, false, false),
            AblationPreset::Full => {}
            AblationPreset::OfeSpatial => cfg.ofe.use_temporal = false,
            AblationPreset::OfeTemporal => cfg.ofe.use_spatial = false,
            AblationPreset::DisgSemantics => set_disg(&mut cfg, true, false),
            AblationPreset::DisgIntention => set_disg(&mut cfg, false, true),
            AblationPreset::TrgInteraction => set_trg(&mut cfg, true, false),
        }
        cfg
    }
}

impl fmt::Display for AblationPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let canonical = match s {
            // aliases for the "component disabled" rows of the per-module tables
            "disg-none" => "bu+trg",
            "trg-none" => "bu+disg",
            other => other,
        };
        AblationPreset::ALL
            .iter()
            .copied()
            .find(|p| p.name() == canonical)
            .ok_or_else(|| Error::Config(format!("unknown ablation preset `{s}`")))
    }
}

/// One point of the mask-value / penalty hyperparameter grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperPoint {
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
}

impl HyperPoint {
    /// Applies the point to a config. `a == b` means a constant mask, which is
    /// expressed by disabling the intention mask.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.trg.alpha = self.alpha;
        if self.b > self.a {
            cfg.disg.a = self.a;
            cfg.disg.b = self.b;
        } else {
            cfg.disg.use_intention = false;
        }
        cfg
    }
}

/// Mask-value sweep at the default alpha followed by the alpha sweep at the
/// default mask values.
pub fn hyperparameter_grid() -> Vec<HyperPoint> {
    let mut grid: Vec<HyperPoint> = [2.5, 2.0, 1.5, 1.0]
        .into_iter()
        .map(|b| HyperPoint {
            a: 1.0,
            b,
            alpha: 0.001,
        })
        .collect();
    grid.extend([0.1, 0.01].into_iter().map(|alpha| HyperPoint {
        a: 1.0,
        b: 1.5,
        alpha,
    }));
    grid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Spacing between evaluated clip end frames within a scene.
    pub eval_stride: usize,
    /// Score threshold for F1 / accuracy.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl TrainConfig {
    pub fn standard() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            precision: Precision::F32,
            eval_stride: 10,
            threshold: 0.5,
        }
    }

    /// Settings that fit the micro profile on a small synthetic set.
    pub fn micro() -> Self {
        Self {
            epochs: 50,
            batch_size: 1,
            lr: 0.005,
            ..Self::standard()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "standard" | "default" => Ok(Self::standard()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.eval_stride == 0 {
            return Err(Error::Config("eval_stride must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a CLI run needs, loadable from one TOML file.
///
/// The optional top-level `profile` key picks the base values; every other
/// key overrides the profile, so a file can be as small as `profile = "micro"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
}

impl ExperimentConfig {
    pub fn profile(name: &str) -> Result<Self> {
        let model = ModelConfig::profile(name)?;
        let synthetic = SyntheticConfig {
            image_size: model.image_size,
            frames_per_scene: model.clip_len,
            beta: model.disg.beta,
            flow_scale: model.flow_scale,
            ..SyntheticConfig::default()
        };
        Ok(Self {
            model,
            train: TrainConfig::profile(name)?,
            synthetic,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let overrides: toml::Value = toml::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        let profile = overrides
            .get("profile")
            .and_then(|v| v.as_str())
            .unwrap_or("standard")
            .to_owned();
        let base = Self::profile(&profile)?;
        let mut merged = toml::Value::try_from(&base)
            .map_err(|e| Error::Config(format!("cannot encode base config: {e}")))?;
        merge_toml(&mut merged, &overrides);
        if let toml::Value::Table(t) = &mut merged {
            t.remove("profile");
        }
        let cfg: Self = merged
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn merge_toml(base: &mut toml::Value, overrides: &toml::Value) {
    match (base, overrides) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        ModelConfig::standard().validate().unwrap();
        ModelConfig::micro().validate().unwrap();
        TrainConfig::standard().validate().unwrap();
        TrainConfig::micro().validate().unwrap();
    }

    #[test]
    fn mask_values_must_be_ordered() {
        let mut cfg = ModelConfig::standard();
        cfg.disg.b = cfg.disg.a;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn alpha_outside_unit_interval_is_rejected() {
        for alpha in [0.0, 1.0, -0.1, 2.0] {
            let mut cfg = ModelConfig::standard();
            cfg.trg.alpha = alpha;
            assert!(cfg.validate().is_err(), "alpha={alpha}");
        }
    }

    #[test]
    fn weighting_without_interaction_is_rejected() {
        let mut cfg = ModelConfig::standard();
        cfg.trg.use_interaction = false;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_overrides_apply_on_top_of_profile() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            profile = "micro"
            [model.disg]
            b = 2.0
            [train]
            epochs = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model.clip_len, 4);
        assert_eq!(cfg.model.disg.b, 2.0);
        assert_eq!(cfg.model.disg.a, 1.0);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.synthetic.frames_per_scene, 4);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::profile("micro").unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn presets_parse_and_apply() {
        for p in AblationPreset::ALL {
            assert_eq!(p.name().parse::<AblationPreset>().unwrap(), p);
            p.apply(&ModelConfig::micro()).validate().unwrap();
        }
        assert_eq!(
            "disg-none".parse::<AblationPreset>().unwrap(),
            AblationPreset::BuTrg
        );
        let bu = AblationPreset::Bu.apply(&ModelConfig::standard());
        assert!(!bu.disg.enabled() && !bu.trg.use_interaction);
    }

    #[test]
    fn grid_points_yield_valid_configs() {
        let grid = hyperparameter_grid();
        assert_eq!(grid.len(), 6);
        for p in grid {
            p.apply(&ModelConfig::standard()).validate().unwrap();
        }
    }
}
