//! On-road object importance estimation with intention, semantics and
//! traffic-rule guidance on top of a bottom-up object feature extractor.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod disg;
pub mod error;
pub mod eval;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ofe;
pub mod overlay;
pub mod train;
pub mod trg;

pub use candle_core as candle;
pub use config::{AblationPreset, ExperimentConfig, ModelConfig, TrainConfig};
pub use dataset::{BBox, ClipSample, SceneRecord, Split};
pub use disg::{IntentionMask, IntentionMasks, MaskKind};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalReport};
pub use model::{ForwardOptions, ForwardTrace, ImportanceModel};
pub use train::{EpochLog, Trainer};
pub use trg::GateMode;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
