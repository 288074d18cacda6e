//! Scene loading, clip sampling and auxiliary inputs (flow, lanes,
//! segmentation), plus a synthetic scene generator with rule-derived labels.

mod flow;
mod lanes;
mod loader;
mod manifest;
mod synthetic;

use std::collections::BTreeMap;
use std::path::PathBuf;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use flow::{compute_flow, estimate_flow, render_flow, FlowField, GrayImage};
pub use lanes::{encode_lanes, LaneInput, Polyline};
pub use loader::{
    clip_end_frames, load_dataset, load_scene, read_annotations, sample_clip, write_annotations,
    ClipOptions,
};
pub use manifest::{Manifest, ManifestScene, ManifestTotals, Splits};
pub use synthetic::{generate_synthetic, ImportanceRule, SyntheticConfig};

/// Native frame rate of TOI recordings.
pub const TOI_FPS: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(crate::Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Axis-aligned box in pixels, `(x_min, y_min, x_max, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn is_well_formed(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        BBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    pub fn scale(&self, sx: f64, sy: f64) -> BBox {
        BBox {
            x_min: self.x_min * sx,
            y_min: self.y_min * sy,
            x_max: self.x_max * sx,
            y_max: self.y_max * sy,
        }
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub track_id: u32,
    pub bbox: BBox,
    pub important: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRef {
    pub index: usize,
    pub path: PathBuf,
}

/// One annotated scene. Frames are referenced, not decoded.
#[derive(Clone, Debug)]
pub struct SceneRecord {
    pub scene_id: String,
    pub dir: PathBuf,
    /// Strictly increasing frame indices.
    pub frames: Vec<FrameRef>,
    pub annotations: BTreeMap<usize, Vec<ObjectAnnotation>>,
    /// Ego yaw rate per frame, in dataset units.
    pub ego_angular_velocity: BTreeMap<usize, f64>,
    pub fps: f64,
    pub native_size: (u32, u32),
}

impl SceneRecord {
    pub fn frame(&self, index: usize) -> Option<&FrameRef> {
        self.frames
            .binary_search_by_key(&index, |f| f.index)
            .ok()
            .map(|i| &self.frames[i])
    }

    pub fn object_count(&self) -> usize {
        self.annotations.values().map(Vec::len).sum()
    }
}

/// Per-object, per-frame boxes of a clip in resized coordinates.
///
/// Frames where a track is absent hold a zero box and `valid = false`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBoxes {
    objects: usize,
    frames: usize,
    coords: Vec<BBox>,
    valid: Vec<bool>,
}

impl ClipBoxes {
    pub fn new(objects: usize, frames: usize) -> Self {
        Self {
            objects,
            frames,
            coords: vec![BBox::default(); objects * frames],
            valid: vec![false; objects * frames],
        }
    }

    pub fn objects(&self) -> usize {
        self.objects
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn set(&mut self, object: usize, frame: usize, bbox: BBox) {
        let i = object * self.frames + frame;
        self.coords[i] = bbox;
        self.valid[i] = true;
    }

    pub fn get(&self, object: usize, frame: usize) -> Option<BBox> {
        let i = object * self.frames + frame;
        self.valid[i].then_some(self.coords[i])
    }

    /// The stored box, zero when invalid.
    pub fn raw(&self, object: usize, frame: usize) -> BBox {
        self.coords[object * self.frames + frame]
    }

    pub fn is_valid(&self, object: usize, frame: usize) -> bool {
        self.valid[object * self.frames + frame]
    }

    /// Reorders the object axis: new object `i` is old object `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> ClipBoxes {
        let mut out = ClipBoxes::new(order.len(), self.frames);
        for (new, &old) in order.iter().enumerate() {
            for t in 0..self.frames {
                if let Some(b) = self.get(old, t) {
                    out.set(new, t, b);
                }
            }
        }
        out
    }
}

/// One T-frame window: the unit of inference.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub scene_id: String,
    pub t_end: usize,
    /// `(T, 3, H, W)`, normalized RGB.
    pub frames: Tensor,
    /// `(T, 3, H, W)`, normalized flow rendering.
    pub flow: Tensor,
    pub boxes: ClipBoxes,
    pub lanes: LaneInput,
    /// `(3, H, W)`, normalized color-coded segmentation of the last frame.
    pub seg_map: Tensor,
    /// Ego angular velocity at the clip's first frame.
    pub ego_velocity: f64,
    pub track_ids: Vec<u32>,
    pub labels: Vec<bool>,
}

impl ClipSample {
    pub fn num_objects(&self) -> usize {
        self.labels.len()
    }

    pub fn clip_len(&self) -> usize {
        self.boxes.frames()
    }

    /// Same clip with the object axis reordered.
    pub fn permuted(&self, order: &[usize]) -> ClipSample {
        ClipSample {
            boxes: self.boxes.permuted(order),
            track_ids: order.iter().map(|&i| self.track_ids[i]).collect(),
            labels: order.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }
}
