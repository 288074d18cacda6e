//! Desk-scale synthetic scenes with known ground truth.
//!
//! A scene is a straight road seen from the ego car: an oncoming lane, the
//! ego lane and a right shoulder between off-road strips. Objects are filled
//! ellipses moving at constant velocity. The generator writes the same layout
//! as a real dataset (frames, flow, segmentation, lanes, ego yaw rate,
//! annotations, manifest) and derives every importance label from a
//! geometric rule evaluated on the object's final position and velocity.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::flow::{render_flow, FlowField};
use super::lanes::Polyline;
use super::loader::{
    frame_file, write_annotations, LaneFile, ANNOTATIONS_FILE, EGO_FILE, FLOW_DIR, FRAMES_DIR,
    LANES_DIR, SEG_DIR,
};
use super::manifest::{Manifest, ManifestScene, Splits, MANIFEST_VERSION};
use super::{BBox, ObjectAnnotation, TOI_FPS};
use crate::error::{Error, Result};

/// Lane marking positions as fractions of the image width. The side lanes
/// fill the outer quarters, one intention-mask column each on a 4-wide grid.
pub const MARKINGS: [f64; 4] = [0.0625, 0.25, 0.75, 0.9375];
const HORIZON: f64 = 0.35;
/// Frames ahead an object may take to reach the ego path and still count.
pub const COLLISION_HORIZON: usize = 8;
/// Minimum distance of a final object center from any marking.
const CENTER_MARGIN: f64 = 0.045;
/// Body extent as a fraction of the box width and height.
const BODY_WIDTH: f64 = 0.85;
const BODY_HEIGHT: f64 = 0.65;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceRule {
    /// Important when the object is on, or about to enter, the region the ego
    /// car's intended path conflicts with: the ego lane, widened to the side
    /// opposite the turn.
    IntentionPathCollision,
    /// Important when the object is on the drivable carriageway.
    DrivableArea,
    /// Important in the ego lane, or in the oncoming lane when the marking
    /// between them is dashed.
    LaneBarrier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_clips: usize,
    /// Inclusive range of objects per scene.
    pub n_objects_range: [usize; 2],
    pub importance_rule: ImportanceRule,
    pub seed: u64,
    pub image_size: usize,
    pub frames_per_scene: usize,
    pub test_fraction: f64,
    /// Turning threshold used by the labelling rule.
    pub beta: f64,
    /// Flow magnitude (pixels) rendered at full brightness.
    pub flow_scale: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_clips: 32,
            n_objects_range: [4, 8],
            importance_rule: ImportanceRule::IntentionPathCollision,
            seed: 0,
            image_size: 64,
            frames_per_scene: 4,
            test_fraction: 0.25,
            beta: 2.2,
            flow_scale: 4.0,
        }
    }
}

/// Scene-level inputs to a labelling rule.
#[derive(Clone, Copy, Debug)]
pub struct RuleContext {
    pub ego_velocity: f64,
    pub beta: f64,
    /// Whether the marking between the oncoming and ego lanes is dashed.
    pub barrier_dashed: bool,
}

impl RuleContext {
    /// Horizontal extent of the region the ego path conflicts with, as width
    /// fractions. A left turn (positive yaw rate) crosses traffic arriving
    /// from the right, so the corridor widens to the right, and vice versa.
    pub fn intention_corridor(&self) -> (f64, f64) {
        if self.ego_velocity > self.beta {
            (MARKINGS[1], MARKINGS[3])
        } else if self.ego_velocity < -self.beta {
            (MARKINGS[0], MARKINGS[2])
        } else {
            (MARKINGS[1], MARKINGS[2])
        }
    }
}

impl ImportanceRule {
    /// Label for an object centered at `cx` moving `vx` per frame (width
    /// fractions).
    pub fn is_important(self, ctx: &RuleContext, cx: f64, vx: f64) -> bool {
        let inside = |(lo, hi): (f64, f64), x: f64| lo <= x && x < hi;
        match self {
            ImportanceRule::IntentionPathCollision => {
                let corridor = ctx.intention_corridor();
                (0..=COLLISION_HORIZON).any(|k| inside(corridor, cx + vx * k as f64))
            }
            ImportanceRule::DrivableArea => inside((MARKINGS[0], MARKINGS[2]), cx),
            ImportanceRule::LaneBarrier => {
                inside((MARKINGS[1], MARKINGS[2]), cx)
                    || (ctx.barrier_dashed && inside((MARKINGS[0], MARKINGS[1]), cx))
            }
        }
    }
}

#[derive(Clone, Debug)]
struct SynthObject {
    track_id: u32,
    /// Center at the last frame, as fractions of the image side.
    end_center: (f64, f64),
    size: (f64, f64),
    velocity: (f64, f64),
    color: [u8; 3],
}

impl SynthObject {
    fn center_at(&self, frame: usize, last: usize) -> (f64, f64) {
        let back = (last - frame) as f64;
        (
            self.end_center.0 - self.velocity.0 * back,
            self.end_center.1 - self.velocity.1 * back,
        )
    }
}

struct SynthScene {
    id: String,
    ego_velocity: f64,
    barrier_dashed: bool,
    objects: Vec<SynthObject>,
}

const PALETTE: [[u8; 3]; 8] = [
    [220, 40, 40],
    [40, 90, 230],
    [240, 210, 40],
    [40, 210, 220],
    [210, 60, 200],
    [250, 140, 30],
    [245, 245, 245],
    [30, 30, 30],
];

mod seg_colors {
    pub const SKY: [u8; 3] = [70, 130, 180];
    pub const VEGETATION: [u8; 3] = [107, 142, 35];
    pub const ROAD: [u8; 3] = [128, 64, 128];
    pub const SIDEWALK: [u8; 3] = [244, 35, 232];
    pub const MARKING: [u8; 3] = [255, 255, 255];
    pub const VEHICLE: [u8; 3] = [0, 0, 142];
}

fn sample_ego(rng: &mut ChaCha8Rng) -> f64 {
    let r: f64 = rng.gen();
    if r < 0.4 {
        rng.gen_range(-1.5..1.5)
    } else if r < 0.7 {
        rng.gen_range(2.8..4.0)
    } else {
        rng.gen_range(-4.0..-2.8)
    }
}

fn sample_in_lane(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo + CENTER_MARGIN..hi - CENTER_MARGIN)
}

fn sample_object(rng: &mut ChaCha8Rng, track_id: u32) -> SynthObject {
    let w = rng.gen_range(0.10..0.16);
    let h = rng.gen_range(0.08..0.14);
    let cy = rng.gen_range(HORIZON + h / 2.0 + 0.02..1.0 - h / 2.0 - 0.02);
    let longitudinal = rng.gen_range(-0.015..0.015);
    let lateral = rng.gen_range(0.028..0.04);
    let r: f64 = rng.gen();
    let (cx, vx) = if r < 0.25 {
        (sample_in_lane(rng, MARKINGS[0], MARKINGS[1]), 0.0)
    } else if r < 0.45 {
        (sample_in_lane(rng, MARKINGS[1], MARKINGS[2]), 0.0)
    } else if r < 0.70 {
        (sample_in_lane(rng, MARKINGS[2], MARKINGS[3]), 0.0)
    } else if r < 0.85 {
        // parked off-road on either side
        if rng.gen_bool(0.5) {
            (rng.gen_range(0.0..MARKINGS[0] - CENTER_MARGIN / 2.0), 0.0)
        } else {
            (rng.gen_range(MARKINGS[3] + CENTER_MARGIN / 2.0..1.0), 0.0)
        }
    } else {
        // lateral mover in a side lane, heading toward or away from the ego lane
        let left_side = rng.gen_bool(0.5);
        let toward = rng.gen_bool(0.5);
        let cx = if left_side {
            sample_in_lane(rng, MARKINGS[0], MARKINGS[1])
        } else {
            sample_in_lane(rng, MARKINGS[2], MARKINGS[3])
        };
        let dir = if left_side == toward { 1.0 } else { -1.0 };
        (cx, dir * lateral)
    };
    SynthObject {
        track_id,
        end_center: (cx, cy),
        size: (w, h),
        velocity: (vx, if vx == 0.0 { longitudinal } else { 0.0 }),
        color: *PALETTE.choose(rng).expect("palette is non-empty"),
    }
}

fn object_box(obj: &SynthObject, frame: usize, last: usize, side: f64) -> BBox {
    let (cx, cy) = obj.center_at(frame, last);
    let (w, h) = obj.size;
    let round = |v: f64| (v * side * 100.0).round() / 100.0;
    BBox::new(
        round(cx - w / 2.0),
        round(cy - h / 2.0),
        round(cx + w / 2.0),
        round(cy + h / 2.0),
    )
}

/// Vehicle body inside its box. Boxes are loose: the body sits in the lower
/// part, leaving a band of the road surface visible above it.
fn in_body(b: &BBox, x: f64, y: f64) -> bool {
    let (cx, cy) = b.center();
    let rx = BODY_WIDTH * b.width() / 2.0;
    let ry = BODY_HEIGHT * b.height() / 2.0;
    let dx = (x - cx) / rx;
    let dy = (y - (cy + (1.0 - BODY_HEIGHT) * b.height() / 2.0)) / ry;
    dx * dx + dy * dy <= 1.0
}

fn marking_at(xf: f64, yf: f64, side: f64, barrier_dashed: bool) -> Option<[u8; 3]> {
    let px = 1.0 / side;
    for (i, &m) in MARKINGS.iter().enumerate() {
        if (xf - m).abs() < 0.5 * px + 1e-9 {
            let dashed = i == 1 && barrier_dashed;
            if dashed && ((yf * side) as usize / 3) % 2 == 1 {
                return None;
            }
            return Some(if i == 1 && !barrier_dashed {
                [230, 200, 40]
            } else {
                [240, 240, 240]
            });
        }
    }
    None
}

fn background(xf: f64, yf: f64, side: f64, barrier_dashed: bool) -> ([u8; 3], [u8; 3]) {
    use seg_colors::*;
    if yf < HORIZON {
        return ([140, 180, 230], SKY);
    }
    if let Some(c) = marking_at(xf, yf, side, barrier_dashed) {
        return (c, MARKING);
    }
    if xf < MARKINGS[0] || xf >= MARKINGS[3] {
        ([64, 128, 50], VEGETATION)
    } else if xf < MARKINGS[1] {
        ([78, 78, 84], ROAD)
    } else if xf < MARKINGS[2] {
        ([108, 108, 112], ROAD)
    } else {
        ([155, 140, 115], SIDEWALK)
    }
}

struct RenderedFrame {
    rgb: RgbImage,
    seg: RgbImage,
    flow: FlowField,
}

fn render_frame(scene: &SynthScene, frame: usize, last: usize, size: usize) -> RenderedFrame {
    let side = size as f64;
    let mut rgb = RgbImage::new(size as u32, size as u32);
    let mut seg = RgbImage::new(size as u32, size as u32);
    let mut flow = FlowField::zeros(size, size);
    // far objects first so nearer ones (larger y) paint over them
    let mut order: Vec<&SynthObject> = scene.objects.iter().collect();
    order.sort_by(|a, b| {
        a.center_at(frame, last)
            .1
            .total_cmp(&b.center_at(frame, last).1)
    });
    let boxes: Vec<BBox> = order
        .iter()
        .map(|o| object_box(o, frame, last, side))
        .collect();
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (mut color, mut class) = background(px / side, py / side, side, scene.barrier_dashed);
            let mut motion = (0.0, 0.0);
            for (obj, b) in order.iter().zip(&boxes) {
                if in_body(b, px, py) {
                    color = obj.color;
                    class = seg_colors::VEHICLE;
                    motion = obj.velocity;
                }
            }
            rgb.put_pixel(x as u32, y as u32, Rgb(color));
            seg.put_pixel(x as u32, y as u32, Rgb(class));
            if frame > 0 {
                let i = y * size + x;
                flow.u[i] = (motion.0 * side) as f32;
                flow.v[i] = (motion.1 * side) as f32;
            }
        }
    }
    RenderedFrame { rgb, seg, flow }
}

fn flow_image(flow: &FlowField, scale: f32) -> RgbImage {
    let planes = render_flow(flow, scale);
    let plane = flow.width * flow.height;
    let mut img = RgbImage::new(flow.width as u32, flow.height as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = (planes[c * plane + i] * 255.0).round() as u8;
        }
    }
    img
}

fn lane_polylines(side: f64) -> Vec<Polyline> {
    MARKINGS
        .iter()
        .map(|&m| {
            (0..=8)
                .map(|k| {
                    let y = HORIZON + (1.0 - HORIZON) * k as f64 / 8.0;
                    [(m * side) as f32, (y * side).min(side - 1.0) as f32]
                })
                .collect()
        })
        .collect()
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::image(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_scene(scene: &SynthScene, cfg: &SyntheticConfig, root: &Path) -> Result<ManifestScene> {
    let dir = root.join(&scene.id);
    for sub in [FRAMES_DIR, FLOW_DIR, SEG_DIR, LANES_DIR] {
        create_dir(&dir.join(sub))?;
    }
    let size = cfg.image_size;
    let side = size as f64;
    let last = cfg.frames_per_scene - 1;
    let ctx = RuleContext {
        ego_velocity: scene.ego_velocity,
        beta: cfg.beta,
        barrier_dashed: scene.barrier_dashed,
    };
    let lanes = LaneFile {
        lanes: lane_polylines(side),
    };
    let lanes_json = serde_json::to_string(&lanes)?;
    let mut annotations: BTreeMap<usize, Vec<ObjectAnnotation>> = BTreeMap::new();
    let mut ego_csv = String::from("frame,angular_velocity\n");
    for frame in 0..cfg.frames_per_scene {
        let rendered = render_frame(scene, frame, last, size);
        let name = frame_file(frame, "png");
        save_png(&rendered.rgb, &dir.join(FRAMES_DIR).join(&name))?;
        save_png(&rendered.seg, &dir.join(SEG_DIR).join(&name))?;
        save_png(
            &flow_image(&rendered.flow, cfg.flow_scale),
            &dir.join(FLOW_DIR).join(&name),
        )?;
        let lanes_path = dir.join(LANES_DIR).join(frame_file(frame, "json"));
        std::fs::write(&lanes_path, &lanes_json).map_err(|e| Error::io(&lanes_path, e))?;
        ego_csv.push_str(&format!("{frame},{:.4}\n", scene.ego_velocity));

        let objects: Vec<ObjectAnnotation> = scene
            .objects
            .iter()
            .filter_map(|o| {
                let b = object_box(o, frame, last, side).clamp_to(side, side);
                if b.width() < 2.0 || b.height() < 2.0 {
                    return None;
                }
                let (cx, _) = o.center_at(frame, last);
                Some(ObjectAnnotation {
                    track_id: o.track_id,
                    bbox: b,
                    important: cfg.importance_rule.is_important(&ctx, cx, o.velocity.0),
                })
            })
            .collect();
        if !objects.is_empty() {
            annotations.insert(frame, objects);
        }
    }
    let ego_path = dir.join(EGO_FILE);
    std::fs::write(&ego_path, ego_csv).map_err(|e| Error::io(&ego_path, e))?;
    write_annotations(&dir.join(ANNOTATIONS_FILE), &annotations)?;
    Ok(ManifestScene {
        id: scene.id.clone(),
        frames: cfg.frames_per_scene,
        objects: annotations.values().map(Vec::len).sum(),
    })
}

fn validate(cfg: &SyntheticConfig) -> Result<()> {
    let [lo, hi] = cfg.n_objects_range;
    if cfg.n_clips == 0 {
        return Err(Error::Config("n_clips must be positive".into()));
    }
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!(
            "invalid object range [{lo}, {hi}]"
        )));
    }
    if cfg.image_size < 16 || cfg.frames_per_scene == 0 {
        return Err(Error::Config(
            "image_size must be >= 16 and frames_per_scene positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
    }
    Ok(())
}

/// Writes a synthetic dataset to `out` and returns its manifest. Output is a
/// pure function of the config (byte-identical across runs).
pub fn generate_synthetic(cfg: &SyntheticConfig, out: &Path) -> Result<Manifest> {
    validate(cfg)?;
    create_dir(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scenes: Vec<SynthScene> = (0..cfg.n_clips)
        .map(|i| {
            let n = rng.gen_range(cfg.n_objects_range[0]..=cfg.n_objects_range[1]);
            SynthScene {
                id: format!("scene_{i:04}"),
                ego_velocity: sample_ego(&mut rng),
                barrier_dashed: rng.gen_bool(0.5),
                objects: (0..n).map(|k| sample_object(&mut rng, k as u32)).collect(),
            }
        })
        .collect();

    let mut ids: Vec<String> = scenes.iter().map(|s| s.id.clone()).collect();
    ids.shuffle(&mut rng);
    let n_test = ((cfg.n_clips as f64) * cfg.test_fraction).round() as usize;
    let mut test: Vec<String> = ids[..n_test].to_vec();
    let mut train: Vec<String> = ids[n_test..].to_vec();
    test.sort();
    train.sort();

    let entries = scenes
        .iter()
        .map(|s| write_scene(s, cfg, out))
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = Manifest {
        version: MANIFEST_VERSION,
        fps: TOI_FPS,
        image_width: cfg.image_size as u32,
        image_height: cfg.image_size as u32,
        scenes: entries,
        splits: Splits { train, test },
        totals: Default::default(),
    };
    manifest.recompute_totals();
    manifest.write(out)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(ego: f64) -> RuleContext {
        RuleContext {
            ego_velocity: ego,
            beta: 2.2,
            barrier_dashed: false,
        }
    }

    #[test]
    fn crossing_object_is_important() {
        // shoulder object moving left into the ego lane
        let rule = ImportanceRule::IntentionPathCollision;
        assert!(rule.is_important(&ctx(0.0), 0.85, -0.03));
        assert!(!rule.is_important(&ctx(0.0), 0.85, 0.03));
        assert!(!rule.is_important(&ctx(0.0), 0.85, 0.0));
    }

    #[test]
    fn corridor_widens_against_the_turn() {
        let rule = ImportanceRule::IntentionPathCollision;
        let oncoming = 0.15;
        let shoulder = 0.85;
        assert!(rule.is_important(&ctx(3.0), shoulder, 0.0));
        assert!(!rule.is_important(&ctx(3.0), oncoming, 0.0));
        assert!(rule.is_important(&ctx(-3.0), oncoming, 0.0));
        assert!(!rule.is_important(&ctx(-3.0), shoulder, 0.0));
        // exactly at the threshold counts as straight
        assert!(!rule.is_important(&ctx(2.2), shoulder, 0.0));
        assert!(rule.is_important(&ctx(2.2), 0.5, 0.0));
    }

    #[test]
    fn barrier_rule_depends_on_marking_type() {
        let rule = ImportanceRule::LaneBarrier;
        let mut c = ctx(0.0);
        assert!(!rule.is_important(&c, 0.15, 0.0));
        c.barrier_dashed = true;
        assert!(rule.is_important(&c, 0.15, 0.0));
        assert!(rule.is_important(&c, 0.5, 0.0));
    }

    #[test]
    fn drivable_area_excludes_shoulder_and_verge() {
        let rule = ImportanceRule::DrivableArea;
        assert!(rule.is_important(&ctx(0.0), 0.2, 0.0));
        assert!(!rule.is_important(&ctx(0.0), 0.85, 0.0));
        assert!(!rule.is_important(&ctx(0.0), 0.03, 0.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = SyntheticConfig {
            n_objects_range: [5, 2],
            ..Default::default()
        };
        assert!(validate(&bad).is_err());
        let bad = SyntheticConfig {
            n_clips: 0,
            ..Default::default()
        };
        assert!(validate(&bad).is_err());
    }
}
