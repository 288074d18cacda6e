use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use super::flow::compute_flow;
use super::lanes::{encode_lanes, Polyline};
use super::manifest::{Manifest, ManifestScene};
use super::{BBox, ClipBoxes, ClipSample, FrameRef, ObjectAnnotation, SceneRecord, Split};
use crate::config::{ModelConfig, Normalization};
use crate::error::{Error, Result};

pub(crate) const FRAMES_DIR: &str = "frames";
pub(crate) const FLOW_DIR: &str = "flow";
pub(crate) const SEG_DIR: &str = "seg";
pub(crate) const LANES_DIR: &str = "lanes";
pub(crate) const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub(crate) const EGO_FILE: &str = "ego.csv";

pub(crate) fn frame_file(index: usize, ext: &str) -> String {
    format!("{index:06}.{ext}")
}

/// Loads every scene of `split`, in manifest order.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<SceneRecord>> {
    let manifest = Manifest::read(root)?;
    manifest
        .splits
        .get(split)
        .iter()
        .map(|id| {
            let entry = manifest
                .scene(id)
                .ok_or_else(|| Error::Format(format!("unknown scene `{id}`")))?;
            load_scene_entry(root, &manifest, entry)
        })
        .collect()
}

/// Loads a single scene of the dataset rooted at `root`.
pub fn load_scene(root: &Path, scene_id: &str) -> Result<SceneRecord> {
    let manifest = Manifest::read(root)?;
    let entry = manifest
        .scene(scene_id)
        .ok_or_else(|| Error::Format(format!("manifest has no scene `{scene_id}`")))?;
    load_scene_entry(root, &manifest, entry)
}

fn load_scene_entry(root: &Path, manifest: &Manifest, entry: &ManifestScene) -> Result<SceneRecord> {
    let dir = root.join(&entry.id);
    let frames = list_frames(&dir.join(FRAMES_DIR))?;
    if frames.len() != entry.frames {
        return Err(Error::Format(format!(
            "scene {}: manifest lists {} frames, found {}",
            entry.id,
            entry.frames,
            frames.len()
        )));
    }
    let native = (manifest.image_width, manifest.image_height);
    let annotations = read_annotations(&dir.join(ANNOTATIONS_FILE), &entry.id, native)?;
    let known: HashSet<usize> = frames.iter().map(|f| f.index).collect();
    if let Some(&frame) = annotations.keys().find(|f| !known.contains(f)) {
        return Err(Error::Annotation {
            scene: entry.id.clone(),
            frame,
            message: "annotation refers to a missing frame".into(),
        });
    }
    let ego_angular_velocity = read_ego(&dir.join(EGO_FILE), &entry.id)?;
    Ok(SceneRecord {
        scene_id: entry.id.clone(),
        dir,
        frames,
        annotations,
        ego_angular_velocity,
        fps: manifest.fps,
        native_size: native,
    })
}

fn list_frames(dir: &Path) -> Result<Vec<FrameRef>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let Some(stem) = name.strip_suffix(".png") else {
            continue;
        };
        if stem.len() != 6 || !stem.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        frames.push(FrameRef {
            index: stem.parse().expect("six ascii digits"),
            path: entry.path(),
        });
    }
    frames.sort_by_key(|f| f.index);
    Ok(frames)
}

#[derive(Serialize, Deserialize)]
struct AnnotationRow {
    frame: usize,
    track_id: u32,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    importance: u8,
}

/// Reads `annotations.jsonl`; boxes are clamped to the native image size.
pub fn read_annotations(
    path: &Path,
    scene: &str,
    native: (u32, u32),
) -> Result<BTreeMap<usize, Vec<ObjectAnnotation>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: BTreeMap<usize, Vec<ObjectAnnotation>> = BTreeMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("scene {scene}, line {}: {e}", lineno + 1))
        })?;
        let frame = value
            .get("frame")
            .and_then(|f| f.as_u64())
            .ok_or_else(|| {
                Error::Format(format!(
                    "scene {scene}, line {}: missing frame index",
                    lineno + 1
                ))
            })? as usize;
        let bad = |message: String| Error::Annotation {
            scene: scene.to_owned(),
            frame,
            message,
        };
        let row: AnnotationRow =
            serde_json::from_value(value).map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?;
        let bbox = BBox::from(row.bbox);
        if !bbox.is_well_formed() {
            return Err(bad(format!(
                "track {}: degenerate box {:?}",
                row.track_id, row.bbox
            )));
        }
        if row.importance > 1 {
            return Err(bad(format!(
                "track {}: importance must be 0 or 1, got {}",
                row.track_id, row.importance
            )));
        }
        let clamped = bbox.clamp_to(native.0 as f64, native.1 as f64);
        if !clamped.is_well_formed() {
            return Err(bad(format!(
                "track {}: box {:?} lies outside the image",
                row.track_id, row.bbox
            )));
        }
        let objects = out.entry(frame).or_default();
        if objects.iter().any(|o| o.track_id == row.track_id) {
            return Err(bad(format!("track {} annotated twice", row.track_id)));
        }
        objects.push(ObjectAnnotation {
            track_id: row.track_id,
            bbox: clamped,
            important: row.importance == 1,
        });
    }
    Ok(out)
}

/// Writes annotations as JSON lines ordered by frame, then insertion order.
pub fn write_annotations(
    path: &Path,
    annotations: &BTreeMap<usize, Vec<ObjectAnnotation>>,
) -> Result<()> {
    let mut buf = Vec::new();
    for (&frame, objects) in annotations {
        for o in objects {
            let row = AnnotationRow {
                frame,
                track_id: o.track_id,
                bbox: o.bbox.into(),
                importance: o.important as u8,
            };
            serde_json::to_writer(&mut buf, &row)?;
            buf.push(b'\n');
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct EgoRow {
    frame: usize,
    angular_velocity: f64,
}

fn read_ego(path: &Path, scene: &str) -> Result<BTreeMap<usize, f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    })?;
    let mut out = BTreeMap::new();
    for row in reader.deserialize::<EgoRow>() {
        let row = row.map_err(|e| Error::Format(format!("scene {scene}, ego.csv: {e}")))?;
        if !row.angular_velocity.is_finite() {
            return Err(Error::Annotation {
                scene: scene.to_owned(),
                frame: row.frame,
                message: "non-finite angular velocity".into(),
            });
        }
        out.insert(row.frame, row.angular_velocity);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
pub(crate) struct LaneFile {
    pub lanes: Vec<Polyline>,
}

/// What [`sample_clip`] needs from the model configuration.
#[derive(Clone, Debug)]
pub struct ClipOptions {
    pub clip_len: usize,
    pub image_size: usize,
    pub normalization: Normalization,
    pub flow_scale: f32,
    pub max_lanes: usize,
}

impl From<&ModelConfig> for ClipOptions {
    fn from(cfg: &ModelConfig) -> Self {
        Self {
            clip_len: cfg.clip_len,
            image_size: cfg.image_size,
            normalization: cfg.normalization.clone(),
            flow_scale: cfg.flow_scale,
            max_lanes: cfg.max_lanes,
        }
    }
}

/// Reads a PNG and resizes it to `size x size`, returning `(3, H, W)` in `[0, 1]`.
fn read_rgb(path: &Path, size: usize, filter: FilterType) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let img = if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, filter)
    };
    let plane = size * size;
    let mut out = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

fn normalize(data: &mut [f32], plane: usize, norm: &Normalization) {
    for (i, v) in data.iter_mut().enumerate() {
        let c = (i / plane) % 3;
        *v = (*v - norm.mean[c]) / norm.std[c];
    }
}

/// Clip end frames evaluated for a scene: every `stride`-th frame starting at
/// the first full window, restricted to frames with annotated objects.
pub fn clip_end_frames(scene: &SceneRecord, clip_len: usize, stride: usize) -> Vec<usize> {
    let Some(first) = scene.frames.first().map(|f| f.index) else {
        return Vec::new();
    };
    let start = first + clip_len.saturating_sub(1);
    scene
        .annotations
        .iter()
        .filter(|(&t, objs)| !objs.is_empty() && t >= start && (t - start) % stride.max(1) == 0)
        .map(|(&t, _)| t)
        .filter(|&t| (t + 1 - clip_len..=t).all(|i| scene.frame(i).is_some()))
        .collect()
}

/// Builds the `clip_len`-frame window ending at `t_end`.
pub fn sample_clip(scene: &SceneRecord, t_end: usize, opts: &ClipOptions) -> Result<ClipSample> {
    let t = opts.clip_len;
    if t == 0 || t_end + 1 < t {
        return Err(Error::Range(format!(
            "clip of {t} frames cannot end at frame {t_end}"
        )));
    }
    let start = t_end + 1 - t;
    let frame_refs: Vec<&FrameRef> = (start..=t_end)
        .map(|i| {
            scene.frame(i).ok_or_else(|| {
                Error::Range(format!("scene {}: frame {i} missing", scene.scene_id))
            })
        })
        .collect::<Result<_>>()?;

    let mut objects: Vec<&ObjectAnnotation> = scene
        .annotations
        .get(&t_end)
        .map(|v| v.iter().collect())
        .unwrap_or_default();
    if objects.is_empty() {
        return Err(Error::Range(format!(
            "scene {}: no annotated objects at frame {t_end}",
            scene.scene_id
        )));
    }
    objects.sort_by_key(|o| o.track_id);

    let size = opts.image_size;
    let sx = size as f64 / scene.native_size.0 as f64;
    let sy = size as f64 / scene.native_size.1 as f64;
    let mut boxes = ClipBoxes::new(objects.len(), t);
    for (i, obj) in objects.iter().enumerate() {
        for k in 0..t {
            let found = scene
                .annotations
                .get(&(start + k))
                .and_then(|v| v.iter().find(|o| o.track_id == obj.track_id));
            if let Some(a) = found {
                boxes.set(i, k, a.bbox.scale(sx, sy));
            }
        }
    }

    let plane = size * size;
    let mut frames = Vec::with_capacity(t * 3 * plane);
    for f in &frame_refs {
        frames.extend(read_rgb(&f.path, size, FilterType::Triangle)?);
    }

    let flow_paths: Vec<PathBuf> = (start..=t_end)
        .map(|i| scene.dir.join(FLOW_DIR).join(frame_file(i, "png")))
        .collect();
    let mut flow = if flow_paths.iter().all(|p| p.is_file()) {
        let mut buf = Vec::with_capacity(t * 3 * plane);
        for p in &flow_paths {
            buf.extend(read_rgb(p, size, FilterType::Triangle)?);
        }
        buf
    } else {
        // Prepend the preceding frame when available so the first entry is a
        // real flow rather than the zero field.
        let prev = start.checked_sub(1).and_then(|i| scene.frame(i));
        let mut raw = Vec::with_capacity((t + 1) * 3 * plane);
        if let Some(p) = prev {
            raw.extend(read_rgb(&p.path, size, FilterType::Triangle)?);
        }
        raw.extend_from_slice(&frames);
        let n = raw.len() / (3 * plane);
        let computed = if n >= 2 {
            let tensor = Tensor::from_vec(raw, (n, 3, size, size), &Device::Cpu)?;
            compute_flow(&tensor, opts.flow_scale)?
                .flatten_all()?
                .to_vec1::<f32>()?
        } else {
            vec![0.0; 3 * plane]
        };
        computed[(n - t) * 3 * plane..].to_vec()
    };

    let seg_path = scene.dir.join(SEG_DIR).join(frame_file(t_end, "png"));
    if !seg_path.is_file() {
        return Err(Error::Format(format!(
            "scene {}: missing segmentation map {}",
            scene.scene_id,
            seg_path.display()
        )));
    }
    let mut seg = read_rgb(&seg_path, size, FilterType::Nearest)?;

    let lanes_path = scene.dir.join(LANES_DIR).join(frame_file(t_end, "json"));
    let polylines: Vec<Polyline> = if lanes_path.is_file() {
        let text = std::fs::read_to_string(&lanes_path).map_err(|e| Error::io(&lanes_path, e))?;
        let file: LaneFile = serde_json::from_str(&text).map_err(|e| Error::Annotation {
            scene: scene.scene_id.clone(),
            frame: t_end,
            message: format!("lanes: {e}"),
        })?;
        file.lanes
            .into_iter()
            .map(|l| {
                l.into_iter()
                    .map(|[x, y]| [(x as f64 * sx) as f32, (y as f64 * sy) as f32])
                    .collect()
            })
            .collect()
    } else {
        log::debug!("scene {}: no lanes for frame {t_end}", scene.scene_id);
        Vec::new()
    };
    let lanes = encode_lanes(&polylines, opts.max_lanes);

    let ego_velocity = *scene.ego_angular_velocity.get(&start).ok_or_else(|| {
        Error::Format(format!(
            "scene {}: no ego angular velocity for frame {start}",
            scene.scene_id
        ))
    })?;

    normalize(&mut frames, plane, &opts.normalization);
    normalize(&mut flow, plane, &opts.normalization);
    normalize(&mut seg, plane, &opts.normalization);
    let dev = Device::Cpu;
    Ok(ClipSample {
        scene_id: scene.scene_id.clone(),
        t_end,
        frames: Tensor::from_vec(frames, (t, 3, size, size), &dev)?,
        flow: Tensor::from_vec(flow, (t, 3, size, size), &dev)?,
        boxes,
        lanes,
        seg_map: Tensor::from_vec(seg, (3, size, size), &dev)?,
        ego_velocity,
        track_ids: objects.iter().map(|o| o.track_id).collect(),
        labels: objects.iter().map(|o| o.important).collect(),
    })
}
