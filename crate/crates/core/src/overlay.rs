//! Qualitative overlays: red boxes for important objects, green for the
//! rest, and an optional gate tint (blue penalized, yellow enabled).

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, SceneRecord};
use crate::error::{Error, Result};

pub const IMPORTANT: Rgb<u8> = Rgb([230, 30, 30]);
pub const UNIMPORTANT: Rgb<u8> = Rgb([30, 200, 60]);
pub const PENALIZED: Rgb<u8> = Rgb([40, 90, 255]);
pub const ENABLED: Rgb<u8> = Rgb([220, 170, 0]);

/// Opacity of the gate tint.
pub const TINT_OPACITY: f32 = 0.4;
const LINE_WIDTH: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlayObject {
    /// Box in the frame's pixel coordinates.
    pub bbox: BBox,
    pub score: f64,
    pub p_c: Option<f64>,
}

/// Gate decision of one object, keyed by track id on export.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub p: f64,
    pub p_c: f64,
}

pub fn box_color(score: f64, threshold: f64) -> Rgb<u8> {
    if score >= threshold {
        IMPORTANT
    } else {
        UNIMPORTANT
    }
}

/// Tint for a gate coefficient: any penalty below 1 is shown blue.
pub fn tint_color(p_c: f64) -> Rgb<u8> {
    if p_c < 1.0 {
        PENALIZED
    } else {
        ENABLED
    }
}

/// Pixel bounds `[x0, x1) x [y0, y1)` of a box clipped to the image.
fn pixel_bounds(b: &BBox, w: u32, h: u32) -> Option<(u32, u32, u32, u32)> {
    let clip = |v: f64, hi: u32| v.round().clamp(0.0, hi as f64) as u32;
    let (x0, x1) = (clip(b.x_min, w), clip(b.x_max, w));
    let (y0, y1) = (clip(b.y_min, h), clip(b.y_max, h));
    (x1 > x0 && y1 > y0).then_some((x0, x1, y0, y1))
}

fn blend(px: &mut Rgb<u8>, c: Rgb<u8>, a: f32) {
    for k in 0..3 {
        px.0[k] = (px.0[k] as f32 * (1.0 - a) + c.0[k] as f32 * a).round() as u8;
    }
}

/// Draws every object onto a copy of `frame`.
pub fn render_overlay(frame: &RgbImage, objects: &[OverlayObject], threshold: f64) -> RgbImage {
    let mut img = frame.clone();
    let (w, h) = img.dimensions();
    for obj in objects {
        let Some((x0, x1, y0, y1)) = pixel_bounds(&obj.bbox, w, h) else {
            continue;
        };
        if let Some(p_c) = obj.p_c {
            let tint = tint_color(p_c);
            for y in y0..y1 {
                for x in x0..x1 {
                    blend(img.get_pixel_mut(x, y), tint, TINT_OPACITY);
                }
            }
        }
        let color = box_color(obj.score, threshold);
        for y in y0..y1 {
            for x in x0..x1 {
                let edge = x < x0 + LINE_WIDTH || x + LINE_WIDTH >= x1 || y < y0 + LINE_WIDTH || y + LINE_WIDTH >= y1;
                if edge {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img
}

pub fn save_overlay(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Overlay of one scene frame at native resolution, with objects matched by
/// track id to that frame's annotations.
pub fn frame_overlay(
    scene: &SceneRecord,
    frame: usize,
    track_ids: &[u32],
    scores: &[f64],
    p_c: Option<&[f64]>,
    threshold: f64,
) -> Result<RgbImage> {
    let frame_ref = scene
        .frame(frame)
        .ok_or_else(|| Error::Range(format!("scene {}: frame {frame} missing", scene.scene_id)))?;
    let img = image::open(&frame_ref.path)
        .map_err(|e| Error::image(&frame_ref.path, e))?
        .to_rgb8();
    let annotated = scene.annotations.get(&frame).map(Vec::as_slice).unwrap_or_default();
    let mut objects = Vec::with_capacity(track_ids.len());
    for (i, id) in track_ids.iter().enumerate() {
        let ann = annotated.iter().find(|a| a.track_id == *id).ok_or_else(|| {
            Error::Input(format!("scene {}: track {id} not annotated at frame {frame}", scene.scene_id))
        })?;
        objects.push(OverlayObject {
            bbox: ann.bbox,
            score: scores[i],
            p_c: p_c.map(|g| g[i]),
        });
    }
    Ok(render_overlay(&img, &objects, threshold))
}

/// Gate decisions as `{track_id: {p, p_c}}` JSON.
pub fn gate_json(track_ids: &[u32], p: &[f64], p_c: &[f64]) -> Result<String> {
    if track_ids.len() != p.len() || p.len() != p_c.len() {
        return Err(Error::Shape(format!(
            "{} tracks, {} gate scores, {} coefficients",
            track_ids.len(),
            p.len(),
            p_c.len()
        )));
    }
    let map: BTreeMap<String, GateRecord> = track_ids
        .iter()
        .zip(p.iter().zip(p_c))
        .map(|(id, (&p, &p_c))| (id.to_string(), GateRecord { p, p_c }))
        .collect();
    Ok(serde_json::to_string_pretty(&map)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray() -> RgbImage {
        RgbImage::from_pixel(40, 30, Rgb([128, 128, 128]))
    }

    fn obj(score: f64, p_c: Option<f64>) -> OverlayObject {
        OverlayObject {
            bbox: BBox::new(10.0, 5.0, 30.0, 25.0),
            score,
            p_c,
        }
    }

    #[test]
    fn box_colors_follow_the_threshold() {
        let red = render_overlay(&gray(), &[obj(0.9, None)], 0.5);
        assert_eq!(*red.get_pixel(10, 5), IMPORTANT);
        assert_eq!(*red.get_pixel(20, 15), Rgb([128, 128, 128]));
        let green = render_overlay(&gray(), &[obj(0.1, None)], 0.5);
        assert_eq!(*green.get_pixel(29, 24), UNIMPORTANT);
        assert_eq!(*green.get_pixel(31, 24), Rgb([128, 128, 128]));
    }

    #[test]
    fn gate_tints() {
        let blue = render_overlay(&gray(), &[obj(0.9, Some(0.001))], 0.5);
        let px = blue.get_pixel(20, 15);
        assert!(px.0[2] > px.0[0] && px.0[2] > px.0[1]);
        let yellow = render_overlay(&gray(), &[obj(0.9, Some(1.0))], 0.5);
        let px = yellow.get_pixel(20, 15);
        assert!(px.0[0] > px.0[2] && px.0[1] > px.0[2]);
    }

    #[test]
    fn gate_export_keys_by_track() {
        let s = gate_json(&[7, 3], &[0.9, 0.2], &[0.001, 1.0]).unwrap();
        let v: BTreeMap<String, GateRecord> = serde_json::from_str(&s).unwrap();
        assert_eq!(v["7"], GateRecord { p: 0.9, p_c: 0.001 });
        assert_eq!(v["3"].p_c, 1.0);
        assert!(gate_json(&[1], &[0.5, 0.5], &[1.0]).is_err());
    }
}
