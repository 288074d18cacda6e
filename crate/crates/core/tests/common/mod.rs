#![allow(dead_code)]

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use importance_core::config::ModelConfig;
use importance_core::dataset::{generate_synthetic, ClipBoxes, ImportanceRule, LaneInput, SyntheticConfig};
use importance_core::{BBox, ClipSample, ExperimentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n)
        .map(|_| {
            // Box-Muller
            let u1: f32 = rng.gen_range(1e-7..1.0);
            let u2: f32 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
        })
        .collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// A clip of random content with `n` objects, every object boxed in every
/// frame except for a few dropped frames when `gaps` is set.
pub fn random_clip(cfg: &ModelConfig, n: usize, seed: u64, gaps: bool) -> ClipSample {
    let mut rng = rng(seed);
    let (t, s) = (cfg.clip_len, cfg.image_size);
    let side = s as f64;
    let mut boxes = ClipBoxes::new(n, t);
    for obj in 0..n {
        let w = rng.gen_range(0.08..0.3) * side;
        let h = rng.gen_range(0.08..0.3) * side;
        let x0 = rng.gen_range(0.0..side - w);
        let y0 = rng.gen_range(0.0..side - h);
        let (dx, dy) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        for frame in 0..t {
            if gaps && frame + 1 < t && rng.gen_bool(0.2) {
                continue;
            }
            let k = frame as f64;
            let bx = (x0 + dx * k).clamp(0.0, side - w);
            let by = (y0 + dy * k).clamp(0.0, side - h);
            boxes.set(obj, frame, BBox::new(bx, by, bx + w, by + h));
        }
    }
    let mut lanes = LaneInput::empty(cfg.max_lanes);
    lanes.count = rng.gen_range(1..=cfg.max_lanes.min(4));
    for row in lanes.rows.iter_mut().take(lanes.count) {
        for v in row.iter_mut() {
            *v = rng.gen_range(0.0..side as f32);
        }
    }
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0 || rng.gen_bool(0.3)).collect();
    ClipSample {
        scene_id: format!("random_{seed}"),
        t_end: t - 1,
        frames: normal_tensor(&mut rng, &[t, 3, s, s]),
        flow: normal_tensor(&mut rng, &[t, 3, s, s]),
        boxes,
        lanes,
        seg_map: normal_tensor(&mut rng, &[3, s, s]),
        ego_velocity: rng.gen_range(-4.0..4.0),
        track_ids: (0..n as u32).collect(),
        labels,
    }
}

pub fn micro_synthetic(seed: u64, rule: ImportanceRule) -> SyntheticConfig {
    SyntheticConfig {
        importance_rule: rule,
        seed,
        ..ExperimentConfig::profile("micro").unwrap().synthetic
    }
}

/// Writes the 32-scene micro synthetic set under `dir`.
pub fn write_micro_dataset(dir: &Path, seed: u64, rule: ImportanceRule) {
    generate_synthetic(&micro_synthetic(seed, rule), dir).unwrap();
}

pub fn f64_values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    f64_values(t).iter().map(|v| v.to_bits()).collect()
}
