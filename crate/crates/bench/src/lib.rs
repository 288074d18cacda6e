//! Fixtures shared by the benchmarks.

use importance_core::candle::{Device, Tensor};
use importance_core::dataset::{ClipBoxes, LaneInput};
use importance_core::{BBox, ClipSample, ModelConfig};

/// Deterministic pseudo-random values in `[-1, 1)` from an LCG.
pub fn noise(n: usize, seed: u64) -> Vec<f32> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
        .collect()
}

/// A clip of `n` objects drifting across noise frames.
pub fn clip(cfg: &ModelConfig, n: usize) -> ClipSample {
    let (t, s) = (cfg.clip_len, cfg.image_size);
    let side = s as f64;
    let mut boxes = ClipBoxes::new(n, t);
    for obj in 0..n {
        let x = side * (0.1 + 0.6 * obj as f64 / n.max(1) as f64);
        for frame in 0..t {
            let dx = frame as f64;
            boxes.set(obj, frame, BBox::new(x + dx, 0.4 * side, x + dx + 0.2 * side, 0.7 * side));
        }
    }
    let mut lanes = LaneInput::empty(cfg.max_lanes);
    lanes.count = 2;
    lanes.rows[0] = [0.3 * s as f32, side as f32, 0.45 * s as f32, 0.0];
    lanes.rows[1] = [0.7 * s as f32, side as f32, 0.55 * s as f32, 0.0];
    let tensor = |shape: &[usize], seed| {
        let len = shape.iter().product();
        Tensor::from_vec(noise(len, seed), shape, &Device::Cpu).expect("fixture tensor")
    };
    ClipSample {
        scene_id: "bench".into(),
        t_end: t - 1,
        frames: tensor(&[t, 3, s, s], 1),
        flow: tensor(&[t, 3, s, s], 2),
        boxes,
        lanes,
        seg_map: tensor(&[3, s, s], 3),
        ego_velocity: 0.5,
        track_ids: (0..n as u32).collect(),
        labels: (0..n).map(|i| i % 3 == 0).collect(),
    }
}
