//! Dense optical flow between consecutive frames and its 3-channel rendering.
//!
//! The estimator is a coarse-to-fine Lucas-Kanade: per pyramid level the
//! second frame is warped by the current flow, and a 5x5 windowed normal
//! equation is solved at every pixel. Pixels whose structure tensor is
//! near-singular (flat regions) keep the flow propagated from coarser levels.
//! Rendering maps direction to hue and magnitude to value.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

const WINDOW_RADIUS: usize = 2;
const ITERATIONS: usize = 5;
const MIN_EIGENVALUE: f32 = 1e-6;
const MIN_PYRAMID_SIDE: usize = 16;
const MAX_LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    /// Luma of a `(3, H, W)` row-major RGB buffer.
    pub fn from_rgb_planes(width: usize, height: usize, rgb: &[f32]) -> Self {
        let plane = width * height;
        let data = (0..plane)
            .map(|i| 0.299 * rgb[i] + 0.587 * rgb[plane + i] + 0.114 * rgb[2 * plane + i])
            .collect();
        Self::new(width, height, data)
    }

    fn at(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    /// Bilinear sample with replicated borders.
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x0 + 1, y0) * fx;
        let bottom = self.at(x0, y0 + 1) * (1.0 - fx) + self.at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    fn downsample(&self) -> GrayImage {
        let w = self.width / 2;
        let h = self.height / 2;
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (2 * x as isize, 2 * y as isize);
                let s = self.at(sx, sy)
                    + self.at(sx + 1, sy)
                    + self.at(sx, sy + 1)
                    + self.at(sx + 1, sy + 1);
                data.push(0.25 * s);
            }
        }
        GrayImage::new(w, h, data)
    }
}

/// Per-pixel displacement from the previous frame to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn magnitude(&self, x: usize, y: usize) -> f32 {
        let i = y * self.width + x;
        self.u[i].hypot(self.v[i])
    }

    fn upsample_to(&self, width: usize, height: usize) -> FlowField {
        let su = GrayImage::new(self.width, self.height, self.u.clone());
        let sv = GrayImage::new(self.width, self.height, self.v.clone());
        let mut out = FlowField::zeros(width, height);
        let rx = self.width as f32 / width as f32;
        let ry = self.height as f32 / height as f32;
        for y in 0..height {
            for x in 0..width {
                let cx = (x as f32 + 0.5) * rx - 0.5;
                let cy = (y as f32 + 0.5) * ry - 0.5;
                let i = y * width + x;
                out.u[i] = su.sample(cx, cy) / rx;
                out.v[i] = sv.sample(cx, cy) / ry;
            }
        }
        out
    }
}

fn box_filter(src: &[f32], width: usize, height: usize, radius: usize) -> Vec<f32> {
    let r = radius as isize;
    let clamp_x = |x: isize| x.clamp(0, width as isize - 1) as usize;
    let clamp_y = |y: isize| y.clamp(0, height as isize - 1) as usize;
    let norm = 1.0 / (2 * radius + 1) as f32;
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut s = 0.0;
            for dx in -r..=r {
                s += src[y * width + clamp_x(x as isize + dx)];
            }
            tmp[y * width + x] = s * norm;
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut s = 0.0;
            for dy in -r..=r {
                s += tmp[clamp_y(y as isize + dy) * width + x];
            }
            out[y * width + x] = s * norm;
        }
    }
    out
}

fn refine_level(prev: &GrayImage, next: &GrayImage, flow: &mut FlowField) {
    let (w, h) = (prev.width, prev.height);
    let n = w * h;
    let mut ix = vec![0.0f32; n];
    let mut iy = vec![0.0f32; n];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            ix[y * w + x] = 0.5 * (prev.at(xi + 1, yi) - prev.at(xi - 1, yi));
            iy[y * w + x] = 0.5 * (prev.at(xi, yi + 1) - prev.at(xi, yi - 1));
        }
    }
    let prod = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let sxx = box_filter(&prod(&ix, &ix), w, h, WINDOW_RADIUS);
    let sxy = box_filter(&prod(&ix, &iy), w, h, WINDOW_RADIUS);
    let syy = box_filter(&prod(&iy, &iy), w, h, WINDOW_RADIUS);

    let r = WINDOW_RADIUS as isize;
    let area = ((2 * r + 1) * (2 * r + 1)) as f32;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (a, b, c) = (sxx[i], sxy[i], syy[i]);
            let half_trace = 0.5 * (a + c);
            let spread = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            if half_trace - spread <= MIN_EIGENVALUE {
                continue;
            }
            let det = a * c - b * b;
            let (mut u, mut v) = (flow.u[i], flow.v[i]);
            for _ in 0..ITERATIONS {
                // mismatch of the window warped by this pixel's flow
                let (mut sxt, mut syt) = (0.0f32, 0.0f32);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let xj = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        let yj = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let j = yj * w + xj;
                        let it = next.sample(xj as f32 + u, yj as f32 + v) - prev.data[j];
                        sxt += ix[j] * it;
                        syt += iy[j] * it;
                    }
                }
                let (sxt, syt) = (sxt / area, syt / area);
                let du = (c * sxt - b * syt) / det;
                let dv = (a * syt - b * sxt) / det;
                u -= du;
                v -= dv;
                if du.abs() + dv.abs() < 1e-4 {
                    break;
                }
            }
            flow.u[i] = u;
            flow.v[i] = v;
        }
    }
}

/// Dense flow mapping `prev` onto `next`.
pub fn estimate_flow(prev: &GrayImage, next: &GrayImage) -> FlowField {
    assert_eq!((prev.width, prev.height), (next.width, next.height));
    let mut pyramid = vec![(prev.clone(), next.clone())];
    while pyramid.len() < MAX_LEVELS {
        let (p, q) = pyramid.last().unwrap();
        if p.width / 2 < MIN_PYRAMID_SIDE || p.height / 2 < MIN_PYRAMID_SIDE {
            break;
        }
        let down = (p.downsample(), q.downsample());
        pyramid.push(down);
    }
    let (coarse, _) = pyramid.last().unwrap();
    let mut flow = FlowField::zeros(coarse.width, coarse.height);
    for (level, (p, q)) in pyramid.iter().enumerate().rev() {
        if level + 1 < pyramid.len() {
            flow = flow.upsample_to(p.width, p.height);
        }
        refine_level(p, q, &mut flow);
    }
    flow
}

fn hsv_to_rgb(hue_deg: f32, sat: f32, val: f32) -> [f32; 3] {
    let c = val * sat;
    let h = (hue_deg / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

/// Renders a flow field as a `(3, H, W)` row-major RGB buffer in `[0, 1]`:
/// direction becomes hue, `|flow| / scale` (clipped at 1) becomes value.
pub fn render_flow(flow: &FlowField, scale: f32) -> Vec<f32> {
    let plane = flow.width * flow.height;
    let mut out = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        let (u, v) = (flow.u[i], flow.v[i]);
        let mag = u.hypot(v);
        if mag == 0.0 {
            continue;
        }
        let hue = v.atan2(u).to_degrees().rem_euclid(360.0);
        let rgb = hsv_to_rgb(hue, 1.0, (mag / scale).min(1.0));
        for c in 0..3 {
            out[c * plane + i] = rgb[c];
        }
    }
    out
}

/// Flow renderings for a `(T, 3, H, W)` clip with values in `[0, 1]`.
///
/// Entry `t` renders the flow from frame `t-1` to `t`; the first entry is the
/// zero field.
pub fn compute_flow(frames: &Tensor, scale: f32) -> Result<Tensor> {
    let (t, c, h, w) = frames.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    if t < 2 {
        return Err(Error::Input(format!(
            "flow needs at least 2 frames, got {t}"
        )));
    }
    let data = frames
        .to_dtype(candle_core::DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let plane = 3 * h * w;
    let grays: Vec<GrayImage> = (0..t)
        .map(|i| GrayImage::from_rgb_planes(w, h, &data[i * plane..(i + 1) * plane]))
        .collect();
    let mut out = vec![0.0f32; t * plane];
    for i in 1..t {
        let field = estimate_flow(&grays[i - 1], &grays[i]);
        out[i * plane..(i + 1) * plane].copy_from_slice(&render_flow(&field, scale));
    }
    Ok(Tensor::from_vec(out, (t, 3, h, w), &Device::Cpu)?)
}
