//! Deterministic synthetic clips: a smooth textured background under
//! global translation plus a few independently moving objects. Pixels are
//! 8-bit quantized so the lossless intra codec is exactly lossless.

use crate::frame::Frame;
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
    /// Background translation in pixels per frame (dy, dx).
    pub global_motion: (f64, f64),
    /// Number of independently moving square objects.
    pub objects: usize,
    /// Texture smoothness: random grid cells per axis before upsampling.
    pub texture_cells: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            frames: 8,
            seed: 0,
            global_motion: (1.0, 2.0),
            objects: 2,
            texture_cells: 9,
        }
    }
}

/// Ground-truth motion alongside the frames, for diagnostics.
pub struct SynthClip {
    pub frames: Vec<Frame>,
    pub global_motion: (f64, f64),
    /// Per-object (start_y, start_x, velocity_y, velocity_x, size).
    pub object_tracks: Vec<(f64, f64, f64, f64, usize)>,
}

fn smooth_canvas(rng: &mut ChaCha8Rng, h: usize, w: usize, cells: usize) -> Array3<f64> {
    let grid = Array3::from_shape_simple_fn((3, cells + 1, cells + 1), || rng.gen_range(0.0..1.0));
    let mut out = Array3::<f64>::zeros((3, h, w));
    for c in 0..3 {
        for y in 0..h {
            let fy = y as f64 / h as f64 * cells as f64;
            let (gy, ty) = (fy.floor() as usize, fy.fract());
            for x in 0..w {
                let fx = x as f64 / w as f64 * cells as f64;
                let (gx, tx) = (fx.floor() as usize, fx.fract());
                let v00 = grid[(c, gy, gx)];
                let v01 = grid[(c, gy, gx + 1)];
                let v10 = grid[(c, gy + 1, gx)];
                let v11 = grid[(c, gy + 1, gx + 1)];
                out[(c, y, x)] =
                    v00 * (1.0 - ty) * (1.0 - tx) + v01 * (1.0 - ty) * tx + v10 * ty * (1.0 - tx)
                        + v11 * ty * tx;
            }
        }
    }
    out
}

fn sample_canvas(canvas: &Array3<f64>, c: usize, y: f64, x: f64) -> f64 {
    let (_, h, w) = canvas.dim();
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (yc.floor() as usize, xc.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (yc - y0 as f64, xc - x0 as f64);
    canvas[(c, y0, x0)] * (1.0 - ty) * (1.0 - tx)
        + canvas[(c, y0, x1)] * (1.0 - ty) * tx
        + canvas[(c, y1, x0)] * ty * (1.0 - tx)
        + canvas[(c, y1, x1)] * ty * tx
}

/// Generate a clip with full ground-truth metadata.
pub fn gen_synthetic_full(cfg: &SynthConfig) -> SynthClip {
    let mut rng = crate::nn::seeded_rng(cfg.seed);
    let (dy, dx) = cfg.global_motion;
    let n = cfg.frames.max(1);
    let span_y = (dy.abs() * n as f64).ceil() as usize + 2;
    let span_x = (dx.abs() * n as f64).ceil() as usize + 2;
    let canvas = smooth_canvas(
        &mut rng,
        cfg.height + 2 * span_y,
        cfg.width + 2 * span_x,
        cfg.texture_cells,
    );
    let base_y = span_y as f64;
    let base_x = span_x as f64;

    let mut tracks = Vec::new();
    let mut obj_colors = Vec::new();
    for _ in 0..cfg.objects {
        let size = rng.gen_range(cfg.height / 8..cfg.height / 3).max(4);
        let sy = rng.gen_range(0.0..(cfg.height - size) as f64);
        let sx = rng.gen_range(0.0..(cfg.width - size) as f64);
        let vy = rng.gen_range(-2.0..2.0);
        let vx = rng.gen_range(-2.0..2.0);
        tracks.push((sy, sx, vy, vx, size));
        obj_colors.push([
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
        ]);
    }

    let mut frames = Vec::with_capacity(n);
    for t in 0..n {
        let oy = base_y + dy * t as f64;
        let ox = base_x + dx * t as f64;
        let mut px = Array3::<f64>::zeros((3, cfg.height, cfg.width));
        for c in 0..3 {
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    px[(c, y, x)] = sample_canvas(&canvas, c, oy + y as f64, ox + x as f64);
                }
            }
        }
        for (obj, color) in tracks.iter().zip(&obj_colors) {
            let (sy, sx, vy, vx, size) = *obj;
            let py = sy + vy * t as f64;
            let px0 = sx + vx * t as f64;
            for y in 0..size {
                let yy = (py + y as f64).round();
                if yy < 0.0 || yy >= cfg.height as f64 {
                    continue;
                }
                for x in 0..size {
                    let xx = (px0 + x as f64).round();
                    if xx < 0.0 || xx >= cfg.width as f64 {
                        continue;
                    }
                    // simple textured square: base color modulated by position
                    let shade = 0.75 + 0.25 * (((y / 2) + (x / 2)) % 2) as f64;
                    for c in 0..3 {
                        px[(c, yy as usize, xx as usize)] = (color[c] * shade).clamp(0.0, 1.0);
                    }
                }
            }
        }
        // 8-bit quantize so the intra path is lossless
        px.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        frames.push(Frame::new(px).expect("valid synthetic frame"));
    }
    SynthClip {
        frames,
        global_motion: cfg.global_motion,
        object_tracks: tracks,
    }
}

/// Frames only.
pub fn gen_synthetic(cfg: &SynthConfig) -> Vec<Frame> {
    gen_synthetic_full(cfg).frames
}
