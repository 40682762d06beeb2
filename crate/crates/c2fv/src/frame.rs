//! Frames and the transforms between pixel and feature space.
//!
//! Frames are padded to multiples of 32 so the whole stride chain divides
//! evenly: /2 to features, /4 further to latents (which must tile into 4x4
//! blocks), /4 again to hyper-latents.

use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Deconv2d, Module, Param, ResBlock};
use crate::{Error, Result};
use ndarray::Array3;
use rand_chacha::ChaCha8Rng;

/// Spatial alignment required of padded frames.
pub const PAD_MULTIPLE: usize = 32;

/// An RGB frame with values in [0, 1], shaped (3, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pixels: Array3<f64>,
}

impl Frame {
    pub fn new(pixels: Array3<f64>) -> Result<Frame> {
        let (c, h, w) = pixels.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::BadInput(format!(
                "frame must be (3, H>=1, W>=1), got ({c}, {h}, {w})"
            )));
        }
        if !pixels.iter().all(|v| v.is_finite()) {
            return Err(Error::BadInput("frame has non-finite pixels".into()));
        }
        Ok(Frame { pixels })
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    /// 8-bit quantized copy (used by the lossless intra path).
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(bytes: &[u8], h: usize, w: usize) -> Result<Frame> {
        if bytes.len() != 3 * h * w {
            return Err(Error::BadInput(format!(
                "expected {} bytes for a {h}x{w} frame, got {}",
                3 * h * w,
                bytes.len()
            )));
        }
        let pixels =
            Array3::from_shape_vec((3, h, w), bytes.iter().map(|&b| b as f64 / 255.0).collect())
                .expect("shape checked");
        Frame::new(pixels)
    }
}

fn next_multiple(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Pad to the next multiples of 32 with edge replication. Returns the
/// padded frame and the original (height, width) for later cropping.
pub fn pad_frame(frame: &Frame) -> (Frame, (usize, usize)) {
    let (_, h, w) = frame.pixels.dim();
    let (ph, pw) = (next_multiple(h, PAD_MULTIPLE), next_multiple(w, PAD_MULTIPLE));
    if (ph, pw) == (h, w) {
        return (frame.clone(), (h, w));
    }
    let mut out = Array3::<f64>::zeros((3, ph, pw));
    for c in 0..3 {
        for y in 0..ph {
            let sy = y.min(h - 1);
            for x in 0..pw {
                let sx = x.min(w - 1);
                out[(c, y, x)] = frame.pixels[(c, sy, sx)];
            }
        }
    }
    (Frame { pixels: out }, (h, w))
}

/// Crop a padded frame back to its original size.
pub fn crop_frame(frame: &Frame, dims: (usize, usize)) -> Frame {
    let (h, w) = dims;
    Frame {
        pixels: frame
            .pixels
            .slice(ndarray::s![.., ..h, ..w])
            .to_owned(),
    }
}

/// Pixel -> feature transform: one stride-2 conv plus residual blocks,
/// mirrored back by residual blocks plus one stride-2 deconvolution.
pub struct FeatureCoder {
    head: Conv2d,
    enc_blocks: Vec<ResBlock>,
    dec_blocks: Vec<ResBlock>,
    tail: Deconv2d,
}

impl FeatureCoder {
    pub fn new(rng: &mut ChaCha8Rng, feat_ch: usize) -> Self {
        FeatureCoder {
            head: Conv2d::down(rng, 3, feat_ch),
            enc_blocks: (0..3).map(|_| ResBlock::new(rng, feat_ch)).collect(),
            dec_blocks: (0..3).map(|_| ResBlock::new(rng, feat_ch)).collect(),
            tail: Deconv2d::up(rng, feat_ch, 3),
        }
    }

    /// Padded frame (3, H, W) -> features (C_f, H/2, W/2).
    pub fn extract(&self, g: &mut Graph, frame: &Var) -> Var {
        let s = frame.shape();
        assert!(
            s[1] % PAD_MULTIPLE == 0 && s[2] % PAD_MULTIPLE == 0,
            "extract_features wants a padded frame, got {s:?}"
        );
        let mut h = self.head.forward(g, frame);
        for b in &self.enc_blocks {
            h = b.forward(g, &h);
        }
        h
    }

    /// Features -> frame cropped to `dims`; clamps to [0, 1] only when
    /// `clamp` is set so training gradients pass unimpeded.
    pub fn reconstruct(&self, g: &mut Graph, feat: &Var, dims: (usize, usize), clamp: bool) -> Var {
        let mut h = feat.clone();
        for b in &self.dec_blocks {
            h = b.forward(g, &h);
        }
        let full = self.tail.forward(g, &h);
        let cropped = g.crop_spatial(&full, dims.0, dims.1);
        if clamp {
            g.clamp(&cropped, 0.0, 1.0)
        } else {
            cropped
        }
    }
}

impl Module for FeatureCoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.head.visit_params(&format!("{prefix}.head"), f);
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            b.visit_params(&format!("{prefix}.enc{i}"), f);
        }
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            b.visit_params(&format!("{prefix}.dec{i}"), f);
        }
        self.tail.visit_params(&format!("{prefix}.tail"), f);
    }
}

/// Frame pixels as a graph constant.
pub fn frame_var(g: &Graph, frame: &Frame) -> Var {
    g.constant(frame.pixels.clone().into_dyn())
}

/// Turn a (3, H, W) tensor back into a Frame.
pub fn var_to_frame(v: &Var) -> Frame {
    Frame {
        pixels: v
            .data()
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("frame tensor must be 3-d"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Arr;
    use crate::nn::seeded_rng;
    use ndarray::IxDyn;
    use rand::Rng;

    fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Frame {
        Frame::new(Array3::from_shape_simple_fn((3, h, w), || rng.gen_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn padding_reaches_next_multiple_of_32() {
        let mut rng = seeded_rng(20);
        let f = random_frame(&mut rng, 1080, 1920);
        let (p, dims) = pad_frame(&f);
        assert_eq!(dims, (1080, 1920));
        assert_eq!(p.pixels.dim(), (3, 1088, 1920));

        let f = random_frame(&mut rng, 64, 64);
        let (p, _) = pad_frame(&f);
        assert_eq!(p.pixels.dim(), (3, 64, 64));

        let f = random_frame(&mut rng, 33, 33);
        let (p, _) = pad_frame(&f);
        assert_eq!(p.pixels.dim(), (3, 64, 64));
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let mut rng = seeded_rng(21);
        for (h, w) in [(1, 1), (17, 33), (60, 60), (64, 64)] {
            let f = random_frame(&mut rng, h, w);
            let (p, dims) = pad_frame(&f);
            let back = crop_frame(&p, dims);
            assert_eq!(back, f);
        }
    }

    #[test]
    fn feature_shapes_and_roundtrip_dims() {
        let mut rng = seeded_rng(22);
        let fc = FeatureCoder::new(&mut rng, 16);
        let f = random_frame(&mut rng, 60, 60);
        let (p, dims) = pad_frame(&f);
        let mut g = Graph::inference();
        let v = frame_var(&g, &p);
        let feat = fc.extract(&mut g, &v);
        assert_eq!(feat.shape(), &[16, 32, 32]);
        assert!(feat.data().iter().all(|v| v.is_finite()));
        let rec = fc.reconstruct(&mut g, &feat, dims, true);
        assert_eq!(rec.shape(), &[3, 60, 60]);
        assert!(rec.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_frame_with_zero_bias_gives_zero_features() {
        let mut rng = seeded_rng(23);
        let fc = FeatureCoder::new(&mut rng, 8);
        // biases are zero-initialized; conv and identity-skip blocks keep zero
        let mut g = Graph::inference();
        let v = g.constant(Arr::zeros(IxDyn(&[3, 32, 32])));
        let feat = fc.extract(&mut g, &v);
        assert!(feat.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn extraction_is_deterministic() {
        let mut rng = seeded_rng(24);
        let fc = FeatureCoder::new(&mut rng, 8);
        let f = random_frame(&mut rng, 32, 32);
        let mut g = Graph::inference();
        let v = frame_var(&g, &f);
        let a = fc.extract(&mut g, &v);
        let b = fc.extract(&mut g, &v);
        assert_eq!(a.data(), b.data());
    }
}
