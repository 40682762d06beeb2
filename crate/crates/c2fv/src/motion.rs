//! Coarse-to-fine motion machinery: estimation heads, latent codecs for
//! offsets, offset upsampling and deformable-convolution compensation.
//!
//! The coarse branch runs at quarter feature resolution and codes its
//! latent with the factorized prior alone; the fine branch runs at full
//! feature resolution and codes through the hyperprior plus HAMC. Both
//! compensate with the same deformable structure.

use crate::config::ModelConfig;
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Deconv2d, Module, Param, ResBlock};
use rand_chacha::ChaCha8Rng;

/// Two stride-2 convolutions: features to quarter resolution.
pub struct FeatureDownsampler {
    c1: Conv2d,
    c2: Conv2d,
}

impl FeatureDownsampler {
    pub fn new(rng: &mut ChaCha8Rng, feat_ch: usize) -> Self {
        FeatureDownsampler {
            c1: Conv2d::down(rng, feat_ch, feat_ch),
            c2: Conv2d::down(rng, feat_ch, feat_ch),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Var {
        let s = x.shape();
        assert!(
            s[1] % 4 == 0 && s[2] % 4 == 0,
            "downsample wants dims divisible by 4, got {s:?}"
        );
        let h = self.c1.forward(g, x);
        let h = g.relu(&h);
        self.c2.forward(g, &h)
    }
}

impl Module for FeatureDownsampler {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.c1.visit_params(&format!("{prefix}.c1"), f);
        self.c2.visit_params(&format!("{prefix}.c2"), f);
    }
}

/// Two-convolution motion estimation head over [ref, cur].
pub struct MotionEstimator {
    c1: Conv2d,
    c2: Conv2d,
}

impl MotionEstimator {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        MotionEstimator {
            c1: Conv2d::same(rng, 2 * cfg.feat_ch, cfg.feat_ch),
            c2: Conv2d::same(rng, cfg.feat_ch, cfg.offset_ch()),
        }
    }

    pub fn forward(&self, g: &mut Graph, reference: &Var, current: &Var) -> Var {
        assert_eq!(
            reference.shape(),
            current.shape(),
            "motion estimation wants matching feature shapes"
        );
        let x = g.concat_axis0(reference, current);
        let h = self.c1.forward(g, &x);
        let h = g.relu(&h);
        self.c2.forward(g, &h)
    }
}

impl Module for MotionEstimator {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.c1.visit_params(&format!("{prefix}.c1"), f);
        self.c2.visit_params(&format!("{prefix}.c2"), f);
    }
}

/// Two stride-2 deconvolutions restoring coarse offsets to feature
/// resolution.
pub struct OffsetUpsampler {
    d1: Deconv2d,
    d2: Deconv2d,
}

impl OffsetUpsampler {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let co = cfg.offset_ch();
        OffsetUpsampler {
            d1: Deconv2d::up(rng, co, co),
            d2: Deconv2d::up(rng, co, co),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Var {
        let h = self.d1.forward(g, x);
        let h = g.relu(&h);
        self.d2.forward(g, &h)
    }
}

impl Module for OffsetUpsampler {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.d1.visit_params(&format!("{prefix}.d1"), f);
        self.d2.visit_params(&format!("{prefix}.d2"), f);
    }
}

/// Autoencoder taking an offset (or residual) map to a latent at quarter
/// resolution and back: stride-2 conv, residual block, stride-2 conv,
/// mirrored on the decode side.
pub struct LatentCodec {
    e1: Conv2d,
    eres: ResBlock,
    e2: Conv2d,
    d1: Deconv2d,
    dres: ResBlock,
    d2: Deconv2d,
}

impl LatentCodec {
    pub fn new(rng: &mut ChaCha8Rng, io_ch: usize, latent_ch: usize) -> Self {
        LatentCodec {
            e1: Conv2d::down(rng, io_ch, latent_ch),
            eres: ResBlock::new(rng, latent_ch),
            e2: Conv2d::down(rng, latent_ch, latent_ch),
            d1: Deconv2d::up(rng, latent_ch, latent_ch),
            dres: ResBlock::new(rng, latent_ch),
            d2: Deconv2d::up(rng, latent_ch, io_ch),
        }
    }

    /// (io_ch, h, w) -> (latent_ch, h/4, w/4).
    pub fn encode(&self, g: &mut Graph, x: &Var) -> Var {
        let s = x.shape();
        assert!(
            s[1] % 4 == 0 && s[2] % 4 == 0,
            "latent encoder wants dims divisible by 4, got {s:?}"
        );
        let h = self.e1.forward(g, x);
        let h = self.eres.forward(g, &h);
        self.e2.forward(g, &h)
    }

    pub fn decode(&self, g: &mut Graph, y: &Var) -> Var {
        let h = self.d1.forward(g, y);
        let h = self.dres.forward(g, &h);
        self.d2.forward(g, &h)
    }
}

impl Module for LatentCodec {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.e1.visit_params(&format!("{prefix}.e1"), f);
        self.eres.visit_params(&format!("{prefix}.eres"), f);
        self.e2.visit_params(&format!("{prefix}.e2"), f);
        self.d1.visit_params(&format!("{prefix}.d1"), f);
        self.dres.visit_params(&format!("{prefix}.dres"), f);
        self.d2.visit_params(&format!("{prefix}.d2"), f);
    }
}

/// Deformable compensation: warp the reference by the decoded offsets, then
/// fuse with the reference through two convolutions.
pub struct Compensator {
    dw: Param,
    db: Param,
    groups: usize,
    fuse1: Conv2d,
    fuse2: Conv2d,
}

impl Compensator {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let (cf, k) = (cfg.feat_ch, cfg.deform_kernel);
        let fan_in = cf * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        use rand_distr::Distribution;
        let dist = rand_distr::Normal::new(0.0, std).unwrap();
        let dw = crate::graph::Arr::from_shape_simple_fn(ndarray::IxDyn(&[cf, cf, k, k]), || {
            dist.sample(rng)
        });
        Compensator {
            dw: Param::new(dw),
            db: Param::new(crate::graph::Arr::zeros(ndarray::IxDyn(&[cf]))),
            groups: cfg.deform_groups,
            fuse1: Conv2d::same(rng, 2 * cf, cf),
            fuse2: Conv2d::same(rng, cf, cf),
        }
    }

    pub fn forward(&self, g: &mut Graph, reference: &Var, offsets: &Var) -> Var {
        let w = self.dw.var(g);
        let b = self.db.var(g);
        let warped = g.deform_conv2d(reference, offsets, &w, Some(&b), self.groups);
        let cat = g.concat_axis0(&warped, reference);
        let h = self.fuse1.forward(g, &cat);
        let h = g.relu(&h);
        self.fuse2.forward(g, &h)
    }
}

impl Module for Compensator {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.dw"), &mut self.dw);
        f(format!("{prefix}.db"), &mut self.db);
        self.fuse1.visit_params(&format!("{prefix}.fuse1"), f);
        self.fuse2.visit_params(&format!("{prefix}.fuse2"), f);
    }
}
