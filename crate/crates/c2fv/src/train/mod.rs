//! Rate-distortion objective, multi-frame rollout and the three-stage
//! training schedule.
//!
//! The loss is bits-per-pixel plus lambda times distortion. Distortion
//! enters the objective in [0, 1]-squared units (255-scale MSE divided by
//! 255^2) so the conventional lambda ladder {256 .. 2048} balances against
//! bpp; reported metrics stay in 255-scale.

pub mod checkpoint;

use crate::codec::VideoModel;
use crate::frame::{frame_var, Frame};
use crate::graph::{Graph, Var};
use crate::metrics::{distortion_mse, distortion_msssim};
use crate::modes::hamc::GumbelConfig;
use crate::nn::{seeded_rng, Adam};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Logged rate/distortion terms of one coded frame. Bits are totals;
/// `distortion` is in [0, 1]-squared units.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RdLossTerms {
    pub bits_coarse_motion: f64,
    pub bits_fine_motion: f64,
    pub bits_residual: f64,
    pub distortion: f64,
    pub lambda: f64,
    pub pixels: f64,
}

impl RdLossTerms {
    pub fn bpp_total(&self) -> f64 {
        (self.bits_coarse_motion + self.bits_fine_motion + self.bits_residual) / self.pixels
    }
}

/// Scalar rate-distortion loss: per-pixel rates plus lambda * distortion.
pub fn rd_loss(terms: &RdLossTerms) -> f64 {
    terms.bpp_total() + terms.lambda * terms.distortion
}

/// Distortion flavor used by a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistortionKind {
    Mse,
    MsSsim,
}

/// One stage of the schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    /// Frames per training clip (>= 2; one I-frame plus P-frames).
    pub frames: usize,
    pub steps: u64,
    pub batch: usize,
    /// Square crop size; must be a multiple of 32.
    pub crop: usize,
    pub lr: f64,
    pub modes_enabled: bool,
    pub distortion: DistortionKind,
}

/// The full schedule plus optimization hyper-parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub seed: u64,
    pub stages: Vec<StageConfig>,
    /// Learning-rate decay factor applied at the given fractions of the
    /// total step budget.
    pub lr_decay: f64,
    pub lr_decay_at: Vec<f64>,
    /// Optional per-frame distortion weights within a rollout.
    pub frame_weights: Option<Vec<f64>>,
}

impl TrainConfig {
    /// Full-size schedule (steps scaled down ~100x from the published
    /// protocol; the structure is identical).
    pub fn desk(lambda: f64) -> Self {
        TrainConfig {
            lambda,
            seed: 7,
            stages: vec![
                StageConfig {
                    stage: 1,
                    frames: 2,
                    steps: 20_000,
                    batch: 4,
                    crop: 64,
                    lr: 1e-4,
                    modes_enabled: false,
                    distortion: DistortionKind::Mse,
                },
                StageConfig {
                    stage: 2,
                    frames: 5,
                    steps: 5_000,
                    batch: 2,
                    crop: 64,
                    lr: 1e-4,
                    modes_enabled: false,
                    distortion: DistortionKind::Mse,
                },
                StageConfig {
                    stage: 3,
                    frames: 5,
                    steps: 5_000,
                    batch: 2,
                    crop: 64,
                    lr: 1e-4,
                    modes_enabled: true,
                    distortion: DistortionKind::Mse,
                },
            ],
            lr_decay: 0.2,
            lr_decay_at: vec![0.75, 0.9],
            frame_weights: None,
        }
    }

    /// Tiny schedule for tests and toy ablations.
    pub fn toy(lambda: f64, steps: (u64, u64, u64)) -> Self {
        let mut cfg = TrainConfig::desk(lambda);
        cfg.stages[0].steps = steps.0;
        cfg.stages[0].lr = 1e-3;
        cfg.stages[1].steps = steps.1;
        cfg.stages[1].frames = 3;
        cfg.stages[1].batch = 1;
        cfg.stages[1].lr = 3e-4;
        cfg.stages[2].steps = steps.2;
        cfg.stages[2].frames = 3;
        cfg.stages[2].batch = 1;
        cfg.stages[2].lr = 3e-4;
        cfg
    }

    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }

    fn lr_at(&self, stage: &StageConfig, global_step: u64) -> f64 {
        let total = self.total_steps() as f64;
        let mut lr = stage.lr;
        for &frac in &self.lr_decay_at {
            if global_step as f64 >= frac * total {
                lr *= self.lr_decay;
            }
        }
        lr
    }
}

/// One metric-log record, written per logging interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub stage: u8,
    pub loss: f64,
    pub bpp_coarse: f64,
    pub bpp_fine: f64,
    pub bpp_residual: f64,
    pub distortion: f64,
}

/// Differentiable rollout of one training clip: frame 0 passes through the
/// (lossless, constant) intra path, every later frame through the P-frame
/// pipeline with the previous in-graph reconstruction as reference.
/// Returns (loss Var, per-frame terms).
pub fn rollout_train(
    g: &mut Graph,
    model: &VideoModel,
    clip: &[Frame],
    lambda: f64,
    distortion: DistortionKind,
    frame_weights: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> (Var, Vec<RdLossTerms>) {
    assert!(clip.len() >= 2, "rollout needs at least two frames");
    let pixels = (clip[0].height() * clip[0].width()) as f64;
    let intra = crate::codec::intra::intra_reconstruction(&clip[0]);
    let mut reference = frame_var(g, &intra);
    let mut total: Option<Var> = None;
    let mut terms_out = Vec::new();
    let gumbel = GumbelConfig::default();
    for (t, frame) in clip.iter().enumerate().skip(1) {
        let x_t = frame_var(g, frame);
        let out = model.forward_train(g, &x_t, &reference, rng, gumbel);
        let dist = match distortion {
            DistortionKind::Mse => {
                let d255 = distortion_mse(g, &x_t, &out.recon);
                g.scale(&d255, 1.0 / (255.0 * 255.0))
            }
            DistortionKind::MsSsim => distortion_msssim(g, &x_t, &out.recon),
        };
        let w = frame_weights.map(|ws| ws[t - 1]).unwrap_or(1.0);
        let bits = g.add(&out.bits_coarse, &out.bits_fine);
        let bits = g.add(&bits, &out.bits_res);
        let bpp = g.scale(&bits, 1.0 / pixels);
        let ld = g.scale(&dist, lambda * w);
        let frame_loss = g.add(&bpp, &ld);
        total = Some(match total {
            Some(acc) => g.add(&acc, &frame_loss),
            None => frame_loss,
        });
        terms_out.push(RdLossTerms {
            bits_coarse_motion: out.bits_coarse.scalar(),
            bits_fine_motion: out.bits_fine.scalar(),
            bits_residual: out.bits_res.scalar(),
            distortion: dist.scalar(),
            lambda,
            pixels,
        });
        reference = out.recon;
    }
    let n = (clip.len() - 1) as f64;
    let loss = total.expect("at least one P-frame");
    let loss = g.scale(&loss, 1.0 / n);
    (loss, terms_out)
}

/// Sample an aligned crop window and a frame range from a clip.
fn sample_crop(
    rng: &mut ChaCha8Rng,
    clip: &[Frame],
    frames: usize,
    crop: usize,
) -> Vec<Frame> {
    let h = clip[0].height();
    let w = clip[0].width();
    assert!(crop <= h && crop <= w, "crop larger than the clip frames");
    let max_start = clip.len().saturating_sub(frames);
    let t0 = if max_start == 0 {
        0
    } else {
        rng.gen_range(0..=max_start)
    };
    let y0 = if h == crop { 0 } else { rng.gen_range(0..=h - crop) };
    let x0 = if w == crop { 0 } else { rng.gen_range(0..=w - crop) };
    clip[t0..(t0 + frames).min(clip.len())]
        .iter()
        .map(|f| Frame {
            pixels: f
                .pixels
                .slice(ndarray::s![.., y0..y0 + crop, x0..x0 + crop])
                .to_owned(),
        })
        .collect()
}

/// Train one stage in place. Returns the metric log.
pub fn train_stage(
    model: &mut VideoModel,
    data: &[Vec<Frame>],
    cfg: &TrainConfig,
    stage: &StageConfig,
    global_step: &mut u64,
    log: &mut Vec<MetricRecord>,
) -> Result<()> {
    assert!(stage.crop % 32 == 0, "crop size must be a multiple of 32");
    assert!(stage.frames >= 2, "stages code at least one P-frame");
    if let Some(ws) = &cfg.frame_weights {
        assert!(ws.len() >= stage.frames - 1, "frame_weights too short");
    }
    model.modes_enabled = stage.modes_enabled;
    let mut opt = Adam::new(stage.lr);
    let mut rng = seeded_rng(cfg.seed ^ (stage.stage as u64) << 32);
    let log_every = (stage.steps / 20).max(1);
    for _ in 0..stage.steps {
        opt.lr = cfg.lr_at(stage, *global_step);
        let mut grads_acc: Option<std::collections::HashMap<u64, crate::graph::Arr>> = None;
        let mut loss_sum = 0.0;
        let mut terms_sum = RdLossTerms::default();
        for _ in 0..stage.batch {
            let clip = &data[rng.gen_range(0..data.len())];
            let crop = sample_crop(&mut rng, clip, stage.frames, stage.crop);
            let mut g = Graph::recording();
            let (loss, terms) = rollout_train(
                &mut g,
                model,
                &crop,
                cfg.lambda,
                stage.distortion,
                cfg.frame_weights.as_deref(),
                &mut rng,
            );
            let lv = loss.scalar();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    step: *global_step,
                    reason: format!(
                        "non-finite loss in stage {} (lambda {}); last terms: {:?}",
                        stage.stage, cfg.lambda, terms
                    ),
                });
            }
            loss_sum += lv;
            for t in &terms {
                terms_sum.bits_coarse_motion += t.bits_coarse_motion;
                terms_sum.bits_fine_motion += t.bits_fine_motion;
                terms_sum.bits_residual += t.bits_residual;
                terms_sum.distortion += t.distortion;
                terms_sum.pixels = t.pixels;
            }
            let mut grads = g.backward(&loss);
            let grads = g.leaf_grads(&mut grads);
            match &mut grads_acc {
                Some(acc) => {
                    for (k, v) in grads {
                        acc.entry(k)
                            .and_modify(|a| *a += &v)
                            .or_insert(v);
                    }
                }
                None => grads_acc = Some(grads),
            }
        }
        let scale = 1.0 / stage.batch as f64;
        let mut grads = grads_acc.expect("batch >= 1");
        for v in grads.values_mut() {
            v.mapv_inplace(|x| x * scale);
        }
        opt.step(model, &grads);
        *global_step += 1;
        if *global_step % log_every == 0 {
            let frames = (stage.frames - 1) as f64 * stage.batch as f64;
            log.push(MetricRecord {
                step: *global_step,
                stage: stage.stage,
                loss: loss_sum * scale,
                bpp_coarse: terms_sum.bits_coarse_motion / terms_sum.pixels / frames,
                bpp_fine: terms_sum.bits_fine_motion / terms_sum.pixels / frames,
                bpp_residual: terms_sum.bits_residual / terms_sum.pixels / frames,
                distortion: terms_sum.distortion / frames,
            });
        }
    }
    Ok(())
}

/// Run the full schedule over `data`, returning the metric log.
pub fn train_schedule(
    model: &mut VideoModel,
    data: &[Vec<Frame>],
    cfg: &TrainConfig,
) -> Result<Vec<MetricRecord>> {
    let mut log = Vec::new();
    let mut global_step = 0u64;
    for stage in &cfg.stages {
        train_stage(model, data, cfg, stage, &mut global_step, &mut log)?;
    }
    Ok(log)
}
