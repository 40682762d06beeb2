//! The assembled codec: model container, P-frame forward passes for
//! training and inference, and whole-video encode/decode with GoPs.
//!
//! Decode order inside a P-frame is fixed: coarse motion, coarse
//! compensation, fine hyper, (mu, sigma), HAMC modes, fine symbols, fine
//! compensation, residual hyper, (mu, sigma), skip mask, residual symbols,
//! frame reconstruction. The encoder drives every downstream computation
//! from *decoded* values, so its internal reconstructions are bit-identical
//! to the decoder's within one process.

pub mod bitstream;
pub mod intra;

use crate::config::ModelConfig;
use crate::entropy::factorized::FactorizedPrior;
use crate::entropy::hyper::HyperCodec;
use crate::entropy::range::{RangeDecoder, RangeEncoder};
use crate::entropy::tables::{
    decode_latent_symbol, encode_latent_symbol, latent_symbol_bits, FactorizedTables,
};
use crate::entropy::quantize_infer;
use crate::frame::{frame_var, pad_frame, var_to_frame, FeatureCoder, Frame};
use crate::graph::{Arr, Graph, Var};
use crate::metrics::{mse_255, psnr};
use crate::modes::hamc::{
    hamc_decode, hamc_encode, predict_modes, soft_hamc, GumbelConfig, ModePredictNet,
};
use crate::modes::harc::{
    harc_decode, harc_encode, predict_skip_mask, soft_harc, SkipPredictNet,
};
use crate::motion::{
    Compensator, FeatureDownsampler, LatentCodec, MotionEstimator, OffsetUpsampler,
};
use crate::nn::{seeded_rng, uniform_noise, Module, Param};
use crate::{Error, Result};
use bitstream::{BitstreamHeader, FrameRecord, Reader, SegmentPair, VERSION};
use rand_chacha::ChaCha8Rng;

/// Every learned component of the codec.
pub struct VideoModel {
    pub cfg: ModelConfig,
    /// Whether HAMC/HARC are active (stage 3 checkpoints).
    pub modes_enabled: bool,
    /// Whether the coarse branch runs (false = single-stage ablation).
    pub c2f_enabled: bool,
    pub features: FeatureCoder,
    pub downsampler: FeatureDownsampler,
    pub est_coarse: MotionEstimator,
    pub codec_coarse: LatentCodec,
    pub prior_coarse: FactorizedPrior,
    pub up_offsets: OffsetUpsampler,
    pub comp_coarse: Compensator,
    pub est_fine: MotionEstimator,
    pub codec_fine: LatentCodec,
    pub hyper_motion: HyperCodec,
    pub mode_net: ModePredictNet,
    pub comp_fine: Compensator,
    pub res_codec: LatentCodec,
    pub hyper_res: HyperCodec,
    pub skip_net: SkipPredictNet,
}

impl VideoModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let rng = &mut seeded_rng(seed);
        VideoModel {
            cfg,
            modes_enabled: false,
            c2f_enabled: true,
            features: FeatureCoder::new(rng, cfg.feat_ch),
            downsampler: FeatureDownsampler::new(rng, cfg.feat_ch),
            est_coarse: MotionEstimator::new(rng, &cfg),
            codec_coarse: LatentCodec::new(rng, cfg.offset_ch(), cfg.latent_ch),
            prior_coarse: FactorizedPrior::new(cfg.latent_ch),
            up_offsets: OffsetUpsampler::new(rng, &cfg),
            comp_coarse: Compensator::new(rng, &cfg),
            est_fine: MotionEstimator::new(rng, &cfg),
            codec_fine: LatentCodec::new(rng, cfg.offset_ch(), cfg.latent_ch),
            hyper_motion: HyperCodec::new(rng, &cfg),
            mode_net: ModePredictNet::new(rng, &cfg),
            comp_fine: Compensator::new(rng, &cfg),
            res_codec: LatentCodec::new(rng, cfg.feat_ch, cfg.latent_ch),
            hyper_res: HyperCodec::new(rng, &cfg),
            skip_net: SkipPredictNet::new(rng, &cfg),
        }
    }

    /// Freeze the factorized priors into coder tables.
    pub fn tables(&self) -> ModelTables {
        ModelTables {
            coarse: FactorizedTables::build(&self.prior_coarse),
            hyper_motion: self.hyper_motion.tables(),
            hyper_res: self.hyper_res.tables(),
        }
    }
}

impl Module for VideoModel {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.features.visit_params(&format!("{prefix}features"), f);
        self.downsampler.visit_params(&format!("{prefix}down"), f);
        self.est_coarse.visit_params(&format!("{prefix}est_c"), f);
        self.codec_coarse.visit_params(&format!("{prefix}codec_c"), f);
        self.prior_coarse.visit_params(&format!("{prefix}prior_c"), f);
        self.up_offsets.visit_params(&format!("{prefix}up_off"), f);
        self.comp_coarse.visit_params(&format!("{prefix}comp_c"), f);
        self.est_fine.visit_params(&format!("{prefix}est_f"), f);
        self.codec_fine.visit_params(&format!("{prefix}codec_f"), f);
        self.hyper_motion.visit_params(&format!("{prefix}hyper_m"), f);
        self.mode_net.visit_params(&format!("{prefix}modes"), f);
        self.comp_fine.visit_params(&format!("{prefix}comp_f"), f);
        self.res_codec.visit_params(&format!("{prefix}res"), f);
        self.hyper_res.visit_params(&format!("{prefix}hyper_r"), f);
        self.skip_net.visit_params(&format!("{prefix}skip"), f);
    }
}

/// Frozen coder tables for one checkpoint.
pub struct ModelTables {
    pub coarse: FactorizedTables,
    pub hyper_motion: FactorizedTables,
    pub hyper_res: FactorizedTables,
}

/// Differentiable per-frame outputs of the training path.
pub struct TrainFrameOut {
    /// Unclamped reconstruction at the (padded) input size.
    pub recon: Var,
    pub bits_coarse: Var,
    pub bits_fine: Var,
    pub bits_res: Var,
}

impl VideoModel {
    /// Training-path P-frame forward. `x_t` and `reference` are (3, H, W)
    /// graph values whose dims must already be multiples of 32 (training
    /// crops are aligned, so pad == identity and gradients flow through
    /// the whole unroll).
    pub fn forward_train(
        &self,
        g: &mut Graph,
        x_t: &Var,
        reference: &Var,
        rng: &mut ChaCha8Rng,
        gumbel: GumbelConfig,
    ) -> TrainFrameOut {
        let dims = (x_t.shape()[1], x_t.shape()[2]);
        assert!(
            dims.0 % 32 == 0 && dims.1 % 32 == 0,
            "training frames must be 32-aligned, got {dims:?}"
        );
        let f_cur = self.features.extract(g, x_t);
        let f_ref = self.features.extract(g, reference);

        // coarse branch
        let (f_tilde, bits_coarse) = if self.c2f_enabled {
            let dc_ref = self.downsampler.forward(g, &f_ref);
            let dc_cur = self.downsampler.forward(g, &f_cur);
            let o_c = self.est_coarse.forward(g, &dc_ref, &dc_cur);
            let m_c = self.codec_coarse.encode(g, &o_c);
            let noise = g.constant(uniform_noise(rng, m_c.shape()));
            let m_c_noisy = g.add(&m_c, &noise);
            let bits_map = g.factorized_bits(&m_c_noisy, &self.prior_coarse);
            let bits_coarse = g.sum_all(&bits_map);
            let o_c_dec = self.codec_coarse.decode(g, &m_c_noisy);
            let o_c_full = self.up_offsets.forward(g, &o_c_dec);
            let f_tilde = self.comp_coarse.forward(g, &f_ref, &o_c_full);
            (f_tilde, bits_coarse)
        } else {
            (f_ref.clone(), g.constant(ndarray::arr0(0.0).into_dyn()))
        };

        // fine branch
        let o_f = self.est_fine.forward(g, &f_tilde, &f_cur);
        let m_f = self.codec_fine.encode(g, &o_f);
        let z_m = self.hyper_motion.analyze(g, &m_f);
        let zn = g.constant(uniform_noise(rng, z_m.shape()));
        let z_m_noisy = g.add(&z_m, &zn);
        let hyper_m_bits = self.hyper_motion.rate_train(g, &z_m_noisy);
        let (mu_m, sigma_m) = self.hyper_motion.synthesize(g, &z_m_noisy);
        let noise_m = uniform_noise(rng, m_f.shape());
        let (m_f_hat, main_m_bits) = if self.modes_enabled {
            let (s2, s4) = self.mode_net.forward(g, &mu_m, &sigma_m);
            soft_hamc(g, &m_f, &mu_m, &sigma_m, &s2, &s4, &noise_m, gumbel, rng)
        } else {
            let nv = g.constant(noise_m);
            let noisy = g.add(&m_f, &nv);
            let bits = g.gaussian_bits(&noisy, &mu_m, &sigma_m);
            (noisy, g.sum_all(&bits))
        };
        let bits_fine = g.add(&main_m_bits, &hyper_m_bits);
        let o_f_dec = self.codec_fine.decode(g, &m_f_hat);
        let f_bar = self.comp_fine.forward(g, &f_tilde, &o_f_dec);

        // residual branch
        let r = g.sub(&f_cur, &f_bar);
        let y_r = self.res_codec.encode(g, &r);
        let z_r = self.hyper_res.analyze(g, &y_r);
        let zrn = g.constant(uniform_noise(rng, z_r.shape()));
        let z_r_noisy = g.add(&z_r, &zrn);
        let hyper_r_bits = self.hyper_res.rate_train(g, &z_r_noisy);
        let (mu_r, sigma_r) = self.hyper_res.synthesize(g, &z_r_noisy);
        let noise_r = uniform_noise(rng, y_r.shape());
        let (y_r_hat, main_r_bits) = if self.modes_enabled {
            let logits = self.skip_net.forward(g, &mu_r, &sigma_r);
            soft_harc(g, &y_r, &mu_r, &sigma_r, &logits, &noise_r, gumbel, rng)
        } else {
            let nv = g.constant(noise_r);
            let noisy = g.add(&y_r, &nv);
            let bits = g.gaussian_bits(&noisy, &mu_r, &sigma_r);
            (noisy, g.sum_all(&bits))
        };
        let bits_res = g.add(&main_r_bits, &hyper_r_bits);
        let r_hat = self.res_codec.decode(g, &y_r_hat);
        let f_hat = g.add(&f_bar, &r_hat);
        let recon = self.features.reconstruct(g, &f_hat, dims, false);

        TrainFrameOut {
            recon,
            bits_coarse,
            bits_fine,
            bits_res,
        }
    }
}

/// Inference-side P-frame payload plus bookkeeping.
pub struct PFrameResult {
    pub record: FrameRecord,
    pub recon: Frame,
    pub stats: PFrameStats,
}

/// Actual and estimated sizes of one coded P-frame.
#[derive(Debug, Clone, Default)]
pub struct PFrameStats {
    pub coarse_bytes: usize,
    pub fine_hyper_bytes: usize,
    pub fine_main_bytes: usize,
    pub res_hyper_bytes: usize,
    pub res_main_bytes: usize,
    pub coarse_bits_estimate: f64,
    pub fine_bits_estimate: f64,
    pub res_bits_estimate: f64,
    pub fine_symbols: usize,
    pub res_kept_symbols: usize,
    /// 255-scale MSE of the motion-compensated prediction (before residual).
    pub predicted_mse: f64,
    /// PSNR of the motion-compensated prediction.
    pub predicted_psnr: f64,
}

fn encode_coarse_latent(m_hat: &Arr, tables: &FactorizedTables) -> (Vec<u8>, f64) {
    let mut enc = RangeEncoder::new();
    let mut estimate = 0.0;
    let c = m_hat.shape()[0];
    let flat = m_hat.view().into_shape((c, m_hat.len() / c)).unwrap();
    for ch in 0..c {
        let table = tables.channel(ch);
        for &v in flat.row(ch) {
            estimate += latent_symbol_bits(table, v as i64);
            encode_latent_symbol(&mut enc, table, v as i64);
        }
    }
    (enc.finish(), estimate)
}

fn decode_coarse_latent(
    bytes: &[u8],
    shape: &[usize],
    tables: &FactorizedTables,
) -> Result<Arr> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Arr::zeros(ndarray::IxDyn(shape));
    let c = shape[0];
    let spatial: usize = shape[1..].iter().product();
    {
        let mut flat = out.view_mut().into_shape((c, spatial)).unwrap();
        for ch in 0..c {
            let table = tables.channel(ch);
            for e in 0..spatial {
                flat[(ch, e)] = decode_latent_symbol(&mut dec, table)? as f64;
            }
        }
    }
    Ok(out)
}

impl VideoModel {
    /// Shape of the coarse motion latent for a padded (H, W) frame.
    fn coarse_latent_shape(&self, padded: (usize, usize)) -> [usize; 3] {
        [self.cfg.latent_ch, padded.0 / 32, padded.1 / 32]
    }

    /// Hyper-latent shape for a main latent shape.
    fn hyper_shape_of(&self, latent: &[usize; 3]) -> [usize; 3] {
        [self.cfg.hyper_ch, latent[1] / 4, latent[2] / 4]
    }

    /// Encode one P-frame. `x_t` is the original frame; `reference` is the
    /// previous *reconstruction*. Returns the record, the reconstruction
    /// (which the decoder will reproduce bit-exactly) and statistics.
    pub fn encode_pframe(
        &self,
        tables: &ModelTables,
        x_t: &Frame,
        reference: &Frame,
    ) -> PFrameResult {
        let g = &mut Graph::inference();
        let dims = (x_t.height(), x_t.width());
        let (x_pad, _) = pad_frame(x_t);
        let (ref_pad, _) = pad_frame(reference);
        let vx = frame_var(g, &x_pad);
        let vref = frame_var(g, &ref_pad);
        let f_cur = self.features.extract(g, &vx);
        let f_ref = self.features.extract(g, &vref);

        // coarse branch
        let (f_tilde, coarse_bytes, coarse_est) = if self.c2f_enabled {
            let dc_ref = self.downsampler.forward(g, &f_ref);
            let dc_cur = self.downsampler.forward(g, &f_cur);
            let o_c = self.est_coarse.forward(g, &dc_ref, &dc_cur);
            let m_c = self.codec_coarse.encode(g, &o_c);
            let m_c_hat = quantize_infer(m_c.data());
            let (bytes, est) = encode_coarse_latent(&m_c_hat, &tables.coarse);
            let vm = g.constant(m_c_hat);
            let o_c_dec = self.codec_coarse.decode(g, &vm);
            let o_c_full = self.up_offsets.forward(g, &o_c_dec);
            (self.comp_coarse.forward(g, &f_ref, &o_c_full), bytes, est)
        } else {
            (f_ref.clone(), RangeEncoder::new().finish(), 0.0)
        };

        // fine branch
        let o_f = self.est_fine.forward(g, &f_tilde, &f_cur);
        let m_f = self.codec_fine.encode(g, &o_f);
        let hyper_m = self.hyper_motion.compress(&m_f, &tables.hyper_motion);
        let mut enc = RangeEncoder::new();
        let (m_f_hat, fine_est, fine_symbols) = if self.modes_enabled {
            let maps = predict_modes(&self.mode_net, &hyper_m.mu, &hyper_m.sigma);
            hamc_encode(&mut enc, m_f.data(), &hyper_m.mu, &hyper_m.sigma, &maps)
        } else {
            let all_keep = ndarray::Array3::<u8>::ones((
                m_f.shape()[0],
                m_f.shape()[1],
                m_f.shape()[2],
            ));
            harc_encode(&mut enc, m_f.data(), &hyper_m.mu, &hyper_m.sigma, &all_keep)
        };
        let fine_main = enc.finish();
        let vmf = g.constant(m_f_hat);
        let o_f_dec = self.codec_fine.decode(g, &vmf);
        let f_bar = self.comp_fine.forward(g, &f_tilde, &o_f_dec);

        // prediction quality diagnostic (what the frame would look like
        // with zero residual)
        let pred_frame = self.features.reconstruct(g, &f_bar, dims, true);
        let pred = var_to_frame(&pred_frame);
        let predicted_mse = mse_255(&pred.pixels, &x_t.pixels);
        let predicted_psnr = psnr(&pred.pixels, &x_t.pixels);

        // residual branch
        let r = g.sub(&f_cur, &f_bar);
        let y_r = self.res_codec.encode(g, &r);
        let hyper_r = self.hyper_res.compress(&y_r, &tables.hyper_res);
        let mut enc = RangeEncoder::new();
        let mask = if self.modes_enabled {
            predict_skip_mask(&self.skip_net, &hyper_r.mu, &hyper_r.sigma)
        } else {
            ndarray::Array3::<u8>::ones((y_r.shape()[0], y_r.shape()[1], y_r.shape()[2]))
        };
        let (y_r_hat, res_est, res_kept) =
            harc_encode(&mut enc, y_r.data(), &hyper_r.mu, &hyper_r.sigma, &mask);
        let res_main = enc.finish();
        let vyr = g.constant(y_r_hat);
        let r_hat = self.res_codec.decode(g, &vyr);
        let f_hat = g.add(&f_bar, &r_hat);
        let recon_v = self.features.reconstruct(g, &f_hat, dims, true);
        let recon = var_to_frame(&recon_v);

        let stats = PFrameStats {
            coarse_bytes: coarse_bytes.len(),
            fine_hyper_bytes: hyper_m.bytes.len(),
            fine_main_bytes: fine_main.len(),
            res_hyper_bytes: hyper_r.bytes.len(),
            res_main_bytes: res_main.len(),
            coarse_bits_estimate: coarse_est,
            fine_bits_estimate: fine_est + hyper_m.estimated_bits,
            res_bits_estimate: res_est + hyper_r.estimated_bits,
            fine_symbols,
            res_kept_symbols: res_kept,
            predicted_mse,
            predicted_psnr,
        };
        PFrameResult {
            record: FrameRecord::P {
                coarse: coarse_bytes,
                fine: SegmentPair {
                    hyper: hyper_m.bytes,
                    main: fine_main,
                },
                residual: SegmentPair {
                    hyper: hyper_r.bytes,
                    main: res_main,
                },
            },
            recon,
            stats,
        }
    }

    /// Decode one P-frame from its record and the previous reconstruction.
    pub fn decode_pframe(
        &self,
        tables: &ModelTables,
        record: &FrameRecord,
        reference: &Frame,
        dims: (usize, usize),
    ) -> Result<Frame> {
        let FrameRecord::P {
            coarse,
            fine,
            residual,
        } = record
        else {
            return Err(Error::BadInput("expected a P-frame record".into()));
        };
        let g = &mut Graph::inference();
        let (ref_pad, _) = pad_frame(reference);
        let padded = (ref_pad.height(), ref_pad.width());
        let vref = frame_var(g, &ref_pad);
        let f_ref = self.features.extract(g, &vref);

        // coarse motion -> compensate
        let f_tilde = if self.c2f_enabled {
            let m_c_hat =
                decode_coarse_latent(coarse, &self.coarse_latent_shape(padded), &tables.coarse)?;
            let vm = g.constant(m_c_hat);
            let o_c_dec = self.codec_coarse.decode(g, &vm);
            let o_c_full = self.up_offsets.forward(g, &o_c_dec);
            self.comp_coarse.forward(g, &f_ref, &o_c_full)
        } else {
            f_ref.clone()
        };

        // fine hyper -> (mu, sigma) -> modes -> symbols -> compensate
        let latent_shape = [self.cfg.latent_ch, padded.0 / 8, padded.1 / 8];
        let (mu_m, sigma_m, _) = self.hyper_motion.decompress(
            &fine.hyper,
            &self.hyper_shape_of(&latent_shape),
            &tables.hyper_motion,
        )?;
        let mut dec = RangeDecoder::new(&fine.main)?;
        let m_f_hat = if self.modes_enabled {
            let maps = predict_modes(&self.mode_net, &mu_m, &sigma_m);
            hamc_decode(&mut dec, &mu_m, &sigma_m, &maps)?
        } else {
            let all_keep =
                ndarray::Array3::<u8>::ones((latent_shape[0], latent_shape[1], latent_shape[2]));
            harc_decode(&mut dec, &mu_m, &sigma_m, &all_keep)?
        };
        let vmf = g.constant(m_f_hat);
        let o_f_dec = self.codec_fine.decode(g, &vmf);
        let f_bar = self.comp_fine.forward(g, &f_tilde, &o_f_dec);

        // residual hyper -> (mu, sigma) -> mask -> symbols -> reconstruct
        let (mu_r, sigma_r, _) = self.hyper_res.decompress(
            &residual.hyper,
            &self.hyper_shape_of(&latent_shape),
            &tables.hyper_res,
        )?;
        let mut dec = RangeDecoder::new(&residual.main)?;
        let mask = if self.modes_enabled {
            predict_skip_mask(&self.skip_net, &mu_r, &sigma_r)
        } else {
            ndarray::Array3::<u8>::ones((latent_shape[0], latent_shape[1], latent_shape[2]))
        };
        let y_r_hat = harc_decode(&mut dec, &mu_r, &sigma_r, &mask)?;
        let vyr = g.constant(y_r_hat);
        let r_hat = self.res_codec.decode(g, &vyr);
        let f_hat = g.add(&f_bar, &r_hat);
        let recon_v = self.features.reconstruct(g, &f_hat, dims, true);
        Ok(var_to_frame(&recon_v))
    }
}

/// Per-frame byte accounting of an encoded stream.
#[derive(Debug, Clone, Default)]
pub struct FrameBytes {
    pub intra: usize,
    pub coarse: usize,
    pub fine: usize,
    pub residual: usize,
    /// Record framing overhead (type byte + length prefixes).
    pub framing: usize,
}

impl FrameBytes {
    pub fn total(&self) -> usize {
        self.intra + self.coarse + self.fine + self.residual + self.framing
    }
}

/// Encoder output: the file image, the encoder-side reconstructions (the
/// closed-loop contract says the decoder reproduces these exactly) and
/// per-frame statistics.
pub struct EncodedVideo {
    pub bytes: Vec<u8>,
    pub reconstructions: Vec<Frame>,
    pub frame_bytes: Vec<FrameBytes>,
    pub pframe_stats: Vec<Option<PFrameStats>>,
}

/// Bitstream flag: every 4th P-frame of a GoP was coded with the boost
/// (next-higher-lambda) model.
pub const FLAG_BOOSTED: u8 = 1;

/// True when the frame at `gop_pos` (0 = I-frame) takes the boost model.
fn is_boost_position(gop_pos: usize) -> bool {
    gop_pos != 0 && gop_pos % 4 == 0
}

/// Encode a clip: frame 1 of each GoP goes through the intra codec, the
/// rest through the P-frame pipeline against the previous reconstruction.
pub fn encode_video(
    model: &VideoModel,
    tables: &ModelTables,
    frames: &[Frame],
    gop_size: usize,
) -> Result<EncodedVideo> {
    encode_video_with_boost(model, tables, None, frames, gop_size)
}

/// [`encode_video`] with the cumulative-error mitigation: when a boost
/// model (trained at the next-higher lambda) is supplied, every 4th
/// P-frame of a GoP is coded with it.
pub fn encode_video_with_boost(
    model: &VideoModel,
    tables: &ModelTables,
    boost: Option<(&VideoModel, &ModelTables)>,
    frames: &[Frame],
    gop_size: usize,
) -> Result<EncodedVideo> {
    if frames.is_empty() {
        return Err(Error::BadInput("cannot encode an empty clip".into()));
    }
    if gop_size == 0 {
        return Err(Error::BadInput("gop_size must be at least 1".into()));
    }
    let (h, w) = (frames[0].height(), frames[0].width());
    for (i, f) in frames.iter().enumerate() {
        if (f.height(), f.width()) != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "frame {i} is {}x{}, expected {h}x{w}",
                f.height(),
                f.width()
            )));
        }
    }
    let header = BitstreamHeader {
        version: VERSION,
        flags: if boost.is_some() { FLAG_BOOSTED } else { 0 },
        width: w as u16,
        height: h as u16,
        frame_count: frames.len() as u32,
        gop_size: gop_size as u16,
        model_id: model.cfg.model_id,
        intra_codec_id: intra::INTRA_RAW_DEFLATE,
    };
    let mut bytes = Vec::new();
    header.write(&mut bytes);

    let mut recons: Vec<Frame> = Vec::with_capacity(frames.len());
    let mut frame_bytes = Vec::with_capacity(frames.len());
    let mut pframe_stats = Vec::with_capacity(frames.len());
    for (i, frame) in frames.iter().enumerate() {
        if i % gop_size == 0 {
            let payload = intra::intra_encode(frame);
            let record = FrameRecord::Intra(payload.clone());
            frame_bytes.push(FrameBytes {
                intra: payload.len(),
                framing: record.byte_len() - payload.len(),
                ..Default::default()
            });
            record.write(&mut bytes);
            recons.push(intra::intra_reconstruction(frame));
            pframe_stats.push(None);
        } else {
            let reference = recons.last().expect("previous reconstruction exists");
            let (m, t) = match boost {
                Some(b) if is_boost_position(i % gop_size) => b,
                _ => (model, tables),
            };
            let result = m.encode_pframe(t, frame, reference);
            let (coarse_len, fine_len, res_len) = match &result.record {
                FrameRecord::P {
                    coarse,
                    fine,
                    residual,
                } => (
                    coarse.len(),
                    fine.hyper.len() + fine.main.len(),
                    residual.hyper.len() + residual.main.len(),
                ),
                _ => unreachable!(),
            };
            frame_bytes.push(FrameBytes {
                coarse: coarse_len,
                fine: fine_len,
                residual: res_len,
                framing: result.record.byte_len() - coarse_len - fine_len - res_len,
                ..Default::default()
            });
            result.record.write(&mut bytes);
            recons.push(result.recon);
            pframe_stats.push(Some(result.stats));
        }
    }
    Ok(EncodedVideo {
        bytes,
        reconstructions: recons,
        frame_bytes,
        pframe_stats,
    })
}

/// Decode a stream produced by [`encode_video`]. Refuses model mismatches
/// before emitting any frame; errors name the frame they occurred in.
pub fn decode_video(model: &VideoModel, tables: &ModelTables, bytes: &[u8]) -> Result<Vec<Frame>> {
    decode_video_with_boost(model, tables, None, bytes)
}

/// [`decode_video`] for streams that may carry boosted P-frames.
pub fn decode_video_with_boost(
    model: &VideoModel,
    tables: &ModelTables,
    boost: Option<(&VideoModel, &ModelTables)>,
    bytes: &[u8],
) -> Result<Vec<Frame>> {
    let mut r = Reader::new(bytes);
    let header = r.header()?;
    if header.model_id != model.cfg.model_id {
        return Err(Error::ModelMismatch(format!(
            "stream was coded with model_id {}, checkpoint has {}",
            header.model_id, model.cfg.model_id
        )));
    }
    if header.intra_codec_id != intra::INTRA_RAW_DEFLATE {
        return Err(Error::ModelMismatch(format!(
            "unsupported intra_codec_id {}",
            header.intra_codec_id
        )));
    }
    if header.flags & FLAG_BOOSTED != 0 && boost.is_none() {
        return Err(Error::ModelMismatch(
            "stream uses a boost model; supply the boost checkpoint".into(),
        ));
    }
    let dims = (header.height as usize, header.width as usize);
    let gop = header.gop_size as usize;
    let mut out: Vec<Frame> = Vec::with_capacity(header.frame_count as usize);
    for i in 0..header.frame_count as usize {
        let record = r.frame_record().map_err(|e| e.in_frame(i))?;
        let frame = match (&record, i % gop) {
            (FrameRecord::Intra(payload), 0) => {
                intra::intra_decode(payload, dims.0, dims.1).map_err(|e| e.in_frame(i))?
            }
            (FrameRecord::P { .. }, k) if k != 0 => {
                let reference = out.last().expect("P-frame has a predecessor");
                let (m, t) = match boost {
                    Some(b) if header.flags & FLAG_BOOSTED != 0 && is_boost_position(k) => b,
                    _ => (model, tables),
                };
                m.decode_pframe(t, &record, reference, dims)
                    .map_err(|e| e.in_frame(i))?
            }
            _ => {
                return Err(Error::CorruptStream {
                    offset: r.position(),
                    reason: format!("frame {i} record type contradicts the GoP structure"),
                })
            }
        };
        out.push(frame);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::bitstream::HEADER_LEN;
    use crate::synth::{gen_synthetic, SynthConfig};

    fn tiny_model() -> VideoModel {
        let cfg = ModelConfig {
            feat_ch: 8,
            latent_ch: 8,
            hyper_ch: 8,
            mode_ch: 8,
            deform_kernel: 3,
            deform_groups: 2,
            model_id: 7,
        };
        VideoModel::new(cfg, 123)
    }

    fn short_clip(n: usize) -> Vec<Frame> {
        gen_synthetic(&SynthConfig {
            width: 64,
            height: 64,
            frames: n,
            seed: 99,
            ..Default::default()
        })
    }

    #[test]
    fn closed_loop_decode_matches_encoder_reconstructions() {
        let model = tiny_model();
        let tables = model.tables();
        let clip = short_clip(4);
        let enc = encode_video(&model, &tables, &clip, 4).unwrap();
        let dec = decode_video(&model, &tables, &enc.bytes).unwrap();
        assert_eq!(dec.len(), clip.len());
        for (i, (d, e)) in dec.iter().zip(&enc.reconstructions).enumerate() {
            assert_eq!(d, e, "frame {i} differs between decoder and encoder");
        }
    }

    #[test]
    fn byte_accounting_closes_exactly() {
        let model = tiny_model();
        let tables = model.tables();
        let clip = short_clip(3);
        let enc = encode_video(&model, &tables, &clip, 3).unwrap();
        let total: usize = enc.frame_bytes.iter().map(|fb| fb.total()).sum();
        assert_eq!(HEADER_LEN + total, enc.bytes.len());
    }

    #[test]
    fn gop_one_is_all_intra() {
        let model = tiny_model();
        let tables = model.tables();
        let clip = short_clip(3);
        let enc = encode_video(&model, &tables, &clip, 1).unwrap();
        for fb in &enc.frame_bytes {
            assert!(fb.intra > 0);
            assert_eq!(fb.coarse + fb.fine + fb.residual, 0);
        }
        let dec = decode_video(&model, &tables, &enc.bytes).unwrap();
        // lossless intra: reconstruction equals the 8-bit quantized input
        for (d, orig) in dec.iter().zip(&clip) {
            assert_eq!(d, &intra::intra_reconstruction(orig));
        }
    }

    #[test]
    fn wrong_model_id_is_refused_before_decoding() {
        let model = tiny_model();
        let tables = model.tables();
        let clip = short_clip(2);
        let enc = encode_video(&model, &tables, &clip, 2).unwrap();
        let mut other = tiny_model();
        other.cfg.model_id = 9;
        let tables2 = other.tables();
        match decode_video(&other, &tables2, &enc.bytes) {
            Err(Error::ModelMismatch(_)) => {}
            other => panic!("expected model mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncating_last_segment_names_the_frame() {
        let model = tiny_model();
        let tables = model.tables();
        let clip = short_clip(3);
        let enc = encode_video(&model, &tables, &clip, 3).unwrap();
        let mut bytes = enc.bytes.clone();
        bytes.truncate(bytes.len() - 1);
        match decode_video(&model, &tables, &bytes) {
            Err(Error::Frame { frame, .. }) => assert_eq!(frame, 2),
            other => panic!("expected frame-indexed error, got {other:?}"),
        }
    }

    #[test]
    fn nonaligned_dims_still_roundtrip() {
        let model = tiny_model();
        let tables = model.tables();
        let clip: Vec<Frame> = gen_synthetic(&SynthConfig {
            width: 50,
            height: 35,
            frames: 3,
            seed: 5,
            ..Default::default()
        });
        let enc = encode_video(&model, &tables, &clip, 3).unwrap();
        let dec = decode_video(&model, &tables, &enc.bytes).unwrap();
        for (d, e) in dec.iter().zip(&enc.reconstructions) {
            assert_eq!(d, e);
        }
        assert_eq!(dec[0].height(), 35);
        assert_eq!(dec[0].width(), 50);
    }
}
