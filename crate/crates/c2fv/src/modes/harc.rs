//! Hyperprior-guided adaptive residual compression: a one-branch network
//! over (mu, sigma) decides skip/non-skip per entry per channel. Kept
//! entries are coded under the Gaussian model; skipped entries decode to
//! zero and cost nothing.

use super::hamc::{st_gumbel_weights, GumbelConfig};
use crate::config::ModelConfig;
use crate::entropy::range::{RangeDecoder, RangeEncoder};
use crate::entropy::tables::{
    decode_latent_symbol, encode_latent_symbol, latent_symbol_bits, GaussianTables,
};
use crate::graph::{Arr, Graph, Var};
use crate::nn::{gumbel_noise, Conv2d, Module, Param};
use crate::Result;
use ndarray::{Array3, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Keep is logit index 0, skip is 1; argmax ties resolve to keep.
pub const KEEP: usize = 0;

/// One-branch skip mode prediction network; the 1x1 head emits two logits
/// per entry per latent channel.
pub struct SkipPredictNet {
    t1: Conv2d,
    t2: Conv2d,
    t3: Conv2d,
    head: Conv2d,
    latent_ch: usize,
}

impl SkipPredictNet {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let (cl, cm) = (cfg.latent_ch, cfg.mode_ch);
        SkipPredictNet {
            t1: Conv2d::same(rng, 2 * cl, cm),
            t2: Conv2d::same(rng, cm, cm),
            t3: Conv2d::same(rng, cm, cm),
            head: Conv2d::new(rng, cm, 2 * cl, 1, 1, 0),
            latent_ch: cl,
        }
    }

    /// (mu, sigma) -> logits (C, 2, h, w).
    pub fn forward(&self, g: &mut Graph, mu: &Var, sigma: &Var) -> Var {
        let s = mu.shape().to_vec();
        let x = g.concat_axis0(mu, sigma);
        let h = self.t1.forward(g, &x);
        let h = g.relu(&h);
        let h = self.t2.forward(g, &h);
        let h = g.relu(&h);
        let h = self.t3.forward(g, &h);
        let h = g.relu(&h);
        let logits = self.head.forward(g, &h);
        g.reshape(&logits, &[self.latent_ch, 2, s[1], s[2]])
    }
}

impl Module for SkipPredictNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.t1.visit_params(&format!("{prefix}.t1"), f);
        self.t2.visit_params(&format!("{prefix}.t2"), f);
        self.t3.visit_params(&format!("{prefix}.t3"), f);
        self.head.visit_params(&format!("{prefix}.head"), f);
    }
}

/// Binary keep mask (1 = keep) from the logits; ties keep.
pub fn skip_mask_from_logits(logits: &Arr) -> Array3<u8> {
    let s = logits.shape();
    let (c, h, w) = (s[0], s[2], s[3]);
    let mut mask = Array3::<u8>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let keep = logits[[ci, KEEP, y, x]] >= logits[[ci, 1, y, x]];
                mask[(ci, y, x)] = keep as u8;
            }
        }
    }
    mask
}

pub fn predict_skip_mask(net: &SkipPredictNet, mu: &Arr, sigma: &Arr) -> Array3<u8> {
    let mut g = Graph::inference();
    let vm = g.constant(mu.clone());
    let vs = g.constant(sigma.clone());
    let logits = net.forward(&mut g, &vm, &vs);
    skip_mask_from_logits(logits.data())
}

/// Training-path HARC: soft keep probabilities gate both the noisy latent
/// and its rate. Returns (soft reconstruction, scalar rate).
#[allow(clippy::too_many_arguments)]
pub fn soft_harc(
    g: &mut Graph,
    y: &Var,
    mu: &Var,
    sigma: &Var,
    logits: &Var,
    noise: &Arr,
    gumbel: GumbelConfig,
    rng: &mut ChaCha8Rng,
) -> (Var, Var) {
    let gn = if gumbel.noise_enabled {
        Some(gumbel_noise(rng, logits.shape()))
    } else {
        None
    };
    let w = st_gumbel_weights(g, logits, gn.as_ref(), gumbel.temperature);
    let keep = g.index_axis1(&w, KEEP);
    let nv = g.constant(noise.clone());
    let noisy = g.add(y, &nv);
    let recon = g.mul(&keep, &noisy);
    let bits = g.gaussian_bits(&noisy, mu, sigma);
    let gated = g.mul(&keep, &bits);
    let rate = g.sum_all(&gated);
    (recon, rate)
}

/// Inference-path HARC encode: kept entries are coded in raster order over
/// (channel, row, col); skipped entries contribute nothing. Returns the
/// reconstructed latent, the bit estimate and the kept-symbol count.
pub fn harc_encode(
    enc: &mut RangeEncoder,
    y: &Arr,
    mu: &Arr,
    sigma: &Arr,
    mask: &Array3<u8>,
) -> (Arr, f64, usize) {
    let tables = GaussianTables::get();
    let s = y.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut y_hat = Arr::zeros(IxDyn(s));
    let mut estimate = 0.0;
    let mut kept = 0usize;
    for ci in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                if mask[(ci, yy, xx)] == 0 {
                    continue;
                }
                let v = y[[ci, yy, xx]].round() as i64;
                let shift = mu[[ci, yy, xx]].round() as i64;
                let table = tables.for_sigma(sigma[[ci, yy, xx]]);
                let coded = v - shift;
                estimate += latent_symbol_bits(table, coded);
                encode_latent_symbol(enc, table, coded);
                y_hat[[ci, yy, xx]] = v as f64;
                kept += 1;
            }
        }
    }
    (y_hat, estimate, kept)
}

/// Decoder mirror of [`harc_encode`].
pub fn harc_decode(
    dec: &mut RangeDecoder,
    mu: &Arr,
    sigma: &Arr,
    mask: &Array3<u8>,
) -> Result<Arr> {
    let tables = GaussianTables::get();
    let s = mu.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut y_hat = Arr::zeros(IxDyn(s));
    for ci in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                if mask[(ci, yy, xx)] == 0 {
                    continue;
                }
                let shift = mu[[ci, yy, xx]].round() as i64;
                let table = tables.for_sigma(sigma[[ci, yy, xx]]);
                let coded = decode_latent_symbol(dec, table)?;
                y_hat[[ci, yy, xx]] = (coded + shift) as f64;
            }
        }
    }
    Ok(y_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::{gaussian_bits_scalar, quantize_infer};
    use crate::nn::seeded_rng;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            feat_ch: 8,
            latent_ch: 4,
            hyper_ch: 8,
            mode_ch: 8,
            deform_kernel: 3,
            deform_groups: 2,
            model_id: 0,
        }
    }

    #[test]
    fn mask_shape_and_tie_break() {
        let mut logits = Arr::zeros(IxDyn(&[2, 2, 3, 3]));
        // ties everywhere -> keep
        let mask = skip_mask_from_logits(&logits);
        assert!(mask.iter().all(|&m| m == 1));
        logits[[0, 1, 0, 0]] = 1.0; // skip wins at one position
        let mask = skip_mask_from_logits(&logits);
        assert_eq!(mask[(0, 0, 0)], 0);
        assert_eq!(mask.iter().filter(|&&m| m == 0).count(), 1);
        // explicit keep-favouring logits
        logits[[0, 0, 1, 1]] = 5.0;
        let mask = skip_mask_from_logits(&logits);
        assert_eq!(mask[(0, 1, 1)], 1);
    }

    #[test]
    fn all_keep_equals_plain_coding_and_all_skip_is_zero() {
        let mut rng = seeded_rng(13);
        let shape = [3, 4, 4];
        let y = Arr::from_shape_simple_fn(IxDyn(&shape), || rng.gen_range(-5.0..5.0));
        let mu = Arr::from_shape_simple_fn(IxDyn(&shape), || rng.gen_range(-1.0..1.0));
        let sigma = Arr::from_shape_simple_fn(IxDyn(&shape), || rng.gen_range(0.2..3.0));

        let keep_all = Array3::<u8>::ones((3, 4, 4));
        let mut enc = RangeEncoder::new();
        let (y_hat, _, kept) = harc_encode(&mut enc, &y, &mu, &sigma, &keep_all);
        assert_eq!(kept, 48);
        assert_eq!(y_hat, quantize_infer(&y));
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        let decoded = harc_decode(&mut dec, &mu, &sigma, &keep_all).unwrap();
        assert_eq!(decoded, y_hat);

        let skip_all = Array3::<u8>::zeros((3, 4, 4));
        let mut enc = RangeEncoder::new();
        let (y_hat, est, kept) = harc_encode(&mut enc, &y, &mu, &sigma, &skip_all);
        assert_eq!(kept, 0);
        assert_eq!(est, 0.0);
        assert!(y_hat.iter().all(|&v| v == 0.0));
        assert_eq!(enc.finish().len(), 4); // flush only
    }

    #[test]
    fn mixed_mask_bits_match_per_element_oracle() {
        let mut rng = seeded_rng(14);
        let shape = [2, 4, 4];
        let y = Arr::from_shape_simple_fn(IxDyn(&shape), || rng.gen_range(-5.0..5.0));
        let mu = Arr::from_shape_simple_fn(IxDyn(&shape), || rng.gen_range(-1.0..1.0));
        let sigma = Arr::from_shape_simple_fn(IxDyn(&shape), || rng.gen_range(0.2..3.0));
        let mask = Array3::from_shape_fn((2, 4, 4), |_| rng.gen_range(0..2) as u8);

        let mut enc = RangeEncoder::new();
        let (_, est, _) = harc_encode(&mut enc, &y, &mu, &sigma, &mask);
        // brute-force per-element sum over kept positions only
        let tables = GaussianTables::get();
        let mut want = 0.0;
        for ci in 0..2 {
            for yy in 0..4 {
                for xx in 0..4 {
                    if mask[(ci, yy, xx)] == 1 {
                        let v = y[[ci, yy, xx]].round() as i64;
                        let shift = mu[[ci, yy, xx]].round() as i64;
                        let t = tables.for_sigma(sigma[[ci, yy, xx]]);
                        want += latent_symbol_bits(t, v - shift);
                    }
                }
            }
        }
        assert!((est - want).abs() < 1e-12);
    }

    #[test]
    fn soft_harc_all_keep_matches_plain_rate() {
        let mut rng = seeded_rng(15);
        let shape = [2, 4, 4];
        let y = Arr::from_shape_simple_fn(IxDyn(&shape), || rng.gen_range(-3.0..3.0));
        let mu = Arr::from_shape_simple_fn(IxDyn(&shape), || rng.gen_range(-0.5..0.5));
        let sigma = Arr::from_shape_simple_fn(IxDyn(&shape), || rng.gen_range(0.5..2.0));
        let noise = crate::nn::uniform_noise(&mut rng, &shape);
        let mut logits = Arr::zeros(IxDyn(&[2, 2, 4, 4]));
        logits.index_axis_mut(ndarray::Axis(1), KEEP).fill(9.0);
        let mut g = Graph::inference();
        let vy = g.constant(y.clone());
        let vm = g.constant(mu.clone());
        let vs = g.constant(sigma.clone());
        let vl = g.constant(logits);
        let (recon, rate) = soft_harc(
            &mut g,
            &vy,
            &vm,
            &vs,
            &vl,
            &noise,
            GumbelConfig {
                temperature: 1.0,
                noise_enabled: false,
            },
            &mut rng.clone(),
        );
        let want_recon = &y + &noise;
        assert!((recon.data() - &want_recon).mapv(f64::abs).sum() < 1e-9);
        let mut want = 0.0;
        let noisy = &y + &noise;
        for i in 0..noisy.len() {
            want += gaussian_bits_scalar(
                noisy.as_slice().unwrap()[i],
                mu.as_slice().unwrap()[i],
                sigma.as_slice().unwrap()[i],
            );
        }
        assert!((rate.scalar() - want).abs() < 1e-9);
    }

    #[test]
    fn encoder_and_decoder_masks_agree() {
        let cfg = tiny_cfg();
        let mut rng = seeded_rng(16);
        let net = SkipPredictNet::new(&mut rng, &cfg);
        let mu = Arr::from_shape_simple_fn(IxDyn(&[4, 8, 8]), || rng.gen_range(-1.0..1.0));
        let sigma = Arr::from_shape_simple_fn(IxDyn(&[4, 8, 8]), || rng.gen_range(0.2..2.0));
        let m1 = predict_skip_mask(&net, &mu, &sigma);
        let m2 = predict_skip_mask(&net, &mu, &sigma);
        assert_eq!(m1, m2);
        assert_eq!(m1.dim(), (4, 8, 8));
    }
}
