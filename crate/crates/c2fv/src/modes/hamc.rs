//! Hyperprior-guided adaptive motion compression.
//!
//! A two-branch network over the decoded (mu, sigma) maps scores the four
//! basic modes per channel, once per 2x2 subblock and once per 4x4 block.
//! Inference takes the argmax and codes one pooled symbol per region;
//! training combines all candidate partitions with straight-through Gumbel
//! weights so mode selection stays differentiable.

use super::{
    compose_partition, mode_guided_avgpool, pooled_params, select_mode_infer, ResolutionMode,
    BLOCK,
};
use crate::config::{ModelConfig, SIGMA_MIN};
use crate::entropy::range::{RangeDecoder, RangeEncoder};
use crate::entropy::tables::{
    decode_latent_symbol, encode_latent_symbol, latent_symbol_bits, GaussianTables,
};
use crate::graph::{Arr, Graph, Var};
use crate::nn::{gumbel_noise, Conv2d, Module, Param};
use crate::Result;
use ndarray::{Array3, ArrayView2, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Straight-through Gumbel selection over axis 1 of (C, M, h, w) scores:
/// hard one-hot forward, softmax((scores + g)/tau) gradient.
pub fn st_gumbel_weights(g: &mut Graph, scores: &Var, noise: Option<&Arr>, tau: f64) -> Var {
    let noisy = match noise {
        Some(n) => {
            let nv = g.constant(n.clone());
            g.add(scores, &nv)
        }
        None => scores.clone(),
    };
    let scaled = g.scale(&noisy, 1.0 / tau);
    let soft = g.softmax_axis1(&scaled);
    let hard = hard_one_hot(noisy.data());
    let delta = g.constant(&hard - soft.data());
    g.add(&soft, &delta)
}

/// One-hot argmax along axis 1, lowest index on ties.
pub fn hard_one_hot(scores: &Arr) -> Arr {
    let s = scores.shape();
    let mut out = Arr::zeros(IxDyn(s));
    let (c, m, h, w) = (s[0], s[1], s[2], s[3]);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                for k in 1..m {
                    if scores[[ci, k, y, x]] > scores[[ci, best, y, x]] {
                        best = k;
                    }
                }
                out[[ci, best, y, x]] = 1.0;
            }
        }
    }
    out
}

/// Per-position argmax mode indices from a (C, 4, h, w) score tensor.
pub fn argmax_modes(scores: &Arr) -> Array3<u8> {
    let s = scores.shape();
    let (c, h, w) = (s[0], s[2], s[3]);
    let mut out = Array3::<u8>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = [
                    scores[[ci, 0, y, x]],
                    scores[[ci, 1, y, x]],
                    scores[[ci, 2, y, x]],
                    scores[[ci, 3, y, x]],
                ];
                out[(ci, y, x)] = select_mode_infer(&v) as u8;
            }
        }
    }
    out
}

/// Gumbel-softmax settings for the training path.
#[derive(Debug, Clone, Copy)]
pub struct GumbelConfig {
    pub temperature: f64,
    pub noise_enabled: bool,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            temperature: 1.0,
            noise_enabled: true,
        }
    }
}

/// Two-branch resolution mode prediction network.
pub struct ModePredictNet {
    t1: Conv2d,
    t2: Conv2d,
    t3: Conv2d,
    head2: Conv2d, // stride 2, one 4-vector per 2x2 subblock per channel
    head4: Conv2d, // kernel 4 stride 4, one 4-vector per 4x4 block per channel
    latent_ch: usize,
}

impl ModePredictNet {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let (cl, cm) = (cfg.latent_ch, cfg.mode_ch);
        ModePredictNet {
            t1: Conv2d::same(rng, 2 * cl, cm),
            t2: Conv2d::same(rng, cm, cm),
            t3: Conv2d::same(rng, cm, cm),
            head2: Conv2d::new(rng, cm, 4 * cl, 3, 2, 1),
            head4: Conv2d::new(rng, cm, 4 * cl, 4, 4, 0),
            latent_ch: cl,
        }
    }

    /// (mu, sigma) -> (scores2 (C,4,h/2,w/2), scores4 (C,4,h/4,w/4)).
    pub fn forward(&self, g: &mut Graph, mu: &Var, sigma: &Var) -> (Var, Var) {
        let s = mu.shape();
        assert!(
            s[1] % BLOCK == 0 && s[2] % BLOCK == 0,
            "latent dims must divide by the block size"
        );
        let x = g.concat_axis0(mu, sigma);
        let h = self.t1.forward(g, &x);
        let h = g.relu(&h);
        let h = self.t2.forward(g, &h);
        let h = g.relu(&h);
        let h = self.t3.forward(g, &h);
        let h = g.relu(&h);
        let s2 = self.head2.forward(g, &h);
        let s4 = self.head4.forward(g, &h);
        let (cl, hh, ww) = (self.latent_ch, s[1], s[2]);
        let s2 = g.reshape(&s2, &[cl, 4, hh / 2, ww / 2]);
        let s4 = g.reshape(&s4, &[cl, 4, hh / 4, ww / 4]);
        (s2, s4)
    }
}

impl Module for ModePredictNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.t1.visit_params(&format!("{prefix}.t1"), f);
        self.t2.visit_params(&format!("{prefix}.t2"), f);
        self.t3.visit_params(&format!("{prefix}.t3"), f);
        self.head2.visit_params(&format!("{prefix}.head2"), f);
        self.head4.visit_params(&format!("{prefix}.head4"), f);
    }
}

/// Differentiable pooled reconstruction and rate for one candidate region
/// shape, expanded back to full resolution. The per-region noise sample is
/// the element of `noise` at the region's top-left cell, so the all-1x1
/// candidate reduces exactly to plain per-element coding.
fn candidate_branch(
    g: &mut Graph,
    y: &Var,
    mu: &Var,
    sigma: &Var,
    noise: &Arr,
    rh: usize,
    rw: usize,
) -> (Var, Var) {
    let n = (rh * rw) as f64;
    let pooled = g.avgpool(y, rh, rw);
    let nv = g.constant(noise.clone());
    let anchor = g.stride_sample(&nv, rh, rw);
    let noisy = g.add(&pooled, &anchor);
    let mu_bar = g.avgpool(mu, rh, rw);
    let s2 = g.mul(sigma, sigma);
    let ms2 = g.avgpool(&s2, rh, rw);
    let scaled = g.scale(&ms2, 1.0 / n);
    let root = g.sqrt(&scaled);
    let sig_bar = g.clamp_min(&root, SIGMA_MIN);
    let bits = g.gaussian_bits(&noisy, &mu_bar, &sig_bar);
    let recon = g.repeat_upsample(&noisy, rh, rw);
    let per_cell = g.scale(&bits, 1.0 / n);
    let rate = g.repeat_upsample(&per_cell, rh, rw);
    (recon, rate)
}

/// Training-path HAMC: returns the soft reconstruction of the latent and
/// the scalar rate term. `noise` is the quantization proxy; Gumbel noise
/// tensors must match the score shapes when enabled.
#[allow(clippy::too_many_arguments)]
pub fn soft_hamc(
    g: &mut Graph,
    y: &Var,
    mu: &Var,
    sigma: &Var,
    scores2: &Var,
    scores4: &Var,
    noise: &Arr,
    gumbel: GumbelConfig,
    rng: &mut ChaCha8Rng,
) -> (Var, Var) {
    let (g2, g4) = if gumbel.noise_enabled {
        (
            Some(gumbel_noise(rng, scores2.shape())),
            Some(gumbel_noise(rng, scores4.shape())),
        )
    } else {
        (None, None)
    };
    let w2 = st_gumbel_weights(g, scores2, g2.as_ref(), gumbel.temperature);
    let w4 = st_gumbel_weights(g, scores4, g4.as_ref(), gumbel.temperature);

    // 2x2-level candidates combined under the subblock weights
    let sub_shapes = [(1usize, 1usize), (1, 2), (2, 1), (2, 2)];
    let mut recon0: Option<Var> = None;
    let mut rate0: Option<Var> = None;
    for (m, (rh, rw)) in sub_shapes.into_iter().enumerate() {
        let (rec, rate) = candidate_branch(g, y, mu, sigma, noise, rh, rw);
        let wm = g.index_axis1(&w2, m);
        let wf = g.repeat_upsample(&wm, 2, 2);
        let rec = g.mul(&wf, &rec);
        let rate = g.mul(&wf, &rate);
        recon0 = Some(match recon0 {
            Some(acc) => g.add(&acc, &rec),
            None => rec,
        });
        rate0 = Some(match rate0 {
            Some(acc) => g.add(&acc, &rate),
            None => rate,
        });
    }

    // 4x4-level candidates; M0 is the combined subblock branch
    let top_shapes = [(2usize, 4usize), (4, 2), (4, 4)];
    let w0 = g.index_axis1(&w4, 0);
    let w0f = g.repeat_upsample(&w0, 4, 4);
    let mut recon = g.mul(&w0f, &recon0.unwrap());
    let mut rate = g.mul(&w0f, &rate0.unwrap());
    for (m, (rh, rw)) in top_shapes.into_iter().enumerate() {
        let (rec, rt) = candidate_branch(g, y, mu, sigma, noise, rh, rw);
        let wm = g.index_axis1(&w4, m + 1);
        let wf = g.repeat_upsample(&wm, 4, 4);
        let rec = g.mul(&wf, &rec);
        let rt = g.mul(&wf, &rt);
        recon = g.add(&recon, &rec);
        rate = g.add(&rate, &rt);
    }
    let rate_total = g.sum_all(&rate);
    (recon, rate_total)
}

/// Decoded mode maps for one latent, derived on both sides from (mu, sigma).
pub struct ModeMaps {
    pub modes4: Array3<u8>,
    pub modes2: Array3<u8>,
}

pub fn predict_modes(net: &ModePredictNet, mu: &Arr, sigma: &Arr) -> ModeMaps {
    let mut g = Graph::inference();
    let vm = g.constant(mu.clone());
    let vs = g.constant(sigma.clone());
    let (s2, s4) = net.forward(&mut g, &vm, &vs);
    ModeMaps {
        modes4: argmax_modes(s4.data()),
        modes2: argmax_modes(s2.data()),
    }
}

fn block_view(a: &Arr, ch: usize, by: usize, bx: usize) -> ArrayView2<'_, f64> {
    a.slice(ndarray::s![
        ch,
        by * BLOCK..(by + 1) * BLOCK,
        bx * BLOCK..(bx + 1) * BLOCK
    ])
}

fn block_partition(maps: &ModeMaps, ch: usize, by: usize, bx: usize) -> Vec<super::Region> {
    let m4 = ResolutionMode::from_index(maps.modes4[(ch, by, bx)] as usize);
    let sub = [
        maps.modes2[(ch, by * 2, bx * 2)],
        maps.modes2[(ch, by * 2, bx * 2 + 1)],
        maps.modes2[(ch, by * 2 + 1, bx * 2)],
        maps.modes2[(ch, by * 2 + 1, bx * 2 + 1)],
    ]
    .map(|m| ResolutionMode::from_index(m as usize));
    compose_partition(m4, sub)
}

/// Inference-path HAMC encode: pool, quantize once, code each region symbol
/// under its pooled parameters. Returns the reconstructed integer latent and
/// the table-estimate of the coded bits. Symbol order: channels ascending,
/// blocks in raster order, regions in canonical order.
pub fn hamc_encode(
    enc: &mut RangeEncoder,
    y: &Arr,
    mu: &Arr,
    sigma: &Arr,
    maps: &ModeMaps,
) -> (Arr, f64, usize) {
    let tables = GaussianTables::get();
    let s = y.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut y_hat = Arr::zeros(IxDyn(s));
    let mut estimate = 0.0;
    let mut symbols = 0usize;
    for ch in 0..c {
        for by in 0..h / BLOCK {
            for bx in 0..w / BLOCK {
                let partition = block_partition(maps, ch, by, bx);
                let yb = block_view(y, ch, by, bx);
                let mub = block_view(mu, ch, by, bx);
                let sb = block_view(sigma, ch, by, bx);
                let pooled = mode_guided_avgpool(&yb, &partition);
                for (v, r) in pooled.iter().zip(&partition) {
                    let (mu_bar, sig_bar) = pooled_params(&mub, &sb, r);
                    let shift = mu_bar.round() as i64;
                    let coded = *v as i64 - shift;
                    let table = tables.for_sigma(sig_bar);
                    estimate += latent_symbol_bits(table, coded);
                    encode_latent_symbol(enc, table, coded);
                    symbols += 1;
                    for yy in r.y0..r.y0 + r.h {
                        for xx in r.x0..r.x0 + r.w {
                            y_hat[[ch, by * BLOCK + yy, bx * BLOCK + xx]] = *v;
                        }
                    }
                }
            }
        }
    }
    (y_hat, estimate, symbols)
}

/// Decoder mirror of [`hamc_encode`].
pub fn hamc_decode(
    dec: &mut RangeDecoder,
    mu: &Arr,
    sigma: &Arr,
    maps: &ModeMaps,
) -> Result<Arr> {
    let tables = GaussianTables::get();
    let s = mu.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut y_hat = Arr::zeros(IxDyn(s));
    for ch in 0..c {
        for by in 0..h / BLOCK {
            for bx in 0..w / BLOCK {
                let partition = block_partition(maps, ch, by, bx);
                let mub = block_view(mu, ch, by, bx);
                let sb = block_view(sigma, ch, by, bx);
                for r in &partition {
                    let (mu_bar, sig_bar) = pooled_params(&mub, &sb, r);
                    let shift = mu_bar.round() as i64;
                    let table = tables.for_sigma(sig_bar);
                    let coded = decode_latent_symbol(dec, table)?;
                    let v = (coded + shift) as f64;
                    for yy in r.y0..r.y0 + r.h {
                        for xx in r.x0..r.x0 + r.w {
                            y_hat[[ch, by * BLOCK + yy, bx * BLOCK + xx]] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(y_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::quantize_infer;
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

    fn random_latent(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> (Arr, Arr, Arr) {
        let y = Arr::from_shape_simple_fn(IxDyn(&[c, h, w]), || rng.gen_range(-6.0..6.0));
        let mu = Arr::from_shape_simple_fn(IxDyn(&[c, h, w]), || rng.gen_range(-2.0..2.0));
        let sigma = Arr::from_shape_simple_fn(IxDyn(&[c, h, w]), || rng.gen_range(0.2..4.0));
        (y, mu, sigma)
    }

    #[test]
    fn mode_net_emits_both_score_grids() {
        let cfg = tiny_cfg();
        let mut rng = seeded_rng(5);
        let net = ModePredictNet::new(&mut rng, &cfg);
        let mut g = Graph::inference();
        let mu = g.constant(Arr::zeros(IxDyn(&[4, 8, 8])));
        let sigma = g.constant(Arr::ones(IxDyn(&[4, 8, 8])));
        let (s2, s4) = net.forward(&mut g, &mu, &sigma);
        assert_eq!(s2.shape(), &[4, 4, 4, 4]);
        assert_eq!(s4.shape(), &[4, 4, 2, 2]);
        // determinism
        let (s2b, s4b) = net.forward(&mut g, &mu, &sigma);
        assert_eq!(s2.data(), s2b.data());
        assert_eq!(s4.data(), s4b.data());
    }

    #[test]
    fn encode_decode_reproduce_the_same_latent() {
        let cfg = tiny_cfg();
        let mut rng = seeded_rng(6);
        let net = ModePredictNet::new(&mut rng, &cfg);
        let (y, mu, sigma) = random_latent(&mut rng, 4, 8, 8);
        let maps = predict_modes(&net, &mu, &sigma);
        let mut enc = RangeEncoder::new();
        let (y_hat, est, _) = hamc_encode(&mut enc, &y, &mu, &sigma, &maps);
        let bytes = enc.finish();
        let maps_dec = predict_modes(&net, &mu, &sigma);
        assert_eq!(maps.modes4, maps_dec.modes4);
        assert_eq!(maps.modes2, maps_dec.modes2);
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        let decoded = hamc_decode(&mut dec, &mu, &sigma, &maps_dec).unwrap();
        assert_eq!(decoded, y_hat);
        let actual_bits = bytes.len() as f64 * 8.0;
        assert!(actual_bits >= est - 1.0);
        assert!(actual_bits <= est + 64.0 + 0.02 * est);
    }

    #[test]
    fn forced_m0_everywhere_equals_plain_coding() {
        let mut rng = seeded_rng(7);
        let (y, mu, sigma) = random_latent(&mut rng, 2, 8, 8);
        let maps = ModeMaps {
            modes4: Array3::zeros((2, 2, 2)),
            modes2: Array3::zeros((2, 4, 4)),
        };
        let mut enc = RangeEncoder::new();
        let (y_hat, _, symbols) = hamc_encode(&mut enc, &y, &mu, &sigma, &maps);
        assert_eq!(symbols, 2 * 8 * 8);
        assert_eq!(y_hat, quantize_infer(&y));
    }

    #[test]
    fn forced_m3_sends_one_symbol_per_block() {
        let mut rng = seeded_rng(8);
        let (y, mu, sigma) = random_latent(&mut rng, 2, 8, 8);
        let maps = ModeMaps {
            modes4: Array3::from_elem((2, 2, 2), 3),
            modes2: Array3::zeros((2, 4, 4)),
        };
        let mut enc = RangeEncoder::new();
        let (y_hat, _, symbols) = hamc_encode(&mut enc, &y, &mu, &sigma, &maps);
        // 16x fewer symbols than full resolution
        assert_eq!(symbols, 2 * 2 * 2);
        // each block is constant
        for ch in 0..2 {
            for by in 0..2 {
                for bx in 0..2 {
                    let b = block_view(&y_hat, ch, by, bx);
                    let v = b[(0, 0)];
                    assert!(b.iter().all(|&x| x == v));
                }
            }
        }
    }

    #[test]
    fn st_weights_match_inference_argmax_without_noise() {
        let mut rng = seeded_rng(9);
        let scores = Arr::from_shape_simple_fn(IxDyn(&[3, 4, 2, 2]), || rng.gen_range(-1.0..1.0));
        let mut g = Graph::recording();
        let vs = g.leaf(0, std::sync::Arc::new(scores.clone()));
        let w = st_gumbel_weights(&mut g, &vs, None, 1.0);
        let hard = hard_one_hot(&scores);
        assert_eq!(w.data(), &hard);
        let am = argmax_modes(&scores);
        for ci in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(hard[[ci, am[(ci, y, x)] as usize, y, x]], 1.0);
                }
            }
        }
    }

    #[test]
    fn soft_hamc_rate_is_a_convex_combination() {
        // with forced single-mode scores the soft rate equals that branch's
        // rate, so the combined value always sits inside the candidate hull
        let cfg = tiny_cfg();
        let mut rng = seeded_rng(10);
        let net = ModePredictNet::new(&mut rng, &cfg);
        let (y, mu, sigma) = random_latent(&mut rng, 4, 8, 8);
        let noise = crate::nn::uniform_noise(&mut rng, &[4, 8, 8]);
        let mut rates = Vec::new();
        for forced in 0..4 {
            let mut g = Graph::inference();
            let vy = g.constant(y.clone());
            let vm = g.constant(mu.clone());
            let vs = g.constant(sigma.clone());
            let mut s4 = Arr::zeros(IxDyn(&[4, 4, 2, 2]));
            let mut s2 = Arr::zeros(IxDyn(&[4, 4, 4, 4]));
            for c in 0..4 {
                for yb in 0..2 {
                    for xb in 0..2 {
                        s4[[c, forced, yb, xb]] = 5.0;
                    }
                }
                for yb in 0..4 {
                    for xb in 0..4 {
                        s2[[c, 0, yb, xb]] = 5.0;
                    }
                }
            }
            let vs2 = g.constant(s2);
            let vs4 = g.constant(s4);
            let (_, rate) = soft_hamc(
                &mut g,
                &vy,
                &vm,
                &vs,
                &vs2,
                &vs4,
                &noise,
                GumbelConfig {
                    temperature: 1.0,
                    noise_enabled: false,
                },
                &mut rng.clone(),
            );
            rates.push(rate.scalar());
        }
        let _ = net;
        let lo = rates.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo < hi, "degenerate test");
        // mixed scores sit between the extremes
        let mut g = Graph::inference();
        let vy = g.constant(y.clone());
        let vm = g.constant(mu.clone());
        let vs = g.constant(sigma.clone());
        let s4 = Arr::zeros(IxDyn(&[4, 4, 2, 2]));
        let s2 = Arr::zeros(IxDyn(&[4, 4, 4, 4]));
        let vs2 = g.constant(s2);
        let vs4 = g.constant(s4);
        let (_, rate) = soft_hamc(
            &mut g,
            &vy,
            &vm,
            &vs,
            &vs2,
            &vs4,
            &noise,
            GumbelConfig {
                temperature: 1.0,
                noise_enabled: false,
            },
            &mut rng.clone(),
        );
        let r = rate.scalar();
        assert!(r >= lo - 1e-9 && r <= hi + 1e-9, "rate {r} outside [{lo}, {hi}]");
    }

    #[test]
    fn soft_hamc_forced_m0_matches_plain_gaussian_rate() {
        let mut rng = seeded_rng(11);
        let (y, mu, sigma) = random_latent(&mut rng, 2, 8, 8);
        let noise = crate::nn::uniform_noise(&mut rng, &[2, 8, 8]);
        let mut s4 = Arr::zeros(IxDyn(&[2, 4, 2, 2]));
        let mut s2 = Arr::zeros(IxDyn(&[2, 4, 4, 4]));
        s4.index_axis_mut(ndarray::Axis(1), 0).fill(9.0);
        s2.index_axis_mut(ndarray::Axis(1), 0).fill(9.0);
        let mut g = Graph::inference();
        let vy = g.constant(y.clone());
        let vm = g.constant(mu.clone());
        let vs = g.constant(sigma.clone());
        let vs2 = g.constant(s2);
        let vs4 = g.constant(s4);
        let (recon, rate) = soft_hamc(
            &mut g,
            &vy,
            &vm,
            &vs,
            &vs2,
            &vs4,
            &noise,
            GumbelConfig {
                temperature: 1.0,
                noise_enabled: false,
            },
            &mut rng.clone(),
        );
        let want_recon = &y + &noise;
        let diff = (recon.data() - &want_recon).mapv(f64::abs).sum();
        assert!(diff < 1e-9);
        let mut want_rate = 0.0;
        let noisy = &y + &noise;
        for i in 0..noisy.len() {
            let v = noisy.as_slice().unwrap()[i];
            let m = mu.as_slice().unwrap()[i];
            let s = sigma.as_slice().unwrap()[i];
            want_rate += crate::entropy::gaussian_bits_scalar(v, m, s);
        }
        assert!((rate.scalar() - want_rate).abs() < 1e-9);
    }
}
