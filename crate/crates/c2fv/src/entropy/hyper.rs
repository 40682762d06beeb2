//! Hyperprior: a second latent whose decoded output parameterizes the
//! Gaussian model (mu, sigma) of the main latent. Transmitted first under
//! the factorized prior.

use crate::config::{ModelConfig, SIGMA_MAX, SIGMA_MIN};
use crate::entropy::factorized::FactorizedPrior;
use crate::entropy::range::{RangeDecoder, RangeEncoder};
use crate::entropy::tables::{
    decode_latent_symbol, encode_latent_symbol, latent_symbol_bits, FactorizedTables,
};
use crate::entropy::quantize_infer;
use crate::graph::{Arr, Graph, Var};
use crate::nn::{Conv2d, Deconv2d, Module, Param};
use crate::Result;
use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;

/// Analysis/synthesis pair plus the factorized prior for the hyper-latent.
pub struct HyperCodec {
    latent_ch: usize,
    a1: Conv2d, // stride 1
    a2: Conv2d, // stride 2
    a3: Conv2d, // stride 2
    s1: Deconv2d,
    s2: Deconv2d,
    p1: Conv2d, // parameter net
    p2: Conv2d, // emits 2 * latent_ch channels
    pub prior: FactorizedPrior,
}

impl HyperCodec {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let (cl, ch) = (cfg.latent_ch, cfg.hyper_ch);
        HyperCodec {
            latent_ch: cl,
            a1: Conv2d::same(rng, cl, ch),
            a2: Conv2d::down(rng, ch, ch),
            a3: Conv2d::down(rng, ch, ch),
            s1: Deconv2d::up(rng, ch, ch),
            s2: Deconv2d::up(rng, ch, ch),
            p1: Conv2d::same(rng, ch, ch),
            p2: Conv2d::same(rng, ch, 2 * cl),
            prior: FactorizedPrior::new(ch),
        }
    }

    /// y (C_l, h, w) -> z (C_h, h/4, w/4). Spatial dims must divide by 4.
    pub fn analyze(&self, g: &mut Graph, y: &Var) -> Var {
        let s = y.shape();
        assert!(
            s[1] % 4 == 0 && s[2] % 4 == 0,
            "hyper analysis wants dims divisible by 4, got {s:?}"
        );
        let h = self.a1.forward(g, y);
        let h = g.relu(&h);
        let h = self.a2.forward(g, &h);
        let h = g.relu(&h);
        self.a3.forward(g, &h)
    }

    /// z_hat -> (mu, sigma); sigma = exp(clamp(raw, ln s_min, ln s_max)).
    pub fn synthesize(&self, g: &mut Graph, z_hat: &Var) -> (Var, Var) {
        let h = self.s1.forward(g, z_hat);
        let h = g.relu(&h);
        let h = self.s2.forward(g, &h);
        let h = g.relu(&h);
        let h = self.p1.forward(g, &h);
        let h = g.relu(&h);
        let both = self.p2.forward(g, &h);
        let mu = g.slice_axis0(&both, 0, self.latent_ch);
        let raw = g.slice_axis0(&both, self.latent_ch, self.latent_ch);
        let clamped = g.clamp(&raw, SIGMA_MIN.ln(), SIGMA_MAX.ln());
        let sigma = g.exp(&clamped);
        (mu, sigma)
    }

    /// Differentiable rate of a noisy hyper-latent under the prior.
    pub fn rate_train(&self, g: &mut Graph, z_noisy: &Var) -> Var {
        let bits = g.factorized_bits(z_noisy, &self.prior);
        g.sum_all(&bits)
    }

    /// Freeze the prior into integer tables.
    pub fn tables(&self) -> FactorizedTables {
        FactorizedTables::build(&self.prior)
    }

    /// Inference-side coding of y's hyper-latent. Returns the coded bytes,
    /// decoded (mu, sigma) derived from the rounded z (so both sides agree
    /// bit-exactly), the rounded z, and the table bit estimate.
    pub fn compress(&self, y: &Var, tables: &FactorizedTables) -> HyperPayload {
        let mut g = Graph::inference();
        let z = self.analyze(&mut g, y);
        let z_hat = quantize_infer(z.data());
        let (bytes, estimate) = encode_hyper_latent(&z_hat, tables);
        let vz = g.constant(z_hat.clone());
        let (mu, sigma) = self.synthesize(&mut g, &vz);
        HyperPayload {
            bytes,
            mu: mu.data().clone(),
            sigma: sigma.data().clone(),
            z_hat,
            estimated_bits: estimate,
        }
    }

    /// Decoder-side mirror of [`HyperCodec::compress`].
    pub fn decompress(
        &self,
        bytes: &[u8],
        shape: &[usize],
        tables: &FactorizedTables,
    ) -> Result<(Arr, Arr, Arr)> {
        let z_hat = decode_hyper_latent(bytes, shape, tables)?;
        let mut g = Graph::inference();
        let vz = g.constant(z_hat.clone());
        let (mu, sigma) = self.synthesize(&mut g, &vz);
        Ok((mu.data().clone(), sigma.data().clone(), z_hat))
    }
}

pub struct HyperPayload {
    pub bytes: Vec<u8>,
    pub mu: Arr,
    pub sigma: Arr,
    pub z_hat: Arr,
    pub estimated_bits: f64,
}

/// Channel-ascending raster coding of an integer hyper-latent.
pub fn encode_hyper_latent(z_hat: &Arr, tables: &FactorizedTables) -> (Vec<u8>, f64) {
    let mut enc = RangeEncoder::new();
    let mut estimate = 0.0;
    let c = z_hat.shape()[0];
    let flat = z_hat
        .view()
        .into_shape((c, z_hat.len() / c))
        .expect("channel-major hyper latent");
    for ch in 0..c {
        let table = tables.channel(ch);
        for &v in flat.row(ch) {
            estimate += latent_symbol_bits(table, v as i64);
            encode_latent_symbol(&mut enc, table, v as i64);
        }
    }
    (enc.finish(), estimate)
}

pub fn decode_hyper_latent(bytes: &[u8], shape: &[usize], tables: &FactorizedTables) -> Result<Arr> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Arr::zeros(IxDyn(shape));
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

impl Module for HyperCodec {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.a1.visit_params(&format!("{prefix}.a1"), f);
        self.a2.visit_params(&format!("{prefix}.a2"), f);
        self.a3.visit_params(&format!("{prefix}.a3"), f);
        self.s1.visit_params(&format!("{prefix}.s1"), f);
        self.s2.visit_params(&format!("{prefix}.s2"), f);
        self.p1.visit_params(&format!("{prefix}.p1"), f);
        self.p2.visit_params(&format!("{prefix}.p2"), f);
        self.prior.visit_params(&format!("{prefix}.prior"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::nn::seeded_rng;
    use ndarray::IxDyn;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            feat_ch: 8,
            latent_ch: 8,
            hyper_ch: 8,
            mode_ch: 8,
            deform_kernel: 3,
            deform_groups: 2,
            model_id: 0,
        }
    }

    #[test]
    fn shapes_follow_the_stride_chain() {
        let cfg = tiny_cfg();
        let mut rng = seeded_rng(1);
        let hc = HyperCodec::new(&mut rng, &cfg);
        let mut g = Graph::inference();
        let y = g.constant(Arr::zeros(IxDyn(&[8, 8, 8])));
        let z = hc.analyze(&mut g, &y);
        assert_eq!(z.shape(), &[8, 2, 2]);
        let (mu, sigma) = hc.synthesize(&mut g, &z);
        assert_eq!(mu.shape(), &[8, 8, 8]);
        assert_eq!(sigma.shape(), &[8, 8, 8]);
        for &s in sigma.data().iter() {
            assert!((SIGMA_MIN..=SIGMA_MAX).contains(&s));
        }
    }

    #[test]
    fn compress_decompress_agree_bit_exactly() {
        let cfg = tiny_cfg();
        let mut rng = seeded_rng(2);
        let hc = HyperCodec::new(&mut rng, &cfg);
        let tables = hc.tables();
        let g = Graph::inference();
        let y = g.constant(Arr::from_shape_simple_fn(IxDyn(&[8, 8, 8]), || {
            rng.gen_range(-4.0..4.0)
        }));
        let payload = hc.compress(&y, &tables);
        let (mu, sigma, z_hat) = hc
            .decompress(&payload.bytes, payload.z_hat.shape(), &tables)
            .unwrap();
        assert_eq!(z_hat, payload.z_hat);
        assert_eq!(mu, payload.mu);
        assert_eq!(sigma, payload.sigma);
        // rate estimate brackets the actual payload
        let actual_bits = payload.bytes.len() as f64 * 8.0;
        assert!(actual_bits >= payload.estimated_bits - 1.0);
        assert!(actual_bits <= payload.estimated_bits + 64.0 + 0.02 * payload.estimated_bits);
    }

    #[test]
    fn all_zero_latent_decodes_correctly() {
        let cfg = tiny_cfg();
        let mut rng = seeded_rng(3);
        let hc = HyperCodec::new(&mut rng, &cfg);
        let tables = hc.tables();
        let z = Arr::zeros(IxDyn(&[8, 2, 2]));
        let (bytes, _) = encode_hyper_latent(&z, &tables);
        let back = decode_hyper_latent(&bytes, &[8, 2, 2], &tables).unwrap();
        assert_eq!(back, z);
    }
}
