//! Quantization, learned priors, exact range coding and rate estimation.
//!
//! Two probability models are in play: a per-channel factorized prior (for
//! hyper-latents and the coarse motion latent) and a mean-scale Gaussian
//! conditioned on the hyperprior (for fine motion and residual latents).
//! Both drive the same integer range coder through frozen 16-bit CDF
//! tables, so encoder and decoder arithmetic is exact.

pub mod factorized;
pub mod hyper;
pub mod range;
pub mod tables;

use crate::config::{PROB_FLOOR, SIGMA_BINS, SIGMA_MAX, SIGMA_MIN};
use crate::graph::{Arr, Graph, Var};

/// Complementary error function (Cody's rational approximations; relative
/// error near machine precision over the whole line).
pub fn erfc(x: f64) -> f64 {
    const A: [f64; 5] = [
        3.16112374387056560e0,
        1.13864154151050156e2,
        3.77485237685302021e2,
        3.20937758913846947e3,
        1.85777706184603153e-1,
    ];
    const B: [f64; 4] = [
        2.36012909523441209e1,
        2.44024637934444173e2,
        1.28261652607737228e3,
        2.84423683343917062e3,
    ];
    const C: [f64; 9] = [
        5.64188496988670089e-1,
        8.88314979438837594e0,
        6.61191906371416295e1,
        2.98635138197400131e2,
        8.81952221241769090e2,
        1.71204761263407058e3,
        2.05107837782607147e3,
        1.23033935479799725e3,
        2.15311535474403846e-8,
    ];
    const D: [f64; 8] = [
        1.57449261107098347e1,
        1.17693950891312499e2,
        5.37181101862009858e2,
        1.62138957456669019e3,
        3.29079923573345963e3,
        4.36261909014324716e3,
        3.43936767414372164e3,
        1.23033935480374942e3,
    ];
    const P: [f64; 6] = [
        3.05326634961232344e-1,
        3.60344899949804439e-1,
        1.25781726111229246e-1,
        1.60837851487422766e-2,
        6.58749161529837803e-4,
        1.63153871373020978e-2,
    ];
    const Q: [f64; 5] = [
        2.56852019228982242e0,
        1.87295284992346047e0,
        5.27905102951428412e-1,
        6.05183413124413191e-2,
        2.33520497626869185e-3,
    ];
    const SQRPI: f64 = 5.6418958354775628695e-1;

    let y = x.abs();
    let result = if y <= 0.46875 {
        // erfc = 1 - erf over the central interval
        let z = if y > 1.11e-16 { y * y } else { 0.0 };
        let mut xnum = A[4] * z;
        let mut xden = z;
        for i in 0..3 {
            xnum = (xnum + A[i]) * z;
            xden = (xden + B[i]) * z;
        }
        return 1.0 - x * (xnum + A[3]) / (xden + B[3]);
    } else if y <= 4.0 {
        let mut xnum = C[8] * y;
        let mut xden = y;
        for i in 0..7 {
            xnum = (xnum + C[i]) * y;
            xden = (xden + D[i]) * y;
        }
        let r = (xnum + C[7]) / (xden + D[7]);
        let ysq = (y * 16.0).trunc() / 16.0;
        let del = (y - ysq) * (y + ysq);
        (-ysq * ysq).exp() * (-del).exp() * r
    } else if y < 26.543 {
        let ysq = 1.0 / (y * y);
        let mut xnum = P[5] * ysq;
        let mut xden = ysq;
        for i in 0..4 {
            xnum = (xnum + P[i]) * ysq;
            xden = (xden + Q[i]) * ysq;
        }
        let mut r = ysq * (xnum + P[4]) / (xden + Q[4]);
        r = (SQRPI - r) / y;
        let ysq = (y * 16.0).trunc() / 16.0;
        let del = (y - ysq) * (y + ysq);
        (-ysq * ysq).exp() * (-del).exp() * r
    } else {
        0.0
    };
    if x < 0.0 {
        2.0 - result
    } else {
        result
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal upper tail, Q(x) = 1 - Phi(x).
fn normal_tail(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Probability that a N(mu, sigma) value quantizes to integer bin `v`,
/// i.e. Phi((v+1/2-mu)/sigma) - Phi((v-1/2-mu)/sigma). Not floored.
pub fn gaussian_interval_prob(v: f64, mu: f64, sigma: f64) -> f64 {
    let hi = (v + 0.5 - mu) / sigma;
    let lo = (v - 0.5 - mu) / sigma;
    // evaluate on the tail side for precision
    let p = if hi + lo > 0.0 {
        normal_tail(lo) - normal_tail(hi)
    } else {
        normal_cdf(hi) - normal_cdf(lo)
    };
    p.max(0.0)
}

/// Code length in bits of integer bin `v` under N(mu, sigma), floored at
/// one CDF table unit so it is always finite.
pub fn gaussian_bits_scalar(v: f64, mu: f64, sigma: f64) -> f64 {
    -gaussian_interval_prob(v, mu, sigma).max(PROB_FLOOR).log2()
}

/// Round half away from zero (inference quantizer).
pub fn quantize_infer(x: &Arr) -> Arr {
    x.mapv(f64::round)
}

/// Logarithmic sigma-bin index for frozen Gaussian tables.
pub fn sigma_bin_index(sigma: f64) -> usize {
    let s = sigma.clamp(SIGMA_MIN, SIGMA_MAX);
    let span = (SIGMA_MAX / SIGMA_MIN).ln();
    let t = (s / SIGMA_MIN).ln() / span;
    ((t * SIGMA_BINS as f64) as usize).min(SIGMA_BINS - 1)
}

/// Geometric center of a sigma bin.
pub fn sigma_bin_center(idx: usize) -> f64 {
    let span = (SIGMA_MAX / SIGMA_MIN).ln();
    SIGMA_MIN * ((idx as f64 + 0.5) / SIGMA_BINS as f64 * span).exp()
}

impl Graph {
    /// Elementwise `gaussian_bits` over three same-shape tensors,
    /// differentiable in all of them. Gradients vanish where the
    /// probability floor is active.
    pub fn gaussian_bits(&mut self, v: &Var, mu: &Var, sigma: &Var) -> Var {
        assert_eq!(v.shape(), mu.shape());
        assert_eq!(v.shape(), sigma.shape());
        let mut out = Arr::zeros(ndarray::IxDyn(v.shape()));
        ndarray::Zip::from(&mut out)
            .and(v.data())
            .and(mu.data())
            .and(sigma.data())
            .for_each(|o, &v, &m, &s| *o = gaussian_bits_scalar(v, m, s));
        let (iv, im, is) = (v.id, mu.id, sigma.id);
        let (dv, dm, ds) = (v.data.clone(), mu.data.clone(), sigma.data.clone());
        self.make(
            out,
            iv.is_some() || im.is_some() || is.is_some(),
            Box::new(move |g, grads| {
                let ln2 = std::f64::consts::LN_2;
                let mut gv = Arr::zeros(ndarray::IxDyn(dv.shape()));
                let mut gm = Arr::zeros(ndarray::IxDyn(dv.shape()));
                let mut gs = Arr::zeros(ndarray::IxDyn(dv.shape()));
                let go = g.as_standard_layout();
                let (sv, sm, ss) = (
                    dv.as_standard_layout(),
                    dm.as_standard_layout(),
                    ds.as_standard_layout(),
                );
                let (sv, sm, ss) = (
                    sv.as_slice().unwrap(),
                    sm.as_slice().unwrap(),
                    ss.as_slice().unwrap(),
                );
                for (i, (((gv, gm), gs), &go)) in gv
                    .iter_mut()
                    .zip(gm.iter_mut())
                    .zip(gs.iter_mut())
                    .zip(go.iter())
                    .enumerate()
                {
                    let (v, m, s) = (sv[i], sm[i], ss[i]);
                    let p = gaussian_interval_prob(v, m, s);
                    if p <= PROB_FLOOR {
                        continue;
                    }
                    let hi = (v + 0.5 - m) / s;
                    let lo = (v - 0.5 - m) / s;
                    let dpdv = (normal_pdf(hi) - normal_pdf(lo)) / s;
                    let dpds = -(normal_pdf(hi) * hi - normal_pdf(lo) * lo) / s;
                    let scale = -go / (p * ln2);
                    *gv = scale * dpdv;
                    *gm = -scale * dpdv;
                    *gs = scale * dpds;
                }
                grads.accumulate(iv, gv);
                grads.accumulate(im, gm);
                grads.accumulate(is, gs);
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::testutil::{finite_diff, max_rel_err};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn round_half_away_from_zero() {
        let x = ndarray::arr1(&[3.5, -3.5, 2.0, 0.4, -0.5, 2.5]).into_dyn();
        let q = quantize_infer(&x);
        let want = [4.0, -4.0, 2.0, 0.0, -1.0, 3.0];
        for (a, b) in q.iter().zip(want.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn gaussian_bits_reference_points() {
        // p(0; 0, 1) = 2*Phi(1/2) - 1
        let b0 = gaussian_bits_scalar(0.0, 0.0, 1.0);
        assert!((b0 - 1.3849).abs() < 1e-3, "{b0}");
        let b3 = gaussian_bits_scalar(3.0, 0.0, 1.0);
        assert!((b3 - 7.3866).abs() < 1e-2, "{b3}");
    }

    #[test]
    fn gaussian_bits_minimum_at_mode_and_monotone() {
        // ranges kept inside the probability floor
        for &(sigma, vmax) in &[(0.3, 1), (1.0, 4), (7.0, 4)] {
            let mut prev = gaussian_bits_scalar(0.0, 0.0, sigma);
            for v in 1..=vmax {
                let b = gaussian_bits_scalar(v as f64, 0.0, sigma);
                assert!(b > prev, "bits must grow away from the mode");
                prev = b;
            }
        }
    }

    #[test]
    fn gaussian_bits_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let shape = [2, 3, 3];
        // ranges that keep the interval probability well above the floor
        let v0 = Arr::from_shape_simple_fn(IxDyn(&shape), || rng.gen_range(-1.5..1.5));
        let m0 = Arr::from_shape_simple_fn(IxDyn(&shape), || rng.gen_range(-0.5..0.5));
        let s0 = Arr::from_shape_simple_fn(IxDyn(&shape), || rng.gen_range(0.5..2.0));
        let eval = |v: &Arr, m: &Arr, s: &Arr| -> f64 {
            let mut g = Graph::inference();
            let (vv, vm, vs) = (
                g.constant(v.clone()),
                g.constant(m.clone()),
                g.constant(s.clone()),
            );
            let b = g.gaussian_bits(&vv, &vm, &vs);
            g.sum_all(&b).scalar()
        };
        let mut g = Graph::recording();
        let vv = g.leaf(0, Arc::new(v0.clone()));
        let vm = g.leaf(1, Arc::new(m0.clone()));
        let vs = g.leaf(2, Arc::new(s0.clone()));
        let b = g.gaussian_bits(&vv, &vm, &vs);
        let loss = g.sum_all(&b);
        let mut grads = g.backward(&loss);
        let got = g.leaf_grads(&mut grads);
        let fv = finite_diff(&v0, 1e-5, |p| eval(p, &m0, &s0));
        let fm = finite_diff(&m0, 1e-5, |p| eval(&v0, p, &s0));
        let fs = finite_diff(&s0, 1e-5, |p| eval(&v0, &m0, p));
        assert!(max_rel_err(&got[&0], &fv) < 1e-5);
        assert!(max_rel_err(&got[&1], &fm) < 1e-5);
        assert!(max_rel_err(&got[&2], &fs) < 1e-5);
    }

    #[test]
    fn sigma_bins_cover_range_and_invert() {
        assert_eq!(sigma_bin_index(SIGMA_MIN), 0);
        assert_eq!(sigma_bin_index(SIGMA_MAX), SIGMA_BINS - 1);
        // below/above the clamp range still map to valid bins
        assert_eq!(sigma_bin_index(0.001), 0);
        assert_eq!(sigma_bin_index(1e6), SIGMA_BINS - 1);
        for idx in 0..SIGMA_BINS {
            assert_eq!(sigma_bin_index(sigma_bin_center(idx)), idx);
        }
    }
}
