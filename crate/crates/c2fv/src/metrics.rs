//! Distortion metrics: 255-scale MSE, capped PSNR and a differentiable
//! multi-scale SSIM.

use crate::graph::{Graph, Var};
use ndarray::Array3;

/// PSNR is capped here so identical frames do not produce infinities.
pub const PSNR_CAP: f64 = 100.0;

/// Standard 5-scale MS-SSIM weights.
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Mean squared error in 255-scale units over [0, 1] inputs.
pub fn mse_255(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "mse shape mismatch");
    let n = a.len() as f64;
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = (x - y) * 255.0;
            d * d
        })
        .sum();
    sum / n
}

/// Peak signal-to-noise ratio against a 255 peak, capped at 100 dB.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let mse = mse_255(a, b);
    if mse <= 1e-10 {
        return PSNR_CAP;
    }
    (10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP)
}

/// Differentiable 255-scale MSE.
pub fn distortion_mse(g: &mut Graph, x: &Var, x_hat: &Var) -> Var {
    let d = g.sub(x, x_hat);
    let sq = g.mul(&d, &d);
    let m = g.mean_all(&sq);
    g.scale(&m, 255.0 * 255.0)
}

fn gaussian_kernel(len: usize, sigma: f64) -> Vec<f64> {
    let c = (len - 1) as f64 / 2.0;
    let mut k: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Window size for one scale: 11 shrunk (odd) to fit small inputs.
fn window_for(dim: usize) -> usize {
    let w = dim.min(11);
    if w % 2 == 0 {
        w - 1
    } else {
        w
    }
}

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Mean luminance and contrast-structure terms of SSIM at one scale.
fn ssim_terms(g: &mut Graph, x: &Var, y: &Var) -> (Var, Var) {
    let win = window_for(x.shape()[1].min(x.shape()[2]));
    let kernel = gaussian_kernel(win, 1.5 * win as f64 / 11.0);
    let mu_x = g.blur_valid(x, &kernel);
    let mu_y = g.blur_valid(y, &kernel);
    let xx = g.mul(x, x);
    let yy = g.mul(y, y);
    let xy = g.mul(x, y);
    let sxx0 = g.blur_valid(&xx, &kernel);
    let syy0 = g.blur_valid(&yy, &kernel);
    let sxy0 = g.blur_valid(&xy, &kernel);
    let mxx = g.mul(&mu_x, &mu_x);
    let myy = g.mul(&mu_y, &mu_y);
    let mxy = g.mul(&mu_x, &mu_y);
    let sxx = g.sub(&sxx0, &mxx);
    let syy = g.sub(&syy0, &myy);
    let sxy = g.sub(&sxy0, &mxy);

    let two_mxy = g.scale(&mxy, 2.0);
    let l_num = g.add_scalar(&two_mxy, C1);
    let msum = g.add(&mxx, &myy);
    let l_den = g.add_scalar(&msum, C1);
    let l = g.div(&l_num, &l_den);

    let two_sxy = g.scale(&sxy, 2.0);
    let cs_num = g.add_scalar(&two_sxy, C2);
    let ssum = g.add(&sxx, &syy);
    let cs_den = g.add_scalar(&ssum, C2);
    let cs = g.div(&cs_num, &cs_den);

    (g.mean_all(&l), g.mean_all(&cs))
}

fn downsample2(g: &mut Graph, x: &Var) -> Var {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let cropped = if h % 2 == 1 || w % 2 == 1 {
        g.crop_spatial(x, h - h % 2, w - w % 2)
    } else {
        x.clone()
    };
    g.avgpool(&cropped, 2, 2)
}

/// Differentiable MS-SSIM over (3, H, W) inputs in [0, 1]; 5 scales with
/// the standard weights, windows shrinking to fit small scales.
pub fn msssim(g: &mut Graph, x: &Var, x_hat: &Var) -> Var {
    assert_eq!(x.shape(), x_hat.shape(), "msssim shape mismatch");
    let scales = MSSSIM_WEIGHTS.len();
    let mut cur_x = x.clone();
    let mut cur_y = x_hat.clone();
    let mut acc: Option<Var> = None;
    for s in 0..scales {
        let (l, cs) = ssim_terms(g, &cur_x, &cur_y);
        let cs_pos = g.clamp_min(&cs, 1e-6);
        let mut term = g.pow_const(&cs_pos, MSSSIM_WEIGHTS[s]);
        if s == scales - 1 {
            let l_pos = g.clamp_min(&l, 1e-6);
            let lw = g.pow_const(&l_pos, MSSSIM_WEIGHTS[s]);
            term = g.mul(&term, &lw);
        }
        acc = Some(match acc {
            Some(a) => g.mul(&a, &term),
            None => term,
        });
        if s + 1 < scales {
            cur_x = downsample2(g, &cur_x);
            cur_y = downsample2(g, &cur_y);
        }
    }
    acc.unwrap()
}

/// MS-SSIM distortion, 1 - MS-SSIM.
pub fn distortion_msssim(g: &mut Graph, x: &Var, x_hat: &Var) -> Var {
    let m = msssim(g, x, x_hat);
    let neg = g.scale(&m, -1.0);
    g.add_scalar(&neg, 1.0)
}

/// Non-differentiable convenience wrapper.
pub fn msssim_value(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let mut g = Graph::inference();
    let va = g.constant(a.clone().into_dyn());
    let vb = g.constant(b.clone().into_dyn());
    msssim(&mut g, &va, &vb).scalar()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use rand::Rng;

    #[test]
    fn identical_frames_score_perfectly() {
        let mut rng = seeded_rng(41);
        let a = Array3::from_shape_simple_fn((3, 64, 64), || rng.gen_range(0.0..1.0));
        assert_eq!(mse_255(&a, &a), 0.0);
        assert_eq!(psnr(&a, &a), PSNR_CAP);
        let m = msssim_value(&a, &a);
        assert!((m - 1.0).abs() < 1e-9, "msssim of identical frames: {m}");
    }

    #[test]
    fn uniform_difference_has_closed_form_mse() {
        let a = Array3::<f64>::zeros((3, 8, 8));
        let b = Array3::<f64>::from_elem((3, 8, 8), 0.1);
        let m = mse_255(&a, &b);
        assert!((m - 650.25).abs() < 1e-9, "{m}");
        // 0.01 squared difference on [0,1] -> 30 dB
        let c = Array3::<f64>::from_elem((3, 8, 8), 0.1f64);
        let d = Array3::<f64>::zeros((3, 8, 8));
        let _ = (c, d);
        let mse = 65.025;
        let p = 10.0 * (255.0f64 * 255.0 / mse).log10();
        assert!((p - 30.0).abs() < 1e-6);
    }

    #[test]
    fn msssim_stays_in_unit_interval_and_detects_noise() {
        let mut rng = seeded_rng(42);
        let a = Array3::from_shape_simple_fn((3, 64, 64), || rng.gen_range(0.0..1.0));
        let mut b = a.clone();
        b.mapv_inplace(|v: f64| (v + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0));
        let m = msssim_value(&a, &b);
        assert!((0.0..1.0).contains(&m), "msssim {m}");
        let dist = 1.0 - m;
        assert!(dist > 0.0);
    }

    #[test]
    fn msssim_gradient_points_toward_the_target() {
        let mut rng = seeded_rng(43);
        let target = Array3::from_shape_simple_fn((3, 48, 48), || rng.gen_range(0.2..0.8));
        let start = Array3::from_shape_simple_fn((3, 48, 48), || rng.gen_range(0.2..0.8));
        let mut g = Graph::recording();
        let vt = g.constant(target.clone().into_dyn());
        let vs = g.leaf(0, std::sync::Arc::new(start.clone().into_dyn()));
        let d = distortion_msssim(&mut g, &vt, &vs);
        let before = d.scalar();
        let mut grads = g.backward(&d);
        let gs = g.leaf_grads(&mut grads).remove(&0).unwrap();
        // one descent step must reduce the distortion
        let stepped = &start.clone().into_dyn() - &gs.mapv(|v| v * 0.05);
        let mut g2 = Graph::inference();
        let vt2 = g2.constant(target.into_dyn());
        let vs2 = g2.constant(stepped);
        let after = distortion_msssim(&mut g2, &vt2, &vs2).scalar();
        assert!(
            after < before,
            "descent step must reduce msssim distortion ({before} -> {after})"
        );
    }
}
