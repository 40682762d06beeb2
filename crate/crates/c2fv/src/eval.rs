//! Quality/rate evaluation: per-frame stats, RD curves and Bjontegaard
//! deltas.

use crate::codec::EncodedVideo;
use crate::frame::Frame;
use crate::metrics::{mse_255, msssim_value, psnr};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Per-frame and mean rate/quality statistics. bpp uses the original
/// (pre-padding) dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RdStats {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub per_frame_bpp: Vec<f64>,
    pub per_frame_psnr: Vec<f64>,
    pub per_frame_msssim: Vec<f64>,
    pub mean_bpp: f64,
    pub mean_bpp_intra: f64,
    pub mean_bpp_coarse: f64,
    pub mean_bpp_fine: f64,
    pub mean_bpp_residual: f64,
    pub mean_psnr: f64,
    pub mean_msssim: f64,
    pub file_bytes: usize,
}

/// Compare originals against reconstructions with the coded byte split.
pub fn evaluate(originals: &[Frame], recons: &[Frame], coded: &EncodedVideo) -> Result<RdStats> {
    if originals.len() != recons.len() || originals.len() != coded.frame_bytes.len() {
        return Err(Error::ShapeMismatch(format!(
            "frame count mismatch: {} originals, {} reconstructions, {} coded records",
            originals.len(),
            recons.len(),
            coded.frame_bytes.len()
        )));
    }
    let (h, w) = (originals[0].height(), originals[0].width());
    let pixels = (h * w) as f64;
    let mut per_frame_bpp = Vec::new();
    let mut per_frame_psnr = Vec::new();
    let mut per_frame_msssim = Vec::new();
    let (mut bi, mut bc, mut bf, mut br, mut bo) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (i, (orig, rec)) in originals.iter().zip(recons).enumerate() {
        if (orig.height(), orig.width()) != (h, w) || (rec.height(), rec.width()) != (h, w) {
            return Err(Error::ShapeMismatch(format!("frame {i} dims differ")));
        }
        let fb = &coded.frame_bytes[i];
        per_frame_bpp.push(8.0 * fb.total() as f64 / pixels);
        per_frame_psnr.push(psnr(&orig.pixels, &rec.pixels));
        per_frame_msssim.push(msssim_value(&orig.pixels, &rec.pixels));
        bi += fb.intra;
        bc += fb.coarse;
        bf += fb.fine;
        br += fb.residual;
        bo += fb.framing;
    }
    let n = originals.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    Ok(RdStats {
        frames: originals.len(),
        width: w,
        height: h,
        mean_bpp: 8.0 * (bi + bc + bf + br + bo) as f64 / pixels / n,
        mean_bpp_intra: 8.0 * bi as f64 / pixels / n,
        mean_bpp_coarse: 8.0 * bc as f64 / pixels / n,
        mean_bpp_fine: 8.0 * bf as f64 / pixels / n,
        mean_bpp_residual: 8.0 * br as f64 / pixels / n,
        mean_psnr: mean(&per_frame_psnr),
        mean_msssim: mean(&per_frame_msssim),
        per_frame_bpp,
        per_frame_psnr,
        per_frame_msssim,
        file_bytes: coded.bytes.len(),
    })
}

/// Reconstruction error against originals without any coded stream
/// (diagnostics).
pub fn frame_quality(orig: &Frame, recon: &Frame) -> (f64, f64, f64) {
    (
        mse_255(&orig.pixels, &recon.pixels),
        psnr(&orig.pixels, &recon.pixels),
        msssim_value(&orig.pixels, &recon.pixels),
    )
}

/// One (rate, quality) curve, sorted by rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RdCurve {
    pub points: Vec<(f64, f64)>,
}

impl RdCurve {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<RdCurve> {
        if points.len() < 4 {
            return Err(Error::BadInput(format!(
                "BD metrics need at least 4 points, got {}",
                points.len()
            )));
        }
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for pair in points.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::BadInput("curve rates must strictly increase".into()));
            }
        }
        Ok(RdCurve { points })
    }
}

/// Least-squares cubic fit (Vandermonde normal equations, solved exactly).
fn polyfit3(x: &[f64], y: &[f64]) -> [f64; 4] {
    let n = x.len();
    let mut ata = [[0.0f64; 4]; 4];
    let mut atb = [0.0f64; 4];
    for k in 0..n {
        let pow = [1.0, x[k], x[k] * x[k], x[k] * x[k] * x[k]];
        for (i, pi) in pow.iter().enumerate() {
            for (j, pj) in pow.iter().enumerate() {
                ata[i][j] += pi * pj;
            }
            atb[i] += pi * y[k];
        }
    }
    // gaussian elimination with partial pivoting
    let mut a = ata;
    let mut b = atb;
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        let d = a[col][col];
        for row in col + 1..4 {
            let f = a[row][col] / d;
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut out = [0.0f64; 4];
    for col in (0..4).rev() {
        let mut s = b[col];
        for k in col + 1..4 {
            s -= a[col][k] * out[k];
        }
        out[col] = s / a[col][col];
    }
    out
}

fn polyint(coef: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let eval = |x: f64| {
        coef[0] * x + coef[1] * x * x / 2.0 + coef[2] * x * x * x / 3.0
            + coef[3] * x * x * x * x / 4.0
    };
    eval(hi) - eval(lo)
}

fn overlap(anchor: &RdCurve, test: &RdCurve, on_quality: bool) -> Result<(f64, f64)> {
    let pick = |c: &RdCurve| -> (f64, f64) {
        let vals: Vec<f64> = c
            .points
            .iter()
            .map(|p| if on_quality { p.1 } else { p.0.log10() })
            .collect();
        (
            vals.iter().cloned().fold(f64::INFINITY, f64::min),
            vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let (a_lo, a_hi) = pick(anchor);
    let (t_lo, t_hi) = pick(test);
    let lo = a_lo.max(t_lo);
    let hi = a_hi.min(t_hi);
    if lo >= hi {
        return Err(Error::BadInput(
            "curves do not overlap; refusing to extrapolate".into(),
        ));
    }
    Ok((lo, hi))
}

/// Bjontegaard delta rate: average percent rate difference of `test`
/// against `anchor` at equal quality. Negative means rate savings.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let fit = |c: &RdCurve| {
        let q: Vec<f64> = c.points.iter().map(|p| p.1).collect();
        let lr: Vec<f64> = c.points.iter().map(|p| p.0.log10()).collect();
        polyfit3(&q, &lr)
    };
    let fa = fit(anchor);
    let ft = fit(test);
    let (lo, hi) = overlap(anchor, test, true)?;
    let avg = (polyint(&ft, lo, hi) - polyint(&fa, lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

/// Bjontegaard delta quality: average quality difference at equal rate.
pub fn bd_quality(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let fit = |c: &RdCurve| {
        let lr: Vec<f64> = c.points.iter().map(|p| p.0.log10()).collect();
        let q: Vec<f64> = c.points.iter().map(|p| p.1).collect();
        polyfit3(&lr, &q)
    };
    let fa = fit(anchor);
    let ft = fit(test);
    let (lo, hi) = overlap(anchor, test, false)?;
    Ok((polyint(&ft, lo, hi) - polyint(&fa, lo, hi)) / (hi - lo))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchor_curve() -> RdCurve {
        RdCurve::new(vec![
            (0.05, 30.0),
            (0.10, 33.0),
            (0.20, 36.0),
            (0.40, 39.0),
        ])
        .unwrap()
    }

    #[test]
    fn identical_curves_have_zero_deltas() {
        let a = anchor_curve();
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-9);
        assert!(bd_quality(&a, &a).unwrap().abs() < 1e-9);
    }

    #[test]
    fn ten_percent_rate_shift_reads_as_ten_percent() {
        let a = anchor_curve();
        let t = RdCurve::new(a.points.iter().map(|&(r, q)| (r * 1.10, q)).collect()).unwrap();
        let bd = bd_rate(&a, &t).unwrap();
        assert!((bd - 10.0).abs() < 0.1, "bd-rate {bd}");
    }

    #[test]
    fn one_db_shift_reads_as_one_db() {
        let a = anchor_curve();
        let t = RdCurve::new(a.points.iter().map(|&(r, q)| (r, q + 1.0)).collect()).unwrap();
        let bd = bd_quality(&a, &t).unwrap();
        assert!((bd - 1.0).abs() < 0.05, "bd-psnr {bd}");
    }

    #[test]
    fn disjoint_quality_ranges_are_refused() {
        let a = anchor_curve();
        let t = RdCurve::new(vec![
            (0.05, 50.0),
            (0.10, 53.0),
            (0.20, 56.0),
            (0.40, 59.0),
        ])
        .unwrap();
        assert!(bd_rate(&a, &t).is_err());
    }

    #[test]
    fn too_few_points_are_refused() {
        assert!(RdCurve::new(vec![(0.1, 30.0), (0.2, 33.0), (0.3, 35.0)]).is_err());
    }

    #[test]
    fn non_increasing_rates_are_refused() {
        assert!(RdCurve::new(vec![
            (0.1, 30.0),
            (0.1, 33.0),
            (0.3, 35.0),
            (0.4, 36.0)
        ])
        .is_err());
    }
}
