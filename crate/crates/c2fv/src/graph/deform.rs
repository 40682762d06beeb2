//! Deformable convolution: per-position learned offsets displace the
//! sampling grid of an ordinary k x k convolution. Fractional positions are
//! read with bilinear interpolation; samples outside the input are zero.

use super::{Arr, Graph, Var};
use ndarray::{Array2, ArrayView2, IxDyn};

/// Offset-channel layout: channel `(g * k * k + t) * 2 + d` holds the
/// vertical (d = 0) or horizontal (d = 1) displacement of tap `t`
/// (row-major over the kernel) for input-channel group `g`.
pub fn split_offset_channels(ch: usize, k: usize) -> (usize, usize, usize, bool) {
    let d = ch % 2;
    let gt = ch / 2;
    let t = gt % (k * k);
    let g = gt / (k * k);
    (g, t / k, t % k, d == 1)
}

fn bilinear(plane: &ArrayView2<f64>, py: f64, px: f64) -> f64 {
    let (h, w) = plane.dim();
    if py <= -1.0 || px <= -1.0 || py >= h as f64 || px >= w as f64 {
        return 0.0;
    }
    let y0 = py.floor();
    let x0 = px.floor();
    let wy = py - y0;
    let wx = px - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let mut v = 0.0;
    for (dy, fy) in [(0isize, 1.0 - wy), (1, wy)] {
        for (dx, fx) in [(0isize, 1.0 - wx), (1, wx)] {
            let (yy, xx) = (y0 + dy, x0 + dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                v += fy * fx * plane[(yy as usize, xx as usize)];
            }
        }
    }
    v
}

struct DeformGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    groups: usize,
}

fn sample_columns(geom: &DeformGeom, x: &Arr, offsets: &Arr) -> Array2<f64> {
    let DeformGeom { c_in, h, w, k, groups, .. } = *geom;
    let ch_per_group = c_in / groups;
    let pad = (k / 2) as f64;
    let mut cols = Array2::<f64>::zeros((c_in * k * k, h * w));
    let x3 = x.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    for ci in 0..c_in {
        let g = ci / ch_per_group;
        let plane = x3.index_axis(ndarray::Axis(0), ci);
        for ki in 0..k {
            for kj in 0..k {
                let t = ki * k + kj;
                let oy_ch = (g * k * k + t) * 2;
                let row = ci * k * k + t;
                for y in 0..h {
                    for xx in 0..w {
                        let dy = offsets[[oy_ch, y, xx]];
                        let dx = offsets[[oy_ch + 1, y, xx]];
                        let py = y as f64 + ki as f64 - pad + dy;
                        let px = xx as f64 + kj as f64 - pad + dx;
                        cols[(row, y * w + xx)] = bilinear(&plane, py, px);
                    }
                }
            }
        }
    }
    cols
}

impl Graph {
    /// `x`: (C, H, W); `offsets`: (2*k*k*groups, H, W); `w`: (Co, C, k, k);
    /// `b`: (Co). Stride 1, same-size output, zero padding.
    pub fn deform_conv2d(
        &mut self,
        x: &Var,
        offsets: &Var,
        w: &Var,
        b: Option<&Var>,
        groups: usize,
    ) -> Var {
        let xs = x.shape();
        let ws = w.shape();
        let os = offsets.shape();
        assert_eq!(ws[2], ws[3], "square kernels only");
        let k = ws[2];
        let (c_in, h, wi) = (xs[0], xs[1], xs[2]);
        assert_eq!(ws[1], c_in, "deform_conv2d channel mismatch");
        assert_eq!(
            os[0],
            2 * k * k * groups,
            "offset channels inconsistent with kernel/groups"
        );
        assert_eq!((os[1], os[2]), (h, wi), "offset spatial mismatch");
        assert_eq!(c_in % groups, 0, "groups must divide input channels");
        let c_out = ws[0];
        let geom = DeformGeom {
            c_in,
            h,
            w: wi,
            k,
            groups,
        };

        let cols = sample_columns(&geom, &x.data, &offsets.data);
        let wmat = w
            .data
            .view()
            .into_shape((c_out, c_in * k * k))
            .unwrap()
            .to_owned();
        let mut out_mat = wmat.dot(&cols);
        if let Some(b) = b {
            for (mut row, bv) in out_mat.rows_mut().into_iter().zip(b.data.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        let out = out_mat.into_shape(IxDyn(&[c_out, h, wi])).unwrap();

        let (ix, io, iw, ib) = (x.id, offsets.id, w.id, b.and_then(|b| b.id));
        let (dx, doff, dw) = (x.data.clone(), offsets.data.clone(), w.data.clone());
        self.make(
            out,
            ix.is_some() || io.is_some() || iw.is_some() || ib.is_some(),
            Box::new(move |g, grads| {
                let gmat = g.view().into_shape((c_out, h * wi)).unwrap().to_owned();
                if ib.is_some() {
                    grads.accumulate(ib, gmat.sum_axis(ndarray::Axis(1)).into_dyn());
                }
                if iw.is_some() {
                    let cols = sample_columns(&geom, &dx, &doff);
                    let gw = gmat.dot(&cols.t());
                    grads.accumulate(iw, gw.into_shape(IxDyn(&[c_out, c_in, k, k])).unwrap());
                }
                if ix.is_none() && io.is_none() {
                    return;
                }
                let wmat = dw
                    .view()
                    .into_shape((c_out, c_in * k * k))
                    .unwrap()
                    .to_owned();
                let gcols = wmat.t().dot(&gmat);
                let mut gx = Arr::zeros(IxDyn(&[c_in, h, wi]));
                let mut goff = Arr::zeros(IxDyn(&[2 * k * k * groups, h, wi]));
                let ch_per_group = c_in / groups;
                let pad = (k / 2) as f64;
                let x3 = dx.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                for ci in 0..c_in {
                    let grp = ci / ch_per_group;
                    let plane = x3.index_axis(ndarray::Axis(0), ci);
                    for ki in 0..k {
                        for kj in 0..k {
                            let t = ki * k + kj;
                            let oy_ch = (grp * k * k + t) * 2;
                            let row = ci * k * k + t;
                            for y in 0..h {
                                for xx in 0..wi {
                                    let gv = gcols[(row, y * wi + xx)];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    let dyv = doff[[oy_ch, y, xx]];
                                    let dxv = doff[[oy_ch + 1, y, xx]];
                                    let py = y as f64 + ki as f64 - pad + dyv;
                                    let px = xx as f64 + kj as f64 - pad + dxv;
                                    if py <= -1.0
                                        || px <= -1.0
                                        || py >= h as f64
                                        || px >= wi as f64
                                    {
                                        continue;
                                    }
                                    let y0f = py.floor();
                                    let x0f = px.floor();
                                    let wy = py - y0f;
                                    let wx = px - x0f;
                                    let (y0, x0) = (y0f as isize, x0f as isize);
                                    let mut d_py = 0.0;
                                    let mut d_px = 0.0;
                                    for (dy, fy, sy) in [(0isize, 1.0 - wy, -1.0), (1, wy, 1.0)] {
                                        for (dxn, fx, sx) in
                                            [(0isize, 1.0 - wx, -1.0), (1, wx, 1.0)]
                                        {
                                            let (yy, xn) = (y0 + dy, x0 + dxn);
                                            if yy < 0
                                                || xn < 0
                                                || yy as usize >= h
                                                || xn as usize >= wi
                                            {
                                                continue;
                                            }
                                            let (yy, xn) = (yy as usize, xn as usize);
                                            if ix.is_some() {
                                                gx[[ci, yy, xn]] += gv * fy * fx;
                                            }
                                            let v = plane[(yy, xn)];
                                            d_py += sy * fx * v;
                                            d_px += fy * sx * v;
                                        }
                                    }
                                    if io.is_some() {
                                        goff[[oy_ch, y, xx]] += gv * d_py;
                                        goff[[oy_ch + 1, y, xx]] += gv * d_px;
                                    }
                                }
                            }
                        }
                    }
                }
                if ix.is_some() {
                    grads.accumulate(ix, gx);
                }
                if io.is_some() {
                    grads.accumulate(io, goff);
                }
            }),
        )
    }
}
