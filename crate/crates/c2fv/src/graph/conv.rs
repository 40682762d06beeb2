//! Dense 2-d convolution and transposed convolution via im2col + GEMM.

use super::{Arr, Graph, Var};
use ndarray::{Array2, ArrayView3, ArrayViewMut3, IxDyn};

pub(crate) fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Valid x-range of an output row: `ox` such that `ox*stride + kj - pad`
/// lands inside [0, w).
fn ox_bounds(w: usize, k_off: usize, stride: usize, pad: usize, ow: usize) -> (usize, usize) {
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    let hi_excl = {
        // ox*stride + k_off - pad <= w-1
        let top = w + pad;
        if top <= k_off {
            0
        } else {
            (((top - k_off - 1) / stride) + 1).min(ow)
        }
    };
    (lo.min(hi_excl), hi_excl)
}

/// Gather (C, H, W) into (C*kh*kw, OH*OW) columns; out-of-bounds reads are 0.
fn im2col(x: ArrayView3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    let cslice = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst_base = row * oh * ow;
                let (x0, x1) = ox_bounds(w, kj, stride, pad, ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = (ci * h + iy as usize) * w;
                    let dst_row = dst_base + oy * ow;
                    if stride == 1 {
                        let ix0 = x0 + kj - pad;
                        let n = x1 - x0;
                        cslice[dst_row + x0..dst_row + x1]
                            .copy_from_slice(&xs[src_row + ix0..src_row + ix0 + n]);
                    } else {
                        for ox in x0..x1 {
                            let ix = ox * stride + kj - pad;
                            cslice[dst_row + ox] = xs[src_row + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add adjoint of [`im2col`].
fn col2im(cols: &Array2<f64>, mut out: ArrayViewMut3<f64>, k: usize, stride: usize, pad: usize) {
    let (c, h, w) = out.dim();
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    debug_assert_eq!(cols.dim(), (c * k * k, oh * ow));
    let cs = cols.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src_base = row * oh * ow;
                let (x0, x1) = ox_bounds(w, kj, stride, pad, ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + iy as usize) * w;
                    let src_row = src_base + oy * ow;
                    if stride == 1 {
                        let ix0 = x0 + kj - pad;
                        for (d, s) in os[dst_row + ix0..dst_row + ix0 + (x1 - x0)]
                            .iter_mut()
                            .zip(&cs[src_row + x0..src_row + x1])
                        {
                            *d += s;
                        }
                    } else {
                        for ox in x0..x1 {
                            let ix = ox * stride + kj - pad;
                            os[dst_row + ix] += cs[src_row + ox];
                        }
                    }
                }
            }
        }
    }
}

fn as3(a: &Arr) -> ArrayView3<'_, f64> {
    a.view().into_dimensionality().expect("expected 3-d tensor")
}

impl Graph {
    /// `x`: (Ci, H, W); `w`: (Co, Ci, k, k); `b`: (Co). Square kernel.
    pub fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, stride: usize, pad: usize) -> Var {
        let xs = x.shape();
        let ws = w.shape();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[2], ws[3], "square kernels only");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        let (ci, h, wi) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[0], ws[2]);
        let oh = conv_out_dim(h, k, stride, pad);
        let ow = conv_out_dim(wi, k, stride, pad);

        let cols = im2col(as3(&x.data), k, stride, pad);
        let wmat = w
            .data
            .view()
            .into_shape((co, ci * k * k))
            .unwrap()
            .to_owned();
        let mut out_mat = wmat.dot(&cols);
        if let Some(b) = b {
            for (mut row, bv) in out_mat.rows_mut().into_iter().zip(b.data.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        let out = out_mat.into_shape(IxDyn(&[co, oh, ow])).unwrap();

        let (ix, iw, ib) = (x.id, w.id, b.and_then(|b| b.id));
        let (dx, dw) = (x.data.clone(), w.data.clone());
        self.make(
            out,
            ix.is_some() || iw.is_some() || ib.is_some(),
            Box::new(move |g, grads| {
                let gmat = g.view().into_shape((co, oh * ow)).unwrap().to_owned();
                if ib.is_some() {
                    let gb = gmat.sum_axis(ndarray::Axis(1)).into_dyn();
                    grads.accumulate(ib, gb);
                }
                if iw.is_some() {
                    let cols = im2col(as3(&dx), k, stride, pad);
                    let gw = gmat.dot(&cols.t());
                    grads.accumulate(iw, gw.into_shape(IxDyn(&[co, ci, k, k])).unwrap());
                }
                if ix.is_some() {
                    let wmat = dw.view().into_shape((co, ci * k * k)).unwrap().to_owned();
                    let gcols = wmat.t().dot(&gmat);
                    let mut gx = Arr::zeros(IxDyn(&[ci, h, wi]));
                    col2im(
                        &gcols,
                        gx.view_mut().into_dimensionality().unwrap(),
                        k,
                        stride,
                        pad,
                    );
                    grads.accumulate(ix, gx);
                }
            }),
        )
    }

    /// Transposed convolution. `x`: (Ci, H, W); `w`: (Ci, Co, k, k); `b`: (Co).
    /// Output is ((H-1)*stride + k - 2*pad) square-wise.
    pub fn conv_transpose2d(
        &mut self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let xs = x.shape();
        let ws = w.shape();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[2], ws[3], "square kernels only");
        assert_eq!(xs[0], ws[0], "conv_transpose2d channel mismatch");
        let (ci, h, wi) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[1], ws[2]);
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wi - 1) * stride + k - 2 * pad;
        debug_assert_eq!(conv_out_dim(oh, k, stride, pad), h);
        debug_assert_eq!(conv_out_dim(ow, k, stride, pad), wi);

        let xmat = x.data.view().into_shape((ci, h * wi)).unwrap().to_owned();
        let wmat = w
            .data
            .view()
            .into_shape((ci, co * k * k))
            .unwrap()
            .to_owned();
        let cols = wmat.t().dot(&xmat);
        let mut out = Arr::zeros(IxDyn(&[co, oh, ow]));
        col2im(
            &cols,
            out.view_mut().into_dimensionality().unwrap(),
            k,
            stride,
            pad,
        );
        if let Some(b) = b {
            for (mut plane, bv) in out
                .view_mut()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap()
                .outer_iter_mut()
                .zip(b.data.iter())
            {
                plane.mapv_inplace(|v| v + bv);
            }
        }

        let (ix, iw, ib) = (x.id, w.id, b.and_then(|b| b.id));
        let (dx, dw) = (x.data.clone(), w.data.clone());
        self.make(
            out,
            ix.is_some() || iw.is_some() || ib.is_some(),
            Box::new(move |g, grads| {
                let g3 = as3(g);
                if ib.is_some() {
                    let mut gb = Arr::zeros(IxDyn(&[co]));
                    for (o, plane) in g3.outer_iter().enumerate() {
                        gb[o] = plane.sum();
                    }
                    grads.accumulate(ib, gb);
                }
                let gcols = im2col(g3, k, stride, pad);
                if iw.is_some() {
                    let xmat = dx.view().into_shape((ci, h * wi)).unwrap().to_owned();
                    let gw = xmat.dot(&gcols.t());
                    grads.accumulate(iw, gw.into_shape(IxDyn(&[ci, co, k, k])).unwrap());
                }
                if ix.is_some() {
                    let wmat = dw.view().into_shape((ci, co * k * k)).unwrap().to_owned();
                    let gx = wmat.dot(&gcols);
                    grads.accumulate(ix, gx.into_shape(IxDyn(&[ci, h, wi])).unwrap());
                }
            }),
        )
    }
}
