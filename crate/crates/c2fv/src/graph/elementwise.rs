//! Pointwise and structural ops.

use super::{Arr, Graph, Var};
use ndarray::{Axis, IxDyn, Slice};

impl Graph {
    pub fn add(&mut self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = &*a.data + &*b.data;
        let (ia, ib) = (a.id, b.id);
        self.make(
            out,
            ia.is_some() || ib.is_some(),
            Box::new(move |g, grads| {
                grads.accumulate(ia, g.clone());
                grads.accumulate(ib, g.clone());
            }),
        )
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = &*a.data - &*b.data;
        let (ia, ib) = (a.id, b.id);
        self.make(
            out,
            ia.is_some() || ib.is_some(),
            Box::new(move |g, grads| {
                grads.accumulate(ia, g.clone());
                grads.accumulate(ib, g.mapv(|v| -v));
            }),
        )
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = &*a.data * &*b.data;
        let (ia, ib) = (a.id, b.id);
        let (da, db) = (a.data.clone(), b.data.clone());
        self.make(
            out,
            ia.is_some() || ib.is_some(),
            Box::new(move |g, grads| {
                if ia.is_some() {
                    grads.accumulate(ia, g * &*db);
                }
                if ib.is_some() {
                    grads.accumulate(ib, g * &*da);
                }
            }),
        )
    }

    pub fn div(&mut self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "div shape mismatch");
        let out = &*a.data / &*b.data;
        let (ia, ib) = (a.id, b.id);
        let (da, db) = (a.data.clone(), b.data.clone());
        self.make(
            out,
            ia.is_some() || ib.is_some(),
            Box::new(move |g, grads| {
                if ia.is_some() {
                    grads.accumulate(ia, g / &*db);
                }
                if ib.is_some() {
                    let gb = g * &*da / (&*db * &*db);
                    grads.accumulate(ib, gb.mapv(|v| -v));
                }
            }),
        )
    }

    pub fn scale(&mut self, a: &Var, c: f64) -> Var {
        let out = a.data.mapv(|v| v * c);
        let ia = a.id;
        self.make(
            out,
            ia.is_some(),
            Box::new(move |g, grads| grads.accumulate(ia, g.mapv(|v| v * c))),
        )
    }

    pub fn add_scalar(&mut self, a: &Var, c: f64) -> Var {
        let out = a.data.mapv(|v| v + c);
        let ia = a.id;
        self.make(
            out,
            ia.is_some(),
            Box::new(move |g, grads| grads.accumulate(ia, g.clone())),
        )
    }

    pub fn relu(&mut self, a: &Var) -> Var {
        let out = a.data.mapv(|v| v.max(0.0));
        let ia = a.id;
        let da = a.data.clone();
        self.make(
            out,
            ia.is_some(),
            Box::new(move |g, grads| {
                let gi = ndarray::Zip::from(g)
                    .and(&*da)
                    .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                grads.accumulate(ia, gi);
            }),
        )
    }

    pub fn exp(&mut self, a: &Var) -> Var {
        let out = a.data.mapv(f64::exp);
        let ia = a.id;
        let saved = out.clone();
        self.make(
            out,
            ia.is_some(),
            Box::new(move |g, grads| grads.accumulate(ia, g * &saved)),
        )
    }

    pub fn sqrt(&mut self, a: &Var) -> Var {
        let out = a.data.mapv(f64::sqrt);
        let ia = a.id;
        let saved = out.clone();
        self.make(
            out,
            ia.is_some(),
            Box::new(move |g, grads| {
                let gi = ndarray::Zip::from(g)
                    .and(&saved)
                    .map_collect(|&g, &s| g * 0.5 / s);
                grads.accumulate(ia, gi);
            }),
        )
    }

    pub fn pow_const(&mut self, a: &Var, p: f64) -> Var {
        let out = a.data.mapv(|v| v.powf(p));
        let ia = a.id;
        let da = a.data.clone();
        self.make(
            out,
            ia.is_some(),
            Box::new(move |g, grads| {
                let gi = ndarray::Zip::from(g)
                    .and(&*da)
                    .map_collect(|&g, &x| g * p * x.powf(p - 1.0));
                grads.accumulate(ia, gi);
            }),
        )
    }

    /// `max(a, lo)` with a one-way gradient gate: below the bound the
    /// gradient only passes when it would push the value back up.
    pub fn clamp_min(&mut self, a: &Var, lo: f64) -> Var {
        let out = a.data.mapv(|v| v.max(lo));
        let ia = a.id;
        let da = a.data.clone();
        self.make(
            out,
            ia.is_some(),
            Box::new(move |g, grads| {
                let gi = ndarray::Zip::from(g)
                    .and(&*da)
                    .map_collect(|&g, &x| if x >= lo || g < 0.0 { g } else { 0.0 });
                grads.accumulate(ia, gi);
            }),
        )
    }

    /// Two-sided clamp with the same inward gates as [`Graph::clamp_min`].
    pub fn clamp(&mut self, a: &Var, lo: f64, hi: f64) -> Var {
        let out = a.data.mapv(|v| v.clamp(lo, hi));
        let ia = a.id;
        let da = a.data.clone();
        self.make(
            out,
            ia.is_some(),
            Box::new(move |g, grads| {
                let gi = ndarray::Zip::from(g).and(&*da).map_collect(|&g, &x| {
                    if (x >= lo || g < 0.0) && (x <= hi || g > 0.0) {
                        g
                    } else {
                        0.0
                    }
                });
                grads.accumulate(ia, gi);
            }),
        )
    }

    pub fn sum_all(&mut self, a: &Var) -> Var {
        let out = ndarray::arr0(a.data.sum()).into_dyn();
        let ia = a.id;
        let shape: Vec<usize> = a.shape().to_vec();
        self.make(
            out,
            ia.is_some(),
            Box::new(move |g, grads| {
                let gv = *g.iter().next().unwrap();
                grads.accumulate(ia, Arr::from_elem(IxDyn(&shape), gv));
            }),
        )
    }

    pub fn mean_all(&mut self, a: &Var) -> Var {
        let n = a.data.len() as f64;
        let s = self.sum_all(a);
        self.scale(&s, 1.0 / n)
    }

    pub fn concat_axis0(&mut self, a: &Var, b: &Var) -> Var {
        let out = ndarray::concatenate(Axis(0), &[a.data.view(), b.data.view()])
            .expect("concat shape mismatch");
        let (ia, ib) = (a.id, b.id);
        let na = a.shape()[0];
        self.make(
            out,
            ia.is_some() || ib.is_some(),
            Box::new(move |g, grads| {
                let ga = g.slice_axis(Axis(0), Slice::from(0..na)).to_owned();
                let gb = g.slice_axis(Axis(0), Slice::from(na..)).to_owned();
                grads.accumulate(ia, ga);
                grads.accumulate(ib, gb);
            }),
        )
    }

    pub fn slice_axis0(&mut self, a: &Var, start: usize, len: usize) -> Var {
        let out = a
            .data
            .slice_axis(Axis(0), Slice::from(start..start + len))
            .to_owned();
        let ia = a.id;
        let shape: Vec<usize> = a.shape().to_vec();
        self.make(
            out,
            ia.is_some(),
            Box::new(move |g, grads| {
                let mut gi = Arr::zeros(IxDyn(&shape));
                gi.slice_axis_mut(Axis(0), Slice::from(start..start + len))
                    .assign(g);
                grads.accumulate(ia, gi);
            }),
        )
    }

    /// Crop a (C, H, W) tensor to its top-left (C, h, w) corner.
    pub fn crop_spatial(&mut self, a: &Var, h: usize, w: usize) -> Var {
        let out = a.data.slice(ndarray::s![.., ..h, ..w]).to_owned().into_dyn();
        let ia = a.id;
        let shape: Vec<usize> = a.shape().to_vec();
        self.make(
            out,
            ia.is_some(),
            Box::new(move |g, grads| {
                let mut gi = Arr::zeros(IxDyn(&shape));
                gi.slice_mut(ndarray::s![.., ..h, ..w]).assign(g);
                grads.accumulate(ia, gi);
            }),
        )
    }

    /// Reinterpret the layout (standard order preserved).
    pub fn reshape(&mut self, a: &Var, shape: &[usize]) -> Var {
        let out = a
            .data
            .clone()
            .as_standard_layout()
            .to_owned()
            .into_shape(IxDyn(shape))
            .expect("reshape element count mismatch");
        let ia = a.id;
        let orig: Vec<usize> = a.shape().to_vec();
        self.make(
            out,
            ia.is_some(),
            Box::new(move |g, grads| {
                let gi = g
                    .clone()
                    .as_standard_layout()
                    .to_owned()
                    .into_shape(IxDyn(&orig))
                    .unwrap();
                grads.accumulate(ia, gi);
            }),
        )
    }

    /// Select one index along axis 1 of a (C, M, H, W) tensor -> (C, H, W).
    pub fn index_axis1(&mut self, a: &Var, idx: usize) -> Var {
        assert_eq!(a.shape().len(), 4, "index_axis1 wants 4-d input");
        let out = a
            .data
            .index_axis(Axis(1), idx)
            .to_owned()
            .into_dyn();
        let ia = a.id;
        let shape: Vec<usize> = a.shape().to_vec();
        self.make(
            out,
            ia.is_some(),
            Box::new(move |g, grads| {
                let mut gi = Arr::zeros(IxDyn(&shape));
                gi.index_axis_mut(Axis(1), idx).assign(g);
                grads.accumulate(ia, gi);
            }),
        )
    }

    /// Softmax over axis 1 of a (C, M, H, W) tensor.
    pub fn softmax_axis1(&mut self, a: &Var) -> Var {
        assert_eq!(a.shape().len(), 4, "softmax_axis1 wants 4-d input");
        let mut out = a.data.as_ref().clone();
        let m = out.shape()[1];
        // stable per-fiber softmax
        for mut lane in out.lanes_mut(Axis(1)) {
            let mx = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in lane.iter_mut() {
                *v /= z;
            }
        }
        let ia = a.id;
        let saved = out.clone();
        let _ = m;
        self.make(
            out,
            ia.is_some(),
            Box::new(move |g, grads| {
                let mut gi = g.clone();
                for (mut gl, wl) in gi.lanes_mut(Axis(1)).into_iter().zip(saved.lanes(Axis(1))) {
                    let dot: f64 = gl.iter().zip(wl.iter()).map(|(a, b)| a * b).sum();
                    for (gv, wv) in gl.iter_mut().zip(wl.iter()) {
                        *gv = wv * (*gv - dot);
                    }
                }
                grads.accumulate(ia, gi);
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{finite_diff, max_rel_err};
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arr::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let x0 = rand_arr(&[2, 3, 4], 7);
        let run = |x: &Arr| -> f64 {
            let mut g = Graph::inference();
            let v = g.constant(x.clone());
            let e = g.exp(&v);
            let r = g.relu(&v);
            let m = g.mul(&e, &r);
            let s = g.add_scalar(&m, 0.3);
            let q = g.div(&s, &e);
            g.sum_all(&q).scalar()
        };
        let mut g = Graph::recording();
        let v = g.leaf(0, std::sync::Arc::new(x0.clone()));
        let e = g.exp(&v);
        let r = g.relu(&v);
        let m = g.mul(&e, &r);
        let s = g.add_scalar(&m, 0.3);
        let q = g.div(&s, &e);
        let loss = g.sum_all(&q);
        let mut grads = g.backward(&loss);
        let got = g.leaf_grads(&mut grads).remove(&0).unwrap();
        let want = finite_diff(&x0, 1e-5, run);
        assert!(max_rel_err(&got, &want) < 1e-6, "rel err too large");
    }

    #[test]
    fn softmax_grad_matches_finite_differences() {
        let x0 = rand_arr(&[2, 4, 2, 2], 11);
        let w0 = rand_arr(&[2, 4, 2, 2], 13);
        let run = |x: &Arr| -> f64 {
            let mut g = Graph::inference();
            let v = g.constant(x.clone());
            let s = g.softmax_axis1(&v);
            let w = g.constant(w0.clone());
            let m = g.mul(&s, &w);
            g.sum_all(&m).scalar()
        };
        let mut g = Graph::recording();
        let v = g.leaf(0, std::sync::Arc::new(x0.clone()));
        let s = g.softmax_axis1(&v);
        let w = g.constant(w0.clone());
        let m = g.mul(&s, &w);
        let loss = g.sum_all(&m);
        let mut grads = g.backward(&loss);
        let got = g.leaf_grads(&mut grads).remove(&0).unwrap();
        let want = finite_diff(&x0, 1e-5, run);
        assert!(max_rel_err(&got, &want) < 1e-6);
    }

    #[test]
    fn structural_grads_roundtrip() {
        let x0 = rand_arr(&[3, 4, 4], 5);
        let y0 = rand_arr(&[2, 4, 4], 6);
        let run = |x: &Arr| -> f64 {
            let mut g = Graph::inference();
            let v = g.constant(x.clone());
            let w = g.constant(y0.clone());
            let c = g.concat_axis0(&v, &w);
            let s = g.slice_axis0(&c, 1, 3);
            let r = g.crop_spatial(&s, 3, 2);
            let q = g.reshape(&r, &[9, 2]);
            let q2 = g.add_scalar(&q, 2.0);
            let p = g.pow_const(&q2, 1.5);
            g.sum_all(&p).scalar()
        };
        let mut g = Graph::recording();
        let v = g.leaf(0, std::sync::Arc::new(x0.clone()));
        let w = g.constant(y0.clone());
        let c = g.concat_axis0(&v, &w);
        let s = g.slice_axis0(&c, 1, 3);
        let r = g.crop_spatial(&s, 3, 2);
        let q = g.reshape(&r, &[9, 2]);
        let q2 = g.add_scalar(&q, 2.0);
        let p = g.pow_const(&q2, 1.5);
        let loss = g.sum_all(&p);
        let mut grads = g.backward(&loss);
        let got = g.leaf_grads(&mut grads).remove(&0).unwrap();
        let want = finite_diff(&x0, 1e-5, run);
        assert!(max_rel_err(&got, &want) < 1e-6);
    }
}
