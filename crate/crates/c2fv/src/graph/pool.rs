//! Non-overlapping pooling, replicate upsampling and separable blur.

use super::{Arr, Graph, Var};
use ndarray::IxDyn;

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected (C, H, W)");
    (shape[0], shape[1], shape[2])
}

impl Graph {
    /// Mean over disjoint (kh, kw) cells; kernel equals stride and must
    /// divide the spatial dims.
    pub fn avgpool(&mut self, x: &Var, kh: usize, kw: usize) -> Var {
        let (c, h, w) = dims3(x.shape());
        assert!(h % kh == 0 && w % kw == 0, "avgpool needs exact tiling");
        let (oh, ow) = (h / kh, w / kw);
        let inv = 1.0 / (kh * kw) as f64;
        let mut out = Arr::zeros(IxDyn(&[c, oh, ow]));
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            s += x.data[[ci, oy * kh + dy, ox * kw + dx]];
                        }
                    }
                    out[[ci, oy, ox]] = s * inv;
                }
            }
        }
        let ix = x.id;
        self.make(
            out,
            ix.is_some(),
            Box::new(move |g, grads| {
                let mut gi = Arr::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[[ci, oy, ox]] * inv;
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    gi[[ci, oy * kh + dy, ox * kw + dx]] = gv;
                                }
                            }
                        }
                    }
                }
                grads.accumulate(ix, gi);
            }),
        )
    }

    /// Nearest-neighbour upsample by integer factors (each value fills an
    /// (sh, sw) cell).
    pub fn repeat_upsample(&mut self, x: &Var, sh: usize, sw: usize) -> Var {
        let (c, h, w) = dims3(x.shape());
        let (oh, ow) = (h * sh, w * sw);
        let mut out = Arr::zeros(IxDyn(&[c, oh, ow]));
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[[ci, y, xx]] = x.data[[ci, y / sh, xx / sw]];
                }
            }
        }
        let ix = x.id;
        self.make(
            out,
            ix.is_some(),
            Box::new(move |g, grads| {
                let mut gi = Arr::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gi[[ci, y / sh, xx / sw]] += g[[ci, y, xx]];
                        }
                    }
                }
                grads.accumulate(ix, gi);
            }),
        )
    }

    /// Keep the top-left element of each (sh, sw) cell.
    pub fn stride_sample(&mut self, x: &Var, sh: usize, sw: usize) -> Var {
        let (c, h, w) = dims3(x.shape());
        assert!(h % sh == 0 && w % sw == 0, "stride_sample needs exact tiling");
        let (oh, ow) = (h / sh, w / sw);
        let mut out = Arr::zeros(IxDyn(&[c, oh, ow]));
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[[ci, oy, ox]] = x.data[[ci, oy * sh, ox * sw]];
                }
            }
        }
        let ix = x.id;
        self.make(
            out,
            ix.is_some(),
            Box::new(move |g, grads| {
                let mut gi = Arr::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            gi[[ci, oy * sh, ox * sw]] = g[[ci, oy, ox]];
                        }
                    }
                }
                grads.accumulate(ix, gi);
            }),
        )
    }

    /// Separable valid-mode correlation with a fixed symmetric 1-d kernel,
    /// applied per channel (used by the SSIM window).
    pub fn blur_valid(&mut self, x: &Var, kernel: &[f64]) -> Var {
        let (c, h, w) = dims3(x.shape());
        let k = kernel.len();
        assert!(k <= h && k <= w, "blur window larger than input");
        let (oh, ow) = (h - k + 1, w - k + 1);
        // horizontal pass then vertical pass
        let mut tmp = Arr::zeros(IxDyn(&[c, h, ow]));
        for ci in 0..c {
            for y in 0..h {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for (j, kv) in kernel.iter().enumerate() {
                        s += kv * x.data[[ci, y, ox + j]];
                    }
                    tmp[[ci, y, ox]] = s;
                }
            }
        }
        let mut out = Arr::zeros(IxDyn(&[c, oh, ow]));
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for (i, kv) in kernel.iter().enumerate() {
                        s += kv * tmp[[ci, oy + i, ox]];
                    }
                    out[[ci, oy, ox]] = s;
                }
            }
        }
        let ix = x.id;
        let kern = kernel.to_vec();
        self.make(
            out,
            ix.is_some(),
            Box::new(move |g, grads| {
                // adjoint of valid correlation = scatter the window back
                let mut gtmp = Arr::zeros(IxDyn(&[c, h, ow]));
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[[ci, oy, ox]];
                            for (i, kv) in kern.iter().enumerate() {
                                gtmp[[ci, oy + i, ox]] += kv * gv;
                            }
                        }
                    }
                }
                let mut gi = Arr::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for y in 0..h {
                        for ox in 0..ow {
                            let gv = gtmp[[ci, y, ox]];
                            for (j, kv) in kern.iter().enumerate() {
                                gi[[ci, y, ox + j]] += kv * gv;
                            }
                        }
                    }
                }
                grads.accumulate(ix, gi);
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{finite_diff, max_rel_err};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn rand_arr(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arr::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn pool_upsample_sample_grads() {
        let x0 = rand_arr(&[2, 4, 8], 21);
        let eval = |x: &Arr| -> f64 {
            let mut g = Graph::inference();
            let v = g.constant(x.clone());
            let p = g.avgpool(&v, 2, 4);
            let u = g.repeat_upsample(&p, 2, 4);
            let s = g.stride_sample(&v, 2, 2);
            let su = g.repeat_upsample(&s, 2, 2);
            let m = g.mul(&u, &su);
            let q = g.mul(&m, &m);
            g.sum_all(&q).scalar()
        };
        let mut g = Graph::recording();
        let v = g.leaf(0, Arc::new(x0.clone()));
        let p = g.avgpool(&v, 2, 4);
        let u = g.repeat_upsample(&p, 2, 4);
        let s = g.stride_sample(&v, 2, 2);
        let su = g.repeat_upsample(&s, 2, 2);
        let m = g.mul(&u, &su);
        let q = g.mul(&m, &m);
        let loss = g.sum_all(&q);
        let mut grads = g.backward(&loss);
        let got = g.leaf_grads(&mut grads).remove(&0).unwrap();
        let want = finite_diff(&x0, 1e-5, eval);
        assert!(max_rel_err(&got, &want) < 1e-6);
    }

    #[test]
    fn blur_valid_grad_and_shape() {
        let x0 = rand_arr(&[1, 7, 7], 22);
        let kern = vec![0.25, 0.5, 0.25];
        let eval = |x: &Arr| -> f64 {
            let mut g = Graph::inference();
            let v = g.constant(x.clone());
            let b = g.blur_valid(&v, &kern);
            assert_eq!(b.shape(), &[1, 5, 5]);
            let q = g.mul(&b, &b);
            g.sum_all(&q).scalar()
        };
        let mut g = Graph::recording();
        let v = g.leaf(0, Arc::new(x0.clone()));
        let b = g.blur_valid(&v, &kern);
        let q = g.mul(&b, &b);
        let loss = g.sum_all(&q);
        let mut grads = g.backward(&loss);
        let got = g.leaf_grads(&mut grads).remove(&0).unwrap();
        let want = finite_diff(&x0, 1e-5, eval);
        assert!(max_rel_err(&got, &want) < 1e-6);
    }
}
