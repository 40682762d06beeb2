//! Per-channel fully factorized prior: a small monotone network models each
//! channel's cumulative distribution. Used to code hyper-latents and the
//! coarse motion latent.

use crate::config::PROB_FLOOR;
use crate::graph::{Arr, Graph, Var};
use crate::nn::{Module, Param};
use ndarray::IxDyn;

/// Widths of the univariate monotone chain; 4 affine layers.
const WIDTHS: [usize; 5] = [1, 3, 3, 3, 1];
const LAYERS: usize = 4;
const MAXW: usize = 3;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Monotone cumulative model c_i: R -> (0, 1), one independent chain per
/// channel. Monotonicity holds by construction: weights pass through
/// softplus and the mixing gain through tanh.
pub struct FactorizedPrior {
    channels: usize,
    h: Vec<Param>, // (C, r_out, r_in) per layer
    b: Vec<Param>, // (C, r_out) per layer
    a: Vec<Param>, // (C, r_out) for non-final layers
}

impl FactorizedPrior {
    /// Biases start at zero so the initialized prior is symmetric,
    /// p(v) = p(-v); training is free to break that.
    pub fn new(channels: usize) -> Self {
        let scale = 10f64.powf(1.0 / LAYERS as f64);
        let mut h = Vec::new();
        let mut b = Vec::new();
        let mut a = Vec::new();
        for k in 0..LAYERS {
            let (r_in, r_out) = (WIDTHS[k], WIDTHS[k + 1]);
            let init = (1.0 / (scale * r_out as f64)).exp_m1().ln();
            h.push(Param::new(Arr::from_elem(
                IxDyn(&[channels, r_out, r_in]),
                init,
            )));
            b.push(Param::new(Arr::zeros(IxDyn(&[channels, r_out]))));
            if k + 1 < LAYERS {
                a.push(Param::new(Arr::zeros(IxDyn(&[channels, r_out]))));
            }
        }
        FactorizedPrior { channels, h, b, a }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Cumulative probability c(x) for one channel.
    pub fn cumulative(&self, ch: usize, x: f64) -> f64 {
        sigmoid(self.logit(ch, x).0)
    }

    /// Forward pass returning the pre-sigmoid logit and the stash of layer
    /// pre-activations needed for backprop.
    fn logit(&self, ch: usize, x: f64) -> (f64, [[f64; MAXW]; LAYERS]) {
        let mut v = [x, 0.0, 0.0];
        let mut width = 1usize;
        let mut pre = [[0.0; MAXW]; LAYERS];
        for k in 0..LAYERS {
            let r_out = WIDTHS[k + 1];
            let hk = &self.h[k].value;
            let bk = &self.b[k].value;
            let mut u = [0.0; MAXW];
            for i in 0..r_out {
                let mut s = bk[[ch, i]];
                for (j, vj) in v.iter().enumerate().take(width) {
                    s += softplus(hk[[ch, i, j]]) * vj;
                }
                u[i] = s;
                pre[k][i] = s;
            }
            if k + 1 < LAYERS {
                let ak = &self.a[k].value;
                for (i, ui) in u.iter_mut().enumerate().take(r_out) {
                    *ui += ak[[ch, i]].tanh() * ui.tanh();
                }
            }
            v = u;
            width = r_out;
        }
        (v[0], pre)
    }

    /// Backprop `d_logit` through one channel evaluation at input `x`,
    /// accumulating into the gradient buffers. Returns d/dx.
    #[allow(clippy::too_many_arguments)]
    fn backprop(
        &self,
        ch: usize,
        x: f64,
        pre: &[[f64; MAXW]; LAYERS],
        d_logit: f64,
        gh: &mut [Arr],
        gb: &mut [Arr],
        ga: &mut [Arr],
    ) -> f64 {
        // recover the post-activation inputs of each layer
        let mut posts = [[0.0; MAXW]; LAYERS]; // posts[k] = input to layer k
        posts[0][0] = x;
        for k in 0..LAYERS - 1 {
            let r_out = WIDTHS[k + 1];
            for i in 0..r_out {
                let u = pre[k][i];
                let mixed = if k + 1 < LAYERS {
                    u + self.a[k].value[[ch, i]].tanh() * u.tanh()
                } else {
                    u
                };
                posts[k + 1][i] = mixed;
            }
        }
        let mut d = [d_logit, 0.0, 0.0];
        for k in (0..LAYERS).rev() {
            let (r_in, r_out) = (WIDTHS[k], WIDTHS[k + 1]);
            let mut dpre = [0.0; MAXW];
            if k + 1 < LAYERS {
                for i in 0..r_out {
                    let u = pre[k][i];
                    let ta = self.a[k].value[[ch, i]].tanh();
                    let th = u.tanh();
                    dpre[i] = d[i] * (1.0 + ta * (1.0 - th * th));
                    ga[k][[ch, i]] += d[i] * th * (1.0 - ta * ta);
                }
            } else {
                dpre[..r_out].copy_from_slice(&d[..r_out]);
            }
            let hk = &self.h[k].value;
            let mut dprev = [0.0; MAXW];
            for i in 0..r_out {
                gb[k][[ch, i]] += dpre[i];
                for j in 0..r_in {
                    let hij = hk[[ch, i, j]];
                    gh[k][[ch, i, j]] += dpre[i] * posts[k][j] * sigmoid(hij);
                    dprev[j] += dpre[i] * softplus(hij);
                }
            }
            d = dprev;
        }
        d[0]
    }
}

impl Module for FactorizedPrior {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (k, p) in self.h.iter_mut().enumerate() {
            f(format!("{prefix}.h{k}"), p);
        }
        for (k, p) in self.b.iter_mut().enumerate() {
            f(format!("{prefix}.b{k}"), p);
        }
        for (k, p) in self.a.iter_mut().enumerate() {
            f(format!("{prefix}.a{k}"), p);
        }
    }
}

impl Graph {
    /// Per-element code length -log2(c(v + 1/2) - c(v - 1/2)) with the
    /// table-unit floor, differentiable in `x` and in the prior parameters.
    pub fn factorized_bits(&mut self, x: &Var, prior: &FactorizedPrior) -> Var {
        let shape = x.shape().to_vec();
        assert_eq!(shape[0], prior.channels, "prior channels mismatch");
        // register the parameters on the tape
        let h_ids: Vec<_> = prior.h.iter().map(|p| self.leaf(p.pid(), p.value.clone()).id).collect();
        let b_ids: Vec<_> = prior.b.iter().map(|p| self.leaf(p.pid(), p.value.clone()).id).collect();
        let a_ids: Vec<_> = prior.a.iter().map(|p| self.leaf(p.pid(), p.value.clone()).id).collect();

        let (c, spatial): (usize, usize) = (shape[0], shape[1..].iter().product());
        let ln2 = std::f64::consts::LN_2;
        let flat = x
            .data
            .view()
            .into_shape((c, spatial))
            .expect("channel-major latent");
        let mut out = Arr::zeros(IxDyn(&shape));
        {
            let mut of = out.view_mut().into_shape((c, spatial)).unwrap();
            for ch in 0..c {
                for e in 0..spatial {
                    let v = flat[(ch, e)];
                    let p = (prior.cumulative(ch, v + 0.5) - prior.cumulative(ch, v - 0.5))
                        .max(PROB_FLOOR);
                    of[(ch, e)] = -p.log2();
                }
            }
        }

        // the backward closure re-evaluates the tiny chains; it borrows the
        // prior's parameter arrays by Arc so the tape stays self-contained
        let snapshot = FactorizedSnapshot::of(prior);
        let ix = x.id;
        let dx = x.data.clone();
        let any = ix.is_some()
            || h_ids.iter().any(Option::is_some)
            || b_ids.iter().any(Option::is_some)
            || a_ids.iter().any(Option::is_some);
        self.make(
            out,
            any,
            Box::new(move |g, grads| {
                let prior = snapshot.view();
                let mut gh: Vec<Arr> =
                    prior.h.iter().map(|p| Arr::zeros(IxDyn(p.value.shape()))).collect();
                let mut gb: Vec<Arr> =
                    prior.b.iter().map(|p| Arr::zeros(IxDyn(p.value.shape()))).collect();
                let mut ga: Vec<Arr> =
                    prior.a.iter().map(|p| Arr::zeros(IxDyn(p.value.shape()))).collect();
                let mut gx = Arr::zeros(IxDyn(dx.shape()));
                let flat = dx.view().into_shape((c, spatial)).unwrap();
                let gflat = g.view().into_shape((c, spatial)).unwrap();
                {
                    let mut gxf = gx.view_mut().into_shape((c, spatial)).unwrap();
                    for ch in 0..c {
                        for e in 0..spatial {
                            let go = gflat[(ch, e)];
                            if go == 0.0 {
                                continue;
                            }
                            let v = flat[(ch, e)];
                            let (logit_hi, stash_hi) = prior.logit(ch, v + 0.5);
                            let (logit_lo, stash_lo) = prior.logit(ch, v - 0.5);
                            let c_hi = sigmoid(logit_hi);
                            let c_lo = sigmoid(logit_lo);
                            let p = c_hi - c_lo;
                            if p <= PROB_FLOOR {
                                continue;
                            }
                            let dp = -go / (p * ln2);
                            let d_hi = dp * c_hi * (1.0 - c_hi);
                            let d_lo = -dp * c_lo * (1.0 - c_lo);
                            let dv_hi = prior.backprop(
                                ch, v + 0.5, &stash_hi, d_hi, &mut gh, &mut gb, &mut ga,
                            );
                            let dv_lo = prior.backprop(
                                ch, v - 0.5, &stash_lo, d_lo, &mut gh, &mut gb, &mut ga,
                            );
                            gxf[(ch, e)] = dv_hi + dv_lo;
                        }
                    }
                }
                grads.accumulate(ix, gx);
                for (id, g) in h_ids.iter().zip(gh) {
                    grads.accumulate(*id, g);
                }
                for (id, g) in b_ids.iter().zip(gb) {
                    grads.accumulate(*id, g);
                }
                for (id, g) in a_ids.iter().zip(ga) {
                    grads.accumulate(*id, g);
                }
            }),
        )
    }
}

/// Arc snapshot of the prior parameters, cheap to move into the tape.
struct FactorizedSnapshot {
    channels: usize,
    h: Vec<std::sync::Arc<Arr>>,
    b: Vec<std::sync::Arc<Arr>>,
    a: Vec<std::sync::Arc<Arr>>,
}

impl FactorizedSnapshot {
    fn of(p: &FactorizedPrior) -> Self {
        FactorizedSnapshot {
            channels: p.channels,
            h: p.h.iter().map(|p| p.value.clone()).collect(),
            b: p.b.iter().map(|p| p.value.clone()).collect(),
            a: p.a.iter().map(|p| p.value.clone()).collect(),
        }
    }

    /// Rebuild a borrowing view usable with the forward/backward helpers.
    fn view(&self) -> FactorizedPrior {
        FactorizedPrior {
            channels: self.channels,
            h: self.h.iter().map(|a| Param::new(a.as_ref().clone())).collect(),
            b: self.b.iter().map(|a| Param::new(a.as_ref().clone())).collect(),
            a: self.a.iter().map(|a| Param::new(a.as_ref().clone())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::testutil::{finite_diff, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn cumulative_is_monotone_and_bounded() {
        let prior = FactorizedPrior::new(3);
        for ch in 0..3 {
            let mut prev = 0.0;
            for i in -200..=200 {
                let x = i as f64 * 0.5;
                let c = prior.cumulative(ch, x);
                assert!((0.0..=1.0).contains(&c));
                assert!(c >= prev, "cumulative must not decrease");
                prev = c;
            }
        }
    }

    #[test]
    fn initialized_prior_is_symmetric() {
        let prior = FactorizedPrior::new(2);
        for v in 0..20 {
            let p_pos = prior.cumulative(0, v as f64 + 0.5) - prior.cumulative(0, v as f64 - 0.5);
            let p_neg =
                prior.cumulative(0, -v as f64 + 0.5) - prior.cumulative(0, -v as f64 - 0.5);
            assert!((p_pos - p_neg).abs() < 1e-12, "bits(v) != bits(-v) at init");
        }
    }

    #[test]
    fn bits_are_nonnegative_and_sane_at_zero() {
        let prior = FactorizedPrior::new(1);
        let mut g = Graph::inference();
        let x = g.constant(ndarray::arr2(&[[0.0, 1.0, -4.0]]).into_dyn());
        let bits = g.factorized_bits(&x, &prior);
        for &b in bits.data().iter() {
            assert!((0.0..=16.0).contains(&b));
        }
        let b0 = bits.data()[[0, 0]];
        assert!(b0 > 0.5 && b0 < 10.0, "init bits at 0: {b0}");
    }

    #[test]
    fn factorized_bits_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut prior = FactorizedPrior::new(2);
        // perturb parameters so gradients are non-trivial
        prior.visit_params("p", &mut |_, p| {
            let mut v = p.value.as_ref().clone();
            v.mapv_inplace(|x| x + rng.gen_range(-0.05..0.05));
            p.set(v);
        });
        let x0 = Arr::from_shape_simple_fn(IxDyn(&[2, 2, 2]), || rng.gen_range(-3.0..3.0));

        let eval_x = |x: &Arr| -> f64 {
            let mut g = Graph::inference();
            let vx = g.constant(x.clone());
            let b = g.factorized_bits(&vx, &prior);
            g.sum_all(&b).scalar()
        };
        let mut g = Graph::recording();
        let vx = g.leaf(0, Arc::new(x0.clone()));
        let b = g.factorized_bits(&vx, &prior);
        let loss = g.sum_all(&b);
        let mut grads = g.backward(&loss);
        let got = g.leaf_grads(&mut grads);
        let fx = finite_diff(&x0, 1e-5, eval_x);
        assert!(max_rel_err(&got[&0], &fx) < 1e-5, "x grad mismatch");

        // parameter gradients, checked through the Param pids
        let mut pids = Vec::new();
        prior.visit_params("p", &mut |name, p| pids.push((name, p.pid())));
        for (name, pid) in pids {
            let got_g = match got.get(&pid) {
                Some(g) => g.clone(),
                None => continue,
            };
            // finite differences on this parameter
            let current = {
                let mut out = None;
                prior.visit_params("p", &mut |n, p| {
                    if n == name {
                        out = Some(p.value.as_ref().clone());
                    }
                });
                out.unwrap()
            };
            let want = finite_diff(&current, 1e-5, |pv| {
                let mut probe = FactorizedPrior::new(2);
                // copy all params, substituting the probed one
                let mut src = Vec::new();
                prior.visit_params("p", &mut |n, p| src.push((n, p.value.as_ref().clone())));
                probe.visit_params("p", &mut |n, p| {
                    let (_, v) = src.iter().find(|(sn, _)| *sn == n).unwrap();
                    p.set(if n == name { pv.clone() } else { v.clone() });
                });
                let mut g = Graph::inference();
                let vx = g.constant(x0.clone());
                let b = g.factorized_bits(&vx, &probe);
                g.sum_all(&b).scalar()
            });
            assert!(
                max_rel_err(&got_g, &want) < 1e-5,
                "param {name} grad mismatch"
            );
        }
    }
}
