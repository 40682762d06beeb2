//! Trainable parameters, layer building blocks and the Adam optimizer.

use crate::graph::{Arr, Graph, Var};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// One trainable tensor. Its `pid` is unique per process and keys gradient
/// lookup and optimizer state.
pub struct Param {
    pid: u64,
    pub value: Arc<Arr>,
}

impl Param {
    pub fn new(value: Arr) -> Self {
        Param {
            pid: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            value: Arc::new(value),
        }
    }

    pub fn pid(&self) -> u64 {
        self.pid
    }

    /// Put the parameter on the tape (or pass it through untracked when the
    /// graph is not recording).
    pub fn var(&self, g: &mut Graph) -> Var {
        g.leaf(self.pid, self.value.clone())
    }

    pub fn set(&mut self, value: Arr) {
        self.value = Arc::new(value);
    }
}

/// Uniform traversal of a module tree; used by the optimizer, checkpoints
/// and parameter counting.
pub trait Module {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));
}

pub fn param_count(m: &mut dyn Module) -> usize {
    let mut n = 0;
    m.visit_params("", &mut |_, p| n += p.value.len());
    n
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Arr {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    Arr::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

/// Dense square-kernel convolution layer.
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            w: Param::new(he_normal(rng, &[c_out, c_in, k, k], c_in * k * k)),
            b: Param::new(Arr::zeros(IxDyn(&[c_out]))),
            stride,
            pad,
        }
    }

    /// Same-shape 3x3 conv, stride 1, pad 1.
    pub fn same(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        Conv2d::new(rng, c_in, c_out, 3, 1, 1)
    }

    /// 3x3 conv, stride 2, pad 1 (halves spatial dims).
    pub fn down(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        Conv2d::new(rng, c_in, c_out, 3, 2, 1)
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Var {
        let w = self.w.var(g);
        let b = self.b.var(g);
        g.conv2d(x, &w, Some(&b), self.stride, self.pad)
    }
}

impl Module for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// 4x4 stride-2 transposed convolution (doubles spatial dims).
pub struct Deconv2d {
    pub w: Param,
    pub b: Param,
}

impl Deconv2d {
    pub fn up(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        Deconv2d {
            w: Param::new(he_normal(rng, &[c_in, c_out, 4, 4], c_in * 16)),
            b: Param::new(Arr::zeros(IxDyn(&[c_out]))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Var {
        let w = self.w.var(g);
        let b = self.b.var(g);
        g.conv_transpose2d(x, &w, Some(&b), 2, 1)
    }
}

impl Module for Deconv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// conv -> ReLU -> conv with an identity skip.
pub struct ResBlock {
    pub c1: Conv2d,
    pub c2: Conv2d,
}

impl ResBlock {
    pub fn new(rng: &mut ChaCha8Rng, ch: usize) -> Self {
        ResBlock {
            c1: Conv2d::same(rng, ch, ch),
            c2: Conv2d::same(rng, ch, ch),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: &Var) -> Var {
        let h = self.c1.forward(g, x);
        let h = g.relu(&h);
        let h = self.c2.forward(g, &h);
        g.add(x, &h)
    }
}

impl Module for ResBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.c1.visit_params(&format!("{prefix}.c1"), f);
        self.c2.visit_params(&format!("{prefix}.c2"), f);
    }
}

/// Adam with per-parameter state keyed by pid.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<u64, Arr>,
    v: HashMap<u64, Arr>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update. `grads` maps pid -> gradient.
    pub fn step(&mut self, model: &mut dyn Module, grads: &HashMap<u64, Arr>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (beta1, beta2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params("", &mut |_, p| {
            let Some(grad) = grads.get(&p.pid()) else {
                return;
            };
            let m = ms
                .entry(p.pid())
                .or_insert_with(|| Arr::zeros(IxDyn(p.value.shape())));
            let v = vs
                .entry(p.pid())
                .or_insert_with(|| Arr::zeros(IxDyn(p.value.shape())));
            m.zip_mut_with(grad, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            v.zip_mut_with(grad, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let mut new = p.value.as_ref().clone();
            ndarray::Zip::from(&mut new)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                });
            p.set(new);
        });
    }
}

/// Seeded RNG for parameter init and training noise.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// i.i.d. Uniform(-0.5, 0.5) noise of the given shape.
pub fn uniform_noise(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    Arr::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-0.5..0.5))
}

/// Gumbel(0, 1) noise of the given shape.
pub fn gumbel_noise(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    Arr::from_shape_simple_fn(IxDyn(shape), || {
        let u: f64 = rng.gen_range(1e-12..1.0);
        -(-u.ln()).ln()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad {
        p: Param,
    }

    impl Module for Quad {
        fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
            f(format!("{prefix}.p"), &mut self.p);
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut model = Quad {
            p: Param::new(Arr::from_elem(IxDyn(&[3]), 5.0)),
        };
        let mut opt = Adam::new(0.2);
        for _ in 0..200 {
            let mut g = Graph::recording();
            let v = model.p.var(&mut g);
            let sq = g.mul(&v, &v);
            let loss = g.sum_all(&sq);
            let mut grads = g.backward(&loss);
            let grads = g.leaf_grads(&mut grads);
            opt.step(&mut model, &grads);
        }
        assert!(model.p.value.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn shared_parameter_gradients_sum() {
        let model = Quad {
            p: Param::new(Arr::from_elem(IxDyn(&[2]), 1.0)),
        };
        let mut g = Graph::recording();
        let a = model.p.var(&mut g);
        let b = model.p.var(&mut g);
        let s = g.add(&a, &b); // d/dp = 2
        let loss = g.sum_all(&s);
        let mut grads = g.backward(&loss);
        let grads = g.leaf_grads(&mut grads);
        let gp = &grads[&model.p.pid()];
        assert!(gp.iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }
}
