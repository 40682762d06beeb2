//! Minimal reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Graph`] records one forward pass as a flat tape; [`Graph::backward`]
//! replays it in reverse. Ops are methods on `Graph` so a non-recording
//! graph (inference) runs the identical forward code with zero tape cost.
//!
//! Values are `f64` throughout. The codec is desk-scale and the acceptance
//! gates lean on finite-difference checks, so the double-precision cost is
//! the right trade.

mod conv;
mod deform;
mod elementwise;
mod pool;

pub use deform::split_offset_channels;

use ndarray::{ArrayD, IxDyn};
use std::collections::HashMap;
use std::sync::Arc;

pub type Arr = ArrayD<f64>;

/// A value on (or off) the tape. Cloning is cheap.
#[derive(Clone)]
pub struct Var {
    pub(crate) data: Arc<Arr>,
    pub(crate) id: Option<usize>,
}

impl Var {
    pub fn data(&self) -> &Arr {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    /// Scalar value of a 0-d (or single-element) tensor.
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        *self.data.iter().next().expect("empty tensor")
    }

    /// Forward value detached from the tape.
    pub fn detached(&self) -> Var {
        Var {
            data: self.data.clone(),
            id: None,
        }
    }
}

type BackFn = Box<dyn FnOnce(&Arr, &mut Grads)>;

/// Per-node gradient slots populated during the backward sweep.
pub struct Grads {
    slots: Vec<Option<Arr>>,
}

impl Grads {
    pub(crate) fn accumulate(&mut self, id: Option<usize>, g: Arr) {
        let Some(id) = id else { return };
        match &mut self.slots[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn take(&mut self, id: usize) -> Option<Arr> {
        self.slots[id].take()
    }
}

/// One forward pass worth of tape.
pub struct Graph {
    recording: bool,
    nodes: Vec<Option<BackFn>>,
    leaves: Vec<(u64, usize)>,
}

impl Graph {
    /// A graph that records backward closures.
    pub fn recording() -> Self {
        Graph {
            recording: true,
            nodes: Vec::new(),
            leaves: Vec::new(),
        }
    }

    /// A graph that runs forward only; every op output is a constant.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            nodes: Vec::new(),
            leaves: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Wrap an array as a constant (no gradient).
    pub fn constant(&self, data: Arr) -> Var {
        Var {
            data: Arc::new(data),
            id: None,
        }
    }

    pub fn constant_arc(&self, data: Arc<Arr>) -> Var {
        Var { data, id: None }
    }

    /// Register a differentiable leaf. `pid` keys the gradient lookup; the
    /// same parameter used twice gets its gradients summed.
    pub fn leaf(&mut self, pid: u64, data: Arc<Arr>) -> Var {
        if !self.recording {
            return Var { data, id: None };
        }
        let id = self.push_node(None);
        self.leaves.push((pid, id));
        Var { data, id: Some(id) }
    }

    pub(crate) fn push_node(&mut self, back: Option<BackFn>) -> usize {
        self.nodes.push(back);
        self.nodes.len() - 1
    }

    /// Record `back` as the backward step for a new node, unless nothing
    /// upstream is differentiable.
    pub(crate) fn make(&mut self, data: Arr, any_parent: bool, back: BackFn) -> Var {
        let id = if self.recording && any_parent {
            Some(self.push_node(Some(back)))
        } else {
            None
        };
        Var {
            data: Arc::new(data),
            id,
        }
    }

    /// Reverse sweep from a scalar root. Returns gradients keyed by the
    /// leaf ids passed to [`Graph::leaf`]; use [`Grads::accumulate`]d slots
    /// via [`Graph::leaf_grads`].
    pub fn backward(&mut self, root: &Var) -> Grads {
        let rid = root.id.expect("backward needs a recorded root");
        assert_eq!(root.data.len(), 1, "backward root must be scalar");
        let mut grads = Grads {
            slots: vec![None; self.nodes.len()],
        };
        grads.slots[rid] = Some(Arr::ones(IxDyn(root.data.shape())));
        for i in (0..=rid).rev() {
            if let Some(back) = self.nodes[i].take() {
                if let Some(g) = grads.take(i) {
                    back(&g, &mut grads);
                }
            }
        }
        grads
    }

    /// Gradient of a leaf variable (by node id) after [`Graph::backward`].
    pub fn grad_of(&self, grads: &Grads, v: &Var) -> Option<Arr> {
        v.id.and_then(|id| grads.slots[id].clone())
    }

    /// Collect parameter gradients, summing repeated uses of the same pid.
    pub fn leaf_grads(&self, grads: &mut Grads) -> HashMap<u64, Arr> {
        let mut out: HashMap<u64, Arr> = HashMap::new();
        for &(pid, node) in &self.leaves {
            if let Some(g) = grads.slots[node].take() {
                match out.get_mut(&pid) {
                    Some(acc) => *acc += &g,
                    None => {
                        out.insert(pid, g);
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use ndarray::IxDyn;

    /// Central finite differences of `f` around `x`, one entry at a time.
    pub fn finite_diff(x: &Arr, step: f64, mut f: impl FnMut(&Arr) -> f64) -> Arr {
        let mut out = Arr::zeros(IxDyn(x.shape()));
        let mut probe = x.clone();
        for idx in ndarray::indices(x.shape()) {
            let orig = probe[&idx];
            probe[&idx] = orig + step;
            let hi = f(&probe);
            probe[&idx] = orig - step;
            let lo = f(&probe);
            probe[&idx] = orig;
            out[&idx] = (hi - lo) / (2.0 * step);
        }
        out
    }

    /// Max relative error between two gradient arrays, with an absolute
    /// floor so near-zero entries do not blow the ratio up.
    pub fn max_rel_err(a: &Arr, b: &Arr) -> f64 {
        let mut worst = 0.0f64;
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            worst = worst.max((x - y).abs() / denom);
        }
        worst
    }
}
