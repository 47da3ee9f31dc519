//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every operation as an append-only node; [`Var`] is an
//! index into that tape. Calling [`Tape::backward`] on a scalar node walks the
//! nodes in reverse and accumulates gradients into every *tracked* node on the
//! path. Values created with [`Tape::constant`] are untracked: they never
//! receive a gradient buffer and backpropagation stops at them.
//!
//! Model parameters live outside the tape in a [`ParamStore`]; binding one
//! onto a tape with [`Tape::param`] is cached, so a parameter used twice in a
//! forward pass is a single node and its gradient accumulates across uses.

pub mod gradcheck;
mod ops;
mod params;
#[cfg(test)]
mod tests;

pub use ops::{AttnPattern, OksTargets};
pub use params::{ParamId, ParamStore};

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

/// Element type of tensors: `f32` for model state, `f64` for the
/// finite-difference oracles used in the gradient-check suite.
pub trait Scalar:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + std::iter::Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A plain value: shape plus row-major data. Gradients live on the tape, not
/// here; this is the type that crosses module boundaries (inputs, parameters,
/// outputs, datasets).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::contract(
                "tensor",
                format!("shape {:?} wants {} elements, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![S::zero(); n] }
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> S) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: (0..n).map(f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// True if every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

pub(crate) struct Node<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub grad: Option<Vec<S>>,
    /// Whether a trainable leaf is reachable from this node. Untracked nodes
    /// are skipped entirely during backward.
    pub tracked: bool,
    pub op: ops::Op<S>,
}

/// Append-only record of a computation.
pub struct Tape<S> {
    pub(crate) nodes: Vec<Node<S>>,
    /// When false (inference), ops skip the auxiliary buffers backward needs
    /// and nothing is tracked.
    recording: bool,
    param_binds: HashMap<u32, Var>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true, param_binds: HashMap::new() }
    }

    /// A tape that only evaluates forward; no gradients can be requested.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), recording: false, param_binds: HashMap::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<S>, tracked: bool, op: ops::Op<S>) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let tracked = tracked && self.recording;
        self.nodes.push(Node { shape, data, grad: None, tracked, op });
        Var((self.nodes.len() - 1) as u32)
    }

    /// Trainable leaf: participates in gradients.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t.shape, t.data, true, ops::Op::Leaf)
    }

    /// Untracked input: backpropagation stops here and no gradient buffer is
    /// ever allocated for it.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t.shape, t.data, false, ops::Op::Constant)
    }

    /// Bind a stored parameter onto this tape as a leaf. Repeat binds of the
    /// same parameter return the same node, so gradients from multiple uses
    /// accumulate.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.param_binds.get(&id.0) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape.clone(), t.data.clone(), true, ops::Op::Leaf);
        self.param_binds.insert(id.0, v);
        v
    }

    /// The tape node a parameter is bound to, if it was used in this pass.
    pub fn param_bind(&self, id: ParamId) -> Option<Var> {
        self.param_binds.get(&id.0).copied()
    }

    /// Gradient of the loss w.r.t. a bound parameter, if it was used and
    /// reached by backward.
    pub fn param_grad(&self, id: ParamId) -> Option<&[S]> {
        self.param_binds.get(&id.0).and_then(|v| self.grad(*v))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx()].shape
    }

    pub fn data(&self, v: Var) -> &[S] {
        &self.nodes[v.idx()].data
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.idx()].data.len()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.idx()].tracked
    }

    /// Gradient buffer of a node. `None` when the node is untracked or was
    /// not on the path of the last `backward`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.idx()].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.idx()];
        Tensor { shape: n.shape.clone(), data: n.data.clone() }
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> Result<S> {
        let n = &self.nodes[v.idx()];
        if n.data.len() != 1 {
            return Err(Error::contract("scalar_value", format!("node has shape {:?}", n.shape)));
        }
        Ok(n.data[0])
    }

    /// Drop all gradient buffers so another backward pass can run cleanly.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse sweep from a scalar node: seeds d(root)/d(root) = 1 and
    /// accumulates gradients into every tracked node that feeds it. Each call
    /// sweeps with fresh working buffers, then adds into whatever the grad
    /// buffers already hold, so repeated calls without [`Tape::zero_grad`]
    /// accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::contract("backward", "tape was built in inference mode"));
        }
        let rn = &self.nodes[root.idx()];
        if rn.data.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("root must be scalar, got shape {:?}", rn.shape),
            ));
        }
        if !rn.tracked {
            return Err(Error::contract("backward", "root is not tracked; nothing to differentiate"));
        }
        let saved: Vec<Option<Vec<S>>> = self.nodes.iter_mut().map(|n| n.grad.take()).collect();
        self.nodes[root.idx()].grad = Some(vec![S::one()]);
        for i in (0..=root.idx()).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].tracked {
                continue;
            }
            self.backprop_node(i)?;
        }
        for (n, prior) in self.nodes.iter_mut().zip(saved) {
            if let Some(prior) = prior {
                match &mut n.grad {
                    Some(g) => {
                        for (gv, pv) in g.iter_mut().zip(&prior) {
                            *gv += *pv;
                        }
                    }
                    None => n.grad = Some(prior),
                }
            }
        }
        Ok(())
    }

    /// Add `contrib` into the gradient buffer of `v` (no-op for untracked).
    pub(crate) fn accum(&mut self, v: Var, contrib: &[S]) {
        let n = &mut self.nodes[v.idx()];
        if !n.tracked {
            return;
        }
        let g = n.grad.get_or_insert_with(|| vec![S::zero(); n.data.len()]);
        debug_assert_eq!(g.len(), contrib.len());
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += *ci;
        }
    }

}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Tape::new()
    }
}
