//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Values are
//! stored on the tape in creation order, which is already a topological
//! order, so [`Tape::backward`] is a single reverse sweep that visits each
//! node once.
//!
//! ```
//! use gf2_core::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap(), true);
//! let loss = x.mul(x).unwrap().sum().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub(crate) mod kernels;
mod ops;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::nn::{ParamId, Params};
use crate::{Scalar, Tensor};

pub use ops::Unary;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul { a: usize, b: usize, trans_b: bool },
    Permute { a: usize, perm: Vec<usize> },
    Reshape(usize),
    Softmax { a: usize, axis: usize, log: bool },
    LayerNorm { a: usize, axis: usize, eps: f64 },
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    Upsample { a: usize, factor: usize },
    AvgPool { a: usize, factor: usize },
    Unary { a: usize, kind: Unary },
    Sum(usize),
    SumAxis { a: usize, axis: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    ClampMin { a: usize, min: f64 },
}

pub(crate) struct Node<S> {
    pub value: Tensor<S>,
    pub requires_grad: bool,
    pub op: Op,
}

struct Inner<S> {
    nodes: Vec<Node<S>>,
    generation: u64,
    grad_enabled: bool,
    bindings: HashMap<(u64, usize), usize>,
    frozen: HashSet<u64>,
}

/// Recording of one forward pass.
pub struct Tape<S: Scalar> {
    inner: RefCell<Inner<S>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    pub(crate) tape: &'t Tape<S>,
    pub(crate) id: usize,
    generation: u64,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                generation: 0,
                grad_enabled: true,
                bindings: HashMap::new(),
                frozen: HashSet::new(),
            }),
        }
    }

    /// Tape that never tracks gradients (evaluation and serving).
    pub fn inference() -> Self {
        let t = Self::new();
        t.inner.borrow_mut().grad_enabled = false;
        t
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.borrow().grad_enabled
    }

    /// Drops all recorded nodes; outstanding [`Var`]s become invalid.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.bindings.clear();
        inner.generation += 1;
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var<'_, S> {
        let mut inner = self.inner.borrow_mut();
        let rg = requires_grad && inner.grad_enabled;
        inner.nodes.push(Node { value, requires_grad: rg, op: Op::Leaf });
        Var { tape: self, id: inner.nodes.len() - 1, generation: inner.generation }
    }

    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_, S> {
        self.constant(Tensor::scalar(S::c(v)))
    }

    /// Parameters of `params` are bound as constants from now on.
    pub fn freeze(&self, params: &Params<S>) {
        self.inner.borrow_mut().frozen.insert(params.uid());
    }

    pub fn unfreeze(&self, params: &Params<S>) {
        self.inner.borrow_mut().frozen.remove(&params.uid());
    }

    /// Binds a parameter tensor as a leaf. Repeated binding of the same
    /// parameter returns the same node, so gradients accumulate across reuse.
    pub fn param(&self, params: &Params<S>, id: ParamId) -> Var<'_, S> {
        let key = (params.uid(), id.0);
        let mut inner = self.inner.borrow_mut();
        if let Some(&node) = inner.bindings.get(&key) {
            return Var { tape: self, id: node, generation: inner.generation };
        }
        let rg = inner.grad_enabled && !inner.frozen.contains(&params.uid());
        inner.nodes.push(Node { value: params.get(id).clone(), requires_grad: rg, op: Op::Leaf });
        let node = inner.nodes.len() - 1;
        inner.bindings.insert(key, node);
        Var { tape: self, id: node, generation: inner.generation }
    }

    pub(crate) fn check(&self, v: Var<'_, S>) -> Result<()> {
        let inner = self.inner.borrow();
        if !std::ptr::eq(v.tape, self) || v.generation != inner.generation || v.id >= inner.nodes.len() {
            return Err(Error::BrokenTape);
        }
        Ok(())
    }

    pub(crate) fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor<S>) -> R) -> R {
        f(&self.inner.borrow().nodes[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    pub(crate) fn push(&self, name: &'static str, value: Tensor<S>, op: Op, inputs: &[usize]) -> Result<Var<'_, S>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut inner = self.inner.borrow_mut();
        let rg = inner.grad_enabled && inputs.iter().any(|&i| inner.nodes[i].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        inner.nodes.push(Node { value, requires_grad: rg, op });
        Ok(Var { tape: self, id: inner.nodes.len() - 1, generation: inner.generation })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        self.check(loss)?;
        let inner = self.inner.borrow();
        let shape = inner.nodes[loss.id].value.shape().to_vec();
        if inner.nodes[loss.id].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(&shape, S::one()));
        for id in (0..=loss.id).rev() {
            let node = &inner.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            ops::backward_node(&inner.nodes, id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, bindings: inner.bindings.clone(), generation: inner.generation })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    bindings: HashMap<(u64, usize), usize>,
    generation: u64,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var<'_, S>) -> Option<&Tensor<S>> {
        if v.generation != self.generation {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a bound parameter, if it took part in the loss.
    pub fn param(&self, params: &Params<S>, id: ParamId) -> Option<&Tensor<S>> {
        let node = *self.bindings.get(&(params.uid(), id.0))?;
        self.grads.get(node).and_then(|g| g.as_ref())
    }

    /// One entry per parameter of `params`, zero-filled where unused.
    pub fn params(&self, params: &Params<S>) -> Vec<Tensor<S>> {
        params
            .ids()
            .map(|id| self.param(params, id).cloned().unwrap_or_else(|| Tensor::zeros(params.get(id).shape())))
            .collect()
    }
}

pub(crate) fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, shape: &[usize], g: Vec<S>) {
    match slot {
        Some(t) => t.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(Tensor::new(shape, g).expect("gradient shape")),
    }
}
