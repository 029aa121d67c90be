//! Dense f32 tensors with tape-based reverse-mode differentiation.
//!
//! Every operation that involves a tensor with `requires_grad` records a
//! backward rule together with references to its operands. Node ids grow
//! monotonically, so sorting the reachable nodes by id (descending) yields a
//! valid reverse topological order; that sorted list is the [`Tape`] that
//! [`Tensor::backward`] replays.
//!
//! Gradients accumulate into leaf tensors across backward calls until
//! [`Tensor::zero_grad`] is called.

mod broadcast;
mod conv;
mod linalg;
mod norm;
mod ops;
mod reduce;
mod shape_ops;

pub use conv::{Conv1dSpec, Conv2dSpec};
pub use shape_ops::PadMode;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Backward rule: receives the output gradient and the output values and
/// returns one optional gradient per recorded input.
pub(crate) type BackwardFn = Box<dyn Fn(&[f32], &[f32]) -> Vec<Option<Vec<f32>>>>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static CHECKED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether new operations are recorded for differentiation.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Whether operation outputs are scanned for NaN/Inf.
pub fn checked_mode() -> bool {
    CHECKED.with(|c| c.get())
}

/// Disables graph recording until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(false));
        Self { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

/// Runs `f` without recording any operations.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _g = NoGradGuard::new();
    f()
}

/// Sets checked mode until dropped.
pub struct CheckedModeGuard {
    prev: bool,
}

impl CheckedModeGuard {
    pub fn new(enabled: bool) -> Self {
        let prev = CHECKED.with(|c| c.replace(enabled));
        Self { prev }
    }
}

impl Drop for CheckedModeGuard {
    fn drop(&mut self) {
        CHECKED.with(|c| c.set(self.prev));
    }
}

struct GradFn {
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// Reference-counted handle to a tensor node. Cloning is cheap and shares
/// storage.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.op))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            grad_fn,
        }))
    }

    /// Creates a constant tensor. Fails if the buffer does not match the
    /// shape or a dimension is zero.
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape {
                op: "new",
                msg: format!("zero-sized dimension in {shape:?}"),
            });
        }
        if numel(shape) != data.len() {
            return Err(Error::Shape {
                op: "new",
                msg: format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            });
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Creates a trainable leaf tensor.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(Self::build(t.0.shape.clone(), t.to_vec(), true, None))
    }

    pub fn scalar(v: f32) -> Self {
        Self::build(vec![1], vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        Self::build(shape.to_vec(), vec![v; numel(shape)], false, None)
    }

    /// Standard normal samples.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| StandardNormal.sample(rng)).collect();
        Self::build(shape.to_vec(), data, false, None)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| rng.random_range(lo..hi)).collect();
        Self::build(shape.to_vec(), data, false, None)
    }

    /// Returns a leaf copy that requires grad.
    pub fn into_param(self) -> Self {
        Self::build(self.0.shape.clone(), self.to_vec(), true, None)
    }

    /// Builds the output of a differentiable operation. The graph edge is
    /// only kept when recording is enabled and some input requires grad.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        inputs: Vec<Tensor>,
        backward: impl Fn(&[f32], &[f32]) -> Vec<Option<Vec<f32>>> + 'static,
    ) -> Result<Self> {
        if checked_mode() && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let grad_fn = track.then(|| GradFn {
            op,
            inputs,
            backward: Box::new(backward),
        });
        Ok(Self::build(shape, data, track, grad_fn))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Name of the operation that produced this tensor, if recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.op)
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data.borrow()[0])
    }

    /// Overwrites the values of a leaf tensor in place (used by optimizers
    /// and checkpoint loading).
    pub fn set_data(&self, data: Vec<f32>) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::InvalidArgument("set_data on a non-leaf tensor".into()));
        }
        if data.len() != self.numel() {
            return Err(Error::Shape {
                op: "set_data",
                msg: format!("expected {} values, got {}", self.numel(), data.len()),
            });
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    pub(crate) fn data_mut(&self) -> std::cell::RefMut<'_, Vec<f32>> {
        self.0.data.borrow_mut()
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<f32>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Multiplies the accumulated gradient, if any, by `k`.
    pub fn scale_grad(&self, k: f32) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }

    /// Constant copy cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// Backpropagates from a scalar loss, accumulating into every reachable
    /// leaf that requires grad.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Backward(
                "loss does not depend on any tensor that requires grad".into(),
            ));
        }
        let tape = Tape::record(self);
        let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in &tape.entries {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let out = node.0.data.borrow();
                    let input_grads = (f.backward)(&g, &out);
                    debug_assert_eq!(input_grads.len(), f.inputs.len());
                    for (inp, ig) in f.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !inp.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), inp.numel(), "grad size for {}", f.op);
                        match grads.get_mut(&inp.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(inp.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Recorded operations reachable from a loss, in reverse topological order.
pub struct Tape {
    entries: Vec<Tensor>,
}

impl Tape {
    pub fn record(root: &Tensor) -> Self {
        let mut seen = HashSet::new();
        let mut stack = vec![root.clone()];
        let mut entries = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(f) = &t.0.grad_fn {
                stack.extend(f.inputs.iter().cloned());
            }
            entries.push(t);
        }
        entries.sort_by(|a, b| b.id().cmp(&a.id()));
        Tape { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Operation names in replay order; leaves appear as `"leaf"`.
    pub fn ops(&self) -> Vec<&'static str> {
        self.entries
            .iter()
            .map(|t| t.op_name().unwrap_or("leaf"))
            .collect()
    }

    /// Checks that every entry's operands appear after it (i.e. were
    /// created before it).
    pub fn is_topological(&self) -> bool {
        let pos: HashMap<u64, usize> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id(), i))
            .collect();
        self.entries.iter().enumerate().all(|(i, t)| {
            t.0.grad_fn.as_ref().is_none_or(|f| {
                f.inputs
                    .iter()
                    .filter_map(|inp| pos.get(&inp.id()))
                    .all(|&j| j > i)
            })
        })
    }
}
