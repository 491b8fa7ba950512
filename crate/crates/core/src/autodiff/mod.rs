//! Dense reverse-mode automatic differentiation.
//!
//! Every [`Tensor`] is a row-major `f64` matrix. Operations on tensors that
//! require gradients record their inputs, forming an acyclic compute graph
//! that [`Tensor::backward`] walks in reverse creation order. Node ids are
//! handed out from a global counter, so an input always has a smaller id than
//! anything computed from it; sorting reachable nodes by descending id is a
//! valid reverse topological order.
//!
//! Only the primitive set needed by the graph model is provided. There is no
//! general broadcasting: row-wise scaling, row-bias addition and scalar
//! addition are separate primitives.

mod gradcheck;
mod kernels;
mod ops;
mod optim;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use thiserror::Error;

pub use gradcheck::{finite_difference_check, finite_difference_check_with, max_relative_error, numeric_gradients, numeric_gradients_with, Stencil};
pub use ops::{concat_columns, segment_max, segment_softmax, segment_sum, stack_rows, Activation};
pub(crate) use ops::{segment_softmax_shared, segment_sum_shared};
pub use optim::{adam_step, AdamConfig, AdamState, Init, ParamStore, Parameter};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: segment id {id} out of range for {n_segments} segments")]
    SegmentOutOfRange {
        op: &'static str,
        id: usize,
        n_segments: usize,
    },
    #[error("{op}: row index {index} out of range for {rows} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("buffer of length {len} cannot fill a {rows}x{cols} tensor")]
    DataLength { len: usize, rows: usize, cols: usize },
    #[error("backward needs a scalar loss, got a {rows}x{cols} tensor")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("parameter `{0}` has no gradient buffer")]
    MissingGrad(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_DISABLED: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with graph recording disabled on the current thread.
///
/// Tensors produced inside carry no op record and never require gradients,
/// which makes inference passes cheap and lets their results cross threads
/// without dragging a compute graph along.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Reset(bool);
    impl Drop for Reset {
        fn drop(&mut self) {
            GRAD_DISABLED.with(|g| g.set(self.0));
        }
    }
    let _reset = Reset(GRAD_DISABLED.with(|g| g.replace(true)));
    f()
}

pub(crate) fn grad_enabled() -> bool {
    !GRAD_DISABLED.with(|g| g.get())
}

/// Dense row-major matrix with an optional gradient buffer.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

struct Node {
    id: usize,
    rows: usize,
    cols: usize,
    data: RwLock<Vec<f64>>,
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Option<ops::Op>,
}

impl Tensor {
    fn build(rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool, op: Option<ops::Op>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            rows,
            cols,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad,
            op,
        }))
    }

    /// Leaf tensor that does not track gradients.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(TensorError::DataLength { len: data.len(), rows, cols });
        }
        Ok(Self::build(rows, cols, data, false, None))
    }

    /// Leaf tensor whose gradient is accumulated by `backward`.
    pub fn parameter(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(TensorError::DataLength { len: data.len(), rows, cols });
        }
        Ok(Self::build(rows, cols, data, true, None))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::build(rows, cols, vec![0.0; rows * cols], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(1, 1, vec![value], false, None)
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self::build(rows.len(), cols, rows.concat(), false, None)
    }

    /// Output of a primitive. Records `op` only when some input needs gradients.
    pub(crate) fn from_op(rows: usize, cols: usize, data: Vec<f64>, op: ops::Op) -> Self {
        let requires_grad = grad_enabled() && op.inputs().iter().any(|t| t.requires_grad());
        Self::build(rows, cols, data, requires_grad, requires_grad.then_some(op))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn cols(&self) -> usize {
        self.0.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.0.rows, self.0.cols)
    }

    pub fn len(&self) -> usize {
        self.0.rows * self.0.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn has_op(&self) -> bool {
        self.0.op.is_some()
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.0.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on a {}x{} tensor", self.rows(), self.cols());
        self.data()[0]
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        let c = self.cols();
        self.data()[r * c..(r + 1) * c].to_vec()
    }

    /// In-place value update, reserved for optimizers and gradient checks.
    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        let mut guard = self.0.data.write().expect("tensor data lock poisoned");
        f(&mut guard);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    /// Resets the gradient buffer to zeros (allocating it if needed).
    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = Some(vec![0.0; self.len()]);
    }

    pub fn clear_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut guard = self.0.grad.lock().expect("grad lock poisoned");
        match guard.as_mut() {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => *guard = Some(g.to_vec()),
        }
    }

    /// Copy of the values with no history; gradients never flow through it.
    pub fn detach(&self) -> Tensor {
        Self::build(self.rows(), self.cols(), self.to_vec(), false, None)
    }

    /// Fresh gradient-tracking leaf holding a copy of these values.
    pub fn fork_leaf(&self) -> Tensor {
        Self::build(self.rows(), self.cols(), self.to_vec(), true, None)
    }

    /// Reverse-mode sweep from a scalar. Gradients of every reachable tensor
    /// that requires them are added to its buffer; nothing is zeroed.
    ///
    /// Returns the number of graph nodes visited, each exactly once.
    pub fn backward(&self) -> Result<usize> {
        if self.len() != 1 {
            return Err(TensorError::NonScalarLoss { rows: self.rows(), cols: self.cols() });
        }
        if !self.requires_grad() {
            return Ok(0);
        }
        let order = self.reverse_topological();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::with_capacity(order.len());
        pending.insert(self.id(), vec![1.0]);
        for node in &order {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            if let Some(op) = &node.0.op {
                let out = node.data();
                op.backward(&g, &out, node.cols(), &mut |input: &Tensor, contrib: Vec<f64>| {
                    if !input.requires_grad() {
                        return;
                    }
                    match pending.get_mut(&input.id()) {
                        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                        None => {
                            pending.insert(input.id(), contrib);
                        }
                    }
                });
            }
            node.accumulate_grad(&g);
        }
        Ok(order.len())
    }

    /// Reachable gradient-tracking nodes, highest id first.
    fn reverse_topological(&self) -> Vec<Tensor> {
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        let mut nodes = Vec::new();
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            if let Some(op) = &t.0.op {
                for input in op.inputs() {
                    if input.requires_grad() && seen.insert(input.id()) {
                        stack.push(input.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));
        nodes
    }

    /// Number of gradient-tracking nodes reachable from this tensor.
    pub fn graph_size(&self) -> usize {
        if self.requires_grad() {
            self.reverse_topological().len()
        } else {
            0
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id())
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &*self.data())
            .finish()
    }
}
