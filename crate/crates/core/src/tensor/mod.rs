//! Minimal dense f64 tensor with tape-based reverse-mode differentiation.
//!
//! Values are row-major, gradients are accumulated by replaying the tape in
//! reverse. One backward pass per tape; parameters persist outside the tape
//! and are re-bound as leaves each forward pass. No implicit broadcasting
//! beyond scalar-tensor pairs; shapes must otherwise match exactly.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

mod elementwise;
mod linalg;
mod reduce;
mod sample;
mod shape_ops;

pub mod gradcheck;

pub use elementwise::sigmoid_scalar as sigmoid;

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut GradStore)>;

pub(crate) struct Node {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

struct TapeInner {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
    backward_done: bool,
}

/// Ordered record of operations; every node's inputs precede it.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: None,
                backward_done: false,
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a leaf tensor. `requires_grad` marks it for gradient
    /// accumulation during backward.
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument {
                op: "leaf",
                msg: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, None))
    }

    /// Leaf that never takes gradients.
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&self, value: f64) -> Tensor {
        self.push(vec![1], vec![value], false, None)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        self.push(shape.to_vec(), vec![0.0; numel], false, None)
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        self.push_shared(shape, Rc::new(data), requires_grad, backward)
    }

    pub(crate) fn push_shared(
        &self,
        shape: Vec<usize>,
        data: Rc<Vec<f64>>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            data,
            requires_grad,
            backward,
        });
        Tensor {
            tape: self.clone(),
            id,
        }
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Accumulates gradients per node id during the reverse sweep.
pub(crate) struct GradStore {
    bufs: Vec<Option<Vec<f64>>>,
    numels: Vec<usize>,
}

impl GradStore {
    fn new(numels: Vec<usize>) -> Self {
        let n = numels.len();
        GradStore {
            bufs: vec![None; n],
            numels,
        }
    }

    pub(crate) fn buf(&mut self, id: usize) -> &mut [f64] {
        let numel = self.numels[id];
        self.bufs[id].get_or_insert_with(|| vec![0.0; numel])
    }

    pub(crate) fn accum(&mut self, id: usize, idx: usize, v: f64) {
        self.buf(id)[idx] += v;
    }

    fn take(&mut self, id: usize) -> Option<Vec<f64>> {
        self.bufs[id].take()
    }

    fn put(&mut self, id: usize, buf: Vec<f64>) {
        self.bufs[id] = Some(buf);
    }
}

/// Handle to a value on a tape. Cloning is cheap and refers to the same node.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

impl Tensor {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    /// Shared handle to the underlying value buffer.
    pub fn data(&self) -> Rc<Vec<f64>> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    /// Copy of the value buffer.
    pub fn to_vec(&self) -> Vec<f64> {
        self.data().as_ref().clone()
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> f64 {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() requires a single-element tensor");
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Gradient after backward. Tensors off the path to the loss (and
    /// detached tensors) report all zeros.
    pub fn grad(&self) -> Vec<f64> {
        let inner = self.tape.inner.borrow();
        let numel = inner.nodes[self.id].data.len();
        match &inner.grads {
            Some(bufs) => bufs
                .get(self.id)
                .and_then(|b| b.clone())
                .unwrap_or_else(|| vec![0.0; numel]),
            None => vec![0.0; numel],
        }
    }

    /// Value-equal tensor that blocks gradient flow to this tensor's
    /// ancestors and never accumulates gradient itself.
    pub fn detach(&self) -> Tensor {
        let (shape, data) = {
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[self.id];
            (node.shape.clone(), node.data.clone())
        };
        self.tape.push_shared(shape, data, false, None)
    }

    /// Reverse sweep from a scalar output. May run once per tape.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.tape.inner.borrow();
            if inner.backward_done {
                return Err(Error::InvalidArgument {
                    op: "backward",
                    msg: "backward already ran on this tape".into(),
                });
            }
            if inner.nodes[self.id].data.len() != 1 {
                return Err(Error::InvalidArgument {
                    op: "backward",
                    msg: format!(
                        "backward requires a scalar, got shape {:?}",
                        inner.nodes[self.id].shape
                    ),
                });
            }
        }
        let mut inner = self.tape.inner.borrow_mut();
        let numels: Vec<usize> = inner.nodes.iter().map(|n| n.data.len()).collect();
        let mut store = GradStore::new(numels);
        store.accum(self.id, 0, 1.0);
        let TapeInner { nodes, .. } = &mut *inner;
        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = store.take(id) else {
                continue;
            };
            back(&g, &mut store);
            store.put(id, g);
        }
        inner.grads = Some(store.bufs);
        inner.backward_done = true;
        Ok(())
    }

    pub(crate) fn check_same_tape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.tape.same_tape(&other.tape) {
            Ok(())
        } else {
            Err(Error::TapeMismatch { op })
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let data = self.data();
        let shape = self.shape();
        if data.len() <= 8 {
            write!(f, "Tensor{:?} {:?}", shape, &data[..])
        } else {
            write!(f, "Tensor{:?} [{} values]", shape, data.len())
        }
    }
}
