//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Operations are recorded onto an explicit [`Tape`]; calling
//! [`Tape::backward`] on a scalar root walks the recorded nodes in reverse
//! and accumulates gradients for every grad-enabled leaf that participated.
//! Tensors are immutable after construction, so sharing storage between a
//! tensor and its detached view is safe.
//!
//! Design constraints:
//! * 32-bit floats throughout; verification oracles that need 64-bit live in
//!   test code.
//! * broadcasting is limited to scalar operands and trailing-axis expansion
//!   (e.g. `[t, h] + [h]`), which keeps every gradient rule small enough to
//!   check against finite differences.

mod ops;
mod tape;

pub use tape::{Gradients, Tape};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Index of a recorded node within one tape.
pub type NodeId = usize;

/// Handle tying an intermediate tensor to the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape_id: u64,
    pub node: NodeId,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fresh_tape_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Dense row-major f32 tensor.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    grad_enabled: bool,
    node: Option<NodeRef>,
}

impl Tensor {
    /// Constant tensor: participates in ops but never receives a gradient.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            grad_enabled: false,
            node: None,
        })
    }

    /// Leaf tensor that accumulates gradients when used on a recording tape.
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let mut t = Tensor::new(shape, data)?;
        t.grad_enabled = true;
        Ok(t)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; numel]),
            grad_enabled: false,
            node: None,
        }
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![1.0; numel]),
            grad_enabled: false,
            node: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
            grad_enabled: false,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor with {} elements",
                self.numel()
            )));
        }
        Ok(self.data[0])
    }

    /// Same values, no tape participation and no gradient flow.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            grad_enabled: false,
            node: None,
        }
    }

    /// Identity of the underlying storage; used to map leaves back to the
    /// parameter tensors they came from.
    pub(crate) fn storage_id(&self) -> usize {
        Arc::as_ptr(&self.data) as usize
    }

    pub(crate) fn storage(&self) -> Arc<Vec<f32>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub(crate) fn with_node(
        shape: Vec<usize>,
        data: Arc<Vec<f32>>,
        grad_enabled: bool,
        node: Option<NodeRef>,
    ) -> Self {
        Tensor {
            shape,
            data,
            grad_enabled,
            node,
        }
    }
}

/// Thread-local multiply-accumulate counter fed by every matmul; the bench
/// harness reads it to cross-check the closed-form cost model.
pub mod macs {
    use std::cell::Cell;

    thread_local! {
        static MAC_COUNT: Cell<u64> = const { Cell::new(0) };
    }

    pub fn add(n: u64) {
        MAC_COUNT.with(|c| c.set(c.get().wrapping_add(n)));
    }

    pub fn reset() {
        MAC_COUNT.with(|c| c.set(0));
    }

    pub fn read() -> u64 {
        MAC_COUNT.with(|c| c.get())
    }

    /// Reset and return the count accumulated since the previous reset.
    pub fn take() -> u64 {
        MAC_COUNT.with(|c| {
            let v = c.get();
            c.set(0);
            v
        })
    }
}
