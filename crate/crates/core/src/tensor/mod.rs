//! Dense f64 tensors with reverse-mode differentiation over an explicit
//! tape. The op set is exactly what the encoders and objectives need; all
//! shape alignment is explicit (no broadcasting beyond scalar–tensor).

mod ops;
#[cfg(test)]
pub(crate) mod testutil;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got {len} elements")]
    NotScalar { len: usize },
    #[error("tensor is not on any tape")]
    DetachedTensor,
    #[error("tensor belongs to a different tape")]
    StaleTensor,
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {detail}")]
    Numeric { op: &'static str, detail: String },
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// A dense row-major tensor. Tensors made through a [`Tape`] carry a node id
/// linking them into that tape's gradient graph; plain tensors are inert
/// constants, immutable and freely shareable.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<usize>,
    tape_id: u64,
}

impl Tensor {
    /// Builds a constant (untracked) tensor. Panics if the element count
    /// does not match the shape; construction sites are all internal or
    /// test code where the count is static.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/product mismatch"
        );
        Tensor { shape, data: Arc::new(data), node: None, tape_id: 0 }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; len])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar { len: self.data.len() })
        }
    }

    /// Whether gradients flow into this tensor on its tape.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// The same values as a fresh constant, dropping any tape linkage.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
            tape_id: 0,
        }
    }

    fn rank2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected rank 2, got shape {other:?}"),
            }),
        }
    }

    fn rank1(&self, op: &'static str) -> Result<usize, TensorError> {
        match self.shape.as_slice() {
            [n] => Ok(*n),
            other => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected rank 1, got shape {other:?}"),
            }),
        }
    }
}

type Backward = Box<dyn Fn(&[f64], &mut Gradients)>;

struct Node {
    backward: Option<Backward>,
}

/// Append-only record of primitive applications. Append order is the
/// topological order: every parent precedes its children, and backward
/// visits nodes exactly once in reverse.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    degenerate_rows: u64,
    thresholded_entries: u64,
    check_finite: bool,
    backward_fault_gain: f64,
}

impl Default for Tape {
    fn default() -> Tape {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            degenerate_rows: 0,
            thresholded_entries: 0,
            check_finite: false,
            backward_fault_gain: 1.0,
        }
    }

    /// When set, every primitive scans its output and errors on NaN/Inf.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Rows seen by min-max normalization whose max equaled their min.
    pub fn degenerate_rows(&self) -> u64 {
        self.degenerate_rows
    }

    /// Entries zeroed by thresholding. Monotone in the threshold: a higher
    /// cut masks at least as many entries of the same input.
    pub fn thresholded_entries(&self) -> u64 {
        self.thresholded_entries
    }

    /// Verification hook: scales the GELU backward rule, deliberately
    /// corrupting gradients so the finite-difference harness can prove it
    /// detects a broken backward implementation. 1.0 (the default) is exact.
    pub fn set_backward_fault_gain(&mut self, gain: f64) {
        self.backward_fault_gain = gain;
    }

    /// Registers a tensor as a differentiable leaf of this tape and returns
    /// the tracked handle. Gradients accumulate on leaves during backward.
    pub fn watch(&mut self, value: &Tensor) -> Tensor {
        let node = self.alloc(None);
        Tensor {
            shape: value.shape.clone(),
            data: Arc::clone(&value.data),
            node: Some(node),
            tape_id: self.id,
        }
    }

    fn alloc(&mut self, backward: Option<Backward>) -> usize {
        self.nodes.push(Node { backward });
        self.nodes.len() - 1
    }

    /// Node id of `t` on this tape; `None` for constants.
    fn tracked(&self, t: &Tensor) -> Result<Option<usize>, TensorError> {
        match t.node {
            None => Ok(None),
            Some(id) if t.tape_id == self.id => Ok(Some(id)),
            Some(_) => Err(TensorError::StaleTensor),
        }
    }

    fn emit(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        backward: Backward,
    ) -> Result<Tensor, TensorError> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if self.check_finite && data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let node = self.alloc(Some(backward));
        Ok(Tensor { shape, data: Arc::new(data), node: Some(node), tape_id: self.id })
    }

    /// Runs reverse-mode accumulation from a scalar loss, consuming the
    /// tape. Every node at or below the loss is visited exactly once.
    pub fn backward(self, loss: &Tensor) -> Result<Gradients, TensorError> {
        let loss_node = self.tracked(loss)?.ok_or(TensorError::DetachedTensor)?;
        if loss.len() != 1 {
            return Err(TensorError::NotScalar { len: loss.len() });
        }
        let mut gradients = Gradients {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            tape_id: self.id,
            degenerate_rows: self.degenerate_rows,
        };
        gradients.grads[loss_node] = Some(vec![1.0]);
        for (id, node) in self.nodes.into_iter().enumerate().rev() {
            if id > loss_node {
                continue;
            }
            let Some(upstream) = gradients.grads[id].take() else {
                continue;
            };
            if let Some(backward) = node.backward {
                backward(&upstream, &mut gradients);
            }
            gradients.grads[id] = Some(upstream);
        }
        Ok(gradients)
    }
}

/// Per-node gradient buffers produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    tape_id: u64,
    /// Degenerate-row count carried over from the consumed tape.
    pub degenerate_rows: u64,
}

impl Gradients {
    fn accumulate(&mut self, node: usize, len: usize) -> &mut [f64] {
        self.grads[node].get_or_insert_with(|| vec![0.0; len])
    }

    /// Gradient of the loss with respect to `t`, if any flowed into it.
    /// `None` both for constants and for tracked tensors the loss never
    /// touched (their gradient is identically zero).
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let id = t.node.filter(|_| t.tape_id == self.tape_id)?;
        self.grads.get(id)?.as_deref()
    }

    /// Gradient of the loss with respect to `t`, materializing zeros when
    /// no gradient flowed.
    pub fn wrt(&self, t: &Tensor) -> Vec<f64> {
        self.get(t).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
    }
}
