//! Dense 2-D tensors of 64-bit floats.
//!
//! A tensor owns its values (row-major) and optionally references a node on a
//! [`Tape`](super::Tape). Tensors created through tape operations carry the
//! node handle of the operation that produced them; constants carry none and
//! cost nothing during backward.

use std::rc::Rc;

use crate::error::AdError;

/// Handle of a recorded operation on a tape.
pub type NodeId = usize;

/// Identifies which tape a tensor's node belongs to, so tensors from
/// different tapes cannot be mixed by accident.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct TapeRef {
    pub tape: u64,
    pub node: NodeId,
}

/// Dense matrix of `f64` in row-major order.
#[derive(Debug, Clone)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    values: Rc<[f64]>,
    requires_grad: bool,
    node: Option<TapeRef>,
}

impl Tensor {
    /// A constant tensor not tracked by any tape.
    pub fn constant(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, AdError> {
        if values.len() != rows * cols {
            return Err(AdError::shape(
                "constant",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, values.len()),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(AdError::NonFinite { op: "constant" });
        }
        Ok(Tensor {
            rows,
            cols,
            values: values.into(),
            requires_grad: false,
            node: None,
        })
    }

    /// A 1x1 constant.
    pub fn scalar(value: f64) -> Self {
        Tensor::constant(1, 1, vec![value]).expect("scalar is always valid")
    }

    /// An `n x 1` column constant.
    pub fn column(values: Vec<f64>) -> Result<Self, AdError> {
        let n = values.len();
        Tensor::constant(n, 1, values)
    }

    /// A constant filled with one value.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor::constant(rows, cols, vec![value; rows * cols]).expect("fill value checked")
    }

    pub(crate) fn from_parts(
        rows: usize,
        cols: usize,
        values: Rc<[f64]>,
        requires_grad: bool,
        node: Option<TapeRef>,
    ) -> Self {
        Tensor {
            rows,
            cols,
            values,
            requires_grad,
            node,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_rc(&self) -> Rc<[f64]> {
        Rc::clone(&self.values)
    }

    /// The single entry of a 1x1 tensor.
    ///
    /// Panics when the tensor is not 1x1; scalar-ness is a static property of
    /// the expressions built here, so a violation is a programming error.
    pub fn item(&self) -> f64 {
        assert!(
            self.rows == 1 && self.cols == 1,
            "item() on a {}x{} tensor",
            self.rows,
            self.cols
        );
        self.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Node handle on the owning tape, if any.
    pub fn node_id(&self) -> Option<NodeId> {
        self.node.map(|r| r.node)
    }

    pub(crate) fn tape_ref(&self) -> Option<TapeRef> {
        self.node
    }

    /// Row `r` as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }
}
