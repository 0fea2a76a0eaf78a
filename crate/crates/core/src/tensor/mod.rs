//! Dense 4-D tensors with reverse-mode automatic differentiation.
//!
//! Every value is laid out row-major as `(n, c, h, w)`. A tensor is immutable
//! once created; its storage sits behind an `Arc` so clones are cheap and can
//! be shared read-only across threads. Tensors derived from a [`Tape`] leaf
//! carry a node handle and record their producing operation on that tape;
//! tensors without a handle are constants and cost nothing to combine.

mod conv;
mod gemm;
mod linalg;
mod norm;
mod ops;
mod precision;
mod resize;
mod tape;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use norm::BatchStats;
pub use precision::{precision, set_precision, trace_kinks, Precision, PrecisionGuard};
pub use tape::{Gradients, Tape};

pub(crate) use tape::record;

/// `(n, c, h, w)`
pub type Shape = [usize; 4];

/// Every op kind that records a backward rule on the tape.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "one_minus",
    "scale",
    "add_scalar",
    "relu",
    "sigmoid",
    "gelu",
    "softplus",
    "sum_all",
    "mean_all",
    "sum_spatial",
    "reshape",
    "transpose_last2",
    "matmul",
    "softmax",
    "resize_bilinear",
    "split_channels",
    "concat_channels",
    "conv2d",
    "batch_norm_train",
    "batch_norm_eval",
    "layer_norm",
];

#[derive(Clone)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f64>>,
    node: Option<tape::NodeRef>,
}

pub(crate) fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a constant tensor, rejecting length mismatches and non-finite data.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != numel(&shape) {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "data length {} does not match shape {:?}",
                    data.len(),
                    shape
                ),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self::from_parts(shape, data))
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self::from_parts(shape, vec![value; numel(&shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(numel(&shape));
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([i, j, y, x]));
                    }
                }
            }
        }
        Self::from_parts(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn at(&self, idx: [usize; 4]) -> f64 {
        let [_, c, h, w] = self.shape;
        self.data[((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]]
    }

    /// Value of a `(1,1,1,1)` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape != [1, 1, 1, 1] {
            return Err(Error::invalid(
                "item",
                format!("expected a scalar, got {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, no tape handle.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape,
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Copies out sample `i` of the batch as a `(1, c, h, w)` constant.
    pub fn batch_item(&self, i: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.shape;
        if i >= n {
            return Err(Error::invalid(
                "batch_item",
                format!("index {i} out of range for batch {n}"),
            ));
        }
        let plane = c * h * w;
        Ok(Tensor::from_parts(
            [1, c, h, w],
            self.data[i * plane..(i + 1) * plane].to_vec(),
        ))
    }

    /// Stacks constant tensors of identical `(c, h, w)` along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors to stack"))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            let [tn, tc, th, tw] = t.shape;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape,
                    rhs: t.shape,
                });
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor::from_parts([n, c, h, w], data))
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    /// Runs the reverse sweep from this scalar root over its tape.
    pub fn backward(&self) -> Result<Gradients> {
        let node = self.node.as_ref().ok_or(Error::NotRecorded)?;
        Tape::from_node(node).backward(self)
    }

    /// Maximum absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape,
                rhs: other.shape,
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

impl PartialEq for Tensor {
    /// Value equality: shape and bit pattern of every scalar.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
