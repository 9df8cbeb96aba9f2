//! Dense row-major tensors with reverse-mode autodiff.
//!
//! [`TensorBase`] is a cheap handle: an `Arc` around the element buffer plus
//! an optional link to a node on a [`Tape`]. Ops allocate fresh buffers, so a
//! tensor's data never changes after the op that produced it returns; clones
//! share storage. Handles themselves stay on one thread (the tape link is an
//! `Rc`), while kernels are free to fan the underlying buffers out across
//! worker threads.
//!
//! Every public op validates shapes, rejects non-finite results, and records
//! itself on the tape when any input is tape-attached. Reductions always run
//! in ascending index order, which is what makes reruns bit-identical no
//! matter how many worker threads are active.

mod fd;
mod ops;
mod tape;

pub use fd::{finite_diff_grad, finite_diff_grad_at};
pub use ops::{
    add, add_const, add_row_broadcast, add_scalar, avg_pool_rect, concat_cols, concat_rows,
    conv2d, cosine_matrix, cosine_similarity, depthwise_conv3x3, div_scalar, gather_elems,
    gather_rows, gelu, layer_norm, matmul, mean_rows, mul, mul_scalar, reshape, scale,
    scatter_add_rows, sigmoid, sum,
};
pub use tape::Tape;

use std::rc::Rc;
use std::sync::Arc;

use crate::scalar::lit;
use crate::{Error, Result, Scalar};

/// Dense tensor handle, generic over the element type.
///
/// The f64 alias [`crate::Tensor`] is what the model layers use.
#[derive(Clone)]
pub struct TensorBase<T: Scalar = f64> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<NodeRef<T>>,
}

/// Link from a tensor to the tape node that produced it.
#[derive(Clone)]
pub(crate) struct NodeRef<T: Scalar> {
    pub(crate) tape: Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> std::fmt::Debug for TensorBase<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("on_tape", &self.node.is_some())
            .finish()
    }
}

impl<T: Scalar> TensorBase<T> {
    /// Build a tensor from a flat row-major buffer. Errors if the element
    /// count does not match the shape or any element is non-finite.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                expected: format!("{numel} elements for {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    /// All-zeros tensor.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![T::zero(); numel]),
            node: None,
        }
    }

    /// Constant-filled tensor. Panics on non-finite fill values.
    pub fn full(shape: Vec<usize>, value: T) -> Self {
        assert!(value.is_finite(), "full: non-finite fill value");
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![value; numel]),
            node: None,
        }
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: T) -> Result<Self> {
        Self::from_vec(vec![1], vec![value])
    }

    /// n-by-n identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self {
            shape: vec![n, n],
            data: Arc::new(data),
            node: None,
        }
    }

    /// Uniform sample over `[lo, hi)` driven by any `RngCore`.
    ///
    /// Values are derived from `next_u64` through the 53-bit ladder, so a
    /// fixed seed yields the same bits everywhere regardless of the rand
    /// crate's distribution internals.
    pub fn rand_uniform(
        shape: Vec<usize>,
        lo: f64,
        hi: f64,
        rng: &mut impl rand_core::RngCore,
    ) -> Self {
        let numel = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let unit = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            data.push(lit::<T>(lo + unit * (hi - lo)));
        }
        Self {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Flat row-major view of the elements.
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Element of a rank-2 tensor.
    pub fn get2(&self, r: usize, c: usize) -> T {
        assert_eq!(self.shape.len(), 2, "get2 on rank-{}", self.shape.len());
        self.data[r * self.shape[1] + c]
    }

    /// The single element of a `[1]`-shaped tensor.
    pub fn scalar_value(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scalar_value",
                expected: "[1]".into(),
                got: format!("{:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// Same data, no tape link.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn is_on_tape(&self) -> bool {
        self.node.is_some()
    }

    /// Gradient accumulated for this tensor by [`Tape::backward`], if any.
    pub fn grad(&self) -> Option<TensorBase<T>> {
        let node = self.node.as_ref()?;
        node.tape.grad_of(node.id).map(|g| TensorBase {
            shape: self.shape.clone(),
            data: Arc::new(g),
            node: None,
        })
    }

    /// Replace one element, returning a detached copy. Used by the finite
    /// difference oracle to nudge a single coordinate.
    pub fn with_element(&self, flat_idx: usize, value: T) -> Result<Self> {
        if flat_idx >= self.numel() {
            return Err(Error::ShapeMismatch {
                op: "with_element",
                expected: format!("index < {}", self.numel()),
                got: format!("{flat_idx}"),
            });
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "with_element" });
        }
        let mut data = self.data.to_vec();
        data[flat_idx] = value;
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
            node: None,
        })
    }

    /// Internal constructor for op outputs whose invariants (count matches
    /// shape, finiteness) the caller has already established.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub(crate) fn node(&self) -> Option<&NodeRef<T>> {
        self.node.as_ref()
    }

    pub(crate) fn with_node(&self, tape: Tape<T>, id: usize) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: Some(NodeRef { tape, id }),
        }
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        self.data.clone()
    }
}

pub(crate) fn same_tape<T: Scalar>(inputs: &[&TensorBase<T>]) -> Result<Option<Tape<T>>> {
    let mut found: Option<Tape<T>> = None;
    for t in inputs {
        if let Some(node) = t.node() {
            match &found {
                None => found = Some(node.tape.clone()),
                Some(tape) => {
                    if !Rc::ptr_eq(tape.inner_rc(), node.tape.inner_rc()) {
                        return Err(Error::TapeMismatch);
                    }
                }
            }
        }
    }
    Ok(found)
}
