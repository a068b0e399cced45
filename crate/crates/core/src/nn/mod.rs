//! Minimal reverse-mode differentiable operator set.
//!
//! [`Tensor`] is a batched (B, C, D, H, W) value grid; operators in [`ops`]
//! record a tape of [`Backward`] nodes while any input requires gradients.
//! Calling [`Tensor::backward`] on a scalar result walks the tape in reverse
//! topological order and accumulates gradients into every node that needs
//! them. The set is exactly what the two-stage inter/intra-frame model needs:
//! 3D convolution, leaky ReLU, dropout, frame-axis max pooling, channel
//! L2-normalization, and the cosine loss, plus Adam and a finite-difference
//! validation harness.

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt::Debug;
use core::iter::Sum;

use num_traits::{Float, NumAssignOps};

use crate::error::{CoreError, Result};

pub mod adam;
pub mod gradcheck;
pub mod ops;

pub use adam::AdamState;
pub use gradcheck::{finite_diff_check, run_gradcheck_suite, CheckReport};

/// Scalar type the operator set is generic over. `f64` for gradient-check
/// builds, `f32` for training.
pub trait Real:
    Float + NumAssignOps + Sum + Debug + Send + Sync + 'static
{
    /// Lossy conversion from `f64` coefficients and data.
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shape of a [`Tensor`]: batch, channels, frames, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape5 {
    pub b: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub const fn new(b: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Self { b, c, d, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.b * self.c * self.d * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat row-major index of (b, c, d, h, w).
    pub fn idx(&self, b: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        (((b * self.c + c) * self.d + d) * self.h + h) * self.w + w
    }
}

impl core::fmt::Display for Shape5 {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "({}, {}, {}, {}, {})",
            self.b, self.c, self.d, self.h, self.w
        )
    }
}

/// One recorded operation on the tape. `parents` lists the tensors the
/// operation consumed; `apply` accumulates gradients into them given the
/// gradient of the operation's output.
pub(crate) trait Backward<F: Real> {
    fn parents(&self) -> Vec<Tensor<F>>;
    fn apply(&self, grad_out: &[F]);
}

struct Node<F: Real> {
    shape: Shape5,
    values: Vec<F>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<F>>>,
    op: Option<Box<dyn Backward<F>>>,
}

/// Batched 4-axis value grid with optional gradient accumulation.
///
/// Cloning is cheap: tensors share their storage, and recorded operations
/// hold clones of their inputs, which is what keeps the tape alive.
pub struct Tensor<F: Real> {
    node: Rc<Node<F>>,
}

impl<F: Real> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Self {
            node: Rc::clone(&self.node),
        }
    }
}

impl<F: Real> Debug for Tensor<F> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("has_op", &self.node.op.is_some())
            .finish()
    }
}

impl<F: Real> Tensor<F> {
    /// Leaf tensor owning `values`. Fails if the value count does not match
    /// the shape or any value is non-finite.
    pub fn leaf(shape: Shape5, values: Vec<F>, requires_grad: bool) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(CoreError::DimensionMismatch(format!(
                "tensor shape {} expects {} values, got {}",
                shape,
                shape.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NumericalError(
                "tensor values must be finite".into(),
            ));
        }
        Ok(Self::new_node(shape, values, requires_grad, None))
    }

    pub fn zeros(shape: Shape5, requires_grad: bool) -> Self {
        Self::new_node(
            shape,
            alloc::vec![F::zero(); shape.len()],
            requires_grad,
            None,
        )
    }

    fn new_node(
        shape: Shape5,
        values: Vec<F>,
        requires_grad: bool,
        op: Option<Box<dyn Backward<F>>>,
    ) -> Self {
        Self {
            node: Rc::new(Node {
                shape,
                values,
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Result of an operation; attaches the tape node only when some parent
    /// participates in differentiation.
    pub(crate) fn from_op(shape: Shape5, values: Vec<F>, op: Box<dyn Backward<F>>) -> Self {
        let tracked = op.parents().iter().any(|p| p.needs_grad());
        if tracked {
            Self::new_node(shape, values, false, Some(op))
        } else {
            Self::new_node(shape, values, false, None)
        }
    }

    pub fn shape(&self) -> Shape5 {
        self.node.shape
    }

    pub fn values(&self) -> &[F] {
        &self.node.values
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// True when gradients must be propagated into this tensor, either to
    /// store them (leaf) or to pass them on (interior tape node).
    pub(crate) fn needs_grad(&self) -> bool {
        self.node.requires_grad || self.node.op.is_some()
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<F>> {
        self.node.grad.borrow().clone()
    }

    /// Scalar value of a (1,1,1,1,1) tensor.
    pub fn scalar(&self) -> Result<F> {
        if self.node.shape.len() != 1 {
            return Err(CoreError::DimensionMismatch(format!(
                "expected scalar tensor, got shape {}",
                self.node.shape
            )));
        }
        Ok(self.node.values[0])
    }

    pub(crate) fn accumulate_grad(&self, add: &[F]) {
        if !self.needs_grad() {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ai) in g.iter_mut().zip(add) {
                    *gi += *ai;
                }
            }
            None => *slot = Some(add.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar result. Gradients accumulate into
    /// every tensor on the tape with `requires_grad` set.
    pub fn backward(&self) -> Result<()> {
        if self.node.shape.len() != 1 {
            return Err(CoreError::DimensionMismatch(format!(
                "backward requires a scalar root, got shape {}",
                self.node.shape
            )));
        }
        *self.node.grad.borrow_mut() = Some(alloc::vec![F::one()]);

        // Postorder DFS: parents end up before their consumers, so the
        // reversed order visits each node only after its full gradient has
        // been accumulated.
        let mut order: Vec<Tensor<F>> = Vec::new();
        let mut visited: BTreeSet<usize> = BTreeSet::new();
        let mut stack: Vec<(Tensor<F>, bool)> = alloc::vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            let key = Rc::as_ptr(&t.node) as usize;
            if !visited.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.node.op {
                for p in op.parents() {
                    stack.push((p, false));
                }
            }
        }

        for t in order.iter().rev() {
            if let Some(op) = &t.node.op {
                let guard = t.node.grad.borrow();
                if let Some(g) = guard.as_ref() {
                    op.apply(g);
                }
            }
        }
        Ok(())
    }
}

/// Named learnable value grid. Gradients always flow into parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<F: Real> {
    pub name: String,
    pub shape: Shape5,
    pub values: Vec<F>,
}

impl<F: Real> Parameter<F> {
    pub fn new(name: impl Into<String>, shape: Shape5, values: Vec<F>) -> Result<Self> {
        let name = name.into();
        if values.len() != shape.len() {
            return Err(CoreError::DimensionMismatch(format!(
                "parameter {} shape {} expects {} values, got {}",
                name,
                shape,
                shape.len(),
                values.len()
            )));
        }
        Ok(Self {
            name,
            shape,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leaf tensor view of the parameter for one forward pass.
    pub fn to_tensor(&self, requires_grad: bool) -> Tensor<F> {
        Tensor::new_node(self.shape, self.values.clone(), requires_grad, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops;

    #[test]
    fn leaf_rejects_wrong_length() {
        let r = Tensor::<f64>::leaf(Shape5::new(1, 1, 1, 1, 3), alloc::vec![1.0; 2], false);
        assert!(matches!(r, Err(CoreError::DimensionMismatch(_))));
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let r = Tensor::<f64>::leaf(Shape5::scalar(), alloc::vec![f64::NAN], false);
        assert!(matches!(r, Err(CoreError::NumericalError(_))));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let t = Tensor::<f64>::zeros(Shape5::new(1, 1, 1, 1, 2), true);
        assert!(t.backward().is_err());
    }

    #[test]
    fn grad_accumulates_through_shared_input() {
        // y = wsum(x, a) + wsum(x, b) exercised as two tape consumers of x.
        let shape = Shape5::new(1, 1, 1, 1, 3);
        let x = Tensor::<f64>::leaf(shape, alloc::vec![1.0, 2.0, 3.0], true).unwrap();
        let s1 = ops::weighted_sum(&x, &[1.0, 0.0, 0.0]).unwrap();
        let s2 = ops::weighted_sum(&x, &[0.0, 1.0, 1.0]).unwrap();
        let sum = ops::add_scalars(&s1, &s2).unwrap();
        sum.backward().unwrap();
        assert_eq!(x.grad().unwrap(), alloc::vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn eval_mode_attaches_no_tape() {
        let shape = Shape5::new(1, 1, 1, 1, 3);
        let x = Tensor::<f64>::leaf(shape, alloc::vec![1.0, -2.0, 3.0], false).unwrap();
        let y = ops::leaky_relu(&x, 0.1);
        assert!(y.node.op.is_none());
    }
}
