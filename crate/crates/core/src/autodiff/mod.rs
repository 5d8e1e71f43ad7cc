//! Reverse-mode automatic differentiation on dense rank ≤ 2 tensors.
//!
//! A [`Tape`] records every operation together with its primal value.
//! [`Tape::grad`] returns numeric gradients, while [`Tape::grad_graph`]
//! emits the adjoint computation as further nodes on the same tape, so a
//! loss containing `∇ₓH` can itself be differentiated with respect to the
//! network parameters.
//!
//! Batched inputs are laid out as rows. All fields in this crate act
//! row-wise, so the gradient of the sum of a batch of outputs with respect
//! to the input matrix is the matrix of per-row gradients.

mod tape;
mod tensor;

pub use tape::{rehu, Primitive, Tape, Var};
pub use tensor::{ShapeDisplay, Tensor};

pub(crate) use tensor::gemm;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch in {op}: {}", fmt_shapes(.shapes))]
    ShapeMismatch { op: &'static str, shapes: Vec<ShapeDisplay> },
    #[error("backward root must be scalar, got shape {shape}")]
    NonScalarRoot { shape: ShapeDisplay },
    #[error("node {index} does not belong to this tape")]
    ForeignNode { index: usize },
    #[error("expected {expected} operands, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{0}")]
    InvalidArgument(String),
}

fn fmt_shapes(s: &[ShapeDisplay]) -> String {
    s.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// A differentiable map ℝⁿ → ℝ that can be recorded on a tape row-wise.
pub trait ScalarField {
    fn input_dim(&self) -> usize;

    /// Records the field for a batch `x` (rows × input_dim) and returns the
    /// rows × 1 column of outputs. Parameters enter as constants.
    fn record(&self, tape: &mut Tape, x: Var) -> Result<Var, AdError>;

    fn evaluate(&self, x: &[f64]) -> Result<f64, AdError> {
        check_dim(self.input_dim(), x.len())?;
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::matrix(1, x.len(), x.to_vec()));
        let y = self.record(&mut tape, xv)?;
        Ok(tape.value(y).item())
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, AdError> {
        check_dim(self.input_dim(), x.len())?;
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::matrix(1, x.len(), x.to_vec()));
        let y = self.record(&mut tape, xv)?;
        let s = tape.sum(y)?;
        Ok(tape.grad(s, &[xv])?.remove(0).into_data())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<(), AdError> {
    if expected == got {
        Ok(())
    } else {
        Err(AdError::Dimension { expected, got })
    }
}

/// Row-wise gradient of a batched scalar field output `y` (rows × 1) with
/// respect to its input `x`, recorded so it can be differentiated again.
pub fn input_gradient(tape: &mut Tape, y: Var, x: Var) -> Result<Var, AdError> {
    let s = tape.sum(y)?;
    Ok(tape.grad_graph(s, &[x], &[])?.remove(0))
}

/// Row-wise Hessian-vector product `∇²f(x)·v` given the recorded gradient
/// `grad = ∇f(x)`. `v` is held constant in the differentiation but remains
/// connected to whatever produced it.
pub fn hvp_on_tape(tape: &mut Tape, x: Var, grad: Var, v: Var) -> Result<Var, AdError> {
    let s = tape.dot(grad, v)?;
    Ok(tape.grad_graph(s, &[x], &[v])?.remove(0))
}

/// `∇²field(x)·v` without materializing the Hessian.
pub fn hvp(field: &dyn ScalarField, x: &[f64], v: &[f64]) -> Result<Vec<f64>, AdError> {
    let n = field.input_dim();
    check_dim(n, x.len())?;
    check_dim(n, v.len())?;
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::matrix(1, n, x.to_vec()));
    let vv = tape.constant(Tensor::matrix(1, n, v.to_vec()));
    let y = field.record(&mut tape, xv)?;
    let g = input_gradient(&mut tape, y, xv)?;
    let h = hvp_on_tape(&mut tape, xv, g, vv)?;
    Ok(tape.value(h).data().to_vec())
}

#[cfg(test)]
mod tests;
