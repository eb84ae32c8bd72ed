//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive ops as they run. [`Tape::gradients`] is the usual
//! backward pass. [`Tape::grad`] returns gradients as new tape nodes so that a
//! loss computed *after* a gradient step can itself be differentiated; whether
//! those nodes carry second-order terms depends on the tape's [`Order`].

mod backward;
mod fdcheck;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use fdcheck::{finite_diff_check, finite_diff_check_with};
pub use params::{ParamSet, VarSet};
pub use tape::{Order, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op} expects a matrix, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("division by exact zero in {op}")]
    DivisionByZero { op: &'static str },
    #[error("{op} undefined at {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("cannot normalize zero-norm row {row}")]
    ZeroNorm { row: usize },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("exact second-order gradients unavailable for primitives: {}", ops.join(", "))]
    SecondOrderUnsupported { ops: Vec<String> },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

impl AdError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        AdError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}

/// Gradient of an outer loss with respect to pre-adaptation parameters.
///
/// `build` receives a tape in `order` mode with `params` as leaves. Inner
/// updates inside `build` should use [`Tape::grad`]; in [`Order::Exact`] the
/// result then includes the terms flowing through those inner gradients, and in
/// [`Order::First`] the adapted parameters pass gradients straight through.
pub fn grad_of_grad<F>(build: F, params: &ParamSet, order: Order) -> Result<ParamSet, AdError>
where
    F: for<'t> Fn(&'t Tape, &VarSet<'t>) -> Result<Var<'t>, AdError>,
{
    let tape = Tape::new(order);
    let vars = params.to_vars(&tape);
    let loss = build(&tape, &vars)?;
    let grads = tape.gradients(loss, &vars.vars())?;
    Ok(vars.name_tensors(grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Inner loss a*theta^2, one step theta' = theta - alpha * dL/dtheta, outer loss theta'^2.
    fn toy(order: Order, theta: f64, a: f64, alpha: f64) -> f64 {
        let p = ParamSet::new().with("theta", Tensor::scalar(theta));
        let g = grad_of_grad(
            |tape, v| {
                let th = v.get("theta")?;
                let inner = th.square()?.scale(a)?;
                let step = tape.grad(inner, &[th])?;
                let adapted = th.sub(step[0].scale(alpha)?)?;
                adapted.square()
            },
            &p,
            order,
        )
        .unwrap();
        g.get("theta").unwrap().item().unwrap()
    }

    #[test]
    fn quadratic_toy_exact_and_first_order() {
        let exact = toy(Order::Exact, 1.0, 1.0, 0.1);
        let first = toy(Order::First, 1.0, 1.0, 0.1);
        assert!((exact - 1.28).abs() <= 1e-10 * 1.28, "{exact}");
        assert!((first - 1.6).abs() <= 1e-10 * 1.6, "{first}");
        assert_eq!(toy(Order::Exact, 0.7, 2.0, 0.0), toy(Order::First, 0.7, 2.0, 0.0));
    }
}
