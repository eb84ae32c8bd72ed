//! Per-task scaling and shifting of the prior parameters, and the inner
//! gradient loop on the modulated parameters.

use super::{head, SCALE, SHIFT};
use crate::adcore::{AdError, Var, VarSet};

/// Mean of the support embeddings, `[1, d′]`.
pub fn task_embedding<'t>(z_support: Var<'t>) -> Result<Var<'t>, AdError> {
    let n = z_support.shape()[0];
    if n == 0 {
        return Err(AdError::Invalid("task embedding of an empty support set".into()));
    }
    z_support.sum_cols()?.scale(1.0 / n as f64)
}

/// `Θ_i = (1 + g_λ(t)) ⊙ Θ + g_μ(t)` over the flattened parameters, returned
/// with the names and shapes of `theta`.
pub fn s2_modulate<'t>(t: Var<'t>, psi: &VarSet<'t>, theta: &VarSet<'t>) -> Result<VarSet<'t>, AdError> {
    let lambda = head::mlp(t, psi, SCALE)?;
    let mu = head::mlp(t, psi, SHIFT)?;
    let flat = theta.flatten_row()?;
    if lambda.shape() != flat.shape() {
        return Err(AdError::shape("s2_modulate", &lambda.shape(), &flat.shape()));
    }
    theta.unflatten_row(flat.mul(lambda.add_scalar(1.0)?)?.add(mu)?)
}

/// `steps` descent steps of size `alpha` on every entry of `theta`. `loss`
/// evaluates the support loss for a given parameter set.
pub fn inner_update<'t, F>(theta: VarSet<'t>, alpha: f64, steps: usize, loss: F) -> Result<VarSet<'t>, AdError>
where
    F: Fn(&VarSet<'t>) -> Result<Var<'t>, AdError>,
{
    let mut theta = theta;
    for _ in 0..steps {
        let l = loss(&theta)?;
        let tape = l.tape();
        let grads = tape.grad(l, &theta.vars())?;
        theta = theta.descend(alpha, &grads)?;
    }
    Ok(theta)
}
