//! Supervised contrastive loss inside a task, with each anchor's class
//! prototype added as an extra positive.

use crate::adcore::{AdError, Tensor, Var};

/// Masks over the `n + N` columns `[other task nodes | prototypes]`:
/// `(denominator mask, positive mask scaled by 1/|V_y|, per-anchor |ind₊|/|V_y|)`.
pub fn contrastive_masks(labels: &[usize], n_protos: usize) -> Result<(Tensor, Tensor, Tensor), AdError> {
    let n = labels.len();
    let width = n + n_protos;
    let mut denom = Tensor::zeros(&[n, width]);
    let mut pos = Tensor::zeros(&[n, width]);
    let mut weight = Tensor::zeros(&[n, 1]);
    for i in 0..n {
        let y = labels[i];
        if y >= n_protos {
            return Err(AdError::Invalid(format!("label {y} has no prototype among {n_protos}")));
        }
        let class_size = labels.iter().filter(|&&l| l == y).count() as f64;
        let mut positives = 1.0;
        for j in 0..n {
            if j != i {
                denom.set(i, j, 1.0);
                if labels[j] == y {
                    pos.set(i, j, 1.0 / class_size);
                    positives += 1.0;
                }
            }
        }
        denom.set(i, n + y, 1.0);
        pos.set(i, n + y, 1.0 / class_size);
        weight.set(i, 0, positives / class_size);
    }
    Ok((denom, pos, weight))
}

/// `Σ_i -(1/|V_y|) Σ_{+} log( exp(U_i·U_+/τ) / Σ_k exp(U_i·U_k/τ) )` with
/// `U` and the prototypes normalized to unit rows. `labels` index rows of `p`.
pub fn contrastive_loss<'t>(z: Var<'t>, labels: &[usize], p: Var<'t>, tau: f64) -> Result<Var<'t>, AdError> {
    if labels.len() != z.shape()[0] {
        return Err(AdError::Invalid(format!("{} labels for {} anchors", labels.len(), z.shape()[0])));
    }
    let (denom, pos, weight) = contrastive_masks(labels, p.shape()[0])?;
    let u = z.l2_normalize_rows()?;
    let p_hat = p.l2_normalize_rows()?;
    let sim = Var::concat_cols(&[u.matmul(u.transpose()?)?, u.matmul(p_hat.transpose()?)?])?.scale(1.0 / tau)?;
    // Unit rows bound every logit by 1/τ; shifting by it keeps exp in range.
    let shift = 1.0 / tau;
    let lse = sim.add_scalar(-shift)?.exp()?.mul_const(denom)?.sum_rows()?.ln()?.add_scalar(shift)?;
    let attract = sim.mul_const(pos)?.sum_all()?;
    lse.mul_const(weight)?.sum_all()?.sub(attract)
}
