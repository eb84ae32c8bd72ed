//! Prototypes, prototype-based head initialization and the softmax head.

use std::sync::Arc;

use super::{MetaError, HEAD_BIAS, HEAD_PHI, PROTO};
use crate::adcore::{AdError, Tensor, Var, VarSet};
use crate::graph::SparseMatrix;

/// `[N, rows]` averaging matrix: row `j` holds `1/|class j|` at the rows
/// labelled `classes[j]`.
pub fn prototype_matrix(labels: &[usize], classes: &[usize]) -> Result<SparseMatrix, MetaError> {
    let mut triplets = Vec::new();
    for (j, &c) in classes.iter().enumerate() {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            return Err(MetaError::Invalid(format!("class {c} has no nodes to form a prototype")));
        }
        let w = 1.0 / members.len() as f64;
        triplets.extend(members.into_iter().map(|i| (j, i, w)));
    }
    Ok(SparseMatrix::from_triplets(classes.len(), labels.len(), triplets))
}

/// Class means of the rows of `z`; `labels[i]` is the class of row `i`.
pub fn prototypes<'t>(z: Var<'t>, labels: &[usize], classes: &[usize]) -> Result<Var<'t>, MetaError> {
    if labels.len() != z.shape()[0] {
        return Err(MetaError::Invalid(format!("{} labels for {} rows", labels.len(), z.shape()[0])));
    }
    Ok(z.spmm(&Arc::new(prototype_matrix(labels, classes)?))?)
}

/// Two-layer perceptron `relu(x W1 + b1) W2 + b2` with weights `{prefix}.w1` etc.
pub fn mlp<'t>(x: Var<'t>, params: &VarSet<'t>, prefix: &str) -> Result<Var<'t>, AdError> {
    let p = |s: &str| params.get(&format!("{prefix}.{s}"));
    x.matmul(p("w1")?)?.add(p("b1")?)?.relu()?.matmul(p("w2")?)?.add(p("b2")?)
}

/// Class-specific head weights from prototypes, one row per class. Without a
/// prototype network (`head.phi` present) the learned rows are used directly.
pub fn proto_init<'t>(p: Var<'t>, theta: &VarSet<'t>) -> Result<Var<'t>, AdError> {
    match theta.get(HEAD_PHI) {
        Ok(phi) => Ok(phi),
        Err(_) => mlp(p, theta, PROTO),
    }
}

pub fn logits<'t>(z: Var<'t>, phi: Var<'t>, b: Var<'t>) -> Result<Var<'t>, AdError> {
    z.matmul(phi.transpose()?)?.add(b)
}

/// `softmax(Z φᵀ + b)` row by row.
pub fn score<'t>(z: Var<'t>, phi: Var<'t>, b: Var<'t>) -> Result<Var<'t>, AdError> {
    logits(z, phi, b)?.softmax_rows()
}

fn one_hot(targets: &[usize], n_classes: usize) -> Result<Tensor, AdError> {
    let mut t = Tensor::zeros(&[targets.len(), n_classes]);
    for (i, &y) in targets.iter().enumerate() {
        if y >= n_classes {
            return Err(AdError::Invalid(format!("target {y} outside {n_classes} classes")));
        }
        t.set(i, y, 1.0);
    }
    Ok(t)
}

/// Categorical cross-entropy of the softmax head summed over nodes;
/// `targets` are class positions in `0..N`.
pub fn cross_entropy<'t>(z: Var<'t>, phi: Var<'t>, b: Var<'t>, targets: &[usize]) -> Result<Var<'t>, AdError> {
    if targets.is_empty() {
        return Err(AdError::Invalid("cross-entropy over an empty node set".into()));
    }
    let logp = logits(z, phi, b)?.log_softmax_rows()?;
    let mask = one_hot(targets, logp.shape()[1])?;
    logp.mul_const(mask)?.sum_all()?.neg()
}

/// `steps` gradient steps on φ alone against the support cross-entropy.
pub fn adapt_phi<'t>(
    phi: Var<'t>,
    z_support: Var<'t>,
    theta: &VarSet<'t>,
    targets: &[usize],
    alpha: f64,
    steps: usize,
) -> Result<Var<'t>, AdError> {
    let b = theta.get(HEAD_BIAS)?;
    let tape = phi.tape();
    let mut phi = phi;
    for _ in 0..steps {
        let loss = cross_entropy(z_support, phi, b, targets)?;
        let g = tape.grad(loss, &[phi])?;
        phi = phi.sub(g[0].scale(alpha)?)?;
    }
    Ok(phi)
}
