//! Self-training on out-of-task nodes: Student-t soft assignment to the
//! prototypes, per-class top-K selection, frequency-normalized sharpening and
//! a KL term pulling the assignments toward the sharpened target.

use crate::adcore::{AdError, Tensor, Var};

/// `q̃_ij ∝ (1 + ‖z_i − p_j‖²)⁻¹`, normalized over `j`.
pub fn soft_assign<'t>(z: Var<'t>, p: Var<'t>) -> Result<Var<'t>, AdError> {
    let zz = z.square()?.sum_rows()?;
    let pp = p.square()?.sum_rows()?.transpose()?;
    let dist = z.matmul(p.transpose()?)?.scale(-2.0)?.add(zz)?.add(pp)?;
    let ones = z.tape().constant(Tensor::ones(&dist.shape()));
    let kernel = ones.div(dist.add_scalar(1.0)?)?;
    kernel.div(kernel.sum_rows()?)
}

/// Rows that rank in the top `k` of at least one column (ties to the lower
/// row index), ascending, and `q` restricted to them.
pub fn select_high_confidence(q: &Tensor, k: usize) -> (Vec<usize>, Tensor) {
    let (n, m) = (q.rows(), q.cols());
    let mut chosen = vec![false; n];
    for j in 0..m {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| q.get(b, j).total_cmp(&q.get(a, j)).then(a.cmp(&b)));
        for &i in order.iter().take(k) {
            chosen[i] = true;
        }
    }
    let rows: Vec<usize> = (0..n).filter(|&i| chosen[i]).collect();
    let sub = q.gather_rows(&rows).expect("selected rows are in range");
    (rows, sub)
}

/// `q_ij = (q̃_ij² / z_j) / Σ_j' (q̃_ij'² / z_j')` with `z_j = Σ_i q̃_ij` over the given rows.
pub fn sharpen(q: &Tensor) -> Tensor {
    let (n, m) = (q.rows(), q.cols());
    let freq: Vec<f64> = (0..m).map(|j| (0..n).map(|i| q.get(i, j)).sum()).collect();
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let w: Vec<f64> = (0..m).map(|j| q.get(i, j).powi(2) / freq[j]).collect();
        let total: f64 = w.iter().sum();
        for j in 0..m {
            out.set(i, j, w[j] / total);
        }
    }
    out
}

/// `KL(target ‖ q̃) = Σ t log t − Σ t log q̃`, with `target` held constant.
pub fn self_training_loss<'t>(q_hc: Var<'t>, target: &Tensor) -> Result<Var<'t>, AdError> {
    let q = q_hc.value();
    if q.shape() != target.shape() {
        return Err(AdError::shape("self-training loss", q.shape(), target.shape()));
    }
    let mut entropy = 0.0;
    for (&t, &p) in target.values().iter().zip(q.values()) {
        if t > 0.0 {
            if p <= 0.0 {
                return Err(AdError::Domain { op: "self-training loss", value: p });
            }
            entropy += t * t.ln();
        }
    }
    let cross = q_hc.ln()?.mul_const(target.clone())?.sum_all()?;
    cross.neg()?.add_scalar(entropy)
}

/// Frozen self-training selection: rows of the pool and their target distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct StTarget {
    pub rows: Vec<usize>,
    pub q: Tensor,
}

/// The whole self-training term for pool embeddings `z` against prototypes
/// `p`. The selection and target come from the current values unless `fixed`
/// is given; either way no gradient flows into the target.
pub fn st_loss<'t>(
    z: Var<'t>,
    p: Var<'t>,
    topk: usize,
    fixed: Option<&StTarget>,
) -> Result<(Var<'t>, StTarget), AdError> {
    let tape = z.tape();
    if z.shape()[0] == 0 || topk == 0 {
        let empty = StTarget { rows: Vec::new(), q: Tensor::zeros(&[0, p.shape()[0]]) };
        return Ok((tape.scalar(0.0), empty));
    }
    let q_tilde = soft_assign(z, p)?;
    let target = match fixed {
        Some(t) => t.clone(),
        None => {
            let (rows, sub) = select_high_confidence(&q_tilde.value(), topk);
            StTarget { rows, q: sharpen(&sub) }
        }
    };
    let q_hc = q_tilde.gather_rows(&target.rows)?;
    Ok((self_training_loss(q_hc, &target.q)?, target))
}
