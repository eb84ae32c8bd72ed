//! Node encoders: the hop-concatenation layer for heterophilic graphs and the
//! simplified graph convolution baseline.
//!
//! Both are evaluated through a [`RowPlan`], which restricts the computation
//! to the receptive field of the requested rows. A plan over every node gives
//! the ordinary full-graph encoding, and a plan over a subset gives bit-equal
//! rows for that subset.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adcore::{AdError, ParamSet, Tensor, Var, VarSet};
use crate::graph::{normalized_hops, sgc_normalize, Graph, GraphError, SparseMatrix, MAX_HOPS};

pub const FEATURE: &str = "encoder.feature";
pub const READOUT: &str = "encoder.readout";
pub const SGC_WEIGHT: &str = "encoder.w";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// `Z = relu([F ‖ Ã_1 F ‖ … ‖ Ã_ℓ F] W_r)` with `F = relu(X W_f)`.
    #[default]
    Hetero,
    /// `Z = Ã̂^l X W` with self-loop normalization.
    Sgc,
}

/// Precomputed graph operators for one encoder configuration.
#[derive(Clone, Debug)]
pub struct GraphContext {
    kind: EncoderKind,
    hops: usize,
    features: Tensor,
    hop_mats: Vec<Arc<SparseMatrix>>,
}

/// `Ã̂^l X` by `l` successive sparse products.
pub fn sgc_propagate(adjacency: &SparseMatrix, x: &Tensor, power: usize) -> Result<Tensor, AdError> {
    let a_hat = sgc_normalize(adjacency);
    let mut out = x.clone();
    for _ in 0..power {
        out = Tensor::spmm(&a_hat, &out)?;
    }
    Ok(out)
}

impl GraphContext {
    /// `hops` is the neighbourhood depth ℓ for [`EncoderKind::Hetero`] and the
    /// propagation power `l` for [`EncoderKind::Sgc`].
    pub fn new(g: &Graph, kind: EncoderKind, hops: usize) -> Result<Self, GraphError> {
        match kind {
            EncoderKind::Hetero => {
                if hops > MAX_HOPS {
                    return Err(GraphError::Invalid(format!("hops {hops} exceeds {MAX_HOPS}")));
                }
                Ok(Self {
                    kind,
                    hops,
                    features: g.features().clone(),
                    hop_mats: normalized_hops(g.adjacency(), hops)?,
                })
            }
            EncoderKind::Sgc => {
                let features = sgc_propagate(g.adjacency(), g.features(), hops)
                    .map_err(|e| GraphError::Invalid(e.to_string()))?;
                Ok(Self { kind, hops, features, hop_mats: Vec::new() })
            }
        }
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn hops(&self) -> usize {
        self.hops
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Glorot-initialized encoder parameters with output width `d_out`.
    pub fn init_params(&self, d_out: usize, rng: &mut impl Rng) -> ParamSet {
        let d = self.input_dim();
        match self.kind {
            EncoderKind::Hetero => ParamSet::new()
                .with(FEATURE, Tensor::glorot(d, d_out, rng))
                .with(READOUT, Tensor::glorot((self.hops + 1) * d_out, d_out, rng)),
            EncoderKind::Sgc => ParamSet::new().with(SGC_WEIGHT, Tensor::glorot(d, d_out, rng)),
        }
    }

    pub fn plan_all(&self) -> RowPlan {
        self.plan(&(0..self.num_nodes()).collect::<Vec<_>>())
    }

    /// Restricts the encoder to `rows`; the output of [`GraphContext::encode`]
    /// then has one row per entry of `rows`, in the same order.
    pub fn plan(&self, rows: &[usize]) -> RowPlan {
        let n = self.num_nodes();
        if self.kind == EncoderKind::Sgc {
            let x = self.features.gather_rows(rows).expect("row ids come from the same graph");
            return RowPlan { rows: rows.to_vec(), x, ego: Vec::new(), hops: Vec::new() };
        }
        let mut in_field = vec![false; n];
        for &r in rows {
            in_field[r] = true;
            for m in &self.hop_mats {
                for &c in m.row_cols(r) {
                    in_field[c] = true;
                }
            }
        }
        let mut col_map = vec![None; n];
        let mut field = Vec::new();
        for (v, &inside) in in_field.iter().enumerate() {
            if inside {
                col_map[v] = Some(field.len());
                field.push(v);
            }
        }
        let x = self.features.gather_rows(&field).expect("field ids are in range");
        let ego = rows.iter().map(|&r| col_map[r].expect("rows are in their own field")).collect();
        let hops = self
            .hop_mats
            .iter()
            .map(|m| {
                let sub = m.restrict(rows, &col_map, field.len());
                let sub_t = sub.transpose();
                (Arc::new(sub), Arc::new(sub_t))
            })
            .collect();
        RowPlan { rows: rows.to_vec(), x, ego, hops }
    }

    /// Embeddings of the plan's rows under encoder parameters taken from `theta`.
    pub fn encode<'t>(&self, plan: &RowPlan, theta: &VarSet<'t>) -> Result<Var<'t>, AdError> {
        match self.kind {
            EncoderKind::Hetero => {
                let w_f = theta.get(FEATURE)?;
                let w_r = theta.get(READOUT)?;
                let tape = w_f.tape();
                let x = tape.constant(plan.x.clone());
                if x.shape()[1] != w_f.shape()[0] {
                    return Err(AdError::shape("encode feature map", &x.shape(), &w_f.shape()));
                }
                let f = x.matmul(w_f)?.relu()?;
                let mut blocks = vec![f.gather_rows(&plan.ego)?];
                for (m, m_t) in &plan.hops {
                    blocks.push(f.spmm_with_transpose(m, m_t)?);
                }
                let r = Var::concat_cols(&blocks)?;
                if r.shape()[1] != w_r.shape()[0] {
                    return Err(AdError::shape("encode readout", &r.shape(), &w_r.shape()));
                }
                r.matmul(w_r)?.relu()
            }
            EncoderKind::Sgc => {
                let w = theta.get(SGC_WEIGHT)?;
                let x = w.tape().constant(plan.x.clone());
                if x.shape()[1] != w.shape()[0] {
                    return Err(AdError::shape("encode_sgc", &x.shape(), &w.shape()));
                }
                x.matmul(w)
            }
        }
    }

    /// Full-graph embeddings as a plain tensor.
    pub fn encode_values(&self, params: &ParamSet) -> Result<Tensor, AdError> {
        let tape = crate::adcore::Tape::new(Default::default());
        let vars = params.to_constants(&tape);
        let z = self.encode(&self.plan_all(), &vars)?;
        Ok((*z.value()).clone())
    }
}

/// Receptive-field restriction of the encoder to a set of output rows.
#[derive(Clone, Debug)]
pub struct RowPlan {
    rows: Vec<usize>,
    /// Input features of the receptive field (or the propagated SGC rows).
    x: Tensor,
    /// Position of each output row inside the receptive field.
    ego: Vec<usize>,
    hops: Vec<(Arc<SparseMatrix>, Arc<SparseMatrix>)>,
}

impl RowPlan {
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn field_size(&self) -> usize {
        self.x.rows()
    }
}
