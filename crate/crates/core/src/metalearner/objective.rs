//! The per-episode meta-objective and batch gradients.
//!
//! Training prototypes average the embeddings of every training-class node,
//! so the encoder runs once per batch over those nodes. Each episode then
//! works on its own tape with the gathered embedding rows and prototypes as
//! leaves, and the gradients reaching those leaves are pushed back through
//! the shared batch encoding in a single seeded backward pass.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::contrastive::contrastive_loss;
use super::head::{adapt_phi, cross_entropy, prototype_matrix, proto_init};
use super::modulation::{inner_update, s2_modulate, task_embedding};
use super::selftrain::{st_loss, StTarget};
use super::{MetaError, MetaState, HEAD_BIAS};
use crate::adcore::{AdError, Order, ParamSet, Tape, Tensor, Var, VarSet};
use crate::encoder::{GraphContext, RowPlan};
use crate::episodes::Episode;
use crate::graph::{Graph, Split};

/// Weighted loss contributions; `total = ce + cl + st + reg`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    /// Query cross-entropy after adaptation.
    pub ce: f64,
    /// `ξ` times the contrastive loss.
    pub cl: f64,
    /// `ζ` times the self-training loss.
    pub st: f64,
    /// `γ ‖Ψ‖²`.
    pub reg: f64,
    pub total: f64,
}

impl Breakdown {
    fn accumulate(&mut self, other: &Breakdown) {
        self.ce += other.ce;
        self.cl += other.cl;
        self.st += other.st;
        self.reg += other.reg;
        self.total += other.total;
    }
}

/// Training-split nodes, their encoder plan and the prototype averaging matrix.
#[derive(Clone, Debug)]
pub struct TrainView {
    classes: Vec<usize>,
    nodes: Vec<usize>,
    pos: Vec<Option<usize>>,
    class_pos: Vec<Option<usize>>,
    plan: RowPlan,
    averager: Arc<crate::graph::SparseMatrix>,
}

impl TrainView {
    pub fn new(g: &Graph, ctx: &GraphContext) -> Result<Self, MetaError> {
        let classes = g.class_split().classes(Split::Train).to_vec();
        let nodes = g.nodes_in(&classes);
        let labels: Vec<usize> = nodes.iter().map(|&v| g.labels()[v]).collect();
        let mut pos = vec![None; g.num_nodes()];
        for (i, &v) in nodes.iter().enumerate() {
            pos[v] = Some(i);
        }
        let max_class = classes.iter().copied().max().map_or(0, |c| c + 1);
        let mut class_pos = vec![None; max_class];
        for (j, &c) in classes.iter().enumerate() {
            class_pos[c] = Some(j);
        }
        let averager = Arc::new(prototype_matrix(&labels, &classes)?);
        Ok(Self { classes, plan: ctx.plan(&nodes), nodes, pos, class_pos, averager })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    fn rows_of(&self, ep: &Episode) -> Result<Vec<usize>, MetaError> {
        ep.support
            .iter()
            .chain(&ep.query)
            .map(|p| p.0)
            .chain(ep.pool.iter().copied())
            .map(|v| {
                self.pos
                    .get(v)
                    .copied()
                    .flatten()
                    .ok_or_else(|| MetaError::Invalid(format!("node {v} is not in a training class")))
            })
            .collect()
    }

    fn protos_of(&self, ep: &Episode) -> Result<Vec<usize>, MetaError> {
        ep.classes
            .iter()
            .map(|&c| {
                self.class_pos
                    .get(c)
                    .copied()
                    .flatten()
                    .ok_or_else(|| MetaError::Invalid(format!("class {c} is not a training class")))
            })
            .collect()
    }

    /// Training embeddings and prototypes on `tape`.
    fn encode<'t>(&self, ctx: &GraphContext, theta: &VarSet<'t>) -> Result<(Var<'t>, Var<'t>), AdError> {
        let z = ctx.encode(&self.plan, theta)?;
        let p = z.spmm(&self.averager)?;
        Ok((z, p))
    }
}

/// Encoder restrictions for one episode.
pub(crate) struct EpisodePlans {
    pub support: RowPlan,
    pub query: RowPlan,
}

impl EpisodePlans {
    pub fn new(ctx: &GraphContext, ep: &Episode) -> Self {
        Self { support: ctx.plan(&ep.support_nodes()), query: ctx.plan(&ep.query_nodes()) }
    }
}

/// Result of running the pipeline on one episode.
pub struct EpisodeLoss<'t> {
    /// `ce + ξ cl + ζ st` (no modulation penalty).
    pub total: Var<'t>,
    pub ce: f64,
    /// Unweighted contrastive loss.
    pub cl: f64,
    /// Unweighted self-training loss.
    pub st: f64,
    pub st_target: Option<StTarget>,
    pub query_logits: Tensor,
}

/// Which regularizers run.
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Phase {
    Train,
    Test,
}

/// Shared pipeline. `z` holds the prior embeddings of support, query and
/// pool nodes in that order (support only in the test phase) and `p` the
/// prototypes of the episode's classes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_episode<'t>(
    ctx: &GraphContext,
    state: &MetaState,
    ep: &Episode,
    plans: &EpisodePlans,
    theta: &VarSet<'t>,
    psi: &VarSet<'t>,
    z: Var<'t>,
    p: Var<'t>,
    st_fixed: Option<&StTarget>,
    phase: Phase,
) -> Result<EpisodeLoss<'t>, AdError> {
    let hp = &state.hyper;
    let variant = state.variant;
    let (ns, nq) = (ep.support.len(), ep.query.len());
    let s_targets = ep.support_targets();
    let q_targets = ep.query_targets();
    let support_rows: Vec<usize> = (0..ns).collect();
    let z_support = z.gather_rows(&support_rows)?;

    let phi = proto_init(p, theta)?;
    let phi = adapt_phi(phi, z_support, theta, &s_targets, hp.alpha, hp.phi_steps)?;

    let train = phase == Phase::Train;
    let mut cl = None;
    if train && !variant.no_cl {
        let rows: Vec<usize> = (0..ns + nq).collect();
        let labels: Vec<usize> = s_targets.iter().chain(&q_targets).copied().collect();
        cl = Some(contrastive_loss(z.gather_rows(&rows)?, &labels, p, hp.tau)?);
    }
    let mut st = None;
    let mut st_target = None;
    if train && !variant.no_st {
        let rows: Vec<usize> = (ns + nq..z.shape()[0]).collect();
        let (loss, target) = st_loss(z.gather_rows(&rows)?, p, hp.topk, st_fixed)?;
        st = Some(loss);
        st_target = Some(target);
    }

    // Θ_i is a separate set of nodes either way: the inner loop must not
    // see the route from Θ into the fixed head φ′.
    let theta_i = if variant.no_s2 || psi.is_empty() {
        theta.alias()?
    } else {
        s2_modulate(task_embedding(z_support)?, psi, theta)?
    };
    let theta_i = inner_update(theta_i, hp.alpha, hp.theta_steps, |th| {
        let zs = ctx.encode(&plans.support, th)?;
        cross_entropy(zs, phi, th.get(HEAD_BIAS)?, &s_targets)
    })?;
    let z_query = ctx.encode(&plans.query, &theta_i)?;
    let bias = theta_i.get(HEAD_BIAS)?;
    let ce = cross_entropy(z_query, phi, bias, &q_targets)?;
    let query_logits = (*super::head::logits(z_query, phi, bias)?.value()).clone();

    let mut total = ce;
    if let Some(l) = cl {
        if hp.xi != 0.0 {
            total = total.add(l.scale(hp.xi)?)?;
        }
    }
    if let Some(l) = st {
        if hp.zeta != 0.0 {
            total = total.add(l.scale(hp.zeta)?)?;
        }
    }
    let value = |v: Option<Var<'t>>| v.map_or(Ok(0.0), |v| v.item());
    Ok(EpisodeLoss { total, ce: ce.item()?, cl: value(cl)?, st: value(st)?, st_target, query_logits })
}

fn episode_breakdown(state: &MetaState, out: &EpisodeLoss<'_>) -> Breakdown {
    let cl = state.hyper.xi * out.cl;
    let st = state.hyper.zeta * out.st;
    Breakdown { ce: out.ce, cl, st, reg: 0.0, total: out.ce + cl + st }
}

fn check_finite(out: &EpisodeLoss<'_>, batch: u64, episode: usize) -> Result<(), MetaError> {
    for (component, v) in [("cross-entropy", out.ce), ("contrastive", out.cl), ("self-training", out.st)] {
        if !v.is_finite() {
            return Err(MetaError::NonFinite { batch, episode, component });
        }
    }
    Ok(())
}

fn modulation_penalty<'t>(psi: &VarSet<'t>, gamma: f64) -> Result<Option<Var<'t>>, AdError> {
    if psi.is_empty() {
        return Ok(None);
    }
    Ok(Some(psi.sum_squares()?.scale(gamma)?))
}

/// Full objective of one episode (`ce + ξ cl + ζ st + γ ‖Ψ‖²`) on a fresh tape.
pub fn episode_objective(g: &Graph, ctx: &GraphContext, state: &MetaState, ep: &Episode) -> Result<Breakdown, MetaError> {
    let view = TrainView::new(g, ctx)?;
    let tape = Tape::new(Order::First);
    let mut b = Breakdown::default();
    let theta = state.theta.to_vars(&tape);
    let psi = state.psi.to_vars(&tape);
    let (z_all, p_all) = view.encode(ctx, &theta)?;
    let z = z_all.gather_rows(&view.rows_of(ep)?)?;
    let p = p_all.gather_rows(&view.protos_of(ep)?)?;
    let out = run_episode(ctx, state, ep, &EpisodePlans::new(ctx, ep), &theta, &psi, z, p, None, Phase::Train)?;
    b.accumulate(&episode_breakdown(state, &out));
    if let Some(r) = modulation_penalty(&psi, state.hyper.gamma)? {
        b.reg = r.item()?;
        b.total += b.reg;
    }
    Ok(b)
}

/// The whole batch objective on one tape, for gradient checks and as a
/// reference for [`batch_gradients`]. `theta` and `psi` must live on `tape`.
/// Self-training targets are recomputed unless `st_targets` (one per
/// episode) is given.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_single_tape<'t>(
    tape: &'t Tape,
    ctx: &GraphContext,
    view: &TrainView,
    state: &MetaState,
    theta: &VarSet<'t>,
    psi: &VarSet<'t>,
    batch: &[Episode],
    st_targets: Option<&[StTarget]>,
) -> Result<(Var<'t>, Vec<StTarget>), MetaError> {
    let (z_all, p_all) = view.encode(ctx, theta)?;
    let mut total: Option<Var<'t>> = None;
    let mut targets = Vec::new();
    for (i, ep) in batch.iter().enumerate() {
        let z = z_all.gather_rows(&view.rows_of(ep)?)?;
        let p = p_all.gather_rows(&view.protos_of(ep)?)?;
        let fixed = st_targets.map(|t| &t[i]);
        let out = run_episode(ctx, state, ep, &EpisodePlans::new(ctx, ep), theta, psi, z, p, fixed, Phase::Train)?;
        if let Some(t) = out.st_target {
            targets.push(t);
        }
        total = Some(match total {
            Some(acc) => acc.add(out.total)?,
            None => out.total,
        });
    }
    let mut total = total.unwrap_or_else(|| tape.scalar(0.0));
    if let Some(r) = modulation_penalty(psi, state.hyper.gamma)? {
        total = total.add(r)?;
    }
    Ok((total, targets))
}

struct EpisodeGrads {
    theta: Vec<Tensor>,
    psi: Vec<Tensor>,
    rows: Vec<usize>,
    dz: Tensor,
    protos: Vec<usize>,
    dp: Tensor,
    breakdown: Breakdown,
}

fn episode_gradients(
    ctx: &GraphContext,
    view: &TrainView,
    state: &MetaState,
    ep: &Episode,
    z_all: &Tensor,
    p_all: &Tensor,
    batch: u64,
    index: usize,
) -> Result<EpisodeGrads, MetaError> {
    let tape = Tape::new(state.hyper.order);
    let theta = state.theta.to_vars(&tape);
    let psi = state.psi.to_vars(&tape);
    let rows = view.rows_of(ep)?;
    let protos = view.protos_of(ep)?;
    let z = tape.param(z_all.gather_rows(&rows)?);
    let p = tape.param(p_all.gather_rows(&protos)?);
    let out = run_episode(ctx, state, ep, &EpisodePlans::new(ctx, ep), &theta, &psi, z, p, None, Phase::Train)?;
    check_finite(&out, batch, index)?;
    let mut wrt = theta.vars();
    wrt.extend(psi.vars());
    wrt.push(z);
    wrt.push(p);
    let mut grads = tape.gradients(out.total, &wrt)?;
    let dp = grads.pop().expect("prototype gradient");
    let dz = grads.pop().expect("embedding gradient");
    let psi_grads = grads.split_off(theta.len());
    Ok(EpisodeGrads { theta: grads, psi: psi_grads, rows, dz, protos, dp, breakdown: episode_breakdown(state, &out) })
}

fn add_rows(acc: &mut Tensor, rows: &[usize], delta: &Tensor) {
    let d = acc.cols();
    for (r, &target) in rows.iter().enumerate() {
        for c in 0..d {
            let v = acc.get(target, c) + delta.get(r, c);
            acc.set(target, c, v);
        }
    }
}

fn add_into(acc: &mut [Tensor], delta: &[Tensor]) -> Result<(), AdError> {
    for (a, d) in acc.iter_mut().zip(delta) {
        *a = a.add(d)?;
    }
    Ok(())
}

/// Gradients of the summed batch objective with respect to Θ and Ψ, plus its
/// breakdown. Episodes may run in parallel; their contributions are reduced
/// in episode order, so results do not depend on scheduling.
pub fn batch_gradients(
    ctx: &GraphContext,
    view: &TrainView,
    state: &MetaState,
    batch: &[Episode],
    batch_index: u64,
) -> Result<(ParamSet, ParamSet, Breakdown), MetaError> {
    let tape = Tape::new(Order::First);
    let theta = state.theta.to_vars(&tape);
    let (z_all, p_all) = view.encode(ctx, &theta)?;
    let z_val = (*z_all.value()).clone();
    let p_val = (*p_all.value()).clone();

    let run = |(i, ep): (usize, &Episode)| episode_gradients(ctx, view, state, ep, &z_val, &p_val, batch_index, i);
    #[cfg(feature = "parallel")]
    let results: Vec<Result<EpisodeGrads, MetaError>> = {
        use rayon::prelude::*;
        batch.par_iter().enumerate().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<EpisodeGrads, MetaError>> = batch.iter().enumerate().map(run).collect();

    let mut d_theta: Vec<Tensor> = state.theta.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let mut d_psi: Vec<Tensor> = state.psi.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let mut dz = Tensor::zeros(z_val.shape());
    let mut dp = Tensor::zeros(p_val.shape());
    let mut breakdown = Breakdown::default();
    for r in results {
        let g = r?;
        add_into(&mut d_theta, &g.theta)?;
        add_into(&mut d_psi, &g.psi)?;
        add_rows(&mut dz, &g.rows, &g.dz);
        add_rows(&mut dp, &g.protos, &g.dp);
        breakdown.accumulate(&g.breakdown);
    }
    let through_encoder = tape.backward_seeded(&[(z_all, dz), (p_all, dp)], &theta.vars())?;
    add_into(&mut d_theta, &through_encoder)?;

    if !state.psi.is_empty() {
        let gamma = state.hyper.gamma;
        breakdown.reg = gamma * state.psi.sum_squares();
        breakdown.total += breakdown.reg;
        for (d, (_, p)) in d_psi.iter_mut().zip(state.psi.iter()) {
            *d = d.add(&p.scale(2.0 * gamma))?;
        }
    }
    if !breakdown.total.is_finite() {
        return Err(MetaError::NonFinite { batch: batch_index, episode: batch.len(), component: "total" });
    }
    let name = |set: &ParamSet, grads: Vec<Tensor>| {
        let mut out = ParamSet::new();
        for ((k, _), g) in set.iter().zip(grads) {
            out.insert(k, g);
        }
        out
    };
    Ok((name(&state.theta, d_theta), name(&state.psi, d_psi), breakdown))
}
