//! Meta-testing: adapt on each support set, score the query set.

use serde::{Deserialize, Serialize};

use super::head::prototypes;
use super::objective::{run_episode, EpisodePlans, Phase};
use super::{MetaError, MetaState};
use crate::adcore::{Order, Tape};
use crate::encoder::GraphContext;
use crate::episodes::{derive_seed, inject_noise, sample_episode, Episode, TaskShape};
use crate::graph::{Graph, Split};
use crate::harness::metrics::{accuracy, davies_bouldin, macro_f1, mean_std, silhouette};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub split: Split,
    pub n_tasks: usize,
    pub repeats: usize,
    pub k_shot: usize,
    pub m_query: usize,
    /// Fraction of support nodes per class replaced by other-class nodes.
    pub noise: f64,
    pub seed: u64,
    /// Also score the split's prior embeddings with silhouette and Davies-Bouldin.
    pub embedding_metrics: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            n_tasks: 200,
            repeats: 10,
            k_shot: 5,
            m_query: 10,
            noise: 0.0,
            seed: 0,
            embedding_metrics: true,
        }
    }
}

/// Query predictions for one adapted task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutcome {
    /// Predicted class positions, one per query node.
    pub predictions: Vec<usize>,
    pub targets: Vec<usize>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub query_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub repeat: usize,
    pub task: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub query_loss: f64,
}

/// Accuracy and macro-F1 per repeat (each the mean over that repeat's
/// tasks), their means and sample standard deviations, and per-task records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Vec<f64>,
    pub macro_f1: Vec<f64>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub query_loss_mean: f64,
    pub silhouette: Option<f64>,
    pub davies_bouldin: Option<f64>,
    pub tasks: Vec<TaskRecord>,
    /// Kept out of the serialized report so that reports are reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Adapts to the episode's support set (prototypes from support only, no
/// contrastive or self-training terms) and classifies its query nodes.
pub fn evaluate_episode(ctx: &GraphContext, state: &MetaState, ep: &Episode) -> Result<TaskOutcome, MetaError> {
    let tape = Tape::new(Order::First);
    let theta = state.theta.to_vars(&tape);
    let psi = state.psi.to_vars(&tape);
    let plans = EpisodePlans::new(ctx, ep);
    let z_support = ctx.encode(&plans.support, &theta)?;
    let targets = ep.support_targets();
    let positions: Vec<usize> = (0..ep.classes.len()).collect();
    let p = prototypes(z_support, &targets, &positions)?;
    let out = run_episode(ctx, state, ep, &plans, &theta, &psi, z_support, p, None, Phase::Test)?;
    let predictions = out.query_logits.argmax_rows();
    let q_targets = ep.query_targets();
    Ok(TaskOutcome {
        accuracy: accuracy(&predictions, &q_targets).map_err(|e| MetaError::Invalid(e.to_string()))?,
        macro_f1: macro_f1(&predictions, &q_targets, &positions).map_err(|e| MetaError::Invalid(e.to_string()))?,
        query_loss: out.ce,
        predictions,
        targets: q_targets,
    })
}

fn task_seed(seed: u64, repeat: usize, task: usize) -> u64 {
    derive_seed(derive_seed(seed, repeat as u64), task as u64)
}

/// The evaluation episode `task` of repeat `repeat`, noise included.
pub(crate) fn eval_episode(g: &Graph, state: &MetaState, opts: &EvalOptions, repeat: usize, task: usize) -> Result<Episode, MetaError> {
    let shape = TaskShape { n_way: state.arch.n_way, k_shot: opts.k_shot, m_query: opts.m_query, pool_cap: 0 };
    let seed = task_seed(opts.seed, repeat, task);
    let ep = sample_episode(g, opts.split, shape, seed)?;
    Ok(inject_noise(g, &ep, opts.noise, derive_seed(seed, 0))?)
}

/// Runs `repeats × n_tasks` episodes from `opts.split`.
pub fn meta_test(g: &Graph, ctx: &GraphContext, state: &MetaState, opts: &EvalOptions) -> Result<MetricsReport, MetaError> {
    if opts.n_tasks == 0 || opts.repeats == 0 {
        return Err(MetaError::Invalid("meta-test needs at least one task and one repeat".into()));
    }
    let started = std::time::Instant::now();
    let jobs: Vec<(usize, usize)> = (0..opts.repeats).flat_map(|r| (0..opts.n_tasks).map(move |t| (r, t))).collect();
    let run = |&(r, t): &(usize, usize)| -> Result<TaskRecord, MetaError> {
        let ep = eval_episode(g, state, opts, r, t)?;
        let out = evaluate_episode(ctx, state, &ep)?;
        Ok(TaskRecord { repeat: r, task: t, accuracy: out.accuracy, macro_f1: out.macro_f1, query_loss: out.query_loss })
    };
    #[cfg(feature = "parallel")]
    let tasks: Vec<TaskRecord> = {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect::<Result<_, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let tasks: Vec<TaskRecord> = jobs.iter().map(run).collect::<Result<_, _>>()?;

    let per_repeat = |f: fn(&TaskRecord) -> f64| -> Vec<f64> {
        (0..opts.repeats)
            .map(|r| tasks[r * opts.n_tasks..(r + 1) * opts.n_tasks].iter().map(f).sum::<f64>() / opts.n_tasks as f64)
            .collect()
    };
    let acc = per_repeat(|t| t.accuracy);
    let f1 = per_repeat(|t| t.macro_f1);
    let (accuracy_mean, accuracy_std) = mean_std(&acc);
    let (macro_f1_mean, macro_f1_std) = mean_std(&f1);
    let query_loss_mean = tasks.iter().map(|t| t.query_loss).sum::<f64>() / tasks.len() as f64;

    let (mut sc, mut db) = (None, None);
    if opts.embedding_metrics {
        let nodes = g.nodes_in(g.class_split().classes(opts.split));
        let labels: Vec<usize> = nodes.iter().map(|&v| g.labels()[v]).collect();
        let z = ctx.encode_values(&state.theta)?.gather_rows(&nodes)?;
        sc = silhouette(&z, &labels).ok();
        db = davies_bouldin(&z, &labels).ok();
    }
    Ok(MetricsReport {
        accuracy: acc,
        macro_f1: f1,
        accuracy_mean,
        accuracy_std,
        macro_f1_mean,
        macro_f1_std,
        query_loss_mean,
        silhouette: sc,
        davies_bouldin: db,
        tasks,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
