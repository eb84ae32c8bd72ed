//! The outer meta-training loop.

use serde::{Deserialize, Serialize};

use super::checkpoint::RngState;
use super::evaluate::{meta_test, EvalOptions};
use super::objective::{batch_gradients, TrainView};
use super::{MetaError, MetaState};
use crate::adcore::ParamSet;
use crate::encoder::GraphContext;
use crate::episodes::{derive_seed, episode_stream, TaskShape};
use crate::graph::{Graph, Split};

/// Outer update rule. `Sgd` is the plain `Θ ← Θ − β∇Θ` step; `Adam` uses `β`
/// as its learning rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    /// Episodes per outer step.
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub pool_cap: usize,
    /// Fixed validation episodes scored after every epoch; 0 disables validation.
    pub val_tasks: usize,
    pub optimizer: Optimizer,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            batch_size: 10,
            batches_per_epoch: 10,
            max_epochs: 100,
            patience: 50,
            k_shot: 5,
            m_query: 10,
            pool_cap: 2048,
            val_tasks: 50,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<(), MetaError> {
        if self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(MetaError::Invalid("batch_size and batches_per_epoch must be positive".into()));
        }
        if self.k_shot == 0 || self.m_query == 0 {
            return Err(MetaError::Invalid("k_shot and m_query must be positive".into()));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(MetaError::Invalid("adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
            }
        }
        Ok(())
    }
}

/// One line of the training log. Validation fields are set on the last batch
/// of each epoch when validation is enabled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub batch: u64,
    pub total: f64,
    pub ce: f64,
    pub cl: f64,
    pub st: f64,
    pub reg: f64,
    pub val_accuracy: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation snapshot, or the final state without validation.
    pub state: MetaState,
    pub log: Vec<LogRecord>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub rng: RngState,
}

struct Adam {
    m: ParamSet,
    v: ParamSet,
    t: i32,
}

fn adam_step(set: &mut ParamSet, grad: &ParamSet, m: &mut ParamSet, v: &mut ParamSet, t: i32, lr: f64, b1: f64, b2: f64, eps: f64) {
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grad.iter() {
        let (Some(p), Some(m), Some(v)) = (set.get_mut(name), m.get_mut(name), v.get_mut(name)) else {
            continue;
        };
        let (p, m, v) = (p.values_mut(), m.values_mut(), v.values_mut());
        for (i, &g) in g.values().iter().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
}

/// Runs the outer loop from `state`. Every record is passed to `sink` as it
/// is produced and also kept in the outcome.
pub fn meta_train(
    g: &Graph,
    ctx: &GraphContext,
    mut state: MetaState,
    schedule: &Schedule,
    seed: u64,
    mut sink: impl FnMut(&LogRecord) -> Result<(), MetaError>,
) -> Result<TrainOutcome, MetaError> {
    schedule.validate()?;
    state.hyper.validate()?;
    let view = TrainView::new(g, ctx)?;
    let shape = TaskShape {
        n_way: state.arch.n_way,
        k_shot: schedule.k_shot,
        m_query: schedule.m_query,
        pool_cap: schedule.pool_cap,
    };
    let stream_seed = derive_seed(seed, 1);
    let mut stream = episode_stream(g, Split::Train, shape, schedule.batch_size, stream_seed);

    let validate = schedule.val_tasks > 0 && g.class_split().classes(Split::Val).len() >= state.arch.n_way;
    let val_opts = EvalOptions {
        split: Split::Val,
        n_tasks: schedule.val_tasks,
        repeats: 1,
        k_shot: schedule.k_shot,
        m_query: schedule.m_query,
        noise: 0.0,
        seed: derive_seed(seed, 2),
        embedding_metrics: false,
    };

    let mut adam = match schedule.optimizer {
        Optimizer::Adam { .. } => Some((
            Adam { m: state.theta.zeros_like(), v: state.theta.zeros_like(), t: 0 },
            Adam { m: state.psi.zeros_like(), v: state.psi.zeros_like(), t: 0 },
        )),
        Optimizer::Sgd => None,
    };

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, MetaState)> = None;
    let mut best_loss = f64::INFINITY;
    let mut stale = 0;
    let mut epochs_run = 0;
    let mut stopped_early = false;
    for epoch in 0..schedule.max_epochs {
        for b in 0..schedule.batches_per_epoch {
            let batch_index = stream.batches_done();
            let batch = stream.next().expect("episode stream is endless")?;
            let (d_theta, d_psi, parts) = batch_gradients(ctx, &view, &state, &batch, batch_index)?;
            if !d_theta.is_finite() || !d_psi.is_finite() {
                return Err(MetaError::NonFinite { batch: batch_index, episode: batch.len(), component: "gradient" });
            }
            let beta = state.hyper.beta;
            match (&mut adam, schedule.optimizer) {
                (Some((at, ap)), Optimizer::Adam { beta1, beta2, eps }) => {
                    at.t += 1;
                    ap.t += 1;
                    adam_step(&mut state.theta, &d_theta, &mut at.m, &mut at.v, at.t, beta, beta1, beta2, eps);
                    adam_step(&mut state.psi, &d_psi, &mut ap.m, &mut ap.v, ap.t, beta, beta1, beta2, eps);
                }
                _ => {
                    state.theta.axpy(-beta, &d_theta)?;
                    state.psi.axpy(-beta, &d_psi)?;
                }
            }

            let mut record = LogRecord {
                epoch,
                batch: batch_index,
                total: parts.total,
                ce: parts.ce,
                cl: parts.cl,
                st: parts.st,
                reg: parts.reg,
                val_accuracy: None,
                val_loss: None,
            };
            if validate && b + 1 == schedule.batches_per_epoch {
                let report = meta_test(g, ctx, &state, &val_opts)?;
                record.val_accuracy = Some(report.accuracy_mean);
                record.val_loss = Some(report.query_loss_mean);
                if best.as_ref().is_none_or(|(acc, _, _)| report.accuracy_mean > *acc) {
                    best = Some((report.accuracy_mean, epoch, state.clone()));
                }
                if report.query_loss_mean < best_loss {
                    best_loss = report.query_loss_mean;
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
            sink(&record)?;
            log.push(record);
        }
        epochs_run = epoch + 1;
        if validate && stale >= schedule.patience {
            stopped_early = true;
            break;
        }
    }

    let rng = RngState { seed, batches_done: stream.batches_done() };
    let (state, best_epoch) = match best {
        Some((_, epoch, snapshot)) => (snapshot, Some(epoch)),
        None => (state, None),
    };
    Ok(TrainOutcome { state, log, best_epoch, epochs_run, stopped_early, rng })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metalearner::testutil::*;
    use crate::metalearner::{HyperParams, Variant};

    fn small_schedule() -> Schedule {
        Schedule {
            batch_size: 2,
            batches_per_epoch: 2,
            max_epochs: 2,
            k_shot: 1,
            m_query: 1,
            pool_cap: 4,
            val_tasks: 0,
            ..Schedule::default()
        }
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let g = toy_graph(3);
        let ctx = GraphContext::new(&g, Default::default(), 2).unwrap();
        let hyper = HyperParams { beta: 0.0, theta_steps: 1, ..HyperParams::default() };
        let state = MetaState::init(&ctx, toy_arch(), Variant::default(), hyper, 5).unwrap();
        let out = meta_train(&g, &ctx, state.clone(), &small_schedule(), 9, |_| Ok(())).unwrap();
        assert_eq!(out.state, state);
        assert_eq!(out.log.len(), 4);
        assert_eq!(out.rng.batches_done, 4);
        for r in &out.log {
            assert!((r.ce + r.cl + r.st + r.reg - r.total).abs() < 1e-9);
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let g = toy_graph(3);
        let ctx = GraphContext::new(&g, Default::default(), 2).unwrap();
        let hyper = HyperParams { beta: 0.01, theta_steps: 1, ..HyperParams::default() };
        let state = MetaState::init(&ctx, toy_arch(), Variant::default(), hyper, 5).unwrap();
        let schedule = Schedule {
            optimizer: Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            ..small_schedule()
        };
        let a = meta_train(&g, &ctx, state.clone(), &schedule, 1, |_| Ok(())).unwrap();
        let b = meta_train(&g, &ctx, state.clone(), &schedule, 1, |_| Ok(())).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.log, b.log);
        assert_ne!(a.state.theta, state.theta);
    }
}
