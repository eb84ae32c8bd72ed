//! Built-in self-checks run by the `check` subcommand: finite-difference
//! gradient checks, the quadratic second-order toy, a normalization fuzz,
//! identity modulation and run-to-run determinism.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::Config;
use super::experiments::{evaluate, load_data, train};
use super::metrics::{davies_bouldin, silhouette};
use super::HarnessError;
use crate::adcore::{finite_diff_check, finite_diff_check_with, grad_of_grad, AdError, Order, ParamSet, Tape, Tensor};
use crate::encoder::{EncoderKind, GraphContext};
use crate::episodes::{derive_seed, sample_episode, Episode, TaskShape};
use crate::graph::{generate_sbm, Graph, SbmSpec, Split};
use crate::metalearner::{
    batch_gradients, batch_loss_single_tape, contrastive_loss, cross_entropy, episode_objective, evaluate_episode,
    proto_init, prototypes, score, select_high_confidence, self_training_loss, sharpen, soft_assign, st_loss,
    Architecture, Checkpoint, HyperParams, MetaState, TrainView, Variant, HEAD_BIAS,
};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// A 12-node graph, a model with `d′ = 4` and one 2-way 1-shot episode whose
/// pool holds the remaining nodes. Every node starts with a nonzero
/// embedding; Ψ is freshly initialized, so modulation is the identity.
pub struct Toy {
    pub graph: Graph,
    pub ctx: GraphContext,
    pub state: MetaState,
    pub episode: Episode,
}

pub fn toy(seed: u64) -> Result<Toy, HarnessError> {
    let graph = generate_sbm(&SbmSpec {
        classes: 4,
        per_class: 3,
        p_in: 0.6,
        p_out: 0.2,
        feature_dim: 4,
        feature_noise: 0.4,
        seed,
        split: Some([4, 0, 0]),
    })?;
    let ctx = GraphContext::new(&graph, EncoderKind::Hetero, 2)?;
    let arch = Architecture { n_way: 2, embed_dim: 4, hidden: 4, hops: 2 };
    let hyper = HyperParams { order: Order::Exact, theta_steps: 2, ..HyperParams::default() };
    // A ReLU readout this narrow can map a node to the zero vector, where the
    // contrastive loss is undefined; redraw the initialization until every
    // embedding is clearly nonzero.
    let mut attempt = 0;
    let state = loop {
        let s = MetaState::init(&ctx, arch.clone(), Variant::default(), hyper.clone(), derive_seed(seed, attempt))?;
        let z = ctx.encode_values(&s.theta)?;
        if (0..z.rows()).all(|r| z.row(r).iter().map(|v| v * v).sum::<f64>() > 1e-4) || attempt == 1000 {
            break s;
        }
        attempt += 1;
    };
    let shape = TaskShape { n_way: 2, k_shot: 1, m_query: 1, pool_cap: 100 };
    let episode = sample_episode(&graph, Split::Train, shape, seed).map_err(crate::metalearner::MetaError::from)?;
    Ok(Toy { graph, ctx, state, episode })
}

/// Largest relative finite-difference error per loss component.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct FdErrors {
    /// Query cross-entropy through the encoder and prototype initialization.
    pub ce: f64,
    pub cl: f64,
    /// Self-training with its target frozen at the base point.
    pub st: f64,
    /// The whole batch objective in exact mode, with respect to Θ and Ψ.
    pub full: f64,
}

impl FdErrors {
    pub fn max(&self) -> f64 {
        self.ce.max(self.cl).max(self.st).max(self.full)
    }
}

fn as_ad(e: crate::metalearner::MetaError) -> AdError {
    AdError::Invalid(e.to_string())
}

pub fn fd_errors(seed: u64, h: f64) -> Result<FdErrors, HarnessError> {
    let Toy { graph, ctx, mut state, episode: ep } = toy(seed)?;
    // Nudge Ψ off zero so that every entry receives gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in state.psi.iter_mut() {
        for v in t.values_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let hp = state.hyper.clone();
    let positions: Vec<usize> = (0..ep.classes.len()).collect();
    let s_targets = ep.support_targets();
    let q_targets = ep.query_targets();
    let support = ctx.plan(&ep.support_nodes());
    let query = ctx.plan(&ep.query_nodes());
    let mut task_nodes = ep.support_nodes();
    task_nodes.extend(ep.query_nodes());
    let task = ctx.plan(&task_nodes);
    let task_labels: Vec<usize> = s_targets.iter().chain(&q_targets).copied().collect();
    let pool = ctx.plan(&ep.pool);

    let ce = finite_diff_check(
        |_, th| {
            let p = prototypes(ctx.encode(&support, th)?, &s_targets, &positions).map_err(as_ad)?;
            let phi = proto_init(p, th)?;
            cross_entropy(ctx.encode(&query, th)?, phi, th.get(HEAD_BIAS)?, &q_targets)
        },
        &state.theta,
        h,
        Order::First,
    )?;
    let cl = finite_diff_check(
        |_, th| {
            let z = ctx.encode(&task, th)?;
            let p = prototypes(ctx.encode(&support, th)?, &s_targets, &positions).map_err(as_ad)?;
            contrastive_loss(z, &task_labels, p, hp.tau)
        },
        &state.theta,
        h,
        Order::First,
    )?;
    let st_target = {
        let tape = Tape::new(Order::First);
        let th = state.theta.to_constants(&tape);
        let p = prototypes(ctx.encode(&support, &th)?, &s_targets, &positions)?;
        st_loss(ctx.encode(&pool, &th)?, p, hp.topk, None)?.1
    };
    let st = finite_diff_check(
        |_, th| {
            let p = prototypes(ctx.encode(&support, th)?, &s_targets, &positions).map_err(as_ad)?;
            Ok(st_loss(ctx.encode(&pool, th)?, p, hp.topk, Some(&st_target))?.0)
        },
        &state.theta,
        h,
        Order::First,
    )?;

    let view = TrainView::new(&graph, &ctx)?;
    let batch = vec![ep.clone()];
    let n_theta = state.theta.len();
    let mut joined = state.theta.clone();
    for (k, t) in state.psi.iter() {
        joined.insert(k, t.clone());
    }
    let split = |p: &ParamSet| {
        let (mut theta, mut psi) = (ParamSet::new(), ParamSet::new());
        for (i, (k, t)) in p.iter().enumerate() {
            if i < n_theta {
                theta.insert(k, t.clone())
            } else {
                psi.insert(k, t.clone())
            }
        }
        MetaState { theta, psi, ..state.clone() }
    };
    let targets = {
        let tape = Tape::new(Order::First);
        let (th, ps) = (state.theta.to_vars(&tape), state.psi.to_vars(&tape));
        batch_loss_single_tape(&tape, &ctx, &view, &state, &th, &ps, &batch, None)?.1
    };
    let full = finite_diff_check_with(
        |p| {
            let s = split(p);
            let tape = Tape::new(Order::First);
            let (th, ps) = (s.theta.to_vars(&tape), s.psi.to_vars(&tape));
            batch_loss_single_tape(&tape, &ctx, &view, &s, &th, &ps, &batch, Some(&targets)).map_err(as_ad)?.0.item()
        },
        |p| {
            let (dt, dp, _) = batch_gradients(&ctx, &view, &split(p), &batch, 0).map_err(as_ad)?;
            let mut out = dt;
            for (k, t) in dp.iter() {
                out.insert(k, t.clone());
            }
            Ok(out)
        },
        &joined,
        h,
    )?;
    Ok(FdErrors { ce, cl, st, full })
}

/// Outer gradient for inner loss `aθ²`, one inner step of size `alpha`, and
/// outer loss `θ′²`.
pub fn quadratic_outer_gradient(theta: f64, a: f64, alpha: f64, order: Order) -> Result<f64, AdError> {
    let p = ParamSet::new().with("theta", Tensor::scalar(theta));
    let g = grad_of_grad(
        |tape, v| {
            let th = v.get("theta")?;
            let step = tape.grad(th.square()?.scale(a)?, &[th])?;
            th.sub(step[0].scale(alpha)?)?.square()
        },
        &p,
        order,
    )?;
    g.get("theta").expect("theta gradient").item()
}

/// Extremes seen by [`normalization_fuzz`].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct NormStats {
    pub cases: usize,
    /// Largest `|row sum − 1|` over softmax scores, soft assignments and sharpened targets.
    pub row_error: f64,
    pub min_kl: f64,
    pub min_silhouette: f64,
    pub max_silhouette: f64,
    pub min_davies_bouldin: f64,
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, spread: f64) -> Tensor {
    let values = (0..rows * cols).map(|_| rng.random_range(-spread..spread)).collect();
    Tensor::new(vec![rows, cols], values).expect("shape matches")
}

fn row_error(t: &Tensor) -> f64 {
    (0..t.rows()).map(|i| (t.row(i).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

pub fn normalization_fuzz(cases: usize, seed: u64) -> Result<NormStats, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = NormStats {
        cases,
        row_error: 0.0,
        min_kl: f64::INFINITY,
        min_silhouette: f64::INFINITY,
        max_silhouette: f64::NEG_INFINITY,
        min_davies_bouldin: f64::INFINITY,
    };
    for _ in 0..cases {
        let n = rng.random_range(2..=40);
        let m = rng.random_range(2..=8);
        let d = rng.random_range(1..=6);
        let spread = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let tape = Tape::new(Order::First);
        let z = tape.constant(random_tensor(&mut rng, n, d, spread));
        let p = tape.constant(random_tensor(&mut rng, m, d, spread));
        let b = tape.constant(random_tensor(&mut rng, 1, m, spread));

        let scores = score(z, p, b)?.value();
        let q = soft_assign(z, p)?;
        let (rows, sub) = select_high_confidence(&q.value(), rng.random_range(1..=n));
        let target = sharpen(&sub);
        for t in [&*scores, &*q.value(), &target] {
            s.row_error = s.row_error.max(row_error(t));
        }
        let kl = self_training_loss(q.gather_rows(&rows)?, &target)?.item()?;
        s.min_kl = s.min_kl.min(kl);

        let emb = random_tensor(&mut rng, n, d, spread);
        let k = rng.random_range(2..=n.min(6));
        let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        let sc = silhouette(&emb, &labels).map_err(|e| HarnessError::Check(e.to_string()))?;
        let db = davies_bouldin(&emb, &labels).map_err(|e| HarnessError::Check(e.to_string()))?;
        s.min_silhouette = s.min_silhouette.min(sc);
        s.max_silhouette = s.max_silhouette.max(sc);
        s.min_davies_bouldin = s.min_davies_bouldin.min(db);
    }
    Ok(s)
}

/// Whether zero modulation reproduces the S²-removed model bit for bit
/// (objective, query logits and gradients), and whether `ξ = ζ = 0` leaves
/// the query cross-entropy bit-identical to dropping both regularizers.
pub fn identity_modulation(seed: u64) -> Result<(bool, bool), HarnessError> {
    let Toy { graph, ctx, state, episode } = toy(seed)?;
    let full = MetaState { hyper: HyperParams { gamma: 0.0, ..state.hyper.clone() }, ..state };
    let removed = MetaState { psi: ParamSet::new(), variant: Variant { no_s2: true, ..full.variant }, ..full.clone() };
    let view = TrainView::new(&graph, &ctx)?;
    let batch = vec![episode.clone()];

    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let a = episode_objective(&graph, &ctx, &full, &episode)?;
    let b = episode_objective(&graph, &ctx, &removed, &episode)?;
    let (ga, _, _) = batch_gradients(&ctx, &view, &full, &batch, 0)?;
    let (gb, _, _) = batch_gradients(&ctx, &view, &removed, &batch, 0)?;
    let ea = evaluate_episode(&ctx, &full, &episode)?;
    let eb = evaluate_episode(&ctx, &removed, &episode)?;
    let s2 = a.total.to_bits() == b.total.to_bits()
        && bits(ga.flatten()) == bits(gb.flatten())
        && ea.query_loss.to_bits() == eb.query_loss.to_bits()
        && ea.predictions == eb.predictions;

    let weightless = MetaState { hyper: HyperParams { xi: 0.0, zeta: 0.0, ..full.hyper.clone() }, ..full.clone() };
    let stripped = MetaState { variant: Variant { no_cl: true, no_st: true, ..full.variant }, ..weightless.clone() };
    let c = episode_objective(&graph, &ctx, &weightless, &episode)?;
    let d = episode_objective(&graph, &ctx, &stripped, &episode)?;
    let regs = c.ce.to_bits() == d.ce.to_bits() && c.total.to_bits() == d.total.to_bits();
    Ok((s2, regs))
}

/// Small end-to-end configuration used by the determinism check.
pub fn smoke_config(seed: u64) -> Config {
    let mut cfg = Config { seed, ..Config::default() };
    cfg.data.sbm = SbmSpec {
        classes: 6,
        per_class: 12,
        feature_dim: 6,
        p_in: 0.3,
        p_out: 0.05,
        seed,
        split: Some([2, 2, 2]),
        ..SbmSpec::default()
    };
    cfg.arch.n_way = 2;
    cfg.arch.embed_dim = 16;
    cfg.hyper.theta_steps = 1;
    cfg.train.max_epochs = 2;
    cfg.train.batches_per_epoch = 2;
    cfg.train.batch_size = 2;
    cfg.train.k_shot = 2;
    cfg.train.m_query = 2;
    cfg.train.val_tasks = 3;
    cfg.eval.n_tasks = 4;
    cfg.eval.repeats = 2;
    cfg.eval.k_shot = 2;
    cfg.eval.m_query = 2;
    cfg
}

/// Serialized log, checkpoint and report of one in-memory run.
pub fn run_fingerprint(cfg: &Config) -> Result<(String, String, String), HarnessError> {
    let g = load_data(cfg)?;
    let (_, outcome) = train(cfg, &g, cfg.variant, None)?;
    let log: Vec<String> = outcome.log.iter().map(|r| serde_json::to_string(r).expect("log serializes")).collect();
    let report = evaluate(cfg, &g, &outcome.state, cfg.eval.noise)?;
    let checkpoint = Checkpoint::new(outcome.state, outcome.rng).to_json()?;
    Ok((log.join("\n"), checkpoint, serde_json::to_string(&report).expect("report serializes")))
}

fn result(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name: name.to_string(), passed, detail }
}

/// Runs every check; errors inside a check count as failures.
pub fn run_all(seeds: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let fd = (0..seeds).try_fold(FdErrors::default(), |acc, s| -> Result<FdErrors, HarnessError> {
        let e = fd_errors(s, 1e-6)?;
        Ok(FdErrors { ce: acc.ce.max(e.ce), cl: acc.cl.max(e.cl), st: acc.st.max(e.st), full: acc.full.max(e.full) })
    });
    out.push(match fd {
        Ok(e) => result(
            "finite differences",
            e.max() <= 1e-5,
            format!("ce {:.1e} cl {:.1e} st {:.1e} full {:.1e} over {seeds} seeds", e.ce, e.cl, e.st, e.full),
        ),
        Err(e) => result("finite differences", false, e.to_string()),
    });

    let (theta, a, alpha): (f64, f64, f64) = (1.3, 0.7, 0.2);
    let exact_closed = 2.0 * theta * (1.0 - 2.0 * a * alpha).powi(2);
    let first_closed = 2.0 * theta * (1.0 - 2.0 * a * alpha);
    let quad = quadratic_outer_gradient(theta, a, alpha, Order::Exact)
        .and_then(|e| Ok((e, quadratic_outer_gradient(theta, a, alpha, Order::First)?)));
    out.push(match quad {
        Ok((e, f)) => {
            let (re, rf) = ((e - exact_closed).abs() / exact_closed.abs(), (f - first_closed).abs() / first_closed.abs());
            result("second order", re <= 1e-10 && rf <= 1e-10, format!("exact rel err {re:.1e}, first-order rel err {rf:.1e}"))
        }
        Err(e) => result("second order", false, e.to_string()),
    });

    out.push(match normalization_fuzz(200, 7) {
        Ok(s) => result(
            "normalization",
            s.row_error <= 1e-9 && s.min_kl >= 0.0 && s.min_silhouette >= -1.0 && s.max_silhouette <= 1.0 && s.min_davies_bouldin >= 0.0,
            format!(
                "row err {:.1e}, min KL {:.2e}, SC in [{:.3}, {:.3}], min DB {:.3}",
                s.row_error, s.min_kl, s.min_silhouette, s.max_silhouette, s.min_davies_bouldin
            ),
        ),
        Err(e) => result("normalization", false, e.to_string()),
    });

    out.push(match identity_modulation(3) {
        Ok((s2, regs)) => result("identity modulation", s2 && regs, format!("zero Ψ = w/o S²: {s2}, ξ=ζ=0 = w/o CL+ST: {regs}")),
        Err(e) => result("identity modulation", false, e.to_string()),
    });

    let cfg = smoke_config(11);
    out.push(match run_fingerprint(&cfg).and_then(|a| Ok((a, run_fingerprint(&cfg)?))) {
        Ok((a, b)) => result("determinism", a == b, format!("log, checkpoint and report identical: {}", a == b)),
        Err(e) => result("determinism", false, e.to_string()),
    });
    out
}
