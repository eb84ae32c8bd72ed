//! Drivers behind the CLI subcommands. Each takes a resolved [`Config`] and
//! writes its artifacts under `cfg.out` when asked to.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Config;
use super::HarnessError;
use crate::encoder::GraphContext;
use crate::episodes::derive_seed;
use crate::graph::{generate_sbm, load_graph, Graph};
use crate::metalearner::{meta_test, meta_train, Checkpoint, MetaError, MetaState, MetricsReport, TrainOutcome, Variant};

pub const LOG_FILE: &str = "log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_FILE: &str = "config.toml";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io(path.display().to_string(), e)
}

/// The configured dataset: loaded from `data.path`, otherwise generated.
pub fn load_data(cfg: &Config) -> Result<Graph, HarnessError> {
    Ok(match &cfg.data.path {
        Some(dir) => load_graph(dir)?,
        None => generate_sbm(&cfg.data.sbm)?,
    })
}

/// Fresh parameters for `variant` under the configuration's seed.
pub fn init_state(cfg: &Config, g: &Graph, variant: Variant) -> Result<(GraphContext, MetaState), HarnessError> {
    let ctx = GraphContext::new(g, variant.encoder_kind(), cfg.arch.hops)?;
    let state = MetaState::init(&ctx, cfg.arch.clone(), variant, cfg.hyper.clone(), derive_seed(cfg.seed, 0))?;
    Ok((ctx, state))
}

/// Meta-trains `variant`. With `out` set, the resolved config, the JSONL log
/// and the checkpoint are written there.
pub fn train(cfg: &Config, g: &Graph, variant: Variant, out: Option<&Path>) -> Result<(GraphContext, TrainOutcome), HarnessError> {
    let (ctx, state) = init_state(cfg, g, variant)?;
    let mut log = None;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, cfg.to_toml()).map_err(io_err(&cfg_path))?;
        let log_path = dir.join(LOG_FILE);
        log = Some((BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?), log_path));
    }
    let outcome = meta_train(g, &ctx, state, &cfg.train, cfg.seed, |record| {
        if let Some((w, path)) = log.as_mut() {
            let line = serde_json::to_string(record).map_err(|e| MetaError::Invalid(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| MetaError::Invalid(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    })?;
    if let Some((mut w, path)) = log {
        w.flush().map_err(io_err(&path))?;
    }
    if let Some(dir) = out {
        Checkpoint::new(outcome.state.clone(), outcome.rng).save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok((ctx, outcome))
}

/// Meta-tests `state` on the test split at noise ratio `noise`.
pub fn evaluate(cfg: &Config, g: &Graph, state: &MetaState, noise: f64) -> Result<MetricsReport, HarnessError> {
    let ctx = state.context(g)?;
    Ok(meta_test(g, &ctx, state, &cfg.eval_options(noise))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
}

impl SummaryRow {
    pub fn new(name: impl Into<String>, r: &MetricsReport) -> Self {
        Self {
            name: name.into(),
            accuracy_mean: r.accuracy_mean,
            accuracy_std: r.accuracy_std,
            macro_f1_mean: r.macro_f1_mean,
            macro_f1_std: r.macro_f1_std,
        }
    }
}

/// Plain-text table of summary rows.
pub fn render_table(header: &str, rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{header:<10} {:>16} {:>16}", "accuracy", "macro-F1");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}",
            r.name, r.accuracy_mean, r.accuracy_std, r.macro_f1_mean, r.macro_f1_std
        );
    }
    s
}

/// Trains and tests the full model and each single-component ablation.
/// With `out` set, each variant's artifacts go to a subdirectory.
pub fn ablate(cfg: &Config, g: &Graph, out: Option<&Path>) -> Result<Vec<SummaryRow>, HarnessError> {
    let mut rows = Vec::new();
    for (name, variant) in Variant::ablations() {
        let slug = name.replace("w/o ", "without-").replace('²', "2").to_lowercase();
        let dir: Option<PathBuf> = out.map(|o| o.join(slug));
        let (_, outcome) = train(cfg, g, variant, dir.as_deref())?;
        let report = evaluate(cfg, g, &outcome.state, cfg.eval.noise)?;
        rows.push(SummaryRow::new(name, &report));
    }
    Ok(rows)
}

/// Trains once, then meta-tests at each configured noise ratio on the same tasks.
pub fn noise_sweep(cfg: &Config, g: &Graph, out: Option<&Path>) -> Result<Vec<(f64, MetricsReport)>, HarnessError> {
    let (_, outcome) = train(cfg, g, cfg.variant, out)?;
    cfg.eval
        .noise_ratios
        .iter()
        .map(|&r| Ok((r, evaluate(cfg, g, &outcome.state, r)?)))
        .collect()
}

/// Writes prior embeddings of every node as `node_id,label,z0..z{d′−1}`.
pub fn dump_embeddings(g: &Graph, state: &MetaState, path: &Path) -> Result<(), HarnessError> {
    let ctx = state.context(g)?;
    let z = ctx.encode_values(&state.theta).map_err(MetaError::from)?;
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let header: Vec<String> = (0..z.cols()).map(|k| format!("z{k}")).collect();
    let mut text = format!("node_id,label,{}\n", header.join(","));
    for v in 0..z.rows() {
        let _ = write!(text, "{v},{}", g.labels()[v]);
        for x in z.row(v) {
            let _ = write!(text, ",{x}");
        }
        text.push('\n');
    }
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}
