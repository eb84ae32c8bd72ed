use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use graphmeta::graph::{generate_sbm, node_homophily, save_graph};
use graphmeta::harness::checks::run_all;
use graphmeta::harness::experiments::{self, SummaryRow};
use graphmeta::harness::{Config, ConfigError, HarnessError};
use graphmeta::metalearner::Checkpoint;

#[derive(Parser)]
#[command(name = "graphmeta", version, about = "Few-shot node classification by graph meta-learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set hyper.alpha=0.2` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train and write config.toml, log.jsonl and checkpoint.json.
    Train(Common),
    /// Meta-test a checkpoint and print the report as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Support-set noise ratio (defaults to `eval.noise`).
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Write a stochastic block model dataset directory.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        p_in: Option<f64>,
        #[arg(long)]
        p_out: Option<f64>,
        #[arg(long)]
        feature_dim: Option<usize>,
        #[arg(long)]
        feature_noise: Option<f64>,
        /// Train/val/test class counts, e.g. `6,2,2`. With `--classes` alone
        /// the split defaults to 60/20/20.
        #[arg(long, value_delimiter = ',')]
        split: Option<Vec<usize>>,
    },
    /// Train and test the full model and the five single-component ablations.
    Ablate(Common),
    /// Train once, then test at each ratio in `eval.noise_ratios`.
    NoiseSweep(Common),
    /// Write prior embeddings of every node as CSV.
    DumpEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `<out>/embeddings.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the gradient and invariant self-checks.
    Check {
        /// Seeds for the finite-difference checks.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn resolve(common: &Common) -> Result<Config, HarnessError> {
    let mut cfg = Config::load(common.config.as_deref(), &common.set)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Check(e.to_string()))?;
    text.push('\n');
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| HarnessError::Io(dir.display().to_string(), e))?;
    }
    fs::write(path, text).map_err(|e| HarnessError::Io(path.display().to_string(), e))
}

fn checkpoint(path: &Path) -> Result<Checkpoint, HarnessError> {
    Ok(Checkpoint::load(path)?)
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::Train(common) => {
            let cfg = resolve(&common)?;
            let g = experiments::load_data(&cfg)?;
            let start = Instant::now();
            let (_, outcome) = experiments::train(&cfg, &g, cfg.variant, Some(&cfg.out))?;
            let last = outcome.log.last();
            eprintln!(
                "trained {} epochs ({} batches) in {:.1}s{}; final loss {:.4}; wrote {}",
                outcome.epochs_run,
                outcome.log.len(),
                start.elapsed().as_secs_f64(),
                if outcome.stopped_early { ", stopped early" } else { "" },
                last.map_or(f64::NAN, |r| r.total),
                cfg.out.display()
            );
        }
        Command::Eval { common, checkpoint: path, noise } => {
            let cfg = resolve(&common)?;
            let noise = noise.unwrap_or(cfg.eval.noise);
            if !(0.0..1.0).contains(&noise) {
                return Err(ConfigError::Invalid(format!("noise ratio {noise} outside [0, 1)")).into());
            }
            let g = experiments::load_data(&cfg)?;
            let ck = checkpoint(&path)?;
            let report = experiments::evaluate(&cfg, &g, &ck.state, noise)?;
            write_json(&cfg.out.join("report.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            eprintln!("accuracy {:.4} ± {:.4} in {:.1}s", report.accuracy_mean, report.accuracy_std, report.wall_clock_secs);
        }
        Command::Generate { common, classes, per_class, p_in, p_out, feature_dim, feature_noise, split } => {
            let cfg = resolve(&common)?;
            let mut spec = cfg.data.sbm.clone();
            if let Some(c) = classes {
                spec.classes = c;
                spec.split = None;
            }
            if let Some(s) = split {
                let s: [usize; 3] = s
                    .try_into()
                    .map_err(|s: Vec<usize>| ConfigError::Invalid(format!("--split needs 3 counts, got {}", s.len())))?;
                spec.split = Some(s);
            }
            spec.per_class = per_class.unwrap_or(spec.per_class);
            spec.p_in = p_in.unwrap_or(spec.p_in);
            spec.p_out = p_out.unwrap_or(spec.p_out);
            spec.feature_dim = feature_dim.unwrap_or(spec.feature_dim);
            spec.feature_noise = feature_noise.unwrap_or(spec.feature_noise);
            spec.seed = common.seed.unwrap_or(spec.seed);
            let g = generate_sbm(&spec).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            save_graph(&g, &cfg.out)?;
            eprintln!(
                "{} nodes, {} edges, homophily {:.3}; wrote {}",
                g.num_nodes(),
                g.edges().len(),
                node_homophily(&g),
                cfg.out.display()
            );
        }
        Command::Ablate(common) => {
            let cfg = resolve(&common)?;
            let g = experiments::load_data(&cfg)?;
            let rows = experiments::ablate(&cfg, &g, Some(&cfg.out))?;
            write_json(&cfg.out.join("ablation.json"), &rows)?;
            print!("{}", experiments::render_table("variant", &rows));
        }
        Command::NoiseSweep(common) => {
            let cfg = resolve(&common)?;
            let g = experiments::load_data(&cfg)?;
            let sweep = experiments::noise_sweep(&cfg, &g, Some(&cfg.out))?;
            let rows: Vec<SummaryRow> = sweep.iter().map(|(r, report)| SummaryRow::new(format!("{r}"), report)).collect();
            write_json(&cfg.out.join("noise_sweep.json"), &rows)?;
            print!("{}", experiments::render_table("ratio", &rows));
        }
        Command::DumpEmbeddings { common, checkpoint: path, output } => {
            let cfg = resolve(&common)?;
            let g = experiments::load_data(&cfg)?;
            let ck = checkpoint(&path)?;
            let output = output.unwrap_or_else(|| cfg.out.join("embeddings.csv"));
            if let Some(dir) = output.parent() {
                fs::create_dir_all(dir).map_err(|e| HarnessError::Io(dir.display().to_string(), e))?;
            }
            experiments::dump_embeddings(&g, &ck.state, &output)?;
            eprintln!("wrote {}", output.display());
        }
        Command::Check { seeds } => {
            let results = run_all(seeds);
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            return Ok(results.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
