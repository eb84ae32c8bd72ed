//! Experiment configuration: a TOML file plus `key=value` overrides.
//!
//! Every section is optional and falls back to the defaults; unknown keys are
//! rejected. The fully resolved configuration can be written back out with
//! [`Config::to_toml`].

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::SbmSpec;
use crate::metalearner::{Architecture, EvalOptions, HyperParams, Schedule, Variant};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(String),
    #[error("override `{0}` is not of the form key.path=value")]
    Override(String),
    #[error("config: {0}")]
    Invalid(String),
}

/// Dataset directory, or the generator used when `path` is unset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub sbm: SbmSpec,
}

impl Default for DataConfig {
    /// 25 classes split 15/5/5, so that 5-way tasks can be drawn from every
    /// split, with the generator's other defaults scaled to match.
    fn default() -> Self {
        Self {
            path: None,
            sbm: SbmSpec {
                classes: 25,
                per_class: 200,
                p_in: 0.02,
                p_out: 0.00075,
                feature_dim: 25,
                feature_noise: 0.45,
                seed: 0,
                split: Some([15, 5, 5]),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_tasks: usize,
    pub repeats: usize,
    pub k_shot: usize,
    pub m_query: usize,
    /// Support noise ratio for `eval`.
    pub noise: f64,
    /// Ratios visited by `noise-sweep`.
    pub noise_ratios: Vec<f64>,
    pub embedding_metrics: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_tasks: 200,
            repeats: 10,
            k_shot: 5,
            m_query: 10,
            noise: 0.0,
            noise_ratios: vec![0.0, 0.1, 0.2, 0.3],
            embedding_metrics: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Root seed; parameter init, episode streams and evaluation tasks derive from it.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub arch: Architecture,
    pub hyper: HyperParams,
    pub variant: Variant,
    pub train: Schedule,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            arch: Architecture::default(),
            hyper: HyperParams::default(),
            variant: Variant::default(),
            train: Schedule::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string (so `data.path=runs/x` works unquoted).
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let mut table = root;
    for part in &path[..path.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("`{part}` in `{key}` is not a table")))?;
    }
    table.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl Config {
    /// Builds a configuration from optional TOML text and overrides applied in order.
    pub fn resolve(text: Option<&str>, overrides: &[String]) -> Result<Config, ConfigError> {
        let mut root: toml::Table = match text {
            Some(t) => toml::from_str(t).map_err(|e| ConfigError::Parse(e.to_string()))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: Config = toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`Config::resolve`] on the contents of `path`, if given.
    pub fn load(path: Option<&std::path::Path>, overrides: &[String]) -> Result<Config, ConfigError> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| ConfigError::Parse(format!("{}: {e}", p.display())))?),
            None => None,
        };
        Config::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: crate::metalearner::MetaError| ConfigError::Invalid(e.to_string());
        self.hyper.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        if self.arch.n_way == 0 || self.arch.embed_dim == 0 || self.arch.hidden == 0 {
            return Err(ConfigError::Invalid("arch.n_way, arch.embed_dim and arch.hidden must be positive".into()));
        }
        if self.eval.k_shot == 0 || self.eval.m_query == 0 || self.eval.n_tasks == 0 || self.eval.repeats == 0 {
            return Err(ConfigError::Invalid("eval.k_shot, eval.m_query, eval.n_tasks and eval.repeats must be positive".into()));
        }
        for &r in self.eval.noise_ratios.iter().chain([&self.eval.noise]) {
            if !(0.0..1.0).contains(&r) {
                return Err(ConfigError::Invalid(format!("noise ratio {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Evaluation settings for the test split at the given noise ratio.
    pub fn eval_options(&self, noise: f64) -> EvalOptions {
        EvalOptions {
            split: crate::graph::Split::Test,
            n_tasks: self.eval.n_tasks,
            repeats: self.eval.repeats,
            k_shot: self.eval.k_shot,
            m_query: self.eval.m_query,
            noise,
            seed: crate::episodes::derive_seed(self.seed, 3),
            embedding_metrics: self.eval.embedding_metrics,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adcore::Order;

    #[test]
    fn empty_config_is_the_defaults() {
        assert_eq!(Config::resolve(Some(""), &[]).unwrap(), Config::default());
        assert_eq!(Config::resolve(None, &[]).unwrap(), Config::default());
    }

    #[test]
    fn overrides_and_sections() {
        let text = "seed = 4\n[hyper]\nalpha = 0.2\n";
        let sets = vec!["hyper.order=\"exact\"".to_string(), "data.sbm.classes=12".into(), "out=runs/x".into()];
        let cfg = Config::resolve(Some(text), &sets).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.hyper.alpha, 0.2);
        assert_eq!(cfg.hyper.order, Order::Exact);
        assert_eq!(cfg.hyper.beta, HyperParams::default().beta);
        assert_eq!(cfg.data.sbm.classes, 12);
        assert_eq!(cfg.out, PathBuf::from("runs/x"));
        let back = Config::resolve(Some(&cfg.to_toml()), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Config::resolve(Some("sed = 1"), &[]), Err(ConfigError::Parse(_))));
        assert!(matches!(Config::resolve(Some("[hyper]\nalpa = 1.0"), &[]), Err(ConfigError::Parse(_))));
        assert!(matches!(Config::resolve(None, &["hyper.alpha".into()]), Err(ConfigError::Override(_))));
        assert!(matches!(Config::resolve(None, &["hyper.tau=0".into()]), Err(ConfigError::Invalid(_))));
        assert!(matches!(Config::resolve(Some("seed = 1"), &["seed.x=1".into()]), Err(ConfigError::Invalid(_))));
    }
}
