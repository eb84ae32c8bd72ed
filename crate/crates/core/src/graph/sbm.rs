use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClassSplit, Graph, GraphError};
use crate::adcore::Tensor;

/// Stochastic block model with class-mean features on orthogonal axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SbmSpec {
    pub classes: usize,
    pub per_class: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
    /// Class counts for (train, val, test); `None` means a 60/20/20 split.
    pub split: Option<[usize; 3]>,
}

impl Default for SbmSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 200,
            p_in: 0.02,
            p_out: 0.002,
            feature_dim: 16,
            feature_noise: 0.5,
            seed: 0,
            split: None,
        }
    }
}

impl SbmSpec {
    fn split_counts(&self) -> [usize; 3] {
        self.split.unwrap_or_else(|| {
            let train = (self.classes as f64 * 0.6).round() as usize;
            let val = (self.classes as f64 * 0.2).round() as usize;
            [train, val, self.classes.saturating_sub(train + val)]
        })
    }
}

/// Samples a graph: node `c * per_class + i` belongs to class `c`; each pair is
/// joined with probability `p_in` (same class) or `p_out` (different classes).
/// Classes `0..train` go to the training split, then validation, then test.
pub fn generate_sbm(spec: &SbmSpec) -> Result<Graph, GraphError> {
    for (name, p) in [("p_in", spec.p_in), ("p_out", spec.p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(GraphError::Invalid(format!("{name} = {p} outside [0, 1]")));
        }
    }
    if spec.per_class == 0 || spec.classes == 0 {
        return Err(GraphError::Invalid("need at least one class with one node".into()));
    }
    if spec.feature_dim < spec.classes {
        return Err(GraphError::Invalid(format!(
            "feature_dim {} < classes {}: class means cannot be orthogonal",
            spec.feature_dim, spec.classes
        )));
    }
    if !(spec.feature_noise >= 0.0 && spec.feature_noise.is_finite()) {
        return Err(GraphError::Invalid(format!("feature_noise {} must be finite and >= 0", spec.feature_noise)));
    }
    let [n_train, n_val, n_test] = spec.split_counts();
    if n_train + n_val + n_test != spec.classes {
        return Err(GraphError::Invalid(format!(
            "split {n_train}/{n_val}/{n_test} does not cover {} classes",
            spec.classes
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.classes * spec.per_class;
    let labels: Vec<usize> = (0..n).map(|v| v / spec.per_class).collect();

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] { spec.p_in } else { spec.p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let d = spec.feature_dim;
    let mut values = Vec::with_capacity(n * d);
    for &y in &labels {
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let mean = if j == y { 1.0 } else { 0.0 };
            values.push(mean + spec.feature_noise * noise);
        }
    }
    let features = Tensor::new(vec![n, d], values).map_err(|e| GraphError::Invalid(e.to_string()))?;

    let split = ClassSplit {
        train: (0..n_train).collect(),
        val: (n_train..n_train + n_val).collect(),
        test: (n_train + n_val..spec.classes).collect(),
    };
    Graph::new(n, edges, features, labels, split)
}
