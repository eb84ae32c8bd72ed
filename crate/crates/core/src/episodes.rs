//! N-way K-shot episode sampling, out-of-task pools and support-set noise.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Split};

#[derive(Debug, Error, PartialEq)]
pub enum EpisodeError {
    #[error("{split:?} split has {have} classes, episode needs {need}")]
    NotEnoughClasses { split: Split, have: usize, need: usize },
    #[error("class {class} has {have} nodes, episode needs {need}")]
    ClassTooSmall { class: usize, have: usize, need: usize },
    #[error("no donor nodes outside class {class}")]
    NoDonors { class: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Shape of the episodes drawn from a split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub pool_cap: usize,
}

/// One few-shot task. Pairs are `(node, label)`; support lists class by
/// class in `classes` order, K entries each, and likewise query with M.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
    pub pool: Vec<usize>,
}

impl Episode {
    pub fn support_nodes(&self) -> Vec<usize> {
        self.support.iter().map(|p| p.0).collect()
    }

    pub fn query_nodes(&self) -> Vec<usize> {
        self.query.iter().map(|p| p.0).collect()
    }

    /// Position of `label` in `classes`.
    pub fn class_index(&self, label: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }

    /// Support labels as positions in `classes`.
    pub fn support_targets(&self) -> Vec<usize> {
        self.support.iter().map(|p| self.class_index(p.1).expect("support label in classes")).collect()
    }

    pub fn query_targets(&self) -> Vec<usize> {
        self.query.iter().map(|p| self.class_index(p.1).expect("query label in classes")).collect()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("episodes always serialize")
    }
}

/// Independent sub-seed for item `index` of a stream seeded with `seed`
/// (SplitMix64 finalizer over a Weyl sequence).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_episode(g: &Graph, split: Split, shape: TaskShape, seed: u64) -> Result<Episode, EpisodeError> {
    let TaskShape { n_way, k_shot, m_query, pool_cap } = shape;
    if n_way == 0 || k_shot == 0 {
        return Err(EpisodeError::Invalid("episodes need n_way >= 1 and k_shot >= 1".into()));
    }
    let split_classes = g.class_split().classes(split);
    if split_classes.len() < n_way {
        return Err(EpisodeError::NotEnoughClasses { split, have: split_classes.len(), need: n_way });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<usize> =
        sample(&mut rng, split_classes.len(), n_way).into_iter().map(|i| split_classes[i]).collect();

    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * m_query);
    for &c in &classes {
        let members = g.nodes_of_class(c);
        let need = k_shot + m_query;
        if members.len() < need {
            return Err(EpisodeError::ClassTooSmall { class: c, have: members.len(), need });
        }
        let picked: Vec<usize> = sample(&mut rng, members.len(), need).into_iter().map(|i| members[i]).collect();
        support.extend(picked[..k_shot].iter().map(|&v| (v, c)));
        query.extend(picked[k_shot..].iter().map(|&v| (v, c)));
    }

    let used: HashSet<usize> = support.iter().chain(&query).map(|p| p.0).collect();
    let candidates: Vec<usize> =
        g.nodes_in(split_classes).into_iter().filter(|v| !used.contains(v)).collect();
    let take = pool_cap.min(candidates.len());
    let mut pool: Vec<usize> = sample(&mut rng, candidates.len(), take).into_iter().map(|i| candidates[i]).collect();
    pool.sort_unstable();

    Ok(Episode { classes, support, query, pool })
}

/// Number of support slots per class replaced at noise `ratio` with `k_shot`
/// examples: `floor(ratio * k_shot)`, with a tolerance of 1e-9 so that ratios
/// such as 0.3 with K = 10 are not pushed below the intended count by rounding.
pub fn noisy_count(ratio: f64, k_shot: usize) -> usize {
    (ratio * k_shot as f64 + 1e-9).floor() as usize
}

/// Replaces `noisy_count(ratio, K)` support nodes of every class by nodes of
/// other classes from the same split. Replacements keep the original label.
pub fn inject_noise(g: &Graph, ep: &Episode, ratio: f64, seed: u64) -> Result<Episode, EpisodeError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(EpisodeError::Invalid(format!("noise ratio {ratio} outside [0, 1)")));
    }
    let n_way = ep.classes.len();
    if n_way == 0 || ep.support.len() % n_way != 0 {
        return Err(EpisodeError::Invalid("support is not K entries per class".into()));
    }
    let k_shot = ep.support.len() / n_way;
    let count = noisy_count(ratio, k_shot);
    if count == 0 {
        return Ok(ep.clone());
    }
    let split = g
        .class_split()
        .split_of(ep.classes[0])
        .ok_or_else(|| EpisodeError::Invalid(format!("class {} not in any split", ep.classes[0])))?;
    let split_nodes = g.nodes_in(g.class_split().classes(split));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used: HashSet<usize> = ep.support.iter().chain(&ep.query).map(|p| p.0).collect();
    let mut out = ep.clone();
    for (ci, &c) in ep.classes.iter().enumerate() {
        let donors: Vec<usize> =
            split_nodes.iter().copied().filter(|&v| g.labels()[v] != c && !used.contains(&v)).collect();
        if donors.len() < count {
            return Err(EpisodeError::NoDonors { class: c });
        }
        let slots = sample(&mut rng, k_shot, count);
        let picks = sample(&mut rng, donors.len(), count);
        for (slot, pick) in slots.into_iter().zip(picks) {
            let donor = donors[pick];
            used.insert(donor);
            out.support[ci * k_shot + slot] = (donor, c);
        }
    }
    out.pool.retain(|v| !used.contains(v));
    Ok(out)
}

/// Reproducible stream of episode batches. Episode `j` of the stream is drawn
/// with `derive_seed(seed, j)`, so a stream can resume at any batch.
#[derive(Clone, Debug)]
pub struct EpisodeStream<'g> {
    graph: &'g Graph,
    split: Split,
    shape: TaskShape,
    batch_size: usize,
    seed: u64,
    next_episode: u64,
}

pub fn episode_stream(g: &Graph, split: Split, shape: TaskShape, batch_size: usize, seed: u64) -> EpisodeStream<'_> {
    EpisodeStream { graph: g, split, shape, batch_size, seed, next_episode: 0 }
}

impl EpisodeStream<'_> {
    /// Skips ahead so the next batch is batch number `batches` of the stream.
    pub fn seek_batch(&mut self, batches: u64) {
        self.next_episode = batches * self.batch_size as u64;
    }

    pub fn batches_done(&self) -> u64 {
        self.next_episode / self.batch_size.max(1) as u64
    }
}

impl Iterator for EpisodeStream<'_> {
    type Item = Result<Vec<Episode>, EpisodeError>;

    fn next(&mut self) -> Option<Self::Item> {
        let start = self.next_episode;
        self.next_episode += self.batch_size as u64;
        Some(
            (start..start + self.batch_size as u64)
                .map(|j| sample_episode(self.graph, self.split, self.shape, derive_seed(self.seed, j)))
                .collect(),
        )
    }
}
