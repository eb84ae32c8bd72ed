//! Attributed undirected graphs: storage, hop adjacency, normalization,
//! homophily, synthetic generation and on-disk datasets.

mod hops;
mod io;
mod sbm;
mod sparse;

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adcore::Tensor;

pub use hops::{hop_adjacency, normalized_hops, sgc_normalize, sym_normalize, MAX_HOPS};
pub use io::{load_graph, save_graph};
pub use sbm::{generate_sbm, SbmSpec};
pub use sparse::SparseMatrix;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}: {msg} at line {line}")]
    Parse { file: String, line: usize, msg: String },
    #[error("{file}: self-loop at line {line}")]
    SelfLoop { file: String, line: usize },
    #[error("{file}: duplicate edge at line {line}")]
    DuplicateEdge { file: String, line: usize },
    #[error("class {class} not in any split")]
    ClassNotInSplit { class: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Which class partition an episode draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Disjoint class-id sets for meta-training, validation and meta-testing.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClassSplit {
    pub fn classes(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, class: usize) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test].into_iter().find(|&s| self.classes(s).contains(&class))
    }

    fn validate(&self) -> Result<(), GraphError> {
        let mut seen = HashSet::new();
        for c in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(*c) {
                return Err(GraphError::Invalid(format!("class {c} appears in more than one split")));
            }
        }
        Ok(())
    }
}

/// Undirected attributed graph with class-level splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    features: Tensor,
    labels: Vec<usize>,
    split: ClassSplit,
    adjacency: SparseMatrix,
}

impl Graph {
    /// Validates and builds a graph. Edges must satisfy `u < v`, be unique and
    /// in range; every label must belong to exactly one split.
    pub fn new(
        n: usize,
        mut edges: Vec<(usize, usize)>,
        features: Tensor,
        labels: Vec<usize>,
        split: ClassSplit,
    ) -> Result<Self, GraphError> {
        if features.rank() != 2 || features.rows() != n {
            return Err(GraphError::Invalid(format!(
                "feature matrix shape {:?} does not match {n} nodes",
                features.shape()
            )));
        }
        if labels.len() != n {
            return Err(GraphError::Invalid(format!("{} labels for {n} nodes", labels.len())));
        }
        split.validate()?;
        for &y in &labels {
            if split.split_of(y).is_none() {
                return Err(GraphError::ClassNotInSplit { class: y });
            }
        }
        let mut seen = HashSet::with_capacity(edges.len());
        for &(u, v) in &edges {
            if u == v {
                return Err(GraphError::Invalid(format!("self-loop on node {u}")));
            }
            if u > v {
                return Err(GraphError::Invalid(format!("edge ({u}, {v}) must satisfy u < v")));
            }
            if v >= n {
                return Err(GraphError::Invalid(format!("edge ({u}, {v}) references a node >= {n}")));
            }
            if !seen.insert((u, v)) {
                return Err(GraphError::Invalid(format!("duplicate edge ({u}, {v})")));
            }
        }
        edges.sort_unstable();
        let adjacency = SparseMatrix::from_undirected_edges(n, &edges);
        Ok(Self { n, edges, features, labels, split, adjacency })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_split(&self) -> &ClassSplit {
        &self.split
    }

    pub fn adjacency(&self) -> &SparseMatrix {
        &self.adjacency
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        self.adjacency.row_cols(v)
    }

    /// Node ids whose label is in `classes`, ascending.
    pub fn nodes_in(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.n).filter(|&v| classes.contains(&self.labels[v])).collect()
    }

    pub fn nodes_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.n).filter(|&v| self.labels[v] == class).collect()
    }

    /// Relabels nodes: node `v` of `self` becomes node `perm[v]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Graph, GraphError> {
        if perm.len() != self.n {
            return Err(GraphError::Invalid("permutation length differs from node count".into()));
        }
        let edges = self
            .edges
            .iter()
            .map(|&(u, v)| {
                let (a, b) = (perm[u], perm[v]);
                (a.min(b), a.max(b))
            })
            .collect();
        let d = self.feature_dim();
        let mut features = Tensor::zeros(&[self.n, d]);
        let mut labels = vec![0; self.n];
        for v in 0..self.n {
            for j in 0..d {
                features.set(perm[v], j, self.features.get(v, j));
            }
            labels[perm[v]] = self.labels[v];
        }
        Graph::new(self.n, edges, features, labels, self.split.clone())
    }
}

/// Mean over nodes of the fraction of neighbours sharing the node's label.
/// Isolated nodes contribute 0 and still count in the mean.
pub fn node_homophily(g: &Graph) -> f64 {
    if g.num_nodes() == 0 {
        return 0.0;
    }
    let total: f64 = (0..g.num_nodes())
        .map(|v| {
            let nbrs = g.neighbors(v);
            if nbrs.is_empty() {
                return 0.0;
            }
            let same = nbrs.iter().filter(|&&u| g.labels()[u] == g.labels()[v]).count();
            same as f64 / nbrs.len() as f64
        })
        .sum();
    total / g.num_nodes() as f64
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn split_all_train(classes: &[usize]) -> ClassSplit {
        ClassSplit { train: classes.to_vec(), val: vec![], test: vec![] }
    }

    pub(crate) fn small_graph(n: usize, edges: &[(usize, usize)], labels: &[usize]) -> Graph {
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        Graph::new(n, edges.to_vec(), Tensor::ones(&[n, 1]), labels.to_vec(), split_all_train(&classes)).unwrap()
    }

    #[test]
    fn homophily_hand_cases() {
        let same = small_graph(3, &[(0, 1), (1, 2)], &[4, 4, 4]);
        assert_eq!(node_homophily(&same), 1.0);
        let pair = small_graph(2, &[(0, 1)], &[0, 1]);
        assert_eq!(node_homophily(&pair), 0.0);
        let tri = small_graph(3, &[(0, 1), (0, 2), (1, 2)], &[0, 0, 1]);
        assert!((node_homophily(&tri) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_edges() {
        let f = Tensor::ones(&[3, 1]);
        let s = split_all_train(&[0]);
        assert!(Graph::new(3, vec![(1, 1)], f.clone(), vec![0; 3], s.clone()).is_err());
        assert!(Graph::new(3, vec![(2, 1)], f.clone(), vec![0; 3], s.clone()).is_err());
        assert!(Graph::new(3, vec![(0, 1), (0, 1)], f.clone(), vec![0; 3], s.clone()).is_err());
        assert!(Graph::new(3, vec![(0, 3)], f, vec![0; 3], s).is_err());
    }

    #[test]
    fn every_label_needs_a_split() {
        let err = Graph::new(2, vec![], Tensor::ones(&[2, 1]), vec![0, 7], split_all_train(&[0])).unwrap_err();
        assert_eq!(err.to_string(), "class 7 not in any split");
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let s = ClassSplit { train: vec![0, 1], val: vec![1], test: vec![] };
        assert!(Graph::new(1, vec![], Tensor::ones(&[1, 1]), vec![0], s).is_err());
    }
}
