use serde::{Deserialize, Serialize};

use crate::adcore::Tensor;

/// Compressed-row sparse matrix with strictly increasing column indices per row
/// and no stored zeros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed, zeros dropped.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            assert!(r < n_rows && c < n_cols, "triplet ({r}, {c}) outside {n_rows}x{n_cols}");
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        merged.retain(|t| t.2 != 0.0);

        let mut row_ptr = vec![0; n_rows + 1];
        for &(r, _, _) in &merged {
            row_ptr[r + 1] += 1;
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx: merged.iter().map(|t| t.1).collect(),
            values: merged.iter().map(|t| t.2).collect(),
        }
    }

    /// Binary symmetric adjacency from an undirected edge list.
    pub fn from_undirected_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let triplets = edges.iter().flat_map(|&(u, v)| [(u, v, 1.0), (v, u, 1.0)]).collect();
        Self::from_triplets(n, n, triplets)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self::from_triplets(n_rows, n_cols, Vec::new())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn row_cols(&self, r: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let cols = self.row_cols(r);
        match cols.binary_search(&c) {
            Ok(k) => self.values[self.row_ptr[r] + k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n_rows).flat_map(|r| self.row_entries(r).map(move |(c, v)| (r, c, v))).collect()
    }

    pub fn transpose(&self) -> Self {
        let triplets = self.triplets().into_iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.n_cols, self.n_rows, triplets)
    }

    pub fn is_symmetric(&self) -> bool {
        self.n_rows == self.n_cols && self.triplets().iter().all(|&(r, c, v)| self.get(c, r) == v)
    }

    pub fn has_zero_diagonal(&self) -> bool {
        (0..self.n_rows.min(self.n_cols)).all(|i| self.get(i, i) == 0.0)
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 1.0)
    }

    /// Keeps the given rows (in order) and remaps columns through `col_map`;
    /// entries whose column maps to `None` are dropped.
    pub fn restrict(&self, rows: &[usize], col_map: &[Option<usize>], n_cols: usize) -> Self {
        let mut triplets = Vec::new();
        for (new_r, &r) in rows.iter().enumerate() {
            for (c, v) in self.row_entries(r) {
                if let Some(nc) = col_map[c] {
                    triplets.push((new_r, nc, v));
                }
            }
        }
        Self::from_triplets(rows.len(), n_cols, triplets)
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n_rows, self.n_cols]);
        for (r, c, v) in self.triplets() {
            t.set(r, c, v);
        }
        t
    }
}
