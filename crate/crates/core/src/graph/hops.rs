use std::sync::Arc;

use super::{GraphError, SparseMatrix};

/// Largest supported hop index.
pub const MAX_HOPS: usize = 3;

/// Binary adjacency of exact-distance-`hop` neighbours: entry `(u, v)` is 1 iff
/// the shortest path from `u` to `v` has length `hop`. The diagonal is empty.
///
/// For hops 1 and 2 this is `1(A - I > 0)` and `1(A^2 - A - I > 0)` with pairs
/// already at distance 1 removed.
pub fn hop_adjacency(a: &SparseMatrix, hop: usize) -> Result<SparseMatrix, GraphError> {
    if hop == 0 || hop > MAX_HOPS {
        return Err(GraphError::Invalid(format!("hop index {hop} outside 1..={MAX_HOPS}")));
    }
    if a.n_rows() != a.n_cols() {
        return Err(GraphError::Invalid("adjacency must be square".into()));
    }
    let n = a.n_rows();
    let mut triplets = Vec::new();
    // Depth-limited BFS from every node; `stamp` avoids clearing a visited array.
    let mut stamp = vec![usize::MAX; n];
    let mut frontier = Vec::new();
    let mut next = Vec::new();
    for s in 0..n {
        stamp[s] = s;
        frontier.clear();
        frontier.push(s);
        for _ in 0..hop {
            next.clear();
            for &u in &frontier {
                for &v in a.row_cols(u) {
                    if stamp[v] != s {
                        stamp[v] = s;
                        next.push(v);
                    }
                }
            }
            std::mem::swap(&mut frontier, &mut next);
        }
        triplets.extend(frontier.iter().map(|&v| (s, v, 1.0)));
    }
    Ok(SparseMatrix::from_triplets(n, n, triplets))
}

/// `D^{-1/2} B D^{-1/2}` with degrees taken from `b`; rows of degree-0 nodes stay empty.
pub fn sym_normalize(b: &SparseMatrix) -> SparseMatrix {
    let deg: Vec<f64> = (0..b.n_rows()).map(|r| b.row_entries(r).map(|(_, v)| v).sum()).collect();
    let triplets = b
        .triplets()
        .into_iter()
        .map(|(r, c, v)| (r, c, v / (deg[r] * deg[c]).sqrt()))
        .collect();
    SparseMatrix::from_triplets(b.n_rows(), b.n_cols(), triplets)
}

/// Self-loop normalization used by simplified graph convolution:
/// `(D + I)^{-1/2} (A + I) (D + I)^{-1/2}`.
pub fn sgc_normalize(a: &SparseMatrix) -> SparseMatrix {
    let n = a.n_rows();
    let mut triplets = a.triplets();
    triplets.extend((0..n).map(|i| (i, i, 1.0)));
    sym_normalize(&SparseMatrix::from_triplets(n, n, triplets))
}

/// Normalized hop matrices for hops `1..=hops`.
pub fn normalized_hops(a: &SparseMatrix, hops: usize) -> Result<Vec<Arc<SparseMatrix>>, GraphError> {
    (1..=hops).map(|i| Ok(Arc::new(sym_normalize(&hop_adjacency(a, i)?)))).collect()
}
