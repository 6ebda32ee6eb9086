use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Unweighted sparse adjacency in compressed-row form.
///
/// Edge `(i, j)` is stored in row `i`; message passing aggregates row `i`'s
/// neighbours into node `i`. Columns within a row are sorted and unique.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    symmetric: bool,
    self_loops: bool,
}

impl SparseAdjacency {
    /// Builds from directed pairs. Duplicates are dropped. When `symmetric`
    /// is set, every pair must have its reverse present.
    pub fn from_edges(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        symmetric: bool,
    ) -> Result<Self> {
        let mut pairs: Vec<(usize, usize)> = edges.into_iter().collect();
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
            return Err(Error::Structural(format!(
                "edge ({i}, {j}) out of range for n={n}"
            )));
        }
        pairs.sort_unstable();
        pairs.dedup();
        let adj = Self::from_sorted(n, &pairs, symmetric);
        if symmetric {
            if let Some((i, j)) = adj.edges().find(|&(i, j)| !adj.has_edge(j, i)) {
                return Err(Error::Structural(format!(
                    "symmetric adjacency is missing ({j}, {i}) for ({i}, {j})"
                )));
            }
        }
        Ok(adj)
    }

    /// Builds from pairs and adds every reverse pair.
    pub fn from_edges_symmetrized(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut all = Vec::new();
        for (i, j) in edges {
            all.push((i, j));
            all.push((j, i));
        }
        Self::from_edges(n, all, true)
    }

    fn from_sorted(n: usize, pairs: &[(usize, usize)], symmetric: bool) -> Self {
        let mut row_ptr = vec![0; n + 1];
        for &(i, _) in pairs {
            row_ptr[i + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let cols = pairs.iter().map(|&(_, j)| j).collect();
        let mut adj = Self {
            n,
            row_ptr,
            cols,
            symmetric,
            self_loops: false,
        };
        adj.self_loops = (0..n).all(|i| adj.has_edge(i, i));
        adj
    }

    pub fn empty(n: usize) -> Self {
        Self::from_sorted(n, &[], true)
    }

    pub fn identity(n: usize) -> Self {
        let pairs: Vec<_> = (0..n).map(|i| (i, i)).collect();
        Self::from_sorted(n, &pairs, true)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of stored directed pairs.
    pub fn num_edges(&self) -> usize {
        self.cols.len()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// True when `(i, i)` is present for every node.
    pub fn has_self_loops(&self) -> bool {
        self.self_loops
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i < self.n && self.neighbors(i).binary_search(&j).is_ok()
    }

    /// Directed pairs in row-major order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| self.neighbors(i).iter().map(move |&j| (i, j)))
    }

    /// Row index of every stored edge, aligned with [`cols`](Self::cols).
    pub fn edge_rows(&self) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.cols.len());
        for i in 0..self.n {
            rows.extend(std::iter::repeat_n(i, self.degree(i)));
        }
        rows
    }

    /// Adds `(i, i)` for every node. Idempotent.
    pub fn with_self_loops(&self) -> Self {
        if self.self_loops {
            return self.clone();
        }
        let mut pairs: Vec<_> = self.edges().chain((0..self.n).map(|i| (i, i))).collect();
        pairs.sort_unstable();
        pairs.dedup();
        Self::from_sorted(self.n, &pairs, self.symmetric)
    }

    /// Full `(i,j) ⇔ (j,i)` scan, independent of the stored flag.
    pub fn check_symmetric(&self) -> bool {
        self.edges().all(|(i, j)| self.has_edge(j, i))
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n, self.n]);
        for (i, j) in self.edges() {
            t.set(i, j, 1.0);
        }
        t
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let mut pairs: Vec<_> = self.edges().map(|(i, j)| (perm[i], perm[j])).collect();
        pairs.sort_unstable();
        Self::from_sorted(self.n, &pairs, self.symmetric)
    }

    /// `D̂^{-1/2} Â D̂^{-1/2}` edge weights aligned with the stored edges,
    /// where `D̂` is the row degree of this adjacency.
    pub fn sym_norm_weights(&self) -> Vec<f64> {
        let inv_sqrt: Vec<f64> = (0..self.n)
            .map(|i| match self.degree(i) {
                0 => 0.0,
                d => 1.0 / (d as f64).sqrt(),
            })
            .collect();
        self.edges().map(|(i, j)| inv_sqrt[i] * inv_sqrt[j]).collect()
    }
}

/// Adds self-loops; see [`SparseAdjacency::with_self_loops`].
pub fn add_self_loops(adj: &SparseAdjacency) -> SparseAdjacency {
    adj.with_self_loops()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> SparseAdjacency {
        SparseAdjacency::from_edges_symmetrized(3, [(0, 1), (1, 2), (0, 2)]).unwrap()
    }

    #[test]
    fn self_loops_on_empty_graph() {
        let adj = add_self_loops(&SparseAdjacency::empty(2));
        assert_eq!(adj.edges().collect::<Vec<_>>(), vec![(0, 0), (1, 1)]);
        assert!(adj.has_self_loops());
    }

    #[test]
    fn self_loops_idempotent_and_triangle_count() {
        let looped = add_self_loops(&triangle());
        assert_eq!(looped.num_edges(), 9);
        assert_eq!(add_self_loops(&looped), looped);
    }

    #[test]
    fn out_of_range_edge_is_structural() {
        let err = SparseAdjacency::from_edges(3, [(0, 5)], false).unwrap_err();
        assert!(matches!(err, Error::Structural(_)));
    }

    #[test]
    fn symmetric_flag_is_validated() {
        assert!(SparseAdjacency::from_edges(3, [(0, 1)], true).is_err());
        let adj = triangle();
        assert!(adj.is_symmetric() && adj.check_symmetric());
    }

    #[test]
    fn duplicates_are_dropped() {
        let adj = SparseAdjacency::from_edges(2, [(0, 1), (0, 1), (1, 0)], true).unwrap();
        assert_eq!(adj.num_edges(), 2);
    }
}
