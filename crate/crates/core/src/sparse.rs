//! Compressed sparse row (CSR) adjacency patterns.

/// Row-compressed sparsity pattern: `indices[offsets[i]..offsets[i + 1]]`
/// are the column indices of row `i`, sorted ascending without duplicates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Csr {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl Csr {
    /// Empty pattern with `n` rows.
    pub fn empty(n: usize) -> Self {
        Self {
            offsets: vec![0; n + 1],
            indices: Vec::new(),
        }
    }

    /// Builds a pattern from per-row neighbor lists. Lists are sorted and
    /// de-duplicated.
    pub fn from_lists(mut lists: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for list in lists.iter_mut() {
            list.sort_unstable();
            list.dedup();
            indices.extend_from_slice(list);
            offsets.push(indices.len());
        }
        Self { offsets, indices }
    }

    /// Symmetric pattern on `n` nodes from undirected pairs. Self-loops are
    /// dropped; the number dropped is returned alongside.
    pub fn symmetric_from_pairs(n: usize, pairs: &[(usize, usize)]) -> (Self, usize) {
        let mut lists = vec![Vec::new(); n];
        let mut self_loops = 0;
        for &(u, v) in pairs {
            if u == v {
                self_loops += 1;
                continue;
            }
            lists[u].push(v);
            lists[v].push(u);
        }
        (Self::from_lists(lists), self_loops)
    }

    pub fn num_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of stored (directed) entries.
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    #[inline]
    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.row(i).binary_search(&j).is_ok()
    }

    /// Undirected edges `(u, v)` with `u < v`, in row-major order.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.nnz() / 2);
        for u in 0..self.num_rows() {
            for &v in self.row(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.num_rows()).all(|i| self.row(i).iter().all(|&j| self.contains(j, i)))
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}
