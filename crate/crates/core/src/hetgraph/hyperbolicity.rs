//! Gromov δ-hyperbolicity by the four-point condition.

use std::collections::VecDeque;

use super::{GraphError, MetaPathSubgraph, Result};
use crate::sparse::Csr;

pub const DEFAULT_HYPERBOLICITY_CAP: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperbolicity {
    pub delta: f64,
    /// Node count of the largest connected component that was measured.
    pub component_size: usize,
    /// Set when the component has fewer than four nodes (δ reported as 0).
    pub degenerate: bool,
}

/// δ of the largest connected component, refusing components above
/// [`DEFAULT_HYPERBOLICITY_CAP`] nodes.
pub fn gromov_hyperbolicity(sub: &MetaPathSubgraph) -> Result<Hyperbolicity> {
    gromov_hyperbolicity_capped(sub, DEFAULT_HYPERBOLICITY_CAP)
}

pub fn gromov_hyperbolicity_capped(sub: &MetaPathSubgraph, cap: usize) -> Result<Hyperbolicity> {
    let adj = sub.edges();
    let comp = largest_component(adj);
    let n = comp.len();
    if n < 4 {
        return Ok(Hyperbolicity {
            delta: 0.0,
            component_size: n,
            degenerate: true,
        });
    }
    if n > cap {
        return Err(GraphError::TooLarge { size: n, cap });
    }

    let mut local = vec![usize::MAX; adj.num_rows()];
    for (k, &v) in comp.iter().enumerate() {
        local[v] = k;
    }
    let mut dist = vec![0u32; n * n];
    let mut queue = VecDeque::new();
    for s in 0..n {
        let row = &mut dist[s * n..(s + 1) * n];
        row.fill(u32::MAX);
        row[s] = 0;
        queue.push_back(comp[s]);
        while let Some(u) = queue.pop_front() {
            let du = row[local[u]];
            for &w in adj.row(u) {
                let lw = local[w];
                if row[lw] == u32::MAX {
                    row[lw] = du + 1;
                    queue.push_back(w);
                }
            }
        }
    }

    let d = |a: usize, b: usize| dist[a * n + b] as u64;
    let mut best = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            let dij = d(i, j);
            for k in j + 1..n {
                let dik = d(i, k);
                let djk = d(j, k);
                for l in k + 1..n {
                    let mut s = [dij + d(k, l), dik + d(j, l), d(i, l) + djk];
                    s.sort_unstable();
                    best = best.max(s[2] - s[1]);
                }
            }
        }
    }
    Ok(Hyperbolicity {
        delta: best as f64 / 2.0,
        component_size: n,
        degenerate: false,
    })
}

/// Nodes of the largest connected component, ascending. Ties go to the
/// component containing the smallest node id.
fn largest_component(adj: &Csr) -> Vec<usize> {
    let n = adj.num_rows();
    let mut seen = vec![false; n];
    let mut best: Vec<usize> = Vec::new();
    let mut stack = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut comp = vec![s];
        seen[s] = true;
        stack.push(s);
        while let Some(u) = stack.pop() {
            for &w in adj.row(u) {
                if !seen[w] {
                    seen[w] = true;
                    comp.push(w);
                    stack.push(w);
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best.sort_unstable();
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sub(n: usize, pairs: &[(usize, usize)]) -> MetaPathSubgraph {
        MetaPathSubgraph::from_pairs("t", 0, n, pairs)
    }

    #[test]
    fn path_is_zero_cycle_is_one() {
        let p = sub(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        assert_eq!(gromov_hyperbolicity(&p).unwrap().delta, 0.0);
        let c = sub(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]);
        assert_eq!(gromov_hyperbolicity(&c).unwrap().delta, 1.0);
    }

    #[test]
    fn uses_largest_component() {
        // triangle-free 4-cycle plus a disjoint edge
        let g = sub(6, &[(0, 1), (1, 2), (2, 3), (3, 0), (4, 5)]);
        let h = gromov_hyperbolicity(&g).unwrap();
        assert_eq!((h.delta, h.component_size), (1.0, 4));
    }

    #[test]
    fn small_component_flagged() {
        let g = sub(5, &[(0, 1), (1, 2)]);
        let h = gromov_hyperbolicity(&g).unwrap();
        assert!(h.degenerate);
        assert_eq!(h.delta, 0.0);
    }

    #[test]
    fn cap_refuses() {
        let pairs: Vec<_> = (0..9).map(|i| (i, i + 1)).collect();
        let g = sub(10, &pairs);
        assert!(matches!(gromov_hyperbolicity_capped(&g, 5), Err(GraphError::TooLarge { size: 10, cap: 5 })));
    }
}
