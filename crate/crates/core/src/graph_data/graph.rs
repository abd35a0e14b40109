use std::sync::Arc;

use crate::diffcore::DenseArray;
use crate::error::{Error, Result};

/// Static road network. The adjacency is symmetric and carries a self-loop
/// on every node; its magnitudes are only used as a connectivity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficGraph {
    pub city_id: String,
    n_nodes: usize,
    edges: Vec<(usize, usize, f64)>,
    adjacency: DenseArray,
    pub interval_minutes: u32,
    neighbors: Vec<Vec<usize>>,
}

/// Destination-sorted edge list of a graph replicated over `copies`
/// disjoint blocks of `n` rows, as consumed by the attention layer.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub n_nodes: usize,
    pub copies: usize,
    /// Source (neighbor) row of each edge.
    pub src: Arc<[usize]>,
    /// Destination (aggregating) row of each edge.
    pub dst: Arc<[usize]>,
    /// Edges of destination row `r` occupy `offsets[r]..offsets[r + 1]`.
    pub offsets: Arc<[usize]>,
}

impl TrafficGraph {
    /// Builds the graph from raw `(src, dst, weight)` records: the
    /// adjacency is symmetrized with `max(W, Wᵀ)` and a unit self-loop is
    /// added where the diagonal is empty.
    pub fn new(
        city_id: impl Into<String>,
        n_nodes: usize,
        edges: Vec<(usize, usize, f64)>,
        interval_minutes: u32,
    ) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::contract("graph needs at least one node"));
        }
        if interval_minutes == 0 {
            return Err(Error::contract("interval_minutes must be positive"));
        }
        let mut w = vec![0.0f64; n_nodes * n_nodes];
        for &(s, d, weight) in &edges {
            if s >= n_nodes || d >= n_nodes {
                return Err(Error::contract(format!(
                    "edge ({s}, {d}) outside [0, {n_nodes})"
                )));
            }
            if !(weight >= 0.0) || !weight.is_finite() {
                return Err(Error::contract(format!("edge ({s}, {d}) has weight {weight}")));
            }
            let m = w[s * n_nodes + d].max(weight);
            w[s * n_nodes + d] = m;
            w[d * n_nodes + s] = m;
        }
        for i in 0..n_nodes {
            if w[i * n_nodes + i] == 0.0 {
                w[i * n_nodes + i] = 1.0;
            }
        }
        let neighbors = (0..n_nodes)
            .map(|i| (0..n_nodes).filter(|&j| w[i * n_nodes + j] > 0.0).collect())
            .collect();
        Ok(TrafficGraph {
            city_id: city_id.into(),
            n_nodes,
            edges,
            adjacency: DenseArray::matrix_unchecked(n_nodes, n_nodes, w),
            interval_minutes,
            neighbors,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Edge records as loaded.
    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    /// Distinct undirected links between different nodes.
    pub fn n_edges(&self) -> usize {
        let n = self.n_nodes;
        let w = self.adjacency.data();
        (0..n)
            .map(|i| (i + 1..n).filter(|&j| w[i * n + j] > 0.0).count())
            .sum()
    }

    pub fn adjacency(&self) -> &DenseArray {
        &self.adjacency
    }

    /// `N_i`, sorted, including `i` itself.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n_nodes];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Row-normalized adjacency `D⁻¹W`.
    pub fn transition(&self) -> DenseArray {
        let n = self.n_nodes;
        let mut p = self.adjacency.data().to_vec();
        for row in p.chunks_mut(n) {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= total);
        }
        DenseArray::matrix_unchecked(n, n, p)
    }

    pub fn edge_index(&self, copies: usize) -> EdgeIndex {
        let n = self.n_nodes;
        let per_copy: usize = self.neighbors.iter().map(Vec::len).sum();
        let mut src = Vec::with_capacity(per_copy * copies);
        let mut dst = Vec::with_capacity(per_copy * copies);
        let mut offsets = Vec::with_capacity(n * copies + 1);
        offsets.push(0);
        for c in 0..copies {
            let base = c * n;
            for i in 0..n {
                for &j in &self.neighbors[i] {
                    src.push(base + j);
                    dst.push(base + i);
                }
                offsets.push(src.len());
            }
        }
        EdgeIndex {
            n_nodes: n,
            copies,
            src: src.into(),
            dst: dst.into(),
            offsets: offsets.into(),
        }
    }

    /// The same graph with node `i` renamed `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<TrafficGraph> {
        if perm.len() != self.n_nodes {
            return Err(Error::contract("permutation length differs from node count"));
        }
        let edges = self
            .edges
            .iter()
            .map(|&(s, d, w)| (perm[s], perm[d], w))
            .collect();
        TrafficGraph::new(self.city_id.clone(), self.n_nodes, edges, self.interval_minutes)
    }
}
