//! The fully-connected feature graph with a CLS virtual node.
//!
//! Nodes 0..M-1 are the tabular features in schema order; node M is CLS.
//! Every ordered pair of distinct nodes carries its own directed edge, in a
//! fixed canonical order (source-major, then destination) shared by every
//! row, batch and checkpoint.

use crate::error::{Error, Result};
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct FeatureGraph {
    /// Number of tabular features (CLS excluded).
    pub m: usize,
    /// Canonical directed edge list over M+1 nodes, no self-loops.
    pub edges: Vec<(u32, u32)>,
}

impl FeatureGraph {
    pub fn n_nodes(&self) -> usize {
        self.m + 1
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub const fn cls_node(&self) -> usize {
        self.m
    }
}

/// Build the complete directed graph on M features plus CLS.
pub fn build_graph(m: usize) -> Result<FeatureGraph> {
    if m == 0 {
        return Err(Error::contract("build_graph: M must be >= 1"));
    }
    let n = m + 1;
    let mut edges = Vec::with_capacity(n * (n - 1));
    for src in 0..n as u32 {
        for dst in 0..n as u32 {
            if src != dst {
                edges.push((src, dst));
            }
        }
    }
    Ok(FeatureGraph { m, edges })
}

/// Precomputed row-index vectors for running a batch through the graph with
/// flattened layouts: node row (b, j) = b*(M+1)+j, edge row (b, k) = b*E+k.
#[derive(Clone)]
pub struct BatchIndices {
    pub batch: usize,
    /// Per edge row: the source node row to gather.
    pub src_rows: Arc<Vec<u32>>,
    /// Per edge row: the destination node row (also the scatter target).
    pub dst_rows: Arc<Vec<u32>>,
    /// Interleave feature-major stacks (feature j block = rows j*B..) into
    /// batch-major node states.
    pub interleave: Arc<Vec<u32>>,
    /// Node rows holding the CLS state, one per batch element.
    pub cls_rows: Arc<Vec<u32>>,
}

impl FeatureGraph {
    pub fn batch_indices(&self, batch: usize) -> BatchIndices {
        let n = self.n_nodes();
        let e = self.n_edges();
        let mut src_rows = Vec::with_capacity(batch * e);
        let mut dst_rows = Vec::with_capacity(batch * e);
        for b in 0..batch {
            let base = (b * n) as u32;
            for &(s, d) in &self.edges {
                src_rows.push(base + s);
                dst_rows.push(base + d);
            }
        }
        let mut interleave = Vec::with_capacity(batch * n);
        for b in 0..batch {
            for j in 0..n {
                interleave.push((j * batch + b) as u32);
            }
        }
        let cls_rows = (0..batch).map(|b| (b * n + self.m) as u32).collect();
        BatchIndices {
            batch,
            src_rows: Arc::new(src_rows),
            dst_rows: Arc::new(dst_rows),
            interleave: Arc::new(interleave),
            cls_rows: Arc::new(cls_rows),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn m3_has_4_nodes_12_edges() {
        let g = build_graph(3).unwrap();
        assert_eq!(g.n_nodes(), 4);
        assert_eq!(g.n_edges(), 12);
    }

    #[test]
    fn m1_edges_are_both_directions() {
        let g = build_graph(1).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn m8_california_housing_shape() {
        let g = build_graph(8).unwrap();
        assert_eq!(g.n_nodes(), 9);
        assert_eq!(g.n_edges(), 72);
    }

    #[test]
    fn m0_rejected() {
        assert!(build_graph(0).is_err());
    }

    #[test]
    fn canonical_order_is_source_major() {
        let g = build_graph(2).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
    }

    #[test]
    fn batch_indices_shapes() {
        let g = build_graph(2).unwrap();
        let idx = g.batch_indices(3);
        assert_eq!(idx.src_rows.len(), 3 * 6);
        assert_eq!(idx.interleave.len(), 3 * 3);
        assert_eq!(idx.cls_rows.as_ref(), &vec![2, 5, 8]);
        // batch element 1, edge (2,0): src row = 1*3+2=5, dst row = 1*3+0=3
        assert_eq!(idx.src_rows[6 + 4], 5);
        assert_eq!(idx.dst_rows[6 + 4], 3);
    }
}
