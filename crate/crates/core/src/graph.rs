//! Directed graphs with ordered out-neighborhoods.
//!
//! Nodes are 0-based inside the crate. [`Graph::from_labeled_edges`] and
//! [`GraphSpec`] are the 1-based boundary used by configs and output files.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A directed graph without self-loops or parallel edges.
///
/// The order of `out_edges[i]` is the coordinate order of the costate
/// vector `p` passed to the Hamiltonian of node `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    node_count: usize,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
    /// Global edge id of `out_edges[i][slot]`, in input order.
    edge_ids: Vec<Vec<usize>>,
    edges: Vec<(usize, usize)>,
}

impl Graph {
    /// Builds a graph from 0-based `(source, target)` pairs.
    pub fn new(node_count: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::EmptyGraph);
        }
        let mut out_edges = vec![Vec::new(); node_count];
        let mut edge_ids = vec![Vec::new(); node_count];
        let mut in_edges = vec![Vec::new(); node_count];
        for (id, &(s, t)) in edges.iter().enumerate() {
            if s >= node_count || t >= node_count {
                return Err(Error::NodeOutOfRange {
                    source_node: s + 1,
                    target: t + 1,
                    node_count,
                });
            }
            if s == t {
                return Err(Error::SelfLoop { node: s + 1 });
            }
            if out_edges[s].contains(&t) {
                return Err(Error::DuplicateEdge {
                    source_node: s + 1,
                    target: t + 1,
                });
            }
            out_edges[s].push(t);
            edge_ids[s].push(id);
            in_edges[t].push(s);
        }
        Ok(Self {
            node_count,
            out_edges,
            in_edges,
            edge_ids,
            edges: edges.to_vec(),
        })
    }

    /// Builds a graph from 1-based `(source, target)` labels.
    pub fn from_labeled_edges(node_count: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut zero_based = Vec::with_capacity(edges.len());
        for &(s, t) in edges {
            if s == 0 || t == 0 || s > node_count || t > node_count {
                if node_count == 0 {
                    return Err(Error::EmptyGraph);
                }
                return Err(Error::NodeOutOfRange {
                    source_node: s,
                    target: t,
                    node_count,
                });
            }
            zero_based.push((s - 1, t - 1));
        }
        Self::new(node_count, &zero_based)
    }

    /// Directed cycle `0 -> 1 -> ... -> n-1 -> 0`; for `n == 2` this is the two-cycle.
    pub fn cycle(n: usize) -> Result<Self> {
        if n == 1 {
            return Self::new(1, &[]);
        }
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Self::new(n, &edges)
    }

    /// Complete directed graph: every ordered pair of distinct nodes.
    pub fn complete(n: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    edges.push((i, j));
                }
            }
        }
        Self::new(n, &edges)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// `V(i)` in coordinate order.
    pub fn out_neighbors(&self, node: usize) -> &[usize] {
        &self.out_edges[node]
    }

    /// `V⁻¹(i)` in input order.
    pub fn in_neighbors(&self, node: usize) -> &[usize] {
        &self.in_edges[node]
    }

    pub fn out_degree(&self, node: usize) -> usize {
        self.out_edges[node].len()
    }

    pub fn max_out_degree(&self) -> usize {
        self.out_edges.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Global (input-order) id of the `slot`-th out-edge of `node`.
    pub fn edge_id(&self, node: usize, slot: usize) -> usize {
        self.edge_ids[node][slot]
    }

    /// All edges in input order, 0-based.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Position of `target` in `V(source)`, if the edge exists.
    pub fn slot_of(&self, source: usize, target: usize) -> Option<usize> {
        self.out_edges[source].iter().position(|&t| t == target)
    }

    pub fn has_edges(&self) -> bool {
        !self.edges.is_empty()
    }

    /// The graph with every edge reversed.
    pub fn transpose(&self) -> Self {
        let reversed: Vec<_> = self.edges.iter().map(|&(s, t)| (t, s)).collect();
        Self::new(self.node_count, &reversed).expect("reversing a valid graph keeps it valid")
    }

    pub fn to_spec(&self) -> GraphSpec {
        GraphSpec {
            nodes: self.node_count,
            edges: self.edges.iter().map(|&(s, t)| [s + 1, t + 1]).collect(),
        }
    }
}

/// On-disk form: `{"nodes": N, "edges": [[s,t], ...]}` with 1-based labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub nodes: usize,
    pub edges: Vec<[usize; 2]>,
}

impl GraphSpec {
    pub fn build(&self) -> Result<Graph> {
        let pairs: Vec<_> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        Graph::from_labeled_edges(self.nodes, &pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_cycle() {
        let g = Graph::from_labeled_edges(2, &[(1, 2), (2, 1)]).unwrap();
        assert_eq!(g.out_neighbors(0), &[1]);
        assert_eq!(g.out_neighbors(1), &[0]);
        assert_eq!(g.out_degree(0), 1);
        assert_eq!(g.out_degree(1), 1);
    }

    #[test]
    fn isolated_node() {
        let g = Graph::from_labeled_edges(1, &[]).unwrap();
        assert!(g.out_neighbors(0).is_empty());
        assert_eq!(g.out_degree(0), 0);
    }

    #[test]
    fn three_cycle_transpose() {
        let g = Graph::from_labeled_edges(3, &[(1, 2), (2, 3), (3, 1)]).unwrap();
        assert_eq!(g.in_neighbors(0), &[2]);
        assert_eq!(g.in_neighbors(1), &[0]);
        assert_eq!(g.in_neighbors(2), &[1]);
    }

    #[test]
    fn rejects_bad_edges() {
        match Graph::from_labeled_edges(3, &[(2, 2)]) {
            Err(Error::SelfLoop { node }) => assert_eq!(node, 2),
            other => panic!("expected self-loop error, got {other:?}"),
        }
        assert!(matches!(
            Graph::from_labeled_edges(3, &[(1, 2), (1, 2)]),
            Err(Error::DuplicateEdge { .. })
        ));
        assert!(matches!(
            Graph::from_labeled_edges(3, &[(1, 4)]),
            Err(Error::NodeOutOfRange { .. })
        ));
        assert!(matches!(
            Graph::from_labeled_edges(3, &[(0, 1)]),
            Err(Error::NodeOutOfRange { .. })
        ));
        assert!(matches!(Graph::new(0, &[]), Err(Error::EmptyGraph)));
    }

    #[test]
    fn edge_order_is_input_order() {
        let g = Graph::from_labeled_edges(3, &[(1, 3), (2, 1), (1, 2)]).unwrap();
        assert_eq!(g.out_neighbors(0), &[2, 1]);
        assert_eq!(g.edge_id(0, 0), 0);
        assert_eq!(g.edge_id(0, 1), 2);
        assert_eq!(g.slot_of(0, 1), Some(1));
    }

    #[test]
    fn spec_json_roundtrip() {
        let text = r#"{"nodes": 3, "edges": [[1,2],[2,3],[3,1]]}"#;
        let spec: GraphSpec = serde_json::from_str(text).unwrap();
        let g = spec.build().unwrap();
        assert_eq!(g.to_spec(), spec);
    }

    proptest::proptest! {
        #[test]
        fn double_transpose_is_identity(
            n in 1usize..7,
            raw in proptest::collection::vec((0usize..7, 0usize..7), 0..30)
        ) {
            let mut seen = std::collections::HashSet::new();
            let edges: Vec<_> = raw
                .into_iter()
                .map(|(s, t)| (s % n, t % n))
                .filter(|&(s, t)| s != t && seen.insert((s, t)))
                .collect();
            let g = Graph::new(n, &edges).unwrap();
            for i in 0..n {
                for &j in g.out_neighbors(i) {
                    proptest::prop_assert!(g.in_neighbors(j).contains(&i));
                }
                for &j in g.in_neighbors(i) {
                    proptest::prop_assert!(g.out_neighbors(j).contains(&i));
                }
            }
            let back = g.transpose().transpose();
            for i in 0..n {
                let mut a = back.out_neighbors(i).to_vec();
                let mut b = g.out_neighbors(i).to_vec();
                a.sort_unstable();
                b.sort_unstable();
                proptest::prop_assert_eq!(a, b);
            }
        }
    }
}
