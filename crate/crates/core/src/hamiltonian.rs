//! Edge costs on transition rates and their Legendre transforms.
//!
//! For a node `i` with out-degree `d_i` the Hamiltonian is
//! `H(i,p) = sup_{λ ≥ 0} λ·p − L(i,λ)` and its gradient is the maximizing
//! rate vector. All supported costs are separable across edges, so the
//! supremum is taken edge by edge.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::Graph;

/// A strictly convex C² cost of a single transition rate.
pub trait EdgeCost: Send + Sync {
    fn value(&self, rate: f64) -> f64;
    fn derivative(&self, rate: f64) -> f64;
}

impl<F, D> EdgeCost for (F, D)
where
    F: Fn(f64) -> f64 + Send + Sync,
    D: Fn(f64) -> f64 + Send + Sync,
{
    fn value(&self, rate: f64) -> f64 {
        (self.0)(rate)
    }
    fn derivative(&self, rate: f64) -> f64 {
        (self.1)(rate)
    }
}

/// Cost descriptor of one node; weights are listed in `V(i)` order.
#[derive(Clone)]
pub enum NodeCost {
    /// `L = Σ_j (c_ij / 2) λ_ij²`
    Quadratic { weights: Vec<f64> },
    /// `L = Σ_j c_ij λ_ij^r / r` with `r > 1`
    Power { exponent: f64, weights: Vec<f64> },
    /// Arbitrary per-edge cost, maximized numerically.
    Numeric { edges: Vec<Arc<dyn EdgeCost>> },
}

impl fmt::Debug for NodeCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeCost::Quadratic { weights } => f.debug_struct("Quadratic").field("weights", weights).finish(),
            NodeCost::Power { exponent, weights } => f
                .debug_struct("Power")
                .field("exponent", exponent)
                .field("weights", weights)
                .finish(),
            NodeCost::Numeric { edges } => write!(f, "Numeric({} edges)", edges.len()),
        }
    }
}

impl NodeCost {
    fn degree(&self) -> usize {
        match self {
            NodeCost::Quadratic { weights } | NodeCost::Power { weights, .. } => weights.len(),
            NodeCost::Numeric { edges } => edges.len(),
        }
    }
}

/// `H(i,p)` together with the optimal rate vector `∇H(i,p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianValue {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Per-node running costs `L(i,·)` of a graph.
#[derive(Clone, Debug)]
pub struct CostModel {
    nodes: Vec<NodeCost>,
    /// Target of each edge slot, kept for error messages.
    targets: Vec<Vec<usize>>,
}

const GOLDEN_TOL: f64 = 1e-10;
const MAX_DOUBLINGS: u32 = 64;

impl CostModel {
    pub fn new(graph: &Graph, nodes: Vec<NodeCost>) -> Result<Self> {
        if nodes.len() != graph.node_count() {
            return Err(Error::Cost(format!(
                "{} node costs for {} nodes",
                nodes.len(),
                graph.node_count()
            )));
        }
        for (i, cost) in nodes.iter().enumerate() {
            if cost.degree() != graph.out_degree(i) {
                return Err(Error::Cost(format!(
                    "node {} has out-degree {} but its cost covers {} edges",
                    i + 1,
                    graph.out_degree(i),
                    cost.degree()
                )));
            }
            validate_node(i, cost, graph.out_neighbors(i))?;
        }
        Ok(Self {
            nodes,
            targets: (0..graph.node_count())
                .map(|i| graph.out_neighbors(i).to_vec())
                .collect(),
        })
    }

    /// Quadratic cost with every weight equal to one.
    pub fn unit_quadratic(graph: &Graph) -> Self {
        Self::quadratic(graph, |_, _| 1.0).expect("unit weights are valid")
    }

    /// Quadratic cost with weight `weight(i, j)` on edge `i -> j` (0-based).
    pub fn quadratic(graph: &Graph, weight: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let nodes = (0..graph.node_count())
            .map(|i| NodeCost::Quadratic {
                weights: graph.out_neighbors(i).iter().map(|&j| weight(i, j)).collect(),
            })
            .collect();
        Self::new(graph, nodes)
    }

    pub fn power(graph: &Graph, exponent: f64, weight: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let nodes = (0..graph.node_count())
            .map(|i| NodeCost::Power {
                exponent,
                weights: graph.out_neighbors(i).iter().map(|&j| weight(i, j)).collect(),
            })
            .collect();
        Self::new(graph, nodes)
    }

    pub fn numeric(graph: &Graph, edge: impl Fn(usize, usize) -> Arc<dyn EdgeCost>) -> Result<Self> {
        let nodes = (0..graph.node_count())
            .map(|i| NodeCost::Numeric {
                edges: graph.out_neighbors(i).iter().map(|&j| edge(i, j)).collect(),
            })
            .collect();
        Self::new(graph, nodes)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.nodes[node].degree()
    }

    pub fn node(&self, node: usize) -> &NodeCost {
        &self.nodes[node]
    }

    /// Running cost `L(i, rates)`; `L(i, ()) = 0` for out-degree zero.
    pub fn cost(&self, node: usize, rates: &[f64]) -> f64 {
        match &self.nodes[node] {
            NodeCost::Quadratic { weights } => {
                weights.iter().zip(rates).map(|(c, l)| 0.5 * c * l * l).sum()
            }
            NodeCost::Power { exponent, weights } => weights
                .iter()
                .zip(rates)
                .map(|(c, l)| c * l.abs().powf(*exponent) / exponent)
                .sum(),
            NodeCost::Numeric { edges } => edges.iter().zip(rates).map(|(e, l)| e.value(*l)).sum(),
        }
    }

    pub fn hamiltonian(&self, node: usize, p: &[f64]) -> Result<HamiltonianValue> {
        let mut gradient = vec![0.0; self.degree(node)];
        let value = self.hamiltonian_into(node, p, &mut gradient)?;
        Ok(HamiltonianValue { value, gradient })
    }

    /// Allocation-free form of [`CostModel::hamiltonian`]: writes `∇H` into
    /// `gradient` and returns `H`.
    pub fn hamiltonian_into(&self, node: usize, p: &[f64], gradient: &mut [f64]) -> Result<f64> {
        let d = self.degree(node);
        if p.len() != d || gradient.len() != d {
            return Err(Error::Dimension(format!(
                "node {} expects a costate of length {d}, got {}",
                node + 1,
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCostate { node: node + 1 });
        }
        let mut value = 0.0;
        match &self.nodes[node] {
            NodeCost::Quadratic { weights } => {
                for ((g, &c), &pj) in gradient.iter_mut().zip(weights).zip(p) {
                    let pos = pj.max(0.0);
                    *g = pos / c;
                    value += pos * pos / (2.0 * c);
                }
            }
            NodeCost::Power { exponent, weights } => {
                let r = *exponent;
                for ((g, &c), &pj) in gradient.iter_mut().zip(weights).zip(p) {
                    let pos = pj.max(0.0);
                    let rate = (pos / c).powf(1.0 / (r - 1.0));
                    *g = rate;
                    value += rate * pos - c * rate.powf(r) / r;
                }
            }
            NodeCost::Numeric { edges } => {
                for (slot, (g, &pj)) in gradient.iter_mut().zip(p).enumerate() {
                    let edge = edges[slot].as_ref();
                    let rate = maximize_edge(edge, pj).ok_or(Error::Bracket {
                        node: node + 1,
                        source_node: node + 1,
                        target: self.targets[node][slot] + 1,
                    })?;
                    *g = rate;
                    value += rate * pj - edge.value(rate);
                }
            }
        }
        Ok(value)
    }

    /// `H(i, 0)`, which enters the a-priori bound on value functions.
    pub fn hamiltonian_at_zero(&self, node: usize) -> Result<f64> {
        let zeros = vec![0.0; self.degree(node)];
        Ok(self.hamiltonian(node, &zeros)?.value)
    }

    /// Largest coordinate error between central differences of `H` and `∇H`.
    pub fn verify_gradient(&self, node: usize, p: &[f64], h: f64) -> Result<f64> {
        assert!(h > 0.0, "finite-difference step must be positive");
        let analytic = self.hamiltonian(node, p)?.gradient;
        let mut worst: f64 = 0.0;
        let mut shifted = p.to_vec();
        for j in 0..p.len() {
            shifted[j] = p[j] + h;
            let up = self.hamiltonian(node, &shifted)?.value;
            shifted[j] = p[j] - h;
            let down = self.hamiltonian(node, &shifted)?.value;
            shifted[j] = p[j];
            worst = worst.max(((up - down) / (2.0 * h) - analytic[j]).abs());
        }
        Ok(worst)
    }
}

/// Maximizer of `λ p − C(λ)` over `λ >= 0`; `None` when no bracket is found.
fn maximize_edge(edge: &dyn EdgeCost, p: f64) -> Option<f64> {
    let slope = |l: f64| p - edge.derivative(l);
    if slope(0.0) <= 0.0 {
        return Some(0.0);
    }
    let mut hi = 1.0_f64;
    let mut k = 0;
    while slope(hi) >= 0.0 {
        hi *= 2.0;
        k += 1;
        if k > MAX_DOUBLINGS || !hi.is_finite() {
            return None;
        }
    }
    let lo = if hi > 1.0 { hi / 2.0 } else { 0.0 };
    Some(golden_section_max(|l| l * p - edge.value(l), lo, hi, GOLDEN_TOL))
}

fn golden_section_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol * b.abs().max(1.0) {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

fn validate_node(node: usize, cost: &NodeCost, targets: &[usize]) -> Result<()> {
    let label = |slot: usize| format!("edge {}->{}", node + 1, targets[slot] + 1);
    match cost {
        NodeCost::Quadratic { weights } => {
            for (slot, c) in weights.iter().enumerate() {
                if !(c.is_finite() && *c > 0.0) {
                    return Err(Error::Cost(format!("{}: weight must be > 0, got {c}", label(slot))));
                }
            }
        }
        NodeCost::Power { exponent, weights } => {
            if !(exponent.is_finite() && *exponent > 1.0) {
                return Err(Error::Cost(format!("node {}: exponent must be > 1, got {exponent}", node + 1)));
            }
            for (slot, c) in weights.iter().enumerate() {
                if !(c.is_finite() && *c > 0.0) {
                    return Err(Error::Cost(format!("{}: weight must be > 0, got {c}", label(slot))));
                }
            }
        }
        NodeCost::Numeric { edges } => {
            for (slot, edge) in edges.iter().enumerate() {
                check_sampled_edge(edge.as_ref()).map_err(|m| Error::Cost(format!("{}: {m}", label(slot))))?;
            }
        }
    }
    Ok(())
}

/// Sampled checks of `C(0)`, convexity and superlinear growth.
fn check_sampled_edge(edge: &dyn EdgeCost) -> std::result::Result<(), String> {
    let c0 = edge.value(0.0);
    if !(c0.is_finite() && c0 >= 0.0) {
        return Err(format!("C(0) must be finite and >= 0, got {c0}"));
    }
    let h = 1e-3;
    for k in 1..2000 {
        let x = k as f64 * 5e-3;
        let (a, b, c) = (edge.value(x - h), edge.value(x), edge.value(x + h));
        let second = (a - 2.0 * b + c) / (h * h);
        let scale = a.abs().max(b.abs()).max(c.abs()).max(1.0);
        if second < -1e3 * f64::EPSILON * scale / (h * h) {
            return Err(format!("not convex near rate {x}"));
        }
    }
    // C(λ)/λ along λ = 2^k; overflow to +inf counts as growth.
    let mut ratios = Vec::new();
    for k in 0..=40 {
        let x = 2f64.powi(k);
        let r = edge.value(x) / x;
        if r.is_nan() || r == f64::NEG_INFINITY {
            return Err(format!("cost is not finite at rate {x}"));
        }
        ratios.push(r);
        if r == f64::INFINITY {
            break;
        }
    }
    let last = *ratios.last().expect("non-empty");
    if ratios.windows(2).any(|w| w[1] < w[0]) || last <= ratios[0] + 1.0 {
        return Err("cost does not grow superlinearly on sampled rates".into());
    }
    Ok(())
}
