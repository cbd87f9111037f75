//! Node payoffs `f(i,m)`, `g(i,m)` and, for potential games, the scalar
//! potentials `F`, `G` with `∂F/∂m_i = f(i,·)` and `∂G/∂m_i = g(i,·)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::SimplexPoint;

/// Payoff functions of the game, defined on a box around the simplex.
pub trait Coupling: Send + Sync {
    /// Running payoff rate `f(i, m)`.
    fn running(&self, node: usize, m: &[f64]) -> f64;
    /// Terminal payoff `g(i, m)`.
    fn terminal(&self, node: usize, m: &[f64]) -> f64;
    /// `F(m)`, when the game is a potential game.
    fn running_potential(&self, _m: &[f64]) -> Option<f64> {
        None
    }
    /// `G(m)`, when the game is a potential game.
    fn terminal_potential(&self, _m: &[f64]) -> Option<f64> {
        None
    }
}

fn default_a() -> f64 {
    1.0
}

/// The coupling families available from run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum BuiltinCoupling {
    Zero,
    /// `f = −a m_i`, `g = −b m_i`, `F = −a/2 Σ m_i²`, `G = −b/2 Σ m_i²`.
    CrowdAversion {
        #[serde(default = "default_a")]
        a: f64,
        #[serde(default)]
        b: f64,
    },
    /// Sign-flipped crowd aversion; not monotone.
    CrowdSeeking {
        #[serde(default = "default_a")]
        a: f64,
        #[serde(default)]
        b: f64,
    },
    /// `f = −a m_i + c m_σ(i)`, `g = −b m_i`. `σ` is 1-based in configs and
    /// defaults to `i ↦ i+1 mod N`.
    AffineMix {
        #[serde(default = "default_a")]
        a: f64,
        #[serde(default)]
        b: f64,
        #[serde(default)]
        c: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        permutation: Option<Vec<usize>>,
    },
}

impl BuiltinCoupling {
    pub fn crowd_aversion(a: f64, b: f64) -> Self {
        Self::CrowdAversion { a, b }
    }

    /// Checks parameters against a node count and fills in the default permutation.
    pub fn resolve(&self, node_count: usize) -> Result<ResolvedCoupling> {
        let check = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Coupling(format!("parameter {name} must be finite and >= 0, got {v}")))
            }
        };
        let sigma = match self {
            BuiltinCoupling::Zero => Vec::new(),
            BuiltinCoupling::CrowdAversion { a, b } | BuiltinCoupling::CrowdSeeking { a, b } => {
                check("a", *a)?;
                check("b", *b)?;
                Vec::new()
            }
            BuiltinCoupling::AffineMix { a, b, c, permutation } => {
                check("a", *a)?;
                check("b", *b)?;
                check("c", *c)?;
                match permutation {
                    None => (0..node_count).map(|i| (i + 1) % node_count).collect(),
                    Some(p) => {
                        let mut seen = vec![false; node_count];
                        if p.len() != node_count {
                            return Err(Error::Coupling(format!(
                                "permutation has {} entries for {node_count} nodes",
                                p.len()
                            )));
                        }
                        for &s in p {
                            if s == 0 || s > node_count || seen[s - 1] {
                                return Err(Error::Coupling(format!("permutation {p:?} is not a permutation of 1..={node_count}")));
                            }
                            seen[s - 1] = true;
                        }
                        p.iter().map(|s| s - 1).collect()
                    }
                }
            }
        };
        Ok(ResolvedCoupling {
            kind: self.clone(),
            sigma,
        })
    }

    pub fn has_potentials(&self) -> bool {
        !matches!(self, BuiltinCoupling::AffineMix { .. })
    }
}

/// A [`BuiltinCoupling`] bound to a node count.
#[derive(Clone, Debug)]
pub struct ResolvedCoupling {
    kind: BuiltinCoupling,
    sigma: Vec<usize>,
}

fn half_square_norm(m: &[f64]) -> f64 {
    0.5 * m.iter().map(|x| x * x).sum::<f64>()
}

impl Coupling for ResolvedCoupling {
    fn running(&self, node: usize, m: &[f64]) -> f64 {
        match &self.kind {
            BuiltinCoupling::Zero => 0.0,
            BuiltinCoupling::CrowdAversion { a, .. } => -a * m[node],
            BuiltinCoupling::CrowdSeeking { a, .. } => a * m[node],
            BuiltinCoupling::AffineMix { a, c, .. } => -a * m[node] + c * m[self.sigma[node]],
        }
    }

    fn terminal(&self, node: usize, m: &[f64]) -> f64 {
        match &self.kind {
            BuiltinCoupling::Zero => 0.0,
            BuiltinCoupling::CrowdAversion { b, .. } | BuiltinCoupling::AffineMix { b, .. } => -b * m[node],
            BuiltinCoupling::CrowdSeeking { b, .. } => b * m[node],
        }
    }

    fn running_potential(&self, m: &[f64]) -> Option<f64> {
        match &self.kind {
            BuiltinCoupling::Zero => Some(0.0),
            BuiltinCoupling::CrowdAversion { a, .. } => Some(-a * half_square_norm(m)),
            BuiltinCoupling::CrowdSeeking { a, .. } => Some(a * half_square_norm(m)),
            BuiltinCoupling::AffineMix { .. } => None,
        }
    }

    fn terminal_potential(&self, m: &[f64]) -> Option<f64> {
        match &self.kind {
            BuiltinCoupling::Zero => Some(0.0),
            BuiltinCoupling::CrowdAversion { b, .. } => Some(-b * half_square_norm(m)),
            BuiltinCoupling::CrowdSeeking { b, .. } => Some(b * half_square_norm(m)),
            BuiltinCoupling::AffineMix { .. } => None,
        }
    }
}

type NodeFn = Box<dyn Fn(usize, &[f64]) -> f64 + Send + Sync>;
type PotentialFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A coupling assembled from closures.
pub struct FnCoupling {
    running: NodeFn,
    terminal: NodeFn,
    running_potential: Option<PotentialFn>,
    terminal_potential: Option<PotentialFn>,
}

impl FnCoupling {
    pub fn new(
        running: impl Fn(usize, &[f64]) -> f64 + Send + Sync + 'static,
        terminal: impl Fn(usize, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            running: Box::new(running),
            terminal: Box::new(terminal),
            running_potential: None,
            terminal_potential: None,
        }
    }

    pub fn with_potentials(
        mut self,
        running: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        terminal: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.running_potential = Some(Box::new(running));
        self.terminal_potential = Some(Box::new(terminal));
        self
    }
}

impl Coupling for FnCoupling {
    fn running(&self, node: usize, m: &[f64]) -> f64 {
        (self.running)(node, m)
    }
    fn terminal(&self, node: usize, m: &[f64]) -> f64 {
        (self.terminal)(node, m)
    }
    fn running_potential(&self, m: &[f64]) -> Option<f64> {
        self.running_potential.as_ref().map(|f| f(m))
    }
    fn terminal_potential(&self, m: &[f64]) -> Option<f64> {
        self.terminal_potential.as_ref().map(|f| f(m))
    }
}

/// `f + shift` and `g` unchanged.
pub struct ShiftedRunning<'a> {
    pub inner: &'a dyn Coupling,
    pub shift: f64,
}

impl Coupling for ShiftedRunning<'_> {
    fn running(&self, node: usize, m: &[f64]) -> f64 {
        self.inner.running(node, m) + self.shift
    }
    fn terminal(&self, node: usize, m: &[f64]) -> f64 {
        self.inner.terminal(node, m)
    }
}

/// Outcome of the finite-difference check `∂F/∂m_i ≈ f(i,·)`, `∂G/∂m_i ≈ g(i,·)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialCheck {
    pub samples: usize,
    pub max_running_error: f64,
    pub max_terminal_error: f64,
}

impl PotentialCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_running_error <= tol && self.max_terminal_error <= tol
    }
}

/// Compares central differences of the potentials with `f`, `g` at random
/// interior simplex points. Errors if the coupling declares no potentials.
pub fn check_potentials(coupling: &dyn Coupling, node_count: usize, samples: usize, seed: u64) -> Result<PotentialCheck> {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = PotentialCheck {
        samples,
        max_running_error: 0.0,
        max_terminal_error: 0.0,
    };
    let missing = || Error::Coupling("coupling declares no potentials".into());
    for _ in 0..samples {
        // Keep away from the boundary so the stencil stays inside the box.
        let m: Vec<f64> = SimplexPoint::sample(node_count, &mut rng)
            .as_slice()
            .iter()
            .map(|x| 0.9 * x + 0.1 / node_count as f64)
            .collect();
        let mut probe = m.clone();
        for i in 0..node_count {
            probe[i] = m[i] + h;
            let fu = coupling.running_potential(&probe).ok_or_else(missing)?;
            let gu = coupling.terminal_potential(&probe).ok_or_else(missing)?;
            probe[i] = m[i] - h;
            let fd = coupling.running_potential(&probe).ok_or_else(missing)?;
            let gd = coupling.terminal_potential(&probe).ok_or_else(missing)?;
            probe[i] = m[i];
            let ef = ((fu - fd) / (2.0 * h) - coupling.running(i, &m)).abs();
            let eg = ((gu - gd) / (2.0 * h) - coupling.terminal(i, &m)).abs();
            report.max_running_error = report.max_running_error.max(ef);
            report.max_terminal_error = report.max_terminal_error.max(eg);
        }
    }
    Ok(report)
}

/// Largest sampled ratio `|f(i,x) − f(i,y)| / |x − y|_∞` (and the same for
/// `g`) over random pairs in the box `[−margin, 1+margin]^N`.
pub fn sampled_lipschitz(coupling: &dyn Coupling, node_count: usize, samples: usize, margin: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let x: Vec<f64> = (0..node_count).map(|_| rng.random_range(-margin..=1.0 + margin)).collect();
        let y: Vec<f64> = (0..node_count).map(|_| rng.random_range(-margin..=1.0 + margin)).collect();
        let dist = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if dist == 0.0 {
            continue;
        }
        for i in 0..node_count {
            let df = (coupling.running(i, &x) - coupling.running(i, &y)).abs();
            let dg = (coupling.terminal(i, &x) - coupling.terminal(i, &y)).abs();
            worst = worst.max(df.max(dg) / dist);
        }
    }
    worst
}

/// Sampled `sup_i ‖f(i,·)‖∞` and `sup_i ‖g(i,·)‖∞` over the simplex,
/// including its vertices and barycenter.
pub fn sampled_sup_norms(coupling: &dyn Coupling, node_count: usize, samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<SimplexPoint> = (0..node_count).map(|i| SimplexPoint::vertex(node_count, i)).collect();
    points.push(SimplexPoint::uniform(node_count));
    points.extend((0..samples).map(|_| SimplexPoint::sample(node_count, &mut rng)));
    let mut sup_f: f64 = 0.0;
    let mut sup_g: f64 = 0.0;
    for p in &points {
        for i in 0..node_count {
            sup_f = sup_f.max(coupling.running(i, p.as_slice()).abs());
            sup_g = sup_g.max(coupling.terminal(i, p.as_slice()).abs());
        }
    }
    (sup_f, sup_g)
}
