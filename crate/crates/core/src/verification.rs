//! Oracles that certify a computed equilibrium independently of the solver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::Coupling;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::hamiltonian::CostModel;
use crate::mfg::{ControlField, TrajectoryPair};
use crate::ode::Rk4;
use crate::simplex::SimplexPoint;
use crate::time_grid::{interpolate_rows, TimeGrid};

/// Expected payoffs of a control against a fixed population trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayoffReport {
    /// `J(0, i, λ̃)`
    pub values: Vec<f64>,
    /// `u(0, i) − J(0, i, λ̃)`
    pub gaps: Vec<f64>,
}

impl PayoffReport {
    pub fn against(values: Vec<f64>, u0: &[f64]) -> Self {
        let gaps = u0.iter().zip(&values).map(|(u, v)| u - v).collect();
        Self { values, gaps }
    }
}

/// `J(0, i, λ)` for every starting node `i`.
///
/// Solves the linear backward equation
/// `dv/dt + Σ_j λ(i,j)(v_j − v_i) − L(i, λ(i,·)) + f(i, m(t)) = 0`, `v(T) = g(·, m(T))`
/// with RK4 on the control's grid.
pub fn evaluate_payoff(
    graph: &Graph,
    cost: &CostModel,
    coupling: &dyn Coupling,
    control: &ControlField,
    m_traj: &[Vec<f64>],
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    let n = graph.node_count();
    if control.grid != *grid {
        return Err(Error::Control("control is sampled on a different time grid".into()));
    }
    control.validate(graph)?;
    if m_traj.len() != grid.len() || m_traj.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension(format!("distribution trajectory must be {} x {n}", grid.len())));
    }
    let kmax = grid.steps();
    let mut v: Vec<f64> = (0..n).map(|i| coupling.terminal(i, &m_traj[kmax])).collect();
    let mut rk = Rk4::new(n);
    let mut rates: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; graph.out_degree(i)]).collect();
    let mut m_t = vec![0.0; n];
    let dt = grid.dt();
    for k in (0..kmax).rev() {
        rk.step(grid.t(k + 1), -dt, &mut v, |t, y, dy| {
            control.rates_at(t, &mut rates);
            interpolate_rows(grid, m_traj, t, &mut m_t);
            for i in 0..n {
                let flow: f64 = graph
                    .out_neighbors(i)
                    .iter()
                    .zip(&rates[i])
                    .map(|(&j, r)| r * (y[j] - y[i]))
                    .sum();
                dy[i] = -(flow - cost.cost(i, &rates[i]) + coupling.running(i, &m_t));
            }
            Ok(())
        })?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { step: k });
        }
    }
    Ok(v)
}

/// A labelled candidate control for the Nash test.
#[derive(Clone, Debug)]
pub struct Deviation {
    pub label: String,
    pub control: ControlField,
}

/// Parameters of [`default_deviations`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviationFamily {
    /// Sizes of the `±ε` edge perturbations.
    pub epsilons: Vec<f64>,
    /// Dyadic windows of levels `0..=max_level` (2^l windows at level l).
    pub max_level: u32,
    pub random_count: usize,
    /// Windows of each random piecewise-constant control.
    pub random_windows: usize,
}

impl Default for DeviationFamily {
    fn default() -> Self {
        Self {
            epsilons: vec![0.1, 0.5],
            max_level: 2,
            random_count: 20,
            random_windows: 8,
        }
    }
}

fn window_of(grid: &TimeGrid, k: usize, windows: usize) -> usize {
    // Interval [t_k, t_{k+1}) belongs to the window containing its midpoint;
    // the terminal node joins the last window.
    let x = ((k as f64 + 0.5) / grid.steps() as f64 * windows as f64).floor() as usize;
    x.min(windows - 1)
}

/// The default deviation family around `optimal`:
/// every edge perturbed by `±ε` on every dyadic window (clipped at zero),
/// then `random_count` piecewise-constant controls with rates drawn
/// uniformly from `[0, 2·max λ* + 1]`. Random control `r` draws from stream
/// `r` of a ChaCha8 generator seeded with `seed`.
pub fn default_deviations(graph: &Graph, optimal: &ControlField, family: &DeviationFamily, seed: u64) -> Vec<Deviation> {
    let grid = optimal.grid;
    let horizon = grid.horizon();
    let mut out = Vec::new();
    for &eps in &family.epsilons {
        for sign in [1.0, -1.0] {
            for level in 0..=family.max_level {
                let windows = 1usize << level;
                for w in 0..windows {
                    for (e, &(s, t)) in graph.edges().iter().enumerate() {
                        let slot = graph.slot_of(s, t).expect("edge from the graph");
                        let mut control = optimal.clone();
                        for (k, row) in control.rates.iter_mut().enumerate() {
                            if window_of(&grid, k, windows) == w {
                                row[s][slot] = (row[s][slot] + sign * eps).max(0.0);
                            }
                        }
                        let t0 = horizon * w as f64 / windows as f64;
                        let t1 = horizon * (w + 1) as f64 / windows as f64;
                        out.push(Deviation {
                            label: format!(
                                "edge {} ({}->{}) {}{eps} on [{t0}, {t1}]",
                                e + 1,
                                s + 1,
                                t + 1,
                                if sign > 0.0 { "+" } else { "-" },
                            ),
                            control,
                        });
                    }
                }
            }
        }
    }
    let cap = 2.0 * optimal.max_rate() + 1.0;
    let windows = family.random_windows.max(1);
    for r in 0..family.random_count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let levels: Vec<Vec<Vec<f64>>> = (0..windows)
            .map(|_| {
                (0..graph.node_count())
                    .map(|i| (0..graph.out_degree(i)).map(|_| rng.random_range(0.0..=cap)).collect())
                    .collect()
            })
            .collect();
        let rates = (0..grid.len()).map(|k| levels[window_of(&grid, k, windows)].clone()).collect();
        out.push(Deviation {
            label: format!("random {} (seed {seed}, {windows} windows, rates <= {cap})", r + 1),
            control: ControlField { grid, rates },
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NashReport {
    /// `max_{deviation, i} J(0,i,λ̃) − J(0,i,λ*)`; `<= tol` certifies the family.
    pub max_gap: f64,
    /// 0-based node of `max_gap`.
    pub worst_node: usize,
    /// Index into the deviation list of `max_gap`.
    pub worst_deviation: usize,
    pub worst_label: String,
    /// `max_i |J(0,i,λ*) − u(0,i)|`
    pub oracle_error: f64,
    pub deviation_count: usize,
    /// `J(0,·,λ*)`
    pub equilibrium_payoff: Vec<f64>,
    /// Per deviation, `max_i J(0,i,λ̃) − J(0,i,λ*)`.
    pub gaps: Vec<f64>,
}

/// Largest payoff improvement any deviation achieves against the
/// equilibrium's own control `optimal`, with the population frozen at
/// `equilibrium.m`. Deviations are evaluated in parallel; the result does
/// not depend on scheduling.
pub fn nash_gap(
    graph: &Graph,
    cost: &CostModel,
    coupling: &dyn Coupling,
    equilibrium: &TrajectoryPair,
    optimal: &ControlField,
    deviations: &[Deviation],
) -> Result<NashReport> {
    let grid = equilibrium.grid;
    let base = evaluate_payoff(graph, cost, coupling, optimal, &equilibrium.m, &grid)?;
    let oracle_error = base
        .iter()
        .zip(&equilibrium.u[0])
        .map(|(j, u)| (j - u).abs())
        .fold(0.0, f64::max);
    let per: Vec<Vec<f64>> = deviations
        .par_iter()
        .map(|d| evaluate_payoff(graph, cost, coupling, &d.control, &equilibrium.m, &grid))
        .collect::<Result<_>>()?;
    let mut max_gap = f64::NEG_INFINITY;
    let mut worst = (0, 0);
    let mut gaps = Vec::with_capacity(per.len());
    for (d, values) in per.iter().enumerate() {
        let mut g = f64::NEG_INFINITY;
        for (i, (v, b)) in values.iter().zip(&base).enumerate() {
            let gap = v - b;
            if gap > g {
                g = gap;
            }
            if gap > max_gap {
                max_gap = gap;
                worst = (d, i);
            }
        }
        gaps.push(g);
    }
    Ok(NashReport {
        max_gap,
        worst_node: worst.1,
        worst_deviation: worst.0,
        worst_label: deviations.get(worst.0).map(|d| d.label.clone()).unwrap_or_default(),
        oracle_error,
        deviation_count: deviations.len(),
        equilibrium_payoff: base,
        gaps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// The form is strictly negative on every sampled distinct pair.
    Monotone,
    /// Never positive, but zero (up to rounding) on some pair: the strict
    /// criterion is not satisfied.
    Degenerate,
    /// Some pair has a positive form.
    NonMonotone,
}

/// Sampled behaviour of `Σ_i (h(i,m¹) − h(i,m²))(m¹_i − m²_i)` for one of `f`, `g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormSummary {
    pub verdict: Verdict,
    /// Largest value of the form divided by `‖m¹ − m²‖²`.
    pub worst_ratio: f64,
    /// Form value at the worst pair.
    pub worst_value: f64,
    pub worst_pair: (Vec<f64>, Vec<f64>),
    /// `ε = −worst_ratio`: the form is below `−ε ‖m¹ − m²‖²` on every pair.
    pub epsilon: f64,
    /// Pairs on which the form is not strictly negative.
    pub violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub samples: usize,
    pub running: FormSummary,
    pub terminal: FormSummary,
    /// Monotone only when both forms are.
    pub verdict: Verdict,
}

/// Ratios within this of zero count as zero.
const FORM_ZERO: f64 = 1e-12;

struct FormAccumulator {
    worst_ratio: f64,
    worst_value: f64,
    worst_pair: (Vec<f64>, Vec<f64>),
    violations: usize,
}

impl FormAccumulator {
    fn new() -> Self {
        Self {
            worst_ratio: f64::NEG_INFINITY,
            worst_value: f64::NAN,
            worst_pair: (Vec::new(), Vec::new()),
            violations: 0,
        }
    }

    fn add(&mut self, h: impl Fn(usize, &[f64]) -> f64, a: &[f64], b: &[f64], dist2: f64) {
        let form: f64 = (0..a.len()).map(|i| (h(i, a) - h(i, b)) * (a[i] - b[i])).sum();
        let ratio = form / dist2;
        if ratio >= -FORM_ZERO {
            self.violations += 1;
        }
        if ratio > self.worst_ratio {
            self.worst_ratio = ratio;
            self.worst_value = form;
            self.worst_pair = (a.to_vec(), b.to_vec());
        }
    }

    fn finish(self) -> FormSummary {
        let verdict = if self.worst_ratio > FORM_ZERO {
            Verdict::NonMonotone
        } else if self.worst_ratio >= -FORM_ZERO {
            Verdict::Degenerate
        } else {
            Verdict::Monotone
        };
        FormSummary {
            verdict,
            worst_ratio: self.worst_ratio,
            worst_value: self.worst_value,
            worst_pair: self.worst_pair,
            epsilon: -self.worst_ratio,
            violations: self.violations,
        }
    }
}

/// Samples `sample_count` pairs of distinct points of the simplex (flat
/// Dirichlet) and evaluates the monotonicity forms of `f` and `g`.
/// Sampling can refute the uniqueness criterion, never prove it.
pub fn check_monotonicity(coupling: &dyn Coupling, node_count: usize, sample_count: usize, seed: u64) -> Result<MonotonicityReport> {
    if sample_count == 0 {
        return Err(Error::Coupling("sample count must be >= 1".into()));
    }
    if node_count < 2 {
        return Err(Error::Coupling("monotonicity needs at least two nodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut running = FormAccumulator::new();
    let mut terminal = FormAccumulator::new();
    let mut taken = 0;
    while taken < sample_count {
        let a = SimplexPoint::sample(node_count, &mut rng);
        let b = SimplexPoint::sample(node_count, &mut rng);
        let (a, b) = (a.as_slice(), b.as_slice());
        let dist2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        if dist2 < 1e-20 {
            continue;
        }
        running.add(|i, m| coupling.running(i, m), a, b, dist2);
        terminal.add(|i, m| coupling.terminal(i, m), a, b, dist2);
        taken += 1;
    }
    let running = running.finish();
    let terminal = terminal.finish();
    let verdict = match (running.verdict, terminal.verdict) {
        (Verdict::Monotone, Verdict::Monotone) => Verdict::Monotone,
        (Verdict::NonMonotone, _) | (_, Verdict::NonMonotone) => Verdict::NonMonotone,
        _ => Verdict::Degenerate,
    };
    Ok(MonotonicityReport {
        samples: sample_count,
        running,
        terminal,
        verdict,
    })
}
