//! The coupled backward/forward system on a graph and its fixed point.
//!
//! Given a guessed distribution trajectory `m`, the value functions solve
//! `du_i/dt + H(i, (u_j − u_i)_{j∈V(i)}) + f(i, m(t)) = 0`, `u_i(T) = g(i, m(T))`,
//! the optimal rates are `λ(i,j) = ∂H(i,·)/∂p_j`, and the population then moves
//! by the Kolmogorov forward equation under those rates. A fixed point of
//! that map is an equilibrium.

use serde::{Deserialize, Serialize};

use crate::coupling::{sampled_sup_norms, Coupling};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::hamiltonian::CostModel;
use crate::ode::Rk4;
use crate::simplex::{compensated_sum, project_to_simplex, SimplexPoint};
use crate::time_grid::{interpolate_rows, Stencil, TimeGrid};

/// Negative mass below this is a hard failure of the forward solve.
const NEGATIVE_MASS_LIMIT: f64 = -1e-9;
/// Drift of the total mass tolerated before re-projection.
const MASS_DRIFT: f64 = 1e-12;

/// Value functions and distributions sampled on a shared time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPair {
    pub grid: TimeGrid,
    /// `u[k][i] = u(t_k, i)`
    pub u: Vec<Vec<f64>>,
    /// `m[k][i] = m(t_k, i)`
    pub m: Vec<Vec<f64>>,
}

/// Transition rates `λ(t_k, i, j)` for every edge, stored per node in `V(i)` order.
///
/// Between grid nodes the rates are interpolated in time (4-point Lagrange,
/// clipped at zero), which is what every solver in this crate integrates.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlField {
    pub grid: TimeGrid,
    /// `rates[k][i][slot]`
    pub rates: Vec<Vec<Vec<f64>>>,
}

impl ControlField {
    pub fn zeros(graph: &Graph, grid: TimeGrid) -> Self {
        let row: Vec<Vec<f64>> = (0..graph.node_count()).map(|i| vec![0.0; graph.out_degree(i)]).collect();
        Self {
            grid,
            rates: vec![row; grid.len()],
        }
    }

    /// Rates constant in time.
    pub fn constant(graph: &Graph, grid: TimeGrid, rate: impl Fn(usize, usize) -> f64) -> Self {
        let row: Vec<Vec<f64>> = (0..graph.node_count())
            .map(|i| graph.out_neighbors(i).iter().map(|&j| rate(i, j)).collect())
            .collect();
        Self {
            grid,
            rates: vec![row; grid.len()],
        }
    }

    /// Checks shape against the graph and that every rate is finite and `>= 0`.
    pub fn validate(&self, graph: &Graph) -> Result<()> {
        if self.rates.len() != self.grid.len() {
            return Err(Error::Control(format!(
                "{} time slices for a grid of {} nodes",
                self.rates.len(),
                self.grid.len()
            )));
        }
        for (k, row) in self.rates.iter().enumerate() {
            if row.len() != graph.node_count() {
                return Err(Error::Control(format!("time index {k}: {} nodes, expected {}", row.len(), graph.node_count())));
            }
            for (i, r) in row.iter().enumerate() {
                if r.len() != graph.out_degree(i) {
                    return Err(Error::Control(format!("time index {k}: node {} has {} rates for out-degree {}", i + 1, r.len(), graph.out_degree(i))));
                }
                if let Some(bad) = r.iter().find(|x| !x.is_finite() || **x < 0.0) {
                    return Err(Error::Control(format!("time index {k}: node {} has rate {bad}", i + 1)));
                }
            }
        }
        Ok(())
    }

    pub fn max_rate(&self) -> f64 {
        self.rates.iter().flatten().flatten().copied().fold(0.0, f64::max)
    }

    /// Rates at time `t`, written into `out[i][slot]`.
    pub fn rates_at(&self, t: f64, out: &mut [Vec<f64>]) {
        let st = Stencil::at(&self.grid, t);
        for (i, row) in out.iter_mut().enumerate() {
            for (s, r) in row.iter_mut().enumerate() {
                *r = st.apply(|k| self.rates[k][i][s]).max(0.0);
            }
        }
    }
}

fn rate_buffers(graph: &Graph) -> Vec<Vec<f64>> {
    (0..graph.node_count()).map(|i| vec![0.0; graph.out_degree(i)]).collect()
}

/// Kolmogorov forward generator applied to `m` under `rates`.
pub(crate) fn transport_rhs(graph: &Graph, rates: &[Vec<f64>], m: &[f64], dm: &mut [f64]) {
    dm.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..graph.node_count() {
        for (s, &j) in graph.out_neighbors(i).iter().enumerate() {
            let flow = rates[i][s] * m[i];
            dm[i] -= flow;
            dm[j] += flow;
        }
    }
}

/// Scratch space for evaluating all node Hamiltonians at a value vector `u`.
pub(crate) struct HamiltonianWorkspace {
    p: Vec<Vec<f64>>,
    pub(crate) grad: Vec<Vec<f64>>,
}

impl HamiltonianWorkspace {
    pub(crate) fn new(graph: &Graph) -> Self {
        Self {
            p: rate_buffers(graph),
            grad: rate_buffers(graph),
        }
    }

    /// Fills `h[i] = H(i, (u_j − u_i)_j)` and `self.grad[i] = ∇H(i, ·)`.
    pub(crate) fn evaluate(&mut self, graph: &Graph, cost: &CostModel, u: &[f64], h: &mut [f64]) -> Result<()> {
        for i in 0..graph.node_count() {
            for (s, &j) in graph.out_neighbors(i).iter().enumerate() {
                self.p[i][s] = u[j] - u[i];
            }
            h[i] = cost.hamiltonian_into(i, &self.p[i], &mut self.grad[i])?;
        }
        Ok(())
    }
}

fn check_rows(rows: &[Vec<f64>], grid: &TimeGrid, n: usize, what: &str) -> Result<()> {
    if rows.len() != grid.len() || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension(format!("{what} must be {} x {n}", grid.len())));
    }
    Ok(())
}

/// Backward RK4 solve of the N value-function ODEs for a given distribution
/// trajectory, which is interpolated in time between grid nodes.
pub fn solve_hjb_backward(
    graph: &Graph,
    cost: &CostModel,
    coupling: &dyn Coupling,
    m_traj: &[Vec<f64>],
    grid: &TimeGrid,
) -> Result<Vec<Vec<f64>>> {
    let n = graph.node_count();
    check_rows(m_traj, grid, n, "distribution trajectory")?;
    let kmax = grid.steps();
    let mut u = vec![vec![0.0; n]; grid.len()];
    for i in 0..n {
        u[kmax][i] = coupling.terminal(i, &m_traj[kmax]);
    }
    let mut rk = Rk4::new(n);
    let mut ws = HamiltonianWorkspace::new(graph);
    let mut m_t = vec![0.0; n];
    let mut h = vec![0.0; n];
    let mut state = u[kmax].clone();
    let dt = grid.dt();
    for k in (0..kmax).rev() {
        rk.step(grid.t(k + 1), -dt, &mut state, |t, y, dy| {
            interpolate_rows(grid, m_traj, t, &mut m_t);
            ws.evaluate(graph, cost, y, &mut h)?;
            for i in 0..n {
                dy[i] = -h[i] - coupling.running(i, &m_t);
            }
            Ok(())
        })?;
        if state.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { step: k });
        }
        u[k].copy_from_slice(&state);
    }
    Ok(u)
}

/// `λ(t_k, i, j) = ∂H(i,·)/∂p_j` evaluated at `(u(t_k, j) − u(t_k, i))_{j∈V(i)}`.
pub fn extract_control(graph: &Graph, cost: &CostModel, u: &[Vec<f64>], grid: &TimeGrid) -> Result<ControlField> {
    check_rows(u, grid, graph.node_count(), "value functions")?;
    let mut ws = HamiltonianWorkspace::new(graph);
    let mut h = vec![0.0; graph.node_count()];
    let mut rates = Vec::with_capacity(grid.len());
    for row in u {
        ws.evaluate(graph, cost, row, &mut h)?;
        rates.push(ws.grad.clone());
    }
    Ok(ControlField { grid: *grid, rates })
}

/// Forward RK4 solve of the Kolmogorov equation under `control`, starting from `m0`.
pub fn solve_transport_forward(graph: &Graph, control: &ControlField, m0: &SimplexPoint, grid: &TimeGrid) -> Result<Vec<Vec<f64>>> {
    let n = graph.node_count();
    if m0.dim() != n {
        return Err(Error::Dimension(format!("initial distribution has {} entries for {n} nodes", m0.dim())));
    }
    if control.grid != *grid {
        return Err(Error::Control("control is sampled on a different time grid".into()));
    }
    control.validate(graph)?;
    let cfl = grid.dt() * control.max_rate();
    let mut m = Vec::with_capacity(grid.len());
    m.push(m0.as_slice().to_vec());
    let mut state = m0.as_slice().to_vec();
    let mut rk = Rk4::new(n);
    let mut rates = rate_buffers(graph);
    let dt = grid.dt();
    for k in 0..grid.steps() {
        rk.step(grid.t(k), dt, &mut state, |t, y, dy| {
            control.rates_at(t, &mut rates);
            transport_rhs(graph, &rates, y, dy);
            Ok(())
        })?;
        if state.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { step: k + 1 });
        }
        if let Some((node, &value)) = state.iter().enumerate().find(|(_, v)| **v < NEGATIVE_MASS_LIMIT) {
            return Err(Error::NegativeMass {
                step: k + 1,
                node: node + 1,
                value,
                cfl,
            });
        }
        if state.iter().any(|v| *v < 0.0) || (compensated_sum(&state) - 1.0).abs() > MASS_DRIFT {
            state = project_to_simplex(&state).into_inner();
        }
        m.push(state.clone());
    }
    Ok(m)
}

/// Everything that defines one game instance.
#[derive(Clone, Copy)]
pub struct MfgProblem<'a> {
    pub graph: &'a Graph,
    pub cost: &'a CostModel,
    pub coupling: &'a dyn Coupling,
    pub m0: &'a SimplexPoint,
    pub grid: TimeGrid,
}

/// Starting trajectory of the fixed-point iteration.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialGuess {
    /// `m(t) ≡ m0`
    Constant,
    /// `m(t) ≡ (1/N, …, 1/N)`
    Uniform,
    Trajectory(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub initial_guess: InitialGuess,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-8,
            max_iter: 200,
            initial_guess: InitialGuess::Constant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iterations: usize,
    /// `‖Θ(m) − m‖∞` at the last iterate `m`; the returned trajectory is `Θ(m)`.
    pub residual: f64,
    pub converged: bool,
    /// Residual of every iteration, in order.
    pub history: Vec<f64>,
    pub apriori_bound: f64,
    pub apriori_max_u: f64,
    pub max_mass_drift: f64,
}

impl IterationReport {
    pub fn apriori_holds(&self, tol: f64) -> bool {
        self.apriori_max_u <= self.apriori_bound + tol
    }
}

#[derive(Clone, Debug)]
pub struct FixedPointSolution {
    pub pair: TrajectoryPair,
    pub control: ControlField,
    pub report: IterationReport,
}

/// Values, their optimal control and the regenerated distribution.
pub type ThetaStep = (Vec<Vec<f64>>, ControlField, Vec<Vec<f64>>);

/// One undamped application of the fixed-point map: values for `m`, their
/// optimal control, and the distribution that control generates from `m0`.
pub fn theta(problem: &MfgProblem<'_>, m: &[Vec<f64>]) -> Result<ThetaStep> {
    let u = solve_hjb_backward(problem.graph, problem.cost, problem.coupling, m, &problem.grid)?;
    let control = extract_control(problem.graph, problem.cost, &u, &problem.grid)?;
    let next = solve_transport_forward(problem.graph, &control, problem.m0, &problem.grid)?;
    Ok((u, control, next))
}

fn sup_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `‖Θ(m) − m‖∞` over all grid nodes and graph nodes.
pub fn fixed_point_residual(problem: &MfgProblem<'_>, m: &[Vec<f64>]) -> Result<f64> {
    let (_, _, next) = theta(problem, m)?;
    Ok(sup_distance(&next, m))
}

/// `sup_i ‖g‖∞ + (sup_i ‖f‖∞ + sup_i |H(i,0)|)·T` with the sups sampled on the simplex.
pub fn apriori_bound(graph: &Graph, cost: &CostModel, coupling: &dyn Coupling, horizon: f64) -> Result<f64> {
    let (sup_f, sup_g) = sampled_sup_norms(coupling, graph.node_count(), 2000, 0);
    let mut sup_h: f64 = 0.0;
    for i in 0..graph.node_count() {
        sup_h = sup_h.max(cost.hamiltonian_at_zero(i)?.abs());
    }
    Ok(sup_g + (sup_f + sup_h) * horizon)
}

/// Damped Picard iteration `m ← (1−θ) m + θ Θ(m)`.
///
/// Stops once the undamped residual `‖Θ(m) − m‖∞` is at most `tol`. The
/// returned pair holds the values computed against the final iterate `m`
/// and the distribution `Θ(m)` generated by their optimal control, so
/// `(control, pair.m)` satisfy the forward equation exactly and `pair.u`
/// solves the backward equations for a trajectory within `residual` of
/// `pair.m`. Without convergence the iterate with the smallest residual is
/// returned and flagged.
pub fn mfg_fixed_point(problem: &MfgProblem<'_>, options: &FixedPointOptions) -> Result<FixedPointSolution> {
    let n = problem.graph.node_count();
    if !(options.damping > 0.0 && options.damping <= 1.0) {
        return Err(Error::Config {
            path: "solver.damping".into(),
            message: "damping must lie in (0,1]".into(),
        });
    }
    if options.tol.is_nan() || options.tol <= 0.0 {
        return Err(Error::Config {
            path: "solver.tol".into(),
            message: "tol must be > 0".into(),
        });
    }
    if problem.m0.dim() != n {
        return Err(Error::Dimension(format!("initial distribution has {} entries for {n} nodes", problem.m0.dim())));
    }
    let len = problem.grid.len();
    let mut m = match &options.initial_guess {
        InitialGuess::Constant => vec![problem.m0.as_slice().to_vec(); len],
        InitialGuess::Uniform => vec![vec![1.0 / n as f64; n]; len],
        InitialGuess::Trajectory(rows) => {
            check_rows(rows, &problem.grid, n, "initial guess")?;
            rows.clone()
        }
    };
    if !problem.graph.has_edges() {
        // Nobody can move: the distribution is frozen at m0.
        m = vec![problem.m0.as_slice().to_vec(); len];
    }
    let bound = apriori_bound(problem.graph, problem.cost, problem.coupling, problem.grid.horizon())?;

    let mut history = Vec::new();
    let mut best: Option<(f64, ThetaStep)> = None;
    let mut converged = false;
    for _ in 0..options.max_iter.max(1) {
        let (u, control, next) = theta(problem, &m)?;
        let residual = sup_distance(&next, &m);
        history.push(residual);
        let improves = best.as_ref().is_none_or(|b| residual < b.0);
        if residual <= options.tol {
            best = Some((residual, (u, control, next)));
            converged = true;
            break;
        }
        for (row, new_row) in m.iter_mut().zip(&next) {
            for (x, y) in row.iter_mut().zip(new_row) {
                *x = (1.0 - options.damping) * *x + options.damping * y;
            }
        }
        if improves {
            best = Some((residual, (u, control, next)));
        }
    }
    let (residual, (u, control, m_out)) = best.expect("at least one iteration ran");
    let apriori_max_u = u.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max);
    let max_mass_drift = m_out.iter().map(|r| (compensated_sum(r) - 1.0).abs()).fold(0.0, f64::max);
    Ok(FixedPointSolution {
        pair: TrajectoryPair {
            grid: problem.grid,
            u,
            m: m_out,
        },
        control,
        report: IterationReport {
            iterations: history.len(),
            residual,
            converged,
            history,
            apriori_bound: bound,
            apriori_max_u,
            max_mass_drift,
        },
    })
}

/// Outcome of [`check_comparison`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// Discrete sub-solution inequalities hold for `u` (within slack).
    pub sub_ok: bool,
    /// Discrete super-solution inequalities hold for `v` (within slack).
    pub super_ok: bool,
    /// `max (u − v)` over the grid; `<= slack` when the conclusion holds.
    pub max_violation: f64,
    /// `(time index, node)` of `max_violation`, node 0-based.
    pub witness: (usize, usize),
    /// Worst failure of the hypotheses, with its `(time index, node)`.
    pub worst_hypothesis: Option<(f64, usize, usize)>,
}

impl ComparisonReport {
    pub fn holds(&self, slack: f64) -> bool {
        self.sub_ok && self.super_ok && self.max_violation <= slack
    }
}

/// Discrete check of the comparison principle for a fixed distribution
/// trajectory: verifies that `u` is a sub-solution and `v` a super-solution
/// (trapezoid residuals on each interval, terminal inequalities) and then
/// measures how far `v >= u` fails.
#[allow(clippy::too_many_arguments)]
pub fn check_comparison(
    graph: &Graph,
    cost: &CostModel,
    coupling: &dyn Coupling,
    m_traj: &[Vec<f64>],
    u_sub: &[Vec<f64>],
    v_super: &[Vec<f64>],
    grid: &TimeGrid,
    slack: f64,
) -> Result<ComparisonReport> {
    let n = graph.node_count();
    check_rows(m_traj, grid, n, "distribution trajectory")?;
    check_rows(u_sub, grid, n, "sub-solution")?;
    check_rows(v_super, grid, n, "super-solution")?;
    let kmax = grid.steps();
    let dt = grid.dt();
    let mut ws = HamiltonianWorkspace::new(graph);

    // -du/dt - H - f at every node, trapezoid-averaged over each interval.
    let mut residual = |w: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        let mut h = vec![vec![0.0; n]; grid.len()];
        for k in 0..grid.len() {
            ws.evaluate(graph, cost, &w[k], &mut h[k])?;
        }
        Ok((0..kmax)
            .map(|k| {
                (0..n)
                    .map(|i| {
                        let source = |kk: usize| h[kk][i] + coupling.running(i, &m_traj[kk]);
                        -(w[k + 1][i] - w[k][i]) / dt - 0.5 * (source(k) + source(k + 1))
                    })
                    .collect()
            })
            .collect())
    };
    let ru = residual(u_sub)?;
    let rv = residual(v_super)?;

    let mut worst: Option<(f64, usize, usize)> = None;
    let mut note = |amount: f64, k: usize, i: usize| {
        if amount > slack && worst.is_none_or(|w| amount > w.0) {
            worst = Some((amount, k, i));
        }
    };
    let mut sub_ok = true;
    let mut super_ok = true;
    for k in 0..kmax {
        for i in 0..n {
            if ru[k][i] > slack {
                sub_ok = false;
                note(ru[k][i], k, i);
            }
            if rv[k][i] < -slack {
                super_ok = false;
                note(-rv[k][i], k, i);
            }
        }
    }
    for i in 0..n {
        let g = coupling.terminal(i, &m_traj[kmax]);
        if u_sub[kmax][i] > g + slack {
            sub_ok = false;
            note(u_sub[kmax][i] - g, kmax, i);
        }
        if v_super[kmax][i] < g - slack {
            super_ok = false;
            note(g - v_super[kmax][i], kmax, i);
        }
    }

    let mut max_violation = f64::NEG_INFINITY;
    let mut witness = (0, 0);
    for k in 0..grid.len() {
        for i in 0..n {
            let d = u_sub[k][i] - v_super[k][i];
            if d > max_violation {
                max_violation = d;
                witness = (k, i);
            }
        }
    }
    Ok(ComparisonReport {
        sub_ok,
        super_ok,
        max_violation,
        witness,
        worst_hypothesis: worst,
    })
}
