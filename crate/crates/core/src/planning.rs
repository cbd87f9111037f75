//! The planner's Hamilton-Jacobi equation on the simplex and the equilibrium
//! it encodes.
//!
//! `∂Φ/∂t + Σ_i m_i H(i, (p_j − p_i)_{j∈V(i)}) + F(m) = 0`, `Φ(T) = G`, is solved
//! on the lattice `{m : M m ∈ ℕ^N, Σ m = 1}` with all spatial derivatives
//! taken along tangent directions `e_j − e_i`. The gradient fields
//! `U_i = ∂Φ/∂m_i` enter every downstream equation only through differences
//! `U_j − U_i`, which is all [`MasterField`] stores.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::Coupling;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::hamiltonian::CostModel;
use crate::mfg::{transport_rhs, ControlField};
use crate::ode::Rk4;
use crate::simplex::{compensated_sum, project_to_simplex, SimplexPoint};
use crate::time_grid::TimeGrid;

/// Largest node count the lattice solver accepts.
pub const MAX_PLANNING_NODES: usize = 3;

/// Lattice discretization of the simplex at resolution `M` (`h = 1/M`).
#[derive(Clone, Debug)]
pub struct SimplexGrid {
    n: usize,
    resolution: usize,
    points: Vec<Vec<usize>>,
    index: HashMap<Vec<usize>, usize>,
    /// `shifts[p·N² + i·N + j]` is the point `k + e_j − e_i`.
    shifts: Vec<Option<usize>>,
}

fn compositions(n: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if prefix.len() + 1 == n {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in (0..=total).rev() {
        prefix.push(first);
        compositions(n, total - first, prefix, out);
        prefix.pop();
    }
}

impl SimplexGrid {
    pub fn new(node_count: usize, resolution: usize) -> Result<Self> {
        if node_count == 0 || node_count > MAX_PLANNING_NODES {
            return Err(Error::PlanningDimension(node_count));
        }
        if resolution == 0 {
            return Err(Error::GridTooCoarse("simplex resolution must be >= 1".into()));
        }
        let mut points = Vec::new();
        compositions(node_count, resolution, &mut Vec::new(), &mut points);
        let index: HashMap<Vec<usize>, usize> = points.iter().enumerate().map(|(p, k)| (k.clone(), p)).collect();
        let nn = node_count * node_count;
        let mut shifts = vec![None; points.len() * nn];
        for (p, k) in points.iter().enumerate() {
            for i in 0..node_count {
                for j in 0..node_count {
                    if i != j && k[i] >= 1 {
                        let mut q = k.clone();
                        q[i] -= 1;
                        q[j] += 1;
                        shifts[p * nn + i * node_count + j] = index.get(&q).copied();
                    }
                }
            }
        }
        Ok(Self {
            n: node_count,
            resolution,
            points,
            index,
            shifts,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn h(&self) -> f64 {
        1.0 / self.resolution as f64
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Lattice coordinates `k` with `m = k/M`.
    pub fn lattice(&self, p: usize) -> &[usize] {
        &self.points[p]
    }

    pub fn coords(&self, p: usize) -> Vec<f64> {
        self.points[p].iter().map(|&k| k as f64 / self.resolution as f64).collect()
    }

    /// No coordinate is zero.
    pub fn is_interior(&self, p: usize) -> bool {
        self.points[p].iter().all(|&k| k >= 1)
    }

    pub fn index_of(&self, lattice: &[usize]) -> Option<usize> {
        self.index.get(lattice).copied()
    }

    /// The point `m + h(e_j − e_i)`, present iff `k_i >= 1`.
    pub fn shift(&self, p: usize, i: usize, j: usize) -> Option<usize> {
        if i == j {
            return None;
        }
        self.shifts[p * self.n * self.n + i * self.n + j]
    }

    /// Barycentric weights of the lattice cell containing `m` (projected
    /// onto the simplex first). At most `N` entries, weights summing to one.
    pub fn locate(&self, m: &[f64]) -> Vec<(usize, f64)> {
        let m = project_to_simplex(m);
        let big = self.resolution as f64;
        let x: Vec<f64> = m.as_slice().iter().map(|v| v * big).collect();
        let mut base: Vec<usize> = x.iter().map(|v| (v.floor() as usize).min(self.resolution)).collect();
        let frac: Vec<f64> = x.iter().zip(&base).map(|(v, k)| (v - *k as f64).clamp(0.0, 1.0)).collect();
        let assigned: usize = base.iter().sum();
        let s = self.resolution.saturating_sub(assigned);
        if s == 0 {
            if assigned > self.resolution {
                return vec![(self.nearest(&x), 1.0)];
            }
            return vec![(self.index[&base], 1.0)];
        }
        if s >= self.n {
            base.iter_mut().for_each(|k| *k += 1);
            return match self.index.get(&base) {
                Some(&p) => vec![(p, 1.0)],
                None => vec![(self.nearest(&x), 1.0)],
            };
        }
        // s = 1: vertices k + e_i with weights r_i.
        // s = N − 1: vertices k + 𝟙 − e_i with weights 1 − r_i.
        let (weights, up): (Vec<f64>, bool) = if s == 1 {
            (frac.clone(), true)
        } else {
            (frac.iter().map(|r| 1.0 - r).collect(), false)
        };
        let total: f64 = weights.iter().sum();
        let mut out = Vec::with_capacity(self.n);
        for i in 0..self.n {
            if weights[i] <= 0.0 {
                continue;
            }
            let mut q = base.clone();
            if up {
                q[i] += 1;
            } else {
                for (l, ql) in q.iter_mut().enumerate() {
                    if l != i {
                        *ql += 1;
                    }
                }
            }
            match self.index.get(&q) {
                Some(&p) => out.push((p, weights[i] / total)),
                None => return vec![(self.nearest(&x), 1.0)],
            }
        }
        out
    }

    fn nearest(&self, x: &[f64]) -> usize {
        (0..self.len())
            .min_by(|&a, &b| {
                let da: f64 = self.points[a].iter().zip(x).map(|(k, v)| (*k as f64 - v).powi(2)).sum();
                let db: f64 = self.points[b].iter().zip(x).map(|(k, v)| (*k as f64 - v).powi(2)).sum();
                da.total_cmp(&db)
            })
            .expect("grid is non-empty")
    }

    /// Unordered pairs `(a, b)`, `a < b`, in the order used by [`MasterField`].
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..self.n {
            for b in a + 1..self.n {
                out.push((a, b));
            }
        }
        out
    }
}

/// `Φ(t_k, point)` on a lattice and time grid.
#[derive(Clone, Debug)]
pub struct SimplexField {
    pub grid: SimplexGrid,
    pub time: TimeGrid,
    /// `values[k][p]`
    pub values: Vec<Vec<f64>>,
}

impl SimplexField {
    pub fn from_fn(grid: SimplexGrid, time: TimeGrid, phi: impl Fn(f64, &[f64]) -> f64) -> Self {
        let coords: Vec<Vec<f64>> = (0..grid.len()).map(|p| grid.coords(p)).collect();
        let values = (0..time.len())
            .map(|k| coords.iter().map(|m| phi(time.t(k), m)).collect())
            .collect();
        Self { grid, time, values }
    }

    /// `Φ(t_k, m)` by barycentric interpolation in `m`.
    pub fn value_at(&self, k: usize, m: &[f64]) -> f64 {
        self.grid.locate(m).iter().map(|(p, w)| w * self.values[k][*p]).sum()
    }
}

/// `Σ_i m_i H(i, (p_j − p_i)_{j∈V(i)})`.
pub fn planning_hamiltonian(graph: &Graph, cost: &CostModel, m: &SimplexPoint, p: &[f64]) -> Result<f64> {
    let n = graph.node_count();
    if m.dim() != n || p.len() != n {
        return Err(Error::Dimension(format!("planning Hamiltonian needs {n} masses and costates")));
    }
    let mut total = 0.0;
    for i in 0..n {
        if m[i] == 0.0 {
            continue;
        }
        let diffs: Vec<f64> = graph.out_neighbors(i).iter().map(|&j| p[j] - p[i]).collect();
        total += m[i] * cost.hamiltonian(i, &diffs)?.value;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanningReport {
    /// Explicit steps taken over the whole horizon.
    pub substeps: usize,
    /// Grid intervals that needed more than one step.
    pub refined_intervals: usize,
    /// Largest dissipation coefficient over all steps and points.
    pub max_alpha: f64,
}

#[derive(Clone, Debug)]
pub struct PlanningSolution {
    pub field: SimplexField,
    pub report: PlanningReport,
}

struct PointUpdate {
    hamiltonian: f64,
    /// Per pair, `m_a λ_ab + m_b λ_ba`.
    rate_bound: Vec<f64>,
}

/// Backward explicit solve with a local Lax-Friedrichs numerical Hamiltonian.
///
/// For each edge `i → j` the tangent difference is central when both
/// neighbours `m ± h(e_j − e_i)` exist and one-sided toward the interior
/// otherwise. Each pair direction carries dissipation
/// `α_ab (Φ₊ − 2Φ + Φ₋)/(2h)` where `α_ab` is the largest
/// `m_a λ_ab + m_b λ_ba` over the three stencil points. Grid intervals are
/// split into equal sub-steps whenever `dt > h / (2 Σ_ab max α_ab)`.
pub fn solve_planning_hj(
    graph: &Graph,
    cost: &CostModel,
    coupling: &dyn Coupling,
    grid: &SimplexGrid,
    time: &TimeGrid,
) -> Result<PlanningSolution> {
    let n = graph.node_count();
    if grid.node_count() != n {
        return Err(Error::Dimension(format!("simplex grid has {} nodes, graph has {n}", grid.node_count())));
    }
    let coords: Vec<Vec<f64>> = (0..grid.len()).map(|p| grid.coords(p)).collect();
    let running: Vec<f64> = coords
        .iter()
        .map(|m| coupling.running_potential(m))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Coupling("planning needs a running potential F".into()))?;
    let terminal: Vec<f64> = coords
        .iter()
        .map(|m| coupling.terminal_potential(m))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Coupling("planning needs a terminal potential G".into()))?;

    let pairs = grid.pairs();
    let h = grid.h();
    let mut values = vec![Vec::new(); time.len()];
    values[time.steps()] = terminal;
    let mut report = PlanningReport {
        substeps: 0,
        refined_intervals: 0,
        max_alpha: 0.0,
    };

    let evaluate = |phi: &[f64], p: usize| -> Result<PointUpdate> {
        let m = &coords[p];
        let mut ham = 0.0;
        let mut bound = vec![0.0; pairs.len()];
        for i in 0..n {
            if grid.lattice(p)[i] == 0 {
                continue;
            }
            let targets = graph.out_neighbors(i);
            let diffs: Vec<f64> = targets
                .iter()
                .map(|&j| {
                    let plus = grid.shift(p, i, j).expect("k_i >= 1");
                    match grid.shift(p, j, i) {
                        Some(minus) => (phi[plus] - phi[minus]) / (2.0 * h),
                        None => (phi[plus] - phi[p]) / h,
                    }
                })
                .collect();
            let hv = cost.hamiltonian(i, &diffs)?;
            ham += m[i] * hv.value;
            for (&j, lam) in targets.iter().zip(&hv.gradient) {
                let q = pairs.iter().position(|&(a, b)| (a, b) == (i.min(j), i.max(j))).expect("pair");
                bound[q] += m[i] * lam;
            }
        }
        Ok(PointUpdate { hamiltonian: ham, rate_bound: bound })
    };

    for k in (0..time.steps()).rev() {
        let mut phi = values[k + 1].clone();
        let mut remaining = time.dt();
        let mut steps_here = 0;
        while remaining > 0.0 {
            let updates: Vec<PointUpdate> = (0..grid.len())
                .into_par_iter()
                .with_min_len(64)
                .map(|p| evaluate(&phi, p))
                .collect::<Result<_>>()?;
            let alpha: Vec<f64> = (0..pairs.len())
                .map(|q| updates.iter().map(|u| u.rate_bound[q]).fold(0.0, f64::max))
                .collect();
            let alpha_sum: f64 = alpha.iter().sum();
            report.max_alpha = alpha.iter().copied().fold(report.max_alpha, f64::max);
            let dt_max = if alpha_sum > 0.0 { h / (2.0 * alpha_sum) } else { f64::INFINITY };
            let count = (remaining / dt_max).ceil().max(1.0);
            let dt = remaining / count;
            let next: Vec<f64> = (0..grid.len())
                .into_par_iter()
                .with_min_len(64)
                .map(|p| {
                    let mut rhs = updates[p].hamiltonian + running[p];
                    for (q, &(a, b)) in pairs.iter().enumerate() {
                        if alpha[q] == 0.0 {
                            continue;
                        }
                        if let (Some(plus), Some(minus)) = (grid.shift(p, a, b), grid.shift(p, b, a)) {
                            let local = updates[p].rate_bound[q]
                                .max(updates[plus].rate_bound[q])
                                .max(updates[minus].rate_bound[q]);
                            rhs += local * (phi[plus] - 2.0 * phi[p] + phi[minus]) / (2.0 * h);
                        }
                    }
                    phi[p] + dt * rhs
                })
                .collect();
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step: k });
            }
            phi = next;
            remaining = if count > 1.0 { remaining - dt } else { 0.0 };
            steps_here += 1;
        }
        report.substeps += steps_here;
        if steps_here > 1 {
            report.refined_intervals += 1;
        }
        values[k] = phi;
    }
    Ok(PlanningSolution {
        field: SimplexField {
            grid: grid.clone(),
            time: *time,
            values,
        },
        report,
    })
}

/// `U_b − U_a` for every unordered pair `a < b`, plus `Φ` as gauge slot.
#[derive(Clone, Debug)]
pub struct MasterField {
    pub grid: SimplexGrid,
    pub time: TimeGrid,
    pub pairs: Vec<(usize, usize)>,
    /// `diffs[k][p · pairs + q]`
    pub diffs: Vec<Vec<f64>>,
    /// `Φ(t_k, point)`; with the convention `Σ_i m_i U_i = Φ` this fixes
    /// the absolute values of `U` from the differences.
    pub gauge: Vec<Vec<f64>>,
}

impl MasterField {
    fn pair_slot(&self, a: usize, b: usize) -> (usize, f64) {
        let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
        let q = self.pairs.iter().position(|&x| x == (lo, hi)).expect("pair of distinct nodes");
        (q, sign)
    }

    /// `U_j − U_i` at `(t_k, point p)`.
    pub fn difference(&self, k: usize, p: usize, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let (q, sign) = self.pair_slot(i, j);
        sign * self.diffs[k][p * self.pairs.len() + q]
    }

    /// Absolute `U_i(t_k, p)` under the gauge `Σ_j m_j U_j = Φ`:
    /// `U_i = Φ − Σ_j m_j (U_j − U_i)`.
    pub fn value(&self, k: usize, p: usize, i: usize) -> f64 {
        let m = self.grid.coords(p);
        let spread: f64 = (0..m.len()).map(|j| m[j] * self.difference(k, p, i, j)).sum();
        self.gauge[k][p] - spread
    }

    /// All pair differences at `(t, m)`, linear in `t`, barycentric in `m`.
    pub fn differences_at(&self, t: f64, m: &[f64], out: &mut [f64]) {
        let (k, s) = self.time.locate(t);
        let cell = self.grid.locate(m);
        let np = self.pairs.len();
        for (q, o) in out.iter_mut().enumerate() {
            let at = |kk: usize| cell.iter().map(|(p, w)| w * self.diffs[kk][p * np + q]).sum::<f64>();
            *o = if s == 0.0 { at(k) } else { (1.0 - s) * at(k) + s * at(k + 1) };
        }
    }
}

/// Tangent differences of `Φ` along every pair direction.
///
/// Central where both neighbours exist, one-sided where only one does, and
/// at points where neither does (vertices for `N = 3`) composed from the
/// two other pairs through `U_b − U_a = (U_b − U_c) − (U_a − U_c)`.
pub fn extract_master_fields(phi: &SimplexField) -> Result<MasterField> {
    let grid = &phi.grid;
    if grid.node_count() >= 2 && grid.resolution() < 2 {
        return Err(Error::GridTooCoarse(format!(
            "central differences need resolution >= 2, got {}",
            grid.resolution()
        )));
    }
    let pairs = grid.pairs();
    let np = pairs.len();
    let h = grid.h();
    let mut diffs = Vec::with_capacity(phi.time.len());
    for slice in &phi.values {
        let mut row = vec![f64::NAN; grid.len() * np];
        for p in 0..grid.len() {
            for (q, &(a, b)) in pairs.iter().enumerate() {
                row[p * np + q] = match (grid.shift(p, a, b), grid.shift(p, b, a)) {
                    (Some(plus), Some(minus)) => (slice[plus] - slice[minus]) / (2.0 * h),
                    (Some(plus), None) => (slice[plus] - slice[p]) / h,
                    (None, Some(minus)) => (slice[p] - slice[minus]) / h,
                    (None, None) => f64::NAN,
                };
            }
            for (q, &(a, b)) in pairs.iter().enumerate() {
                if !row[p * np + q].is_nan() {
                    continue;
                }
                let c = (0..grid.node_count()).find(|&c| c != a && c != b).expect("a third node");
                let get = |x: usize, y: usize| -> f64 {
                    let (lo, hi, sign) = if x < y { (x, y, 1.0) } else { (y, x, -1.0) };
                    let qq = pairs.iter().position(|&pr| pr == (lo, hi)).expect("pair");
                    sign * row[p * np + qq]
                };
                row[p * np + q] = get(c, b) - get(c, a);
            }
        }
        diffs.push(row);
    }
    Ok(MasterField {
        grid: grid.clone(),
        time: phi.time,
        pairs,
        diffs,
        gauge: phi.values.clone(),
    })
}

/// Residual of the pair-difference Master equations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasterResidual {
    pub sup: f64,
    pub mean: f64,
    /// Per pair `(a, b)`, the sup of its residual.
    pub per_pair: Vec<f64>,
    /// Points × times at which the residual was evaluated.
    pub evaluations: usize,
    /// `(time index, point, pair)` of `sup`.
    pub worst: Option<(usize, usize, usize)>,
}

/// Discrete residual of the Master equations for the differences
/// `W_ab = U_b − U_a`:
///
/// `∂_t W_ab + H_b − H_a + Σ_j m_j Σ_{l∈V(j)} λ_jl D_{jl} W_ab + f(b,m) − f(a,m)`
///
/// where `D_{jl}` is the tangent derivative along `e_l − e_j` and `λ` the
/// rates generated by the differences themselves. This is the `b`-th minus
/// the `a`-th Master equation, the part that does not depend on how `U` is
/// extended off the simplex. Central differences in `t` and `m`; evaluated
/// at points with every `k_i >= 2` and at interior times.
pub fn master_residual(graph: &Graph, cost: &CostModel, coupling: &dyn Coupling, master: &MasterField) -> Result<MasterResidual> {
    let grid = &master.grid;
    let n = graph.node_count();
    if grid.node_count() != n {
        return Err(Error::Dimension(format!("master field has {} nodes, graph has {n}", grid.node_count())));
    }
    let np = master.pairs.len();
    let h = grid.h();
    let dt = master.time.dt();
    let deep: Vec<usize> = (0..grid.len()).filter(|&p| grid.lattice(p).iter().all(|&k| k >= 2)).collect();
    let mut sup: f64 = 0.0;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut per_pair = vec![0.0f64; np];
    let mut worst = None;
    if np == 0 {
        return Ok(MasterResidual { sup, mean: 0.0, per_pair, evaluations: 0, worst });
    }
    for k in 1..master.time.steps() {
        let results: Vec<Vec<f64>> = deep
            .par_iter()
            .map(|&p| -> Result<Vec<f64>> {
                let m = grid.coords(p);
                let mut ham = vec![0.0; n];
                let mut rates: Vec<Vec<f64>> = Vec::with_capacity(n);
                for i in 0..n {
                    let d: Vec<f64> = graph.out_neighbors(i).iter().map(|&j| master.difference(k, p, i, j)).collect();
                    let hv = cost.hamiltonian(i, &d)?;
                    ham[i] = hv.value;
                    rates.push(hv.gradient);
                }
                let f: Vec<f64> = (0..n).map(|i| coupling.running(i, &m)).collect();
                Ok(master
                    .pairs
                    .iter()
                    .enumerate()
                    .map(|(q, &(a, b))| {
                        let w = |kk: usize, pp: usize| master.diffs[kk][pp * np + q];
                        let dwdt = (w(k + 1, p) - w(k - 1, p)) / (2.0 * dt);
                        let mut advection = 0.0;
                        for j in 0..n {
                            for (&l, lam) in graph.out_neighbors(j).iter().zip(&rates[j]) {
                                let plus = grid.shift(p, j, l).expect("deep interior");
                                let minus = grid.shift(p, l, j).expect("deep interior");
                                advection += m[j] * lam * (w(k, plus) - w(k, minus)) / (2.0 * h);
                            }
                        }
                        dwdt + ham[b] - ham[a] + advection + f[b] - f[a]
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        for (&p, r) in deep.iter().zip(&results) {
            for (q, v) in r.iter().enumerate() {
                let a = v.abs();
                total += a;
                count += 1;
                per_pair[q] = per_pair[q].max(a);
                if a > sup || worst.is_none() {
                    sup = sup.max(a);
                    worst = Some((k, p, q));
                }
            }
        }
    }
    Ok(MasterResidual {
        sup,
        mean: if count > 0 { total / count as f64 } else { 0.0 },
        per_pair,
        evaluations: count,
        worst,
    })
}

/// `max |D_cd W_ab − D_ab W_cd|` over deep-interior points and all times:
/// the discrete form of `∂U_i/∂m_j = ∂U_j/∂m_i` on tangent data.
pub fn cross_symmetry_defect(master: &MasterField) -> f64 {
    let grid = &master.grid;
    let np = master.pairs.len();
    let h = grid.h();
    let mut worst: f64 = 0.0;
    for k in 0..master.time.len() {
        for p in (0..grid.len()).filter(|&p| grid.lattice(p).iter().all(|&kk| kk >= 2)) {
            let d = |q: usize, (a, b): (usize, usize)| {
                let plus = grid.shift(p, a, b).expect("deep interior");
                let minus = grid.shift(p, b, a).expect("deep interior");
                (master.diffs[k][plus * np + q] - master.diffs[k][minus * np + q]) / (2.0 * h)
            };
            for q1 in 0..np {
                for q2 in q1 + 1..np {
                    let defect = d(q1, master.pairs[q2]) - d(q2, master.pairs[q1]);
                    worst = worst.max(defect.abs());
                }
            }
        }
    }
    worst
}

/// Output of [`characteristics_flow`].
#[derive(Clone, Debug)]
pub struct Characteristics {
    pub grid: TimeGrid,
    /// `m[k][i]`
    pub m: Vec<Vec<f64>>,
    /// Rates along the trajectory, `λ(t_k, i, j) = ∂H(i,·)/∂p_j` at the
    /// Master differences of `(t_k, m(t_k))`.
    pub control: ControlField,
    pub max_mass_drift: f64,
}

fn rates_from_differences(graph: &Graph, cost: &CostModel, master: &MasterField, diffs: &[f64], out: &mut [Vec<f64>]) -> Result<()> {
    for (i, row) in out.iter_mut().enumerate() {
        let p: Vec<f64> = graph
            .out_neighbors(i)
            .iter()
            .map(|&j| {
                let (q, sign) = master.pair_slot(i, j);
                sign * diffs[q]
            })
            .collect();
        cost.hamiltonian_into(i, &p, row)?;
    }
    Ok(())
}

/// Forward transport from `m0` with rates read from the Master differences,
/// interpolated in `(t, m)`; RK4 on the field's time grid.
pub fn characteristics_flow(graph: &Graph, cost: &CostModel, master: &MasterField, m0: &SimplexPoint) -> Result<Characteristics> {
    let n = graph.node_count();
    if m0.dim() != n || master.grid.node_count() != n {
        return Err(Error::Dimension(format!("characteristics need {n}-node data")));
    }
    let grid = master.time;
    let h = master.grid.h();
    let mut buf = vec![0.0; master.pairs.len()];
    let mut rates: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; graph.out_degree(i)]).collect();
    let mut state = m0.as_slice().to_vec();
    let mut m = vec![state.clone()];
    let mut sampled = Vec::with_capacity(grid.len());
    let mut rk = Rk4::new(n);
    let mut drift: f64 = 0.0;
    let mut sample = |t: f64, y: &[f64], rates: &mut [Vec<f64>]| -> Result<()> {
        master.differences_at(t, y, &mut buf);
        rates_from_differences(graph, cost, master, &buf, rates)
    };
    sample(grid.t(0), &state, &mut rates)?;
    sampled.push(rates.clone());
    for k in 0..grid.steps() {
        rk.step(grid.t(k), grid.dt(), &mut state, |t, y, dy| {
            sample(t, y, &mut rates)?;
            transport_rhs(graph, &rates, y, dy);
            Ok(())
        })?;
        let below = state.iter().fold(0.0f64, |acc, v| acc.max(-v));
        let off = (compensated_sum(&state) - 1.0).abs();
        drift = drift.max(off);
        if !state.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { step: k + 1 });
        }
        if below.max(off) > h {
            return Err(Error::LeftGrid {
                time_index: k + 1,
                distance: below.max(off),
                step: h,
            });
        }
        if below > 0.0 {
            state = project_to_simplex(&state).into_inner();
        }
        m.push(state.clone());
        sample(grid.t(k + 1), &state, &mut rates)?;
        sampled.push(rates.clone());
    }
    Ok(Characteristics {
        grid,
        m,
        control: ControlField { grid, rates: sampled },
        max_mass_drift: drift,
    })
}

/// `𝒥(0, m0, λ) = ∫ F(m) − Σ_i m_i L(i, λ_i) dt + G(m(T))` along the flow
/// generated by the open-loop control `λ`.
pub fn planner_payoff(graph: &Graph, cost: &CostModel, coupling: &dyn Coupling, control: &ControlField, m0: &SimplexPoint) -> Result<f64> {
    let n = graph.node_count();
    if m0.dim() != n {
        return Err(Error::Dimension(format!("initial distribution has {} entries for {n} nodes", m0.dim())));
    }
    control.validate(graph)?;
    let grid = control.grid;
    let mut rates: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; graph.out_degree(i)]).collect();
    let mut state: Vec<f64> = m0.as_slice().to_vec();
    state.push(0.0);
    let mut rk = Rk4::new(n + 1);
    let missing = || Error::Coupling("planner payoff needs potentials F and G".into());
    for k in 0..grid.steps() {
        let mut failure = None;
        rk.step(grid.t(k), grid.dt(), &mut state, |t, y, dy| {
            control.rates_at(t, &mut rates);
            let m = &y[..n];
            transport_rhs(graph, &rates, m, &mut dy[..n]);
            let running_cost: f64 = (0..n).map(|i| m[i] * cost.cost(i, &rates[i])).sum();
            match coupling.running_potential(m) {
                Some(f) => dy[n] = f - running_cost,
                None => {
                    failure = Some(missing());
                    dy[n] = 0.0;
                }
            }
            Ok(())
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
    }
    let g = coupling.terminal_potential(&state[..n]).ok_or_else(missing)?;
    Ok(state[n] + g)
}

/// Constant controls at a few levels plus `random` piecewise-constant ones.
pub fn default_planner_trials(graph: &Graph, grid: TimeGrid, random: usize, seed: u64) -> Vec<ControlField> {
    let mut out: Vec<ControlField> = [0.0, 0.1, 0.5, 1.0, 5.0]
        .iter()
        .map(|&r| ControlField::constant(graph, grid, |_, _| r))
        .collect();
    let windows = 8;
    for r in 0..random {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let levels: Vec<Vec<Vec<f64>>> = (0..windows)
            .map(|_| {
                (0..graph.node_count())
                    .map(|i| (0..graph.out_degree(i)).map(|_| rng.random_range(0.0..=2.0)).collect())
                    .collect()
            })
            .collect();
        let rates = (0..grid.len())
            .map(|k| {
                let w = ((k as f64 + 0.5) / grid.steps() as f64 * windows as f64).floor() as usize;
                levels[w.min(windows - 1)].clone()
            })
            .collect();
        out.push(ControlField { grid, rates });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueFunctionReport {
    /// `Φ(0, m0)`
    pub phi0: f64,
    /// `𝒥(0, m0, λ̃)` per trial.
    pub payoffs: Vec<f64>,
    /// `max_trial 𝒥 − Φ(0, m0)`
    pub max_excess: f64,
    /// `𝒥` of the characteristics control.
    pub characteristics_payoff: f64,
    /// `Φ(0, m0) − 𝒥` of the characteristics control.
    pub characteristics_gap: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Checks that no trial control beats `Φ(0, m0)` by more than `tol` and
/// that the characteristics control attains it within `tol`.
#[allow(clippy::too_many_arguments)]
pub fn check_value_function(
    graph: &Graph,
    cost: &CostModel,
    coupling: &dyn Coupling,
    phi: &SimplexField,
    m0: &SimplexPoint,
    trials: &[ControlField],
    characteristics: &ControlField,
    tol: f64,
) -> Result<ValueFunctionReport> {
    let phi0 = phi.value_at(0, m0.as_slice());
    let payoffs: Vec<f64> = trials
        .par_iter()
        .map(|c| planner_payoff(graph, cost, coupling, c, m0))
        .collect::<Result<_>>()?;
    let max_excess = payoffs.iter().map(|j| j - phi0).fold(f64::NEG_INFINITY, f64::max);
    let characteristics_payoff = planner_payoff(graph, cost, coupling, characteristics, m0)?;
    let characteristics_gap = phi0 - characteristics_payoff;
    Ok(ValueFunctionReport {
        phi0,
        payoffs,
        max_excess,
        characteristics_payoff,
        characteristics_gap,
        tol,
        passed: max_excess <= tol && characteristics_gap.abs() <= tol,
    })
}
