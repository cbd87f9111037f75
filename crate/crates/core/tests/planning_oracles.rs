use graphmfg::coupling::{BuiltinCoupling, Coupling, FnCoupling};
use graphmfg::error::Error;
use graphmfg::graph::Graph;
use graphmfg::hamiltonian::CostModel;
use graphmfg::mfg::{mfg_fixed_point, ControlField, FixedPointOptions, MfgProblem};
use graphmfg::planning::{
    characteristics_flow, cross_symmetry_defect, extract_master_fields, master_residual, planner_payoff, solve_planning_hj,
    SimplexField, SimplexGrid,
};
use graphmfg::simplex::SimplexPoint;
use graphmfg::time_grid::TimeGrid;

const C: [f64; 3] = [0.3, -0.2, 0.5];
const A: [[f64; 3]; 3] = [[1.0, 0.4, -0.3], [0.4, -0.5, 0.2], [-0.3, 0.2, 0.8]];

fn gradient(m: &[f64]) -> [f64; 3] {
    let mut u = C;
    for (i, ui) in u.iter_mut().enumerate() {
        *ui += (0..3).map(|l| A[i][l] * m[l]).sum::<f64>();
    }
    u
}

/// The running coupling for which `U = c + A m` solves the master system on
/// the complete 3-node graph with unit quadratic costs:
/// `f_i = −H(i, U − U_i) − Σ_j m_j Σ_l λ_jl (A_il − A_ij)`, `λ_jl = (U_l − U_j)⁺`.
fn engineered_running(i: usize, m: &[f64]) -> f64 {
    let u = gradient(m);
    let h: f64 = (0..3).filter(|&j| j != i).map(|j| 0.5 * (u[j] - u[i]).max(0.0).powi(2)).sum();
    let mut transport = 0.0;
    for j in 0..3 {
        for l in (0..3).filter(|&l| l != j) {
            transport += m[j] * (u[l] - u[j]).max(0.0) * (A[i][l] - A[i][j]);
        }
    }
    -h - transport
}

#[test]
fn quadratic_potential_solves_master_system() {
    let g = Graph::complete(3).unwrap();
    let cost = CostModel::unit_quadratic(&g);
    let coupling = FnCoupling::new(engineered_running, |_, _| 0.0);
    let phi = SimplexField::from_fn(SimplexGrid::new(3, 16).unwrap(), TimeGrid::new(1.0, 32).unwrap(), |_, m| {
        let quad: f64 = (0..3).map(|i| (0..3).map(|l| m[i] * A[i][l] * m[l]).sum::<f64>()).sum();
        (0..3).map(|i| C[i] * m[i]).sum::<f64>() + 0.5 * quad
    });
    let master = extract_master_fields(&phi).unwrap();
    let r = master_residual(&g, &cost, &coupling, &master).unwrap();
    assert!(r.evaluations > 0);
    assert!(r.sup <= 1e-10, "{r:?}");
    for k in [0, 16, 32] {
        for p in (0..master.grid.len()).filter(|&p| master.grid.shift(p, 0, 2).is_some() && master.grid.shift(p, 2, 0).is_some()) {
            let u = gradient(&master.grid.coords(p));
            assert!((master.difference(k, p, 0, 2) - (u[2] - u[0])).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_field_has_zero_residual() {
    let g = Graph::cycle(3).unwrap();
    let cost = CostModel::unit_quadratic(&g);
    let zero = BuiltinCoupling::Zero.resolve(3).unwrap();
    let phi = SimplexField::from_fn(SimplexGrid::new(3, 12).unwrap(), TimeGrid::new(1.0, 24).unwrap(), |_, _| 0.0);
    let r = master_residual(&g, &cost, &zero, &extract_master_fields(&phi).unwrap()).unwrap();
    assert!(r.sup <= 1e-12);
}

#[test]
fn terminal_row_is_the_terminal_potential() {
    let g = Graph::cycle(2).unwrap();
    let cost = CostModel::unit_quadratic(&g);
    let c = BuiltinCoupling::crowd_aversion(1.0, 0.5).resolve(2).unwrap();
    let grid = SimplexGrid::new(2, 16).unwrap();
    let time = TimeGrid::new(1.0, 64).unwrap();
    let sol = solve_planning_hj(&g, &cost, &c, &grid, &time).unwrap();
    for p in 0..grid.len() {
        let m = grid.coords(p);
        let exact = c.terminal_potential(&m).unwrap();
        assert!((sol.field.values[time.steps()][p] - exact).abs() < 1e-15);
    }
}

#[test]
fn lattice_size_and_dimension_limit() {
    assert_eq!(SimplexGrid::new(2, 64).unwrap().len(), 65);
    assert_eq!(SimplexGrid::new(3, 32).unwrap().len(), 561);
    assert!(matches!(SimplexGrid::new(4, 8), Err(Error::PlanningDimension(4))));
}

/// Idle control on a crowd-averse population: `𝒥 = T F(m0) + G(m0)`.
#[test]
fn idle_planner_payoff() {
    let g = Graph::complete(3).unwrap();
    let cost = CostModel::unit_quadratic(&g);
    let c = BuiltinCoupling::crowd_aversion(1.0, 0.5).resolve(3).unwrap();
    let m0 = SimplexPoint::new(vec![0.5, 0.3, 0.2]).unwrap();
    let grid = TimeGrid::new(2.0, 50).unwrap();
    let j = planner_payoff(&g, &cost, &c, &ControlField::zeros(&g, grid), &m0).unwrap();
    let sq = 0.25 + 0.09 + 0.04;
    assert!((j - (2.0 * -0.5 * sq - 0.25 * sq)).abs() < 1e-13, "{j}");
}

#[test]
fn three_node_characteristics_follow_equilibrium() {
    let g = Graph::complete(3).unwrap();
    let cost = CostModel::unit_quadratic(&g);
    let c = BuiltinCoupling::crowd_aversion(1.0, 0.0).resolve(3).unwrap();
    let m0 = SimplexPoint::new(vec![0.7, 0.2, 0.1]).unwrap();
    let time = TimeGrid::new(1.0, 512).unwrap();
    let sol = solve_planning_hj(&g, &cost, &c, &SimplexGrid::new(3, 32).unwrap(), &time).unwrap();
    let master = extract_master_fields(&sol.field).unwrap();
    assert!(cross_symmetry_defect(&master) <= 1e-12);
    let flow = characteristics_flow(&g, &cost, &master, &m0).unwrap();
    assert!(flow.max_mass_drift <= 1e-10);
    for row in &flow.m {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        assert!(row.iter().all(|&x| x >= 0.0));
    }
    let problem = MfgProblem {
        graph: &g,
        cost: &cost,
        coupling: &c,
        m0: &m0,
        grid: time,
    };
    let fixed = mfg_fixed_point(&problem, &FixedPointOptions::default()).unwrap();
    let gap = flow.m.iter().flatten().zip(fixed.pair.m.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap <= 5e-3, "{gap}");
    let r = master_residual(&g, &cost, &c, &master).unwrap();
    assert!(r.sup.is_finite() && r.evaluations > 0);
}
