use graphmfg::coupling::{BuiltinCoupling, FnCoupling};
use graphmfg::graph::Graph;
use graphmfg::hamiltonian::CostModel;
use graphmfg::mfg::{
    apriori_bound, fixed_point_residual, mfg_fixed_point, solve_hjb_backward, solve_transport_forward, ControlField,
    FixedPointOptions, FixedPointSolution, InitialGuess, MfgProblem,
};
use graphmfg::simplex::SimplexPoint;
use graphmfg::time_grid::TimeGrid;

fn crowd_two_cycle(steps: usize, tol: f64, guess: InitialGuess) -> FixedPointSolution {
    let g = Graph::cycle(2).unwrap();
    let cost = CostModel::unit_quadratic(&g);
    let c = BuiltinCoupling::crowd_aversion(1.0, 0.0).resolve(2).unwrap();
    let m0 = SimplexPoint::new(vec![0.9, 0.1]).unwrap();
    let problem = MfgProblem {
        graph: &g,
        cost: &cost,
        coupling: &c,
        m0: &m0,
        grid: TimeGrid::new(1.0, steps).unwrap(),
    };
    let options = FixedPointOptions {
        tol,
        max_iter: 500,
        initial_guess: guess,
        ..FixedPointOptions::default()
    };
    mfg_fixed_point(&problem, &options).unwrap()
}

/// Sup distance between a solution on `K` steps and one on `2K`, compared
/// at the coarse time nodes.
fn refinement_gap(coarse: &FixedPointSolution, fine: &FixedPointSolution) -> f64 {
    let mut gap = 0.0f64;
    for k in 0..coarse.pair.grid.len() {
        for i in 0..2 {
            gap = gap.max((coarse.pair.u[k][i] - fine.pair.u[2 * k][i]).abs());
            gap = gap.max((coarse.pair.m[k][i] - fine.pair.m[2 * k][i]).abs());
        }
    }
    gap
}

#[test]
fn fourth_order_time_refinement() {
    let runs: Vec<_> = [50, 100, 200, 400].iter().map(|&k| crowd_two_cycle(k, 1e-14, InitialGuess::Constant)).collect();
    assert!(runs.iter().all(|r| r.report.converged));
    let gaps: Vec<f64> = runs.windows(2).map(|w| refinement_gap(&w[0], &w[1])).collect();
    let ratios: Vec<f64> = gaps.windows(2).map(|w| w[0] / w[1]).collect();
    assert!(ratios.iter().all(|&r| r > 10.0), "gaps {gaps:?}, ratios {ratios:?}");
    let last = *ratios.last().unwrap();
    assert!((12.0..=20.0).contains(&last), "gaps {gaps:?}, ratios {ratios:?}");
}

#[test]
fn starts_agree_within_ten_tolerances() {
    let tol = 1e-9;
    let a = crowd_two_cycle(400, tol, InitialGuess::Constant);
    let b = crowd_two_cycle(400, tol, InitialGuess::Uniform);
    let flat = vec![vec![0.3, 0.7]; 401];
    let c = crowd_two_cycle(400, tol, InitialGuess::Trajectory(flat));
    for other in [&b, &c] {
        let gap = a.pair.m.iter().flatten().zip(other.pair.m.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap <= 10.0 * tol, "{gap}");
    }
}

#[test]
fn returned_trajectory_meets_tolerance() {
    let g = Graph::cycle(2).unwrap();
    let cost = CostModel::unit_quadratic(&g);
    let c = BuiltinCoupling::crowd_aversion(1.0, 0.0).resolve(2).unwrap();
    let m0 = SimplexPoint::new(vec![0.9, 0.1]).unwrap();
    let problem = MfgProblem {
        graph: &g,
        cost: &cost,
        coupling: &c,
        m0: &m0,
        grid: TimeGrid::new(1.0, 400).unwrap(),
    };
    let sol = mfg_fixed_point(&problem, &FixedPointOptions::default()).unwrap();
    assert!(sol.report.converged && sol.report.residual <= 1e-8);
    let again = fixed_point_residual(&problem, &sol.pair.m).unwrap();
    assert!(again <= sol.report.residual, "{again} vs {}", sol.report.residual);
    assert_eq!(sol.report.history.len(), sol.report.iterations);
    assert_eq!(*sol.report.history.last().unwrap(), sol.report.residual);
}

#[test]
fn vertex_transitive_graphs_stay_put() {
    for n in [2, 3, 5] {
        let g = Graph::cycle(n).unwrap();
        let cost = CostModel::unit_quadratic(&g);
        let c = BuiltinCoupling::crowd_aversion(1.0, 0.5).resolve(n).unwrap();
        let m0 = SimplexPoint::uniform(n);
        let problem = MfgProblem {
            graph: &g,
            cost: &cost,
            coupling: &c,
            m0: &m0,
            grid: TimeGrid::new(2.0, 100).unwrap(),
        };
        let sol = mfg_fixed_point(&problem, &FixedPointOptions::default()).unwrap();
        let share = 1.0 / n as f64;
        for (k, row) in sol.pair.u.iter().enumerate() {
            let t = problem.grid.t(k);
            for (i, &u) in row.iter().enumerate() {
                let exact = -share * (2.0 - t) - 0.5 * share;
                assert!((u - exact).abs() < 1e-12, "n={n} k={k} i={i}: {u} vs {exact}");
                assert!((sol.pair.m[k][i] - share).abs() < 1e-14);
            }
        }
        assert!(sol.control.max_rate() < 1e-14);
    }
}

/// With `f = 0`, `g = 0` the values vanish and the trajectory stays at `m0`.
#[test]
fn zero_coupling_zero_values() {
    let g = Graph::complete(3).unwrap();
    let cost = CostModel::unit_quadratic(&g);
    let c = FnCoupling::new(|_, _| 0.0, |_, _| 0.0);
    let grid = TimeGrid::new(1.0, 40).unwrap();
    let m = vec![vec![0.2, 0.3, 0.5]; grid.len()];
    let u = solve_hjb_backward(&g, &cost, &c, &m, &grid).unwrap();
    assert!(u.iter().flatten().all(|&x| x == 0.0));
}

/// Two-node chain `1 -> 2` at constant rate: `m_1(t) = m_1(0) e^{−λt}`.
#[test]
fn transport_matches_exponential_decay() {
    let g = Graph::new(2, &[(0, 1)]).unwrap();
    let grid = TimeGrid::new(2.0, 200).unwrap();
    let lam = 1.3;
    let control = ControlField::constant(&g, grid, |_, _| lam);
    let m0 = SimplexPoint::new(vec![0.8, 0.2]).unwrap();
    let m = solve_transport_forward(&g, &control, &m0, &grid).unwrap();
    for (k, row) in m.iter().enumerate() {
        let exact = 0.8 * (-lam * grid.t(k)).exp();
        assert!((row[0] - exact).abs() < 1e-9, "k={k}");
        assert!((row[0] + row[1] - 1.0).abs() < 1e-14);
    }
}

#[test]
fn values_respect_apriori_bound() {
    for steps in [100, 400] {
        let sol = crowd_two_cycle(steps, 1e-8, InitialGuess::Constant);
        assert!(sol.report.apriori_holds(1e-12));
        let max_u = sol.pair.u.iter().flatten().fold(0.0f64, |a, x| a.max(x.abs()));
        assert!(max_u <= sol.report.apriori_bound);
    }
    let g = Graph::cycle(2).unwrap();
    let c = BuiltinCoupling::crowd_aversion(1.0, 0.0).resolve(2).unwrap();
    let bound = apriori_bound(&g, &CostModel::unit_quadratic(&g), &c, 1.0).unwrap();
    assert!((bound - 1.0).abs() < 1e-9, "{bound}");
}
