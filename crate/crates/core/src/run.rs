//! Subcommand dispatch and artifact files.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::coupling::{check_potentials, sampled_lipschitz, Coupling};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::hamiltonian::CostModel;
use crate::mfg::{extract_control, mfg_fixed_point, ControlField, FixedPointOptions, InitialGuess, MfgProblem, TrajectoryPair};
use crate::planning::{
    characteristics_flow, check_value_function, cross_symmetry_defect, default_planner_trials, extract_master_fields,
    master_residual, solve_planning_hj, Characteristics, MasterField, PlanningSolution, SimplexGrid, SimplexField,
};
use crate::time_grid::TimeGrid;
use crate::verification::{check_monotonicity, default_deviations, nash_gap};

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const CHARACTERISTICS_FILE: &str = "characteristics.csv";
pub const PHI_FILE: &str = "phi.csv";
pub const MASTER_FILE: &str = "master.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Solve converged (or the check ran).
pub const STATUS_OK: u8 = 0;
pub const STATUS_ERROR: u8 = 1;
/// The fixed-point iteration stopped at `max_iter`.
pub const STATUS_UNCONVERGED: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Subcommand {
    SolveMfg,
    SolvePlanning,
    VerifyNash,
    CheckMaster,
    Compare,
    CheckMonotonicity,
}

impl Subcommand {
    pub fn name(&self) -> &'static str {
        match self {
            Subcommand::SolveMfg => "solve-mfg",
            Subcommand::SolvePlanning => "solve-planning",
            Subcommand::VerifyNash => "verify-nash",
            Subcommand::CheckMaster => "check-master",
            Subcommand::Compare => "compare",
            Subcommand::CheckMonotonicity => "check-monotonicity",
        }
    }
}

/// What a subcommand produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub status: u8,
    pub converged: Option<bool>,
    pub files: Vec<PathBuf>,
}

/// A float with 17 significant digits.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Everything built from a config.
struct Setup {
    graph: Graph,
    cost: CostModel,
    coupling: crate::coupling::ResolvedCoupling,
    m0: crate::simplex::SimplexPoint,
    grid: TimeGrid,
}

fn setup(config: &RunConfig) -> Result<Setup> {
    let graph = config.load_graph()?;
    let cost = config.cost.build(&graph)?;
    let coupling = config.coupling.resolve(graph.node_count())?;
    let m0 = config.initial_distribution()?;
    let grid = config.time_grid()?;
    Ok(Setup { graph, cost, coupling, m0, grid })
}

impl Setup {
    fn problem(&self) -> MfgProblem<'_> {
        MfgProblem {
            graph: &self.graph,
            cost: &self.cost,
            coupling: &self.coupling,
            m0: &self.m0,
            grid: self.grid,
        }
    }
}

fn rate_header(graph: &Graph) -> String {
    (1..=graph.max_out_degree()).map(|s| format!(",lambda_{s}")).collect()
}

fn push_rates(line: &mut String, graph: &Graph, rates: &[f64]) {
    for s in 0..graph.max_out_degree() {
        line.push(',');
        if let Some(r) = rates.get(s) {
            line.push_str(&num(*r));
        }
    }
}

/// `t,node,u,m,lambda_1..lambda_D`; `lambda_s` is the rate toward the
/// `s`-th out-neighbour of `node` in edge-listing order.
pub fn trajectory_csv(graph: &Graph, pair: &TrajectoryPair, control: &ControlField) -> String {
    let mut out = format!("t,node,u,m{}\n", rate_header(graph));
    for k in 0..pair.grid.len() {
        for i in 0..graph.node_count() {
            let mut line = format!("{},{},{},{}", num(pair.grid.t(k)), i + 1, num(pair.u[k][i]), num(pair.m[k][i]));
            push_rates(&mut line, graph, &control.rates[k][i]);
            out.push_str(&line);
            out.push('\n');
        }
    }
    out
}

/// `t,node,m,lambda_1..lambda_D` along the characteristics.
pub fn characteristics_csv(graph: &Graph, flow: &Characteristics) -> String {
    let mut out = format!("t,node,m{}\n", rate_header(graph));
    for k in 0..flow.grid.len() {
        for i in 0..graph.node_count() {
            let mut line = format!("{},{},{}", num(flow.grid.t(k)), i + 1, num(flow.m[k][i]));
            push_rates(&mut line, graph, &flow.control.rates[k][i]);
            out.push_str(&line);
            out.push('\n');
        }
    }
    out
}

fn mass_header(n: usize) -> String {
    (1..=n).map(|i| format!(",m{i}")).collect()
}

fn push_masses(line: &mut String, m: &[f64]) {
    for x in m {
        line.push(',');
        line.push_str(&num(*x));
    }
}

/// `t,m1..mN,phi` for every `stride`-th slice.
pub fn phi_csv(field: &SimplexField, stride: usize) -> String {
    let n = field.grid.node_count();
    let mut out = format!("t{},phi\n", mass_header(n));
    for k in (0..field.time.len()).step_by(stride) {
        for p in 0..field.grid.len() {
            let mut line = num(field.time.t(k));
            push_masses(&mut line, &field.grid.coords(p));
            let _ = write!(line, ",{}", num(field.values[k][p]));
            out.push_str(&line);
            out.push('\n');
        }
    }
    out
}

/// `t,m1..mN,edge,source,target,dU` with `dU = U_target − U_source` for every graph edge.
pub fn master_csv(graph: &Graph, master: &MasterField, stride: usize) -> String {
    let n = graph.node_count();
    let mut out = format!("t{},edge,source,target,dU\n", mass_header(n));
    for k in (0..master.time.len()).step_by(stride) {
        for p in 0..master.grid.len() {
            let m = master.grid.coords(p);
            for (e, &(s, t)) in graph.edges().iter().enumerate() {
                let mut line = num(master.time.t(k));
                push_masses(&mut line, &m);
                let _ = write!(line, ",{},{},{},{}", e + 1, s + 1, t + 1, num(master.difference(k, p, s, t)));
                out.push_str(&line);
                out.push('\n');
            }
        }
    }
    out
}

/// Rows of a `t,node,<value>,...` file as `[time index][node]` of column `column`.
fn read_node_column(path: &Path, column: &str, grid: &TimeGrid, n: usize) -> Result<Vec<Vec<f64>>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bad = |message: String| Error::DataFile {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = headers.iter().position(|h| h == column).ok_or_else(|| bad(format!("no column {column}")))?;
    let node_col = headers.iter().position(|h| h == "node").ok_or_else(|| bad("no column node".into()))?;
    let mut rows = vec![vec![f64::NAN; n]; grid.len()];
    let mut count = 0usize;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let k = r / n.max(1);
        let node: usize = record[node_col].parse().map_err(|_| bad(format!("row {}: bad node", r + 2)))?;
        if k >= grid.len() || node == 0 || node > n || node != r % n + 1 {
            return Err(bad(format!("row {} does not match a {}-node run on {} time nodes", r + 2, n, grid.len())));
        }
        rows[k][node - 1] = record[col].parse().map_err(|_| bad(format!("row {}: bad {column}", r + 2)))?;
        count += 1;
    }
    if count != grid.len() * n {
        return Err(bad(format!("{count} rows, expected {}", grid.len() * n)));
    }
    Ok(rows)
}

fn config_hash(config: &RunConfig) -> String {
    hex::encode(Sha256::digest(config.canonical_json().as_bytes()))
}

/// Runs one subcommand with outputs under `out_dir` and writes its manifest.
pub fn run(command: Subcommand, config: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    let started = Instant::now();
    fs::create_dir_all(out_dir)?;
    let result = dispatch(command, config, out_dir);
    let elapsed = started.elapsed().as_secs_f64() * 1e3;
    let (status, converged, files, error) = match &result {
        Ok(o) => (o.status, o.converged, o.files.clone(), None),
        Err(e) => (STATUS_ERROR, None, Vec::new(), Some(e.to_string())),
    };
    let manifest = json!({
        "command": command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": config_hash(config),
        "seed": config.verification.seed,
        "status": status,
        "converged": converged,
        "error": error,
        "outputs": files.iter().map(|f| f.file_name().map(|s| s.to_string_lossy().into_owned())).collect::<Vec<_>>(),
        "threads": rayon::current_num_threads(),
        "timings_ms": { "total": elapsed },
    });
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    result
}

fn dispatch(command: Subcommand, config: &RunConfig, out: &Path) -> Result<RunOutcome> {
    match command {
        Subcommand::SolveMfg => solve_mfg(config, out),
        Subcommand::SolvePlanning => solve_planning(config, out),
        Subcommand::VerifyNash => verify_nash(config, out),
        Subcommand::CheckMaster => check_master(config, out),
        Subcommand::Compare => compare(config, out),
        Subcommand::CheckMonotonicity => monotonicity(config, out),
    }
}

fn solve_mfg(config: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let s = setup(config)?;
    let started = Instant::now();
    let options = FixedPointOptions {
        damping: config.solver.damping,
        tol: config.solver.tol,
        max_iter: config.solver.max_iter,
        initial_guess: InitialGuess::Constant,
    };
    let sol = mfg_fixed_point(&s.problem(), &options)?;
    let wall = started.elapsed().as_secs_f64() * 1e3;
    let trajectory = out.join(TRAJECTORY_FILE);
    write_atomic(&trajectory, trajectory_csv(&s.graph, &sol.pair, &sol.control).as_bytes())?;
    let report = out.join("report.json");
    let r = &sol.report;
    write_json(
        &report,
        &json!({
            "iterations": r.iterations,
            "residual": r.residual,
            "converged": r.converged,
            "wall_time_ms": wall,
            "apriori_bound": r.apriori_bound,
            "apriori_max_u": r.apriori_max_u,
            "apriori_holds": r.apriori_holds(1e-9),
            "max_mass_drift": r.max_mass_drift,
            "history": r.history,
        }),
    )?;
    Ok(RunOutcome {
        status: if r.converged { STATUS_OK } else { STATUS_UNCONVERGED },
        converged: Some(r.converged),
        files: vec![trajectory, report],
    })
}

fn planning_setup(config: &RunConfig, s: &Setup) -> Result<(PlanningSolution, MasterField, Characteristics)> {
    if !config.planning.enabled {
        return Err(Error::Config {
            path: "planning.enabled".into(),
            message: "the planning path is disabled in this config".into(),
        });
    }
    let grid = SimplexGrid::new(s.graph.node_count(), config.planning.resolution)?;
    let sol = solve_planning_hj(&s.graph, &s.cost, &s.coupling, &grid, &s.grid)?;
    let master = extract_master_fields(&sol.field)?;
    let flow = characteristics_flow(&s.graph, &s.cost, &master, &s.m0)?;
    Ok((sol, master, flow))
}

fn solve_planning(config: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let s = setup(config)?;
    let started = Instant::now();
    let (sol, master, flow) = planning_setup(config, &s)?;
    let wall = started.elapsed().as_secs_f64() * 1e3;
    let stride = config.planning.output_stride;
    let files = vec![out.join(PHI_FILE), out.join(MASTER_FILE), out.join(CHARACTERISTICS_FILE), out.join("planning_report.json")];
    write_atomic(&files[0], phi_csv(&sol.field, stride).as_bytes())?;
    write_atomic(&files[1], master_csv(&s.graph, &master, stride).as_bytes())?;
    write_atomic(&files[2], characteristics_csv(&s.graph, &flow).as_bytes())?;
    write_json(
        &files[3],
        &json!({
            "lattice_points": sol.field.grid.len(),
            "resolution": config.planning.resolution,
            "substeps": sol.report.substeps,
            "refined_intervals": sol.report.refined_intervals,
            "max_alpha": sol.report.max_alpha,
            "phi0": sol.field.value_at(0, s.m0.as_slice()),
            "max_mass_drift": flow.max_mass_drift,
            "wall_time_ms": wall,
        }),
    )?;
    Ok(RunOutcome {
        status: STATUS_OK,
        converged: None,
        files,
    })
}

fn verify_nash(config: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let s = setup(config)?;
    let n = s.graph.node_count();
    let path = out.join(TRAJECTORY_FILE);
    let u = read_node_column(&path, "u", &s.grid, n)?;
    let m = read_node_column(&path, "m", &s.grid, n)?;
    let pair = TrajectoryPair { grid: s.grid, u, m };
    let optimal = extract_control(&s.graph, &s.cost, &pair.u, &s.grid)?;
    let deviations = default_deviations(&s.graph, &optimal, &config.verification.deviations, config.verification.seed);
    let report = nash_gap(&s.graph, &s.cost, &s.coupling, &pair, &optimal, &deviations)?;
    let file = out.join("nash.json");
    write_json(
        &file,
        &json!({
            "max_gap": report.max_gap,
            "worst_node": report.worst_node + 1,
            "worst_deviation": report.worst_deviation + 1,
            "worst_label": report.worst_label,
            "oracle_error": report.oracle_error,
            "deviation_count": report.deviation_count,
        }),
    )?;
    Ok(RunOutcome {
        status: STATUS_OK,
        converged: None,
        files: vec![file],
    })
}

fn check_master(config: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let s = setup(config)?;
    let (sol, master, flow) = planning_setup(config, &s)?;
    let residual = master_residual(&s.graph, &s.cost, &s.coupling, &master)?;
    let trials = default_planner_trials(&s.graph, s.grid, config.planning.value_trials, config.verification.seed);
    let value = check_value_function(&s.graph, &s.cost, &s.coupling, &sol.field, &s.m0, &trials, &flow.control, config.planning.value_tol)?;
    let file = out.join("master_check.json");
    write_json(
        &file,
        &json!({
            "residual_sup": residual.sup,
            "residual_mean": residual.mean,
            "residual_evaluations": residual.evaluations,
            "cross_symmetry_defect": cross_symmetry_defect(&master),
            "value_function": value,
        }),
    )?;
    Ok(RunOutcome {
        status: STATUS_OK,
        converged: None,
        files: vec![file],
    })
}

fn compare(config: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let s = setup(config)?;
    let n = s.graph.node_count();
    let a = read_node_column(&out.join(TRAJECTORY_FILE), "m", &s.grid, n)?;
    let b = read_node_column(&out.join(CHARACTERISTICS_FILE), "m", &s.grid, n)?;
    let mut gap = 0.0f64;
    let mut worst = (0, 0);
    for k in 0..s.grid.len() {
        for i in 0..n {
            let d = (a[k][i] - b[k][i]).abs();
            if d > gap {
                gap = d;
                worst = (k, i);
            }
        }
    }
    let file = out.join("gap.json");
    write_json(
        &file,
        &json!({
            "sup_gap": gap,
            "worst_time": s.grid.t(worst.0),
            "worst_node": worst.1 + 1,
        }),
    )?;
    Ok(RunOutcome {
        status: STATUS_OK,
        converged: None,
        files: vec![file],
    })
}

fn monotonicity(config: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let s = setup(config)?;
    let n = s.graph.node_count();
    let v = &config.verification;
    let report = check_monotonicity(&s.coupling, n, v.monotonicity_samples, v.seed)?;
    let potentials = if s.coupling.running_potential(s.m0.as_slice()).is_some() {
        Some(check_potentials(&s.coupling, n, 200, v.seed)?)
    } else {
        None
    };
    let lipschitz = sampled_lipschitz(&s.coupling, n, 2000, v.domain_margin, v.seed);
    let file = out.join("monotonicity.json");
    write_json(
        &file,
        &json!({
            "report": report,
            "potentials": potentials,
            "sampled_lipschitz": lipschitz,
            "domain_margin": v.domain_margin,
        }),
    )?;
    Ok(RunOutcome {
        status: STATUS_OK,
        converged: None,
        files: vec![file],
    })
}
