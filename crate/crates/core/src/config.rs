//! Run configuration: one JSON document, strictly validated.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::coupling::BuiltinCoupling;
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphSpec};
use crate::hamiltonian::CostModel;
use crate::planning::MAX_PLANNING_NODES;
use crate::simplex::SimplexPoint;
use crate::time_grid::TimeGrid;
use crate::verification::DeviationFamily;

/// Inline graph or path to a JSON file holding one.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum GraphSource {
    File(PathBuf),
    Inline(GraphSpec),
}

impl<'de> Deserialize<'de> for GraphSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(d)?;
        match value {
            serde_json::Value::String(path) => Ok(GraphSource::File(path.into())),
            other => GraphSpec::deserialize(other).map(GraphSource::Inline).map_err(serde::de::Error::custom),
        }
    }
}

/// Per-edge weights keyed `"s->t"` (1-based); missing edges use `default_weight`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostSpec {
    /// `L = Σ_j c_ij λ_ij² / 2`
    Quadratic {
        #[serde(default = "one")]
        default_weight: f64,
        #[serde(default)]
        weights: BTreeMap<String, f64>,
    },
    /// `L = Σ_j c_ij λ_ij^r / r`, `r > 1`
    Power {
        exponent: f64,
        #[serde(default = "one")]
        default_weight: f64,
        #[serde(default)]
        weights: BTreeMap<String, f64>,
    },
}

impl Default for CostSpec {
    fn default() -> Self {
        CostSpec::Quadratic {
            default_weight: 1.0,
            weights: BTreeMap::new(),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn parse_edge_key(key: &str) -> Option<(usize, usize)> {
    let (s, t) = key.split_once("->")?;
    Some((s.trim().parse().ok()?, t.trim().parse().ok()?))
}

impl CostSpec {
    pub fn build(&self, graph: &Graph) -> Result<CostModel> {
        let (default_weight, weights) = match self {
            CostSpec::Quadratic { default_weight, weights } | CostSpec::Power { default_weight, weights, .. } => {
                (*default_weight, weights)
            }
        };
        let mut table = BTreeMap::new();
        for (key, &w) in weights {
            let (s, t) = parse_edge_key(key).ok_or_else(|| Error::Config {
                path: format!("cost.weights.{key}"),
                message: "edge keys look like \"1->2\"".into(),
            })?;
            if s == 0 || t == 0 || graph.slot_of(s - 1, t - 1).is_none() {
                return Err(Error::Config {
                    path: format!("cost.weights.{key}"),
                    message: "no such edge in the graph".into(),
                });
            }
            table.insert((s - 1, t - 1), w);
        }
        let weight = |i: usize, j: usize| table.get(&(i, j)).copied().unwrap_or(default_weight);
        match self {
            CostSpec::Quadratic { .. } => CostModel::quadratic(graph, weight),
            CostSpec::Power { exponent, .. } => CostModel::power(graph, *exponent, weight),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanningConfig {
    pub enabled: bool,
    /// Lattice resolution `M`.
    pub resolution: usize,
    /// Write every `output_stride`-th time slice of `Φ` and the Master fields.
    pub output_stride: usize,
    /// Tolerance of the planner value-function check.
    pub value_tol: f64,
    /// Random trial controls for the value-function check.
    pub value_trials: usize,
}

impl Default for PlanningConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            resolution: 32,
            output_stride: 1,
            value_tol: 5e-3,
            value_trials: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationConfig {
    pub seed: u64,
    pub deviations: DeviationFamily,
    pub monotonicity_samples: usize,
    /// Half-width `δ` of the box `[−δ, 1+δ]^N` used for Lipschitz sampling.
    pub domain_margin: f64,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            deviations: DeviationFamily::default(),
            monotonicity_samples: 10_000,
            domain_margin: 0.05,
        }
    }
}

fn default_horizon() -> f64 {
    1.0
}

fn default_steps() -> usize {
    400
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub graph: GraphSource,
    #[serde(default)]
    pub cost: CostSpec,
    pub coupling: BuiltinCoupling,
    /// Defaults to the uniform distribution.
    #[serde(default)]
    pub initial_distribution: Option<Vec<f64>>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub time_steps: usize,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub planning: PlanningConfig,
    #[serde(default)]
    pub verification: VerificationConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn invalid(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

/// Parses and validates a config document. Relative file paths resolve
/// against `base_dir`; the returned config has every default filled in and
/// every path absolute, so serializing and re-parsing it is the identity.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<RunConfig> {
    let mut de = serde_json::Deserializer::from_str(text);
    let mut config: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        invalid(if path.is_empty() { "." } else { &path }, e.into_inner().to_string())
    })?;
    de.end().map_err(|e| invalid(".", e.to_string()))?;

    if let GraphSource::File(p) = &config.graph {
        let resolved = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
        if !resolved.is_file() {
            return Err(invalid("graph", format!("file {} does not exist", resolved.display())));
        }
        config.graph = GraphSource::File(std::path::absolute(&resolved)?);
    }
    if config.output_dir.is_relative() {
        config.output_dir = std::path::absolute(base_dir.join(&config.output_dir))?;
    }
    let graph = config.load_graph()?;
    let n = graph.node_count();
    if config.initial_distribution.is_none() {
        config.initial_distribution = Some(SimplexPoint::uniform(n).into_inner());
    }
    validate(&config, &graph)?;
    Ok(config)
}

/// Reads and parses a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid("-", format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    parse_config(&text, base)
}

fn validate(config: &RunConfig, graph: &Graph) -> Result<()> {
    let n = graph.node_count();
    if !(config.horizon.is_finite() && config.horizon > 0.0) {
        return Err(invalid("horizon", format!("horizon must be > 0, got {}", config.horizon)));
    }
    if config.time_steps < 1 {
        return Err(invalid("time_steps", "time_steps must be >= 1"));
    }
    let s = &config.solver;
    if !(s.damping > 0.0 && s.damping <= 1.0) {
        return Err(invalid("solver.damping", format!("damping must lie in (0,1], got {}", s.damping)));
    }
    if !(s.tol.is_finite() && s.tol > 0.0) {
        return Err(invalid("solver.tol", format!("tol must be > 0, got {}", s.tol)));
    }
    if s.max_iter < 1 {
        return Err(invalid("solver.max_iter", "max_iter must be >= 1"));
    }
    config.cost.build(graph).map_err(|e| match e {
        Error::Config { .. } => e,
        other => invalid("cost", other.to_string()),
    })?;
    config.coupling.resolve(n).map_err(|e| invalid("coupling", e.to_string()))?;
    let m0 = config.initial_distribution.as_ref().expect("materialized");
    if m0.len() != n {
        return Err(invalid("initial_distribution", format!("{} entries for {n} nodes", m0.len())));
    }
    SimplexPoint::new(m0.clone()).map_err(|e| invalid("initial_distribution", e.to_string()))?;
    let p = &config.planning;
    if p.enabled {
        if n > MAX_PLANNING_NODES {
            return Err(invalid(
                "planning.enabled",
                format!("planning requires N <= {MAX_PLANNING_NODES} nodes (got {n}): the simplex lattice grows like C(M+N-1, N-1)"),
            ));
        }
        if !config.coupling.has_potentials() {
            return Err(invalid("planning.enabled", "planning requires a coupling family with potentials F and G"));
        }
    }
    if p.resolution < 2 {
        return Err(invalid("planning.resolution", "resolution must be >= 2"));
    }
    if p.output_stride < 1 {
        return Err(invalid("planning.output_stride", "output_stride must be >= 1"));
    }
    if !(p.value_tol.is_finite() && p.value_tol > 0.0) {
        return Err(invalid("planning.value_tol", "value_tol must be > 0"));
    }
    let v = &config.verification;
    if v.monotonicity_samples < 1 {
        return Err(invalid("verification.monotonicity_samples", "monotonicity_samples must be >= 1"));
    }
    if !(v.domain_margin.is_finite() && v.domain_margin >= 0.0) {
        return Err(invalid("verification.domain_margin", "domain_margin must be >= 0"));
    }
    if v.deviations.epsilons.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(invalid("verification.deviations.epsilons", "epsilons must be finite and > 0"));
    }
    Ok(())
}

impl RunConfig {
    pub fn load_graph(&self) -> Result<Graph> {
        let spec = match &self.graph {
            GraphSource::Inline(spec) => spec.clone(),
            GraphSource::File(path) => {
                let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.clone()))?;
                let mut de = serde_json::Deserializer::from_str(&text);
                serde_path_to_error::deserialize(&mut de).map_err(|e| Error::DataFile {
                    path: path.display().to_string(),
                    message: format!("at {}: {}", e.path(), e.inner()),
                })?
            }
        };
        spec.build().map_err(|e| invalid("graph", e.to_string()))
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.time_steps)
    }

    pub fn initial_distribution(&self) -> Result<SimplexPoint> {
        let n = self.load_graph()?.node_count();
        match &self.initial_distribution {
            Some(m) => SimplexPoint::new(m.clone()),
            None => Ok(SimplexPoint::uniform(n)),
        }
    }

    /// Canonical JSON of the materialized config.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"graph": {"nodes": 2, "edges": [[1, 2], [2, 1]]}, "coupling": {"family": "crowd_aversion", "a": 1}}"#;

    fn parse(text: &str) -> Result<RunConfig> {
        parse_config(text, Path::new("/tmp"))
    }

    fn message(e: Error) -> String {
        e.to_string()
    }

    #[test]
    fn minimal_config_materializes_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.solver, SolverConfig { damping: 0.5, tol: 1e-8, max_iter: 200 });
        assert_eq!(c.time_steps, 400);
        assert_eq!(c.planning.resolution, 32);
        assert_eq!(c.verification.seed, 42);
        assert_eq!(c.horizon, 1.0);
        assert_eq!(c.initial_distribution, Some(vec![0.5, 0.5]));
        assert_eq!(c.coupling, BuiltinCoupling::crowd_aversion(1.0, 0.0));
        assert_eq!(c.output_dir, PathBuf::from("/tmp/out"));
    }

    #[test]
    fn round_trip_is_identity() {
        let c = parse(MINIMAL).unwrap();
        let again = parse(&c.canonical_json()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.canonical_json(), again.canonical_json());
    }

    #[test]
    fn bad_damping() {
        let text = MINIMAL.replace(r#""coupling""#, r#""solver": {"damping": 1.5}, "coupling""#);
        let e = message(parse(&text).unwrap_err());
        assert!(e.contains("damping must lie in (0,1]"), "{e}");
        assert!(e.contains("solver.damping"), "{e}");
    }

    #[test]
    fn planning_on_four_nodes() {
        let text = r#"{"graph": {"nodes": 4, "edges": [[1,2],[2,3],[3,4],[4,1]]},
            "coupling": {"family": "crowd_aversion"}, "planning": {"enabled": true}}"#;
        let e = message(parse(text).unwrap_err());
        assert!(e.contains("N <= 3"), "{e}");
    }

    #[test]
    fn planning_needs_potentials() {
        let text = MINIMAL.replace("crowd_aversion", "affine_mix").replace(r#""coupling""#, r#""planning": {"enabled": true}, "coupling""#);
        assert!(message(parse(&text).unwrap_err()).contains("potentials"));
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let text = MINIMAL.replace(r#""coupling""#, r#""solver": {"dampng": 0.5}, "coupling""#);
        let e = message(parse(&text).unwrap_err());
        assert!(e.contains("solver") && e.contains("dampng"), "{e}");
        let text = MINIMAL.replace(r#""a": 1"#, r#""a": 1, "z": 2"#);
        assert!(message(parse(&text).unwrap_err()).contains("coupling"));
        let e = message(parse(r#"{"graph": {"nodes": 2, "edge": []}, "coupling": {"family": "zero"}}"#).unwrap_err());
        assert!(e.contains("graph"), "{e}");
    }

    #[test]
    fn invariant_violations() {
        for (patch, needle) in [
            (r#""horizon": 0,"#, "horizon"),
            (r#""time_steps": 0,"#, "time_steps"),
            (r#""solver": {"tol": 0},"#, "tol"),
            (r#""initial_distribution": [0.7, 0.7],"#, "initial_distribution"),
            (r#""initial_distribution": [1.0],"#, "initial_distribution"),
            (r#""cost": {"type": "quadratic", "weights": {"1->1": 2}},"#, "cost.weights"),
            (r#""cost": {"type": "power", "exponent": 1.0},"#, "cost"),
        ] {
            let text = MINIMAL.replacen('{', &format!("{{{patch}"), 1);
            let e = message(parse(&text).unwrap_err());
            assert!(e.contains(needle), "{patch}: {e}");
        }
    }

    #[test]
    fn graph_file_must_exist() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{"graph": "g.json", "coupling": {"family": "zero"}}"#;
        let e = message(parse_config(text, dir.path()).unwrap_err());
        assert!(e.contains("does not exist"), "{e}");
        std::fs::write(dir.path().join("g.json"), r#"{"nodes": 3, "edges": [[1,2],[2,3],[3,1]]}"#).unwrap();
        let c = parse_config(text, dir.path()).unwrap();
        assert_eq!(c.load_graph().unwrap().node_count(), 3);
        assert_eq!(parse_config(&c.canonical_json(), Path::new("/")).unwrap(), c);
    }

    #[test]
    fn cost_weights_apply() {
        let text = MINIMAL.replacen('{', r#"{"cost": {"type": "quadratic", "weights": {"1->2": 2.0}},"#, 1);
        let c = parse(&text).unwrap();
        let g = c.load_graph().unwrap();
        let cost = c.cost.build(&g).unwrap();
        assert!((cost.hamiltonian(0, &[1.0]).unwrap().value - 0.25).abs() < 1e-15);
        assert!((cost.hamiltonian(1, &[1.0]).unwrap().value - 0.5).abs() < 1e-15);
    }
}
