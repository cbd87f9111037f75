use thiserror::Error;

/// Errors raised by graph construction, the solvers and the run layer.
///
/// Node labels carried in messages are 1-based, matching the I/O layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("graph must have at least one node")]
    EmptyGraph,

    #[error("self-loop at node {node}")]
    SelfLoop { node: usize },

    #[error("duplicate edge {source_node}->{target}")]
    DuplicateEdge { source_node: usize, target: usize },

    #[error("edge {source_node}->{target} references a node outside 1..={node_count}")]
    NodeOutOfRange {
        source_node: usize,
        target: usize,
        node_count: usize,
    },

    #[error("invalid time grid: {0}")]
    TimeGrid(String),

    #[error("invalid simplex point: {0}")]
    Simplex(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid cost model: {0}")]
    Cost(String),

    #[error("non-finite costate at node {node}")]
    NonFiniteCostate { node: usize },

    #[error("maximizer failed to bracket at node {node}, edge {source_node}->{target}: cost is not superlinear in practice")]
    Bracket {
        node: usize,
        source_node: usize,
        target: usize,
    },

    #[error("non-finite state at time index {step}")]
    NonFinite { step: usize },

    #[error("negative mass {value:e} at time index {step}, node {node}; dt*max_rate = {cfl:.3e}, reduce the time step")]
    NegativeMass {
        step: usize,
        node: usize,
        value: f64,
        cfl: f64,
    },

    #[error("invalid control: {0}")]
    Control(String),

    #[error("invalid coupling: {0}")]
    Coupling(String),

    #[error("planning solve limited to N <= 3 nodes (got {0}); lattice size C(M+N-1, N-1) grows too fast beyond")]
    PlanningDimension(usize),

    #[error("simplex grid too coarse: {0}")]
    GridTooCoarse(String),

    #[error("trajectory left the simplex grid by {distance:.3e} (> h = {step:.3e}) at time index {time_index}")]
    LeftGrid {
        time_index: usize,
        distance: f64,
        step: f64,
    },

    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error("missing prerequisite file {0}")]
    MissingFile(std::path::PathBuf),

    #[error("malformed data file {path}: {message}")]
    DataFile { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
