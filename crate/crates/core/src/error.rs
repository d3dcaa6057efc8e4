use thiserror::Error;

/// Errors produced by the solver stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty interior: no INTERIOR node for the given domain and resolution")]
    EmptyInterior,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("read of EXTERIOR node ({i}, {j})")]
    ExteriorRead { i: usize, j: usize },
    #[error("region OMEGA0 requested but the domain has no inner region")]
    MissingInnerRegion,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("singular linear system: zero pivot at unknown {row} (node {node}, x = {x:.6}, y = {y:.6})")]
    SingularMatrix {
        row: usize,
        node: usize,
        x: f64,
        y: f64,
    },
    #[error("right-hand side must be positive; found {value:e} at node {node}")]
    NonPositiveRhs { node: usize, value: f64 },
    #[error("Newton iteration stalled after {iters} steps (residual {residual:e})")]
    NewtonStall { iters: usize, residual: f64 },
    #[error("coefficient field is not convex: min eigenvalue {min_eig:e} at node {node}")]
    NonConvexCoefficient { node: usize, min_eig: f64 },
    #[error("singular flux: |Du| = {grad:e} with q < 2 and delta = 0 at node {node}")]
    SingularFlux { node: usize, grad: f64 },
    #[error("outer iteration stalled after {iters} iterations (joint residual {residual:e})")]
    OuterStall { iters: usize, residual: f64 },
    #[error("non-positive determinant {value:e} at dual node {node}")]
    NonPositiveDeterminant { node: usize, value: f64 },
    #[error("non-positive dual weight {value:e} at dual node {node}")]
    NonPositiveWeight { node: usize, value: f64 },
    #[error("infeasible start: {0}")]
    InfeasibleStart(String),
    #[error("field file: {0}")]
    FieldFormat(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
