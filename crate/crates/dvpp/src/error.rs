//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular transfer function")]
    SingularTransferFunction,

    #[error("improper transfer function")]
    ImproperTransferFunction,

    #[error("unstable system has unbounded H-infinity norm")]
    UnstableSystem,

    #[error("fixed device faster than desired behavior")]
    FixedDeviceTooFast,

    #[error("infeasible participation order: {0}")]
    InfeasibleParticipationOrder(String),

    #[error("missing high-pass participation factor on channel {0}")]
    MissingHpf(String),

    #[error("non-affine participation")]
    NonAffineParticipation,

    #[error("no capacity to carry required DC gain")]
    NoCapacity,

    #[error("consensus cannot reach allocation: communication graph is disconnected")]
    DisconnectedGraph,

    #[error("consensus step size {dt} exceeds stability bound {bound}")]
    ConsensusStepTooLarge { dt: f64, bound: f64 },

    #[error("vertex explosion: parameter box has dimension {0} > 12")]
    VertexExplosion(usize),

    #[error("synthesis infeasible: {0}")]
    SynthesisInfeasible(String),

    #[error("solver did not converge: {0}")]
    SolverNonConvergence(String),

    #[error("parameter {name} = {value} outside box [{lo}, {hi}]")]
    ParameterOutsideBox {
        name: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("simulation diverged: state norm exceeded 1e6 at t = {0} s")]
    SimulationDiverged(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
