use std::path::PathBuf;

use crate::graph::{Key, Values};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("frame has {points} points, fewer than k = {k}")]
    FrameTooSparse { points: usize, k: usize },

    #[error("IMU coverage gap of {gap:.4} s around t = {at:.6}")]
    ImuCoverageGap { at: f64, gap: f64 },

    #[error("invalid integration interval [{start}, {end}]")]
    InvalidInterval { start: f64, end: f64 },

    #[error("bias moved {delta:.4} from its linearization point; re-integration required")]
    RequiresReintegration { delta: f64 },

    #[error("matching constraint has {inliers} inliers (minimum {min})")]
    DegenerateConstraint { inliers: usize, min: usize },

    #[error("variable {0} already exists")]
    DuplicateVariable(Key),

    #[error("unknown variable {0}")]
    UnknownVariable(Key),

    #[error("graph is under-constrained: {0}")]
    UnderConstrainedGraph(String),

    #[error("optimizer did not converge (best cost {cost})")]
    NotConverged { best: Box<Values>, cost: f64 },

    #[error("removing the requested variables disconnects the graph")]
    DisconnectedGraph,

    #[error("sensor moved during initialization (gyro norm {gyro_norm:.4} rad/s)")]
    InitializationMotion { gyro_norm: f64 },

    #[error("out-of-order input: {0}")]
    OutOfOrder(String),

    #[error("parse error in {file} at byte {offset}: {message}")]
    ParseError {
        file: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("only {pairs} associated poses (need at least 3)")]
    InsufficientOverlap { pairs: usize },

    #[error("trajectory length {length:.3} m is shorter than the {segment} m segment")]
    InsufficientLength { length: f64, segment: f64 },

    #[error("scene generation failed: {0}")]
    GenerationError(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset contains no scans")]
    NoData,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable snake_case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::FrameTooSparse { .. } => "frame_too_sparse",
            Error::ImuCoverageGap { .. } => "imu_coverage_gap",
            Error::InvalidInterval { .. } => "invalid_interval",
            Error::RequiresReintegration { .. } => "requires_reintegration",
            Error::DegenerateConstraint { .. } => "degenerate_constraint",
            Error::DuplicateVariable(_) => "duplicate_variable",
            Error::UnknownVariable(_) => "unknown_variable",
            Error::UnderConstrainedGraph(_) => "under_constrained_graph",
            Error::NotConverged { .. } => "not_converged",
            Error::DisconnectedGraph => "disconnected_graph",
            Error::InitializationMotion { .. } => "initialization_motion",
            Error::OutOfOrder(_) => "out_of_order",
            Error::ParseError { .. } => "parse_error",
            Error::InsufficientOverlap { .. } => "insufficient_overlap",
            Error::InsufficientLength { .. } => "insufficient_length",
            Error::GenerationError(_) => "generation_error",
            Error::Config(_) => "config",
            Error::NoData => "no_data",
            Error::Io(_) => "io",
        }
    }
}
