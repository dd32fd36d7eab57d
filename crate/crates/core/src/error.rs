use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("rotation matrix is not orthonormal with det +1 (|RᵀR - I| = {orthogonality:e}, det = {det})")]
    InvalidRotation { orthogonality: f64, det: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("grasp mode {0} requires a grasp offset")]
    MissingGraspOffset(&'static str),

    #[error("grasp offset given for independent mode")]
    UnexpectedGraspOffset,

    #[error("coupled grasp mode needs a coupling context (orientations and left reference)")]
    MissingCouplingContext,

    #[error("no candidate joint solutions to select from")]
    NoSolutions,

    #[error("inverse kinematics requires a UR-type DH table: {0}")]
    UnsupportedGeometry(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
