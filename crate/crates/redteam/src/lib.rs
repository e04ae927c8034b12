//! Attacks and distinguishers run against split models and their transcripts.

pub mod lineq;
pub mod report;
pub mod restore;
pub mod stats;
pub mod subspace;

use slip_core::decompose::DecomposeError;
use slip_core::linalg::LinalgError;
use slip_core::protocol::ProtocolError;
use slip_core::ring::RingError;
use thiserror::Error;

pub use lineq::{linear_equation_attack, LinEqRecovery};
pub use report::{AttackKind, AttackReport, Verdict};
pub use restore::{restoration_attack, EvalTask, Loss, RestorationReport};
pub use stats::{
    chi_square_uniformity, exhaustive_mask_table, mutual_information_check, wire_payload_samples, ChiSquare,
    JointTable, MutualInformation,
};
pub use subspace::{sigma1_trace_estimate, subspace_attack_k1, SubspaceRecovery};

#[derive(Debug, Error)]
pub enum RedteamError {
    #[error("system is rank deficient: rank {rank}, need {needed}")]
    RankDeficient { rank: usize, needed: usize },
    #[error(
        "no unique recovery: orthogonal complement has dimension {complement_dim}; {freedom} degrees of freedom remain"
    )]
    Degenerate { complement_dim: usize, freedom: usize },
    #[error("outside the attack's domain: {0}")]
    Domain(String),
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("transcript does not expose layer {layer}: {reason}")]
    Unobservable { layer: u32, reason: String },
    #[error(transparent)]
    Linalg(LinalgError),
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
}

impl From<LinalgError> for RedteamError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::RankDeficient { rank, needed } => RedteamError::RankDeficient { rank, needed },
            e => RedteamError::Linalg(e),
        }
    }
}
