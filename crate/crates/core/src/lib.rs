//! Federated self-supervised scene flow simulation.
//!
//! The crate simulates a fleet of roadside-unit (RSU) sensors that
//! collaboratively train a compact scene flow estimator without sharing raw
//! point clouds. It provides:
//!
//! - [`geometry`]: point clouds, rigid transforms, exact nearest neighbors;
//! - [`scenegen`]: a deterministic synthetic scene generator with per-client
//!   heterogeneity (point density, range, dynamics, camera availability);
//! - [`diff`]: a small reverse-mode differentiation tape with a
//!   finite-difference gradient checker;
//! - [`flowmodel`]: the three-unit flow estimator (encoder, global
//!   correlation, local update) with a flat parameter layout;
//! - [`ssloss`]: the self-supervised objective (static-probability weighted
//!   Chamfer plus smoothness regularization);
//! - [`metrics`]: scene flow metrics (epe3d, accs, accr) and cross-client
//!   summaries;
//! - [`fedcore`]: the four-step FL protocol with FedAvg, FedProx, SCAFFOLD,
//!   FedAvgM, FedNova and FedAdam servers;
//! - [`fedpers`]: personalized FL (fine-tuning, Ditto, FedPer, FedRep).
//!
//! Everything is deterministic: randomness derives from explicit seeds, and
//! re-running any experiment with the same configuration reproduces logs and
//! checkpoints byte for byte at any worker-thread count.

pub mod diff;
pub mod fedcore;
pub mod fedpers;
pub mod flowmodel;
pub mod geometry;
pub mod metrics;
pub mod scenegen;
pub mod ssloss;

mod seed;

pub use seed::mix_seed;

/// Errors produced by the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on operation inputs was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),
    /// Parameter vectors/layouts that must match do not.
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
