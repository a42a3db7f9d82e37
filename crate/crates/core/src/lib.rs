//! Federated learning through layer-wise model recombination.
//!
//! The crate is organised the way a round of training flows:
//!
//! - [`model`]: layered parameter containers and the reductions every strategy needs.
//! - [`recombine`]: per-layer / per-segment shuffling of client models.
//! - [`train`]: a small MLP with SGD + momentum used as the client-side learner.
//! - [`data`]: synthetic Gaussian blobs and IID / Dirichlet partitioning.
//! - [`orchestrator`]: the server round loop for FedMR, FedAvg, FedProx and Indep.
//! - [`secure`]: the peer-to-peer layer exchange run before models reach the server.
//! - [`metrics`]: CSV / JSON-lines round records.
//! - [`verify`]: fixed-seed property suites used by the CLI and CI.

pub mod data;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod recombine;
pub mod rng;
pub mod secure;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use model::{LayerBlock, LayeredModel, ModelList};
