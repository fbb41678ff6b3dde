//! Training-time branch decomposition for feed-forward networks.
//!
//! Linear and convolutional layers are stored as several additive branches.
//! During training each (example, unit, branch) triple keeps or drops its
//! branch by an independent coin flip; at inference the branches fold into a
//! single weight matrix (each branch scaled by its keep probability), so the
//! deployed network pays nothing for the decomposition. The crate also ships
//! the exact reference machinery used to check that claim: brute-force
//! enumeration over every mask assignment, reductions to unit dropout and
//! per-connection dropout, and the variance/similarity diagnostics.

pub mod branch;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod oracle;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, IdxError, Result};
pub use network::Network;
pub use rng::Rng;
pub use tensor::Tensor;
