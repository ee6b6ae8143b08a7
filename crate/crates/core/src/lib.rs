//! Two-party vertical federated logistic regression without a third-party
//! coordinator.
//!
//! Party A holds one vertical slice of the feature space plus the labels;
//! party B holds the remaining features. Training exchanges Paillier
//! ciphertexts and masked gradients so that neither side sees the other's
//! raw data, and each party can fan its heavy crypto work out to a local
//! worker cluster behind a parameter server.
//!
//! Module map:
//! * [`ahe`] — Paillier cryptosystem with fixed-point encoding and the bulk
//!   homomorphic kernels used by the gradient step.
//! * [`lr`] — plaintext logistic-regression math shared by both parties and
//!   by the centralized baseline.
//! * [`data`] — dataset ingestion, vertical splitting, and synthesis.
//! * [`transport`] — framed byte channels (in-memory and TCP).
//! * [`protocol`] — the per-iteration message flow as two reactive state
//!   machines.
//! * [`cluster`] — parameter-server/worker execution of a party's share.
//! * [`security`] — leakage conditions from the protocol transcript and the
//!   corresponding reconstruction attacks.

pub mod ahe;
pub mod cluster;
pub mod data;
pub mod lr;
pub mod protocol;
pub mod security;
pub mod transport;

pub use data::PartyRole;
