//! The seven-step two-party training protocol.
//!
//! Party A holds labels, its feature shard, and the Paillier keypair; party B
//! holds only its feature shard and A's public key. One iteration:
//!
//! 1. (handshake) A sends the public key.
//! 2. B sends its plaintext partial scores `Θ^B x_i^B`.
//! 3. A combines scores, computes residuals `y - ŷ` and the loss, and sends
//!    the residuals encrypted.
//! 4. B computes its encrypted gradient `Σ (-x_ij/n)·⟦r_i⟧`, adds an encrypted
//!    fresh random mask `R_B`, and sends the blinded result.
//! 5. A decrypts and returns the masked gradient in plaintext; A also
//!    computes its own gradient from the cached residuals.
//! 6. B subtracts its retained mask; both sides update their models.
//!
//! A owns the loss and is the only side that decides convergence; it ends
//! the run with a `Stop` message. Both state machines are strictly
//! message-driven, which keeps them identical across in-process and socket
//! transports.

mod backend;
mod messages;
mod party;
mod runner;

pub use backend::{gradient_coeffs, ComputeBackend, SerialBackend};
pub use messages::{
    BlindedEncGradMsg, EncResidualsMsg, IterationControlMsg, PartialScoresMsg, ProtocolMessage,
    PublicKeyMsg, StopMsg, StopReason, UnblindedGradMsg,
};
pub(crate) use messages::{
    read_bytes, read_count, read_ct_vec, read_f64_vec, read_u64, write_ct_vec, write_f64_vec,
};
pub use party::{
    ATrainResult, BTrainResult, IterationRecordA, IterationRecordB, MaskVector, PartyA, PartyB,
    TraceRow,
};
pub use runner::{
    drive_in_process, handshake_check, run_duplex, run_party_a, run_party_b, Transcript,
};

use rand::{CryptoRng, RngCore, SeedableRng};
use thiserror::Error;

use crate::ahe::{AheError, KernelStrategy};
use crate::data::DataError;
use crate::lr::LrError;
use crate::transport::TransportError;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("unexpected {got} in state {state}")]
    UnexpectedMessage {
        state: &'static str,
        got: &'static str,
    },
    #[error("iteration mismatch: expected {expected}, got {got}")]
    IterationMismatch { expected: u64, got: u64 },
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("mask from iteration {mask_iteration} cannot unblind iteration {current}")]
    StaleMask { mask_iteration: u64, current: u64 },
    #[error(
        "refusing to train: B holds {m_b} features for {n} rows (m_B >= n lets B recover \
         residuals, hence labels; pass the explicit unsafe flag to override)"
    )]
    LeakageRefused { n: usize, m_b: usize },
    #[error("row counts differ: A has {a}, B has {b}")]
    RowCountMismatch { a: usize, b: usize },
    #[error("party configurations disagree: {0}")]
    ConfigMismatch(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("codec: {0}")]
    Codec(String),
    #[error(transparent)]
    Ahe(#[from] AheError),
    #[error(transparent)]
    Lr(#[from] LrError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Cluster(#[from] crate::cluster::ClusterError),
    #[error("peer aborted: {0}")]
    PeerAborted(String),
}

/// How each party initializes its weight vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightInit {
    Zeros,
    /// Uniform in [-0.01, 0.01], derived from the given seed (each party
    /// mixes in its role, so the shards get independent streams).
    SeededUniform { seed: u64 },
}

/// Hyperparameters and switches shared by both parties. The parties must be
/// configured identically; `handshake_check` verifies that for in-process
/// runs, and on the wire every payload length is checked against the local
/// configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub max_iterations: u64,
    /// Stop once |ΔL| between consecutive iterations falls below this.
    pub tolerance: f64,
    /// Fixed-point fraction bits for residual encryption.
    pub fraction_bits: u32,
    /// Fraction bits for the plaintext gradient coefficients (-x/n). Smaller
    /// values shrink kernel mantissas and speed up step 4 at some precision
    /// cost.
    pub coeff_fraction_bits: u32,
    /// Masks are uniform in [-2^k, 2^k] at full fraction-bit precision.
    pub mask_bound_log2: u32,
    /// Disable only in tests; without masks A sees B's true gradients.
    pub masking: bool,
    /// Permit m_B >= n despite the residual-recovery leak.
    pub allow_unsafe_dims: bool,
    /// Record per-iteration residuals/gradients (for analysis; memory-heavy).
    pub record_history: bool,
    /// Also compute train AUC each iteration for the trace.
    pub trace_auc: bool,
    /// Derive all randomness (keys, masks, encryption) deterministically.
    pub seed: Option<u64>,
    pub key_bits: u32,
    pub init: WeightInit,
    pub kernel: KernelStrategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 0.1,
            max_iterations: 200,
            tolerance: 1e-6,
            fraction_bits: 40,
            coeff_fraction_bits: 40,
            mask_bound_log2: 20,
            masking: true,
            allow_unsafe_dims: false,
            record_history: false,
            trace_auc: false,
            seed: None,
            key_bits: 1024,
            init: WeightInit::Zeros,
            kernel: KernelStrategy::Auto,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(ProtocolError::ConfigInvalid(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(ProtocolError::ConfigInvalid("tolerance must be >= 0".into()));
        }
        if !(8..=128).contains(&self.fraction_bits) {
            return Err(ProtocolError::ConfigInvalid(format!(
                "fraction_bits {} outside 8..=128",
                self.fraction_bits
            )));
        }
        if !(1..=128).contains(&self.coeff_fraction_bits) {
            return Err(ProtocolError::ConfigInvalid(format!(
                "coeff_fraction_bits {} outside 1..=128",
                self.coeff_fraction_bits
            )));
        }
        if self.mask_bound_log2 + self.fraction_bits > 62 {
            return Err(ProtocolError::ConfigInvalid(format!(
                "mask_bound_log2 {} + fraction_bits {} exceeds 62-bit mask mantissas",
                self.mask_bound_log2, self.fraction_bits
            )));
        }
        Ok(())
    }
}

/// Random source for protocol-level randomness (keys, masks, encryption
/// noise): the OS CSPRNG normally, or a seeded stream cipher when a run must
/// be reproducible.
#[derive(Clone, Debug)]
pub enum RngSource {
    Os(rand::rngs::OsRng),
    Seeded(Box<rand_chacha::ChaCha20Rng>),
}

impl RngSource {
    /// `stream` separates the parties' deterministic streams under one seed.
    pub fn new(seed: Option<u64>, stream: u64) -> RngSource {
        match seed {
            None => RngSource::Os(rand::rngs::OsRng),
            Some(s) => {
                let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(s);
                rng.set_stream(stream);
                RngSource::Seeded(Box::new(rng))
            }
        }
    }
}

impl RngCore for RngSource {
    fn next_u32(&mut self) -> u32 {
        match self {
            RngSource::Os(r) => r.next_u32(),
            RngSource::Seeded(r) => r.next_u32(),
        }
    }
    fn next_u64(&mut self) -> u64 {
        match self {
            RngSource::Os(r) => r.next_u64(),
            RngSource::Seeded(r) => r.next_u64(),
        }
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        match self {
            RngSource::Os(r) => r.fill_bytes(dest),
            RngSource::Seeded(r) => r.fill_bytes(dest),
        }
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        match self {
            RngSource::Os(r) => r.try_fill_bytes(dest),
            RngSource::Seeded(r) => r.try_fill_bytes(dest),
        }
    }
}

// Both variants are CSPRNGs.
impl CryptoRng for RngSource {}
