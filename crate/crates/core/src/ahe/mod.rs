//! Additively homomorphic encryption: Paillier with the `g = n + 1` generator
//! and a fixed-point plaintext codec.
//!
//! Plaintexts are [`EncodedNumber`]s — an integer mantissa in `Z_n` plus a
//! public base-2 exponent, so a ciphertext of `m / 2^e` carries `e` alongside
//! the Paillier value. Addition requires equal exponents; use
//! [`Ciphertext::rescale`] to align them. Negative values live in the upper
//! part of the ring, with the middle third left as a guard band so that
//! overflowing sums are detected at decode time instead of wrapping silently.
//!
//! [`weighted_sums`] is the bulk kernel behind the homomorphic gradient step:
//! given encrypted residuals and a plaintext coefficient matrix it computes
//! per-column weighted ciphertext sums far faster than repeated
//! `scalar_mul` + `add`.

mod bulk;
mod cipher;
mod encoding;
mod keys;
mod prime;
mod serial;

pub use bulk::{weighted_sums, weighted_sums_with, CoeffMatrix, KernelStrategy};
pub use cipher::{Ciphertext, PowerTable};
pub use encoding::{encode_mantissa_i64, EncodedNumber, MAX_EXPONENT, MAX_INT_BITS};
pub use keys::{generate_keypair, PrivateKey, PublicKey};
pub use serial::{read_biguint, read_ciphertext, write_biguint, write_ciphertext};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AheError {
    #[error("unsupported key size {0} (expected 1024, 2048, or 3072 bits)")]
    UnsupportedKeySize(u32),
    #[error("value is not finite")]
    NonFinite,
    #[error("value magnitude exceeds 2^{MAX_INT_BITS}")]
    ValueTooLarge,
    #[error("exponent {0} outside supported range 0..={MAX_EXPONENT}")]
    ExponentOutOfRange(i32),
    #[error("mantissa does not fit the plaintext space")]
    MantissaOutOfRange,
    #[error("decoded mantissa falls in the overflow guard band (wrapped sum?)")]
    Overflow,
    #[error("exponent mismatch: {0} vs {1} (rescale first)")]
    ExponentMismatch(i32, i32),
    #[error("cannot rescale from exponent {from} down to {to}")]
    RescaleDown { from: i32, to: i32 },
    #[error("ciphertext value outside Z_{{n^2}}")]
    CiphertextOutOfRange,
    #[error("ciphertext is not invertible modulo n^2")]
    NotInvertible,
    #[error("coefficient matrix is {rows}x{cols} but {expected} ciphertexts were supplied")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
    },
    #[error("malformed serialized value: {0}")]
    Deserialize(String),
}
