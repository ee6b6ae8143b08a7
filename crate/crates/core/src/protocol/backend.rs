//! Compute backends: where a party's heavy math actually runs.
//!
//! The state machines only describe *what* each step computes; a backend
//! decides *how* — serially in-process here, or scattered across a worker
//! pool (see the cluster module). Every operation is required to be
//! deterministic for a fixed input so that backends are interchangeable.

use num_bigint::BigInt;

use crate::ahe::{
    encode_mantissa_i64, weighted_sums_with, Ciphertext, CoeffMatrix, EncodedNumber,
    KernelStrategy, PrivateKey, PublicKey,
};
use crate::data::FeatureMatrix;
use crate::lr::{self, PartyModel, ResidualBatch};

use super::{ProtocolError, RngSource};

pub trait ComputeBackend: Send {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;

    /// Gives B the public key after the handshake (no-op for A). Fallible
    /// because a pooled backend has to broadcast it to its workers.
    fn install_public_key(&mut self, key: &PublicKey) -> Result<(), ProtocolError>;

    /// The key currently held (A: from construction; B: after install).
    fn public_key(&self) -> Option<&PublicKey>;

    /// `Θ · x_i` over this party's shard, for all rows.
    fn partial_scores(&mut self, model: &PartyModel) -> Result<Vec<f64>, ProtocolError>;

    /// `-(1/n) Σ r_i x_i` over this party's shard (plaintext path).
    fn plain_gradient(&mut self, residuals: &[f64]) -> Result<Vec<f64>, ProtocolError>;

    /// Encrypts values at `fraction_bits` (A encrypting residuals).
    fn encrypt_vector(
        &mut self,
        values: &[f64],
        fraction_bits: u32,
    ) -> Result<Vec<Ciphertext>, ProtocolError>;

    /// Per feature j: `Σ_i (-x_ij/n) · ⟦r_i⟧` (B's homomorphic gradient).
    fn enc_gradient(
        &mut self,
        enc_residuals: &[Ciphertext],
        coeff_fraction_bits: u32,
    ) -> Result<Vec<Ciphertext>, ProtocolError>;

    /// Decrypts a ciphertext vector (A only).
    fn decrypt_vector(&mut self, cts: &[Ciphertext]) -> Result<Vec<f64>, ProtocolError>;
}

/// Single-threaded backend operating directly on the shard.
#[derive(Clone, Debug)]
pub struct SerialBackend {
    features: FeatureMatrix,
    public_key: Option<PublicKey>,
    private_key: Option<PrivateKey>,
    kernel: KernelStrategy,
    rng: RngSource,
    // -x/n re-encodes only when coeff_fraction_bits changes
    coeff_cache: Option<(u32, CoeffMatrix)>,
}

impl SerialBackend {
    pub fn for_party_a(
        features: FeatureMatrix,
        private_key: PrivateKey,
        rng: RngSource,
    ) -> SerialBackend {
        let public_key = Some(private_key.public().clone());
        SerialBackend {
            features,
            public_key,
            private_key: Some(private_key),
            kernel: KernelStrategy::Auto,
            rng,
            coeff_cache: None,
        }
    }

    pub fn for_party_b(
        features: FeatureMatrix,
        kernel: KernelStrategy,
        rng: RngSource,
    ) -> SerialBackend {
        SerialBackend {
            features,
            public_key: None,
            private_key: None,
            kernel,
            rng,
            coeff_cache: None,
        }
    }

    fn key(&self) -> Result<&PublicKey, ProtocolError> {
        self.public_key
            .as_ref()
            .ok_or_else(|| ProtocolError::ConfigInvalid("no public key installed".into()))
    }

    fn coeffs(&mut self, coeff_fraction_bits: u32) -> Result<&CoeffMatrix, ProtocolError> {
        let stale = !matches!(&self.coeff_cache, Some((cf, _)) if *cf == coeff_fraction_bits);
        if stale {
            let n = self.features.rows();
            let built = gradient_coeffs(&self.features, coeff_fraction_bits, n)?;
            self.coeff_cache = Some((coeff_fraction_bits, built));
        }
        Ok(&self.coeff_cache.as_ref().unwrap().1)
    }
}

/// Encodes `-x_ij / n_total` as fixed-point mantissas for the bulk kernel.
/// `n_total` is the full row count, which for a worker's row shard is larger
/// than the shard itself.
pub fn gradient_coeffs(
    features: &FeatureMatrix,
    coeff_fraction_bits: u32,
    n_total: usize,
) -> Result<CoeffMatrix, ProtocolError> {
    let scale = -1.0 / n_total as f64;
    Ok(match features {
        FeatureMatrix::Dense { cols, data } => CoeffMatrix::Dense {
            cols: *cols,
            data: data
                .iter()
                .map(|x| encode_mantissa_i64(x * scale, coeff_fraction_bits))
                .collect::<Result<_, _>>()?,
        },
        FeatureMatrix::Sparse { cols, rows } => CoeffMatrix::Sparse {
            cols: *cols,
            rows: rows
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&(j, x)| {
                            Ok((j as u32, encode_mantissa_i64(x * scale, coeff_fraction_bits)?))
                        })
                        .collect::<Result<Vec<_>, ProtocolError>>()
                })
                .collect::<Result<_, _>>()?,
        },
    })
}

impl ComputeBackend for SerialBackend {
    fn rows(&self) -> usize {
        self.features.rows()
    }

    fn cols(&self) -> usize {
        self.features.cols()
    }

    fn install_public_key(&mut self, key: &PublicKey) -> Result<(), ProtocolError> {
        self.public_key = Some(key.clone());
        Ok(())
    }

    fn public_key(&self) -> Option<&PublicKey> {
        self.public_key.as_ref()
    }

    fn partial_scores(&mut self, model: &PartyModel) -> Result<Vec<f64>, ProtocolError> {
        let n = self.features.rows();
        Ok(lr::partial_scores(model, &self.features, 0..n)?.partial_scores)
    }

    fn plain_gradient(&mut self, residuals: &[f64]) -> Result<Vec<f64>, ProtocolError> {
        let n = self.features.rows();
        if residuals.len() != n {
            return Err(ProtocolError::LengthMismatch {
                what: "residuals",
                expected: n,
                got: residuals.len(),
            });
        }
        let batch = ResidualBatch {
            residuals: residuals.to_vec(),
            row_range: 0..n,
        };
        Ok(lr::gradient(&batch, &self.features, n)?)
    }

    fn encrypt_vector(
        &mut self,
        values: &[f64],
        fraction_bits: u32,
    ) -> Result<Vec<Ciphertext>, ProtocolError> {
        let key = self
            .public_key
            .clone()
            .ok_or_else(|| ProtocolError::ConfigInvalid("no public key installed".into()))?;
        values
            .iter()
            .map(|&v| {
                let encoded = key.encode(v, fraction_bits)?;
                Ok(key.encrypt(&encoded, &mut self.rng)?)
            })
            .collect()
    }

    fn enc_gradient(
        &mut self,
        enc_residuals: &[Ciphertext],
        coeff_fraction_bits: u32,
    ) -> Result<Vec<Ciphertext>, ProtocolError> {
        let key = self.key()?.clone();
        let strategy = self.kernel;
        let coeffs = self.coeffs(coeff_fraction_bits)?;
        Ok(weighted_sums_with(
            &key,
            enc_residuals,
            coeffs,
            coeff_fraction_bits as i32,
            strategy,
        )?)
    }

    fn decrypt_vector(&mut self, cts: &[Ciphertext]) -> Result<Vec<f64>, ProtocolError> {
        let sk = self
            .private_key
            .as_ref()
            .ok_or_else(|| ProtocolError::ConfigInvalid("decrypt requires the private key".into()))?;
        Ok(sk.decrypt_vec(cts)?)
    }
}

/// Encrypts one mask mantissa `u` (scale 2^-f) at the blinded-gradient
/// exponent `f + cf` by shifting it up `cf` bits — exact, no rounding.
pub(crate) fn encrypt_mask_mantissa(
    key: &PublicKey,
    mantissa: i64,
    coeff_fraction_bits: u32,
    exponent: i32,
    rng: &mut RngSource,
) -> Result<Ciphertext, ProtocolError> {
    let shifted = BigInt::from(mantissa) << coeff_fraction_bits;
    let encoded = EncodedNumber::from_signed_mantissa(key, shifted, exponent)?;
    Ok(key.encrypt(&encoded, rng)?)
}
