//! Ciphertext operations.

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::{CryptoRng, Rng};

use super::encoding::{EncodedNumber, MAX_EXPONENT};
use super::keys::{modinv, PrivateKey, PublicKey};
use super::AheError;

/// A Paillier ciphertext tagged with the plaintext's fixed-point exponent.
/// The exponent is public metadata; only the mantissa is hidden.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ciphertext {
    value: BigUint,
    exponent: i32,
}

impl Ciphertext {
    pub fn from_parts(value: BigUint, exponent: i32) -> Self {
        Ciphertext { value, exponent }
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn exponent(&self) -> i32 {
        self.exponent
    }

    /// Homomorphic addition: the product of ciphertexts encrypts the sum of
    /// plaintexts. Exponents must already agree.
    pub fn add(&self, other: &Ciphertext, pk: &PublicKey) -> Result<Ciphertext, AheError> {
        if self.exponent != other.exponent {
            return Err(AheError::ExponentMismatch(self.exponent, other.exponent));
        }
        Ok(Ciphertext {
            value: (&self.value * &other.value) % pk.n_squared(),
            exponent: self.exponent,
        })
    }

    /// Adds a plaintext without encrypting it: `c * (1 + kn) mod n^2`
    /// encrypts `m + k` under the same randomness.
    pub fn add_plain(&self, k: &EncodedNumber, pk: &PublicKey) -> Result<Ciphertext, AheError> {
        if self.exponent != k.exponent {
            return Err(AheError::ExponentMismatch(self.exponent, k.exponent));
        }
        let factor = (BigUint::one() + &k.mantissa * pk.n()) % pk.n_squared();
        Ok(Ciphertext {
            value: (&self.value * factor) % pk.n_squared(),
            exponent: self.exponent,
        })
    }

    /// Homomorphic scalar multiplication by an encoded plaintext `k`. The
    /// result's exponent is the sum of both exponents.
    pub fn scalar_mul(&self, k: &EncodedNumber, pk: &PublicKey) -> Result<Ciphertext, AheError> {
        let exponent = self
            .exponent
            .checked_add(k.exponent)
            .filter(|e| *e <= MAX_EXPONENT)
            .ok_or(AheError::ExponentOutOfRange(MAX_EXPONENT))?;
        let signed = k.to_signed_mantissa(pk)?;
        let magnitude = signed.magnitude();
        // For negative scalars, exponentiating the inverse by |k| is much
        // cheaper than using the full-width ring representative n - |k|.
        let value = if signed.sign() == num_bigint::Sign::Minus {
            let inv = modinv(&self.value, pk.n_squared()).ok_or(AheError::NotInvertible)?;
            inv.modpow(magnitude, pk.n_squared())
        } else {
            self.value.modpow(magnitude, pk.n_squared())
        };
        Ok(Ciphertext { value, exponent })
    }

    /// Raises the exponent to `target` by multiplying the hidden mantissa by
    /// `2^(target - exponent)`. Rescaling downward is impossible.
    pub fn rescale(&self, target: i32, pk: &PublicKey) -> Result<Ciphertext, AheError> {
        if target < self.exponent {
            return Err(AheError::RescaleDown {
                from: self.exponent,
                to: target,
            });
        }
        if target > MAX_EXPONENT {
            return Err(AheError::ExponentOutOfRange(target));
        }
        let mut value = self.value.clone();
        for _ in 0..(target - self.exponent) {
            value = (&value * &value) % pk.n_squared();
        }
        Ok(Ciphertext {
            value,
            exponent: target,
        })
    }
}

impl PublicKey {
    /// Encrypts with fresh randomness drawn from `rng`.
    pub fn encrypt<R: Rng + CryptoRng>(
        &self,
        m: &EncodedNumber,
        rng: &mut R,
    ) -> Result<Ciphertext, AheError> {
        let r = rng.gen_biguint_range(&BigUint::one(), self.n());
        self.encrypt_with_randomness(m, &r)
    }

    /// Encrypts with caller-supplied randomness `r`. Reusing or predicting
    /// `r` voids semantic security; this exists for known-answer tests and
    /// benchmark setup.
    pub fn encrypt_with_randomness(
        &self,
        m: &EncodedNumber,
        r: &BigUint,
    ) -> Result<Ciphertext, AheError> {
        if &m.mantissa >= self.n() {
            return Err(AheError::MantissaOutOfRange);
        }
        if r.is_zero() || r >= self.n() {
            return Err(AheError::CiphertextOutOfRange);
        }
        let n_squared = self.n_squared();
        let gm = (BigUint::one() + &m.mantissa * self.n()) % n_squared;
        let rn = r.modpow(self.n(), n_squared);
        Ok(Ciphertext {
            value: (gm * rn) % n_squared,
            exponent: m.exponent,
        })
    }

    /// The canonical unrandomized encryption of zero — the multiplicative
    /// identity, i.e. the empty homomorphic sum.
    pub fn zero_ciphertext(&self, exponent: i32) -> Ciphertext {
        Ciphertext {
            value: BigUint::one(),
            exponent,
        }
    }
}

impl PrivateKey {
    pub fn decrypt_vec(&self, cts: &[Ciphertext]) -> Result<Vec<f64>, AheError> {
        cts.iter().map(|c| self.decrypt(c)).collect()
    }
}

/// Precomputed square chain `base^(2^t) mod n^2`, for repeated
/// exponentiation of one ciphertext by many small scalars.
pub struct PowerTable {
    squares: Vec<BigUint>,
    modulus: BigUint,
}

impl PowerTable {
    pub fn new(pk: &PublicKey, base: &BigUint, max_bits: u32) -> Self {
        let modulus = pk.n_squared().clone();
        let mut squares = Vec::with_capacity(max_bits.max(1) as usize);
        let mut cur = base % &modulus;
        for _ in 0..max_bits.max(1) {
            squares.push(cur.clone());
            cur = (&cur * &cur) % &modulus;
        }
        PowerTable { squares, modulus }
    }

    /// `base^e mod n^2`. `e` must fit in the table's bit width.
    pub fn pow(&self, e: u64) -> BigUint {
        debug_assert!(e == 0 || (64 - e.leading_zeros() as usize) <= self.squares.len());
        let mut acc = BigUint::one();
        let mut bits = e;
        let mut idx = 0;
        while bits != 0 {
            if bits & 1 == 1 {
                acc = (&acc * &self.squares[idx]) % &self.modulus;
            }
            bits >>= 1;
            idx += 1;
        }
        acc
    }

    /// Multiplies `acc` by `base^e` in place.
    pub fn mul_pow_into(&self, acc: &mut BigUint, e: u64) {
        let mut bits = e;
        let mut idx = 0;
        while bits != 0 {
            if bits & 1 == 1 {
                *acc = &*acc * &self.squares[idx] % &self.modulus;
            }
            bits >>= 1;
            idx += 1;
        }
    }
}
