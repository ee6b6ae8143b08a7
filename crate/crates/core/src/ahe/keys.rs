//! Key generation and decryption.

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_traits::{One, Signed, Zero};
use rand::{CryptoRng, Rng};

use super::cipher::Ciphertext;
use super::encoding::EncodedNumber;
use super::prime::generate_prime;
use super::AheError;

const SUPPORTED_KEY_SIZES: [u32; 3] = [1024, 2048, 3072];

/// Paillier public key with generator `g = n + 1` (implicit).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    bit_length: u32,
    max_encodable: BigUint, // floor(n / 3), the positive-band boundary
}

impl PublicKey {
    /// Validates the claimed bit length against the modulus before building
    /// the key; rejects untrusted (deserialized) moduli that misdeclare it.
    pub fn checked_from_modulus(n: BigUint, bit_length: u32) -> Result<Self, AheError> {
        if n.bits() != u64::from(bit_length) {
            return Err(AheError::Deserialize(format!(
                "modulus has {} bits but header claims {bit_length}",
                n.bits()
            )));
        }
        Ok(Self::from_modulus(n, bit_length))
    }

    pub(crate) fn from_modulus(n: BigUint, bit_length: u32) -> Self {
        let n_squared = &n * &n;
        let max_encodable = &n / 3u32;
        PublicKey {
            n,
            n_squared,
            bit_length,
            max_encodable,
        }
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn bit_length(&self) -> u32 {
        self.bit_length
    }

    pub fn max_encodable(&self) -> &BigUint {
        &self.max_encodable
    }

    pub fn encode(&self, value: f64, fraction_bits: u32) -> Result<EncodedNumber, AheError> {
        EncodedNumber::encode(self, value, fraction_bits)
    }
}

/// Private key. Holds the prime factors and CRT precomputation so decryption
/// can run modulo `p^2` and `q^2` separately (~3.5x faster than working
/// modulo `n^2`); results are identical to the textbook formula.
#[derive(Clone, Debug)]
pub struct PrivateKey {
    lambda: BigUint,
    mu: BigUint,
    p: BigUint,
    q: BigUint,
    p_squared: BigUint,
    q_squared: BigUint,
    h_p: BigUint,      // L_p((1+n)^(p-1) mod p^2)^-1 mod p
    h_q: BigUint,      // L_q((1+n)^(q-1) mod q^2)^-1 mod q
    p_inv_mod_q: BigUint,
    public: PublicKey,
}

/// Generates a fresh keypair. `bit_length` is the modulus size and must be
/// 1024, 2048, or 3072.
pub fn generate_keypair<R: Rng + CryptoRng>(
    bit_length: u32,
    rng: &mut R,
) -> Result<(PublicKey, PrivateKey), AheError> {
    if !SUPPORTED_KEY_SIZES.contains(&bit_length) {
        return Err(AheError::UnsupportedKeySize(bit_length));
    }
    let half = u64::from(bit_length) / 2;
    loop {
        let p = generate_prime(half, rng);
        let q = generate_prime(half, rng);
        if p == q {
            continue;
        }
        match PrivateKey::from_primes(bit_length, p, q) {
            Ok(sk) => {
                let pk = sk.public.clone();
                return Ok((pk, sk));
            }
            // Degenerate prime pair (e.g. lambda not invertible); retry.
            Err(_) => continue,
        }
    }
}

impl PrivateKey {
    /// Rebuilds the full key from its prime factorization. Used by keygen and
    /// when loading a stored key.
    pub fn from_primes(bit_length: u32, p: BigUint, q: BigUint) -> Result<Self, AheError> {
        if p == q || p.is_one() || q.is_one() {
            return Err(AheError::UnsupportedKeySize(bit_length));
        }
        let n = &p * &q;
        if n.bits() != u64::from(bit_length) {
            return Err(AheError::UnsupportedKeySize(bit_length));
        }
        let public = PublicKey::from_modulus(n.clone(), bit_length);

        let one = BigUint::one();
        let p_minus = &p - &one;
        let q_minus = &q - &one;
        let lambda = p_minus.lcm(&q_minus);
        let mu = modinv(&lambda, &n).ok_or(AheError::NotInvertible)?;

        let p_squared = &p * &p;
        let q_squared = &q * &q;
        // (1+n)^(p-1) mod p^2 = 1 + (p-1)*n mod p^2, since n^2 = 0 mod p^2.
        let gp = (&one + &p_minus * &n) % &p_squared;
        let h_p = modinv(&l_function(&gp, &p), &p).ok_or(AheError::NotInvertible)?;
        let gq = (&one + &q_minus * &n) % &q_squared;
        let h_q = modinv(&l_function(&gq, &q), &q).ok_or(AheError::NotInvertible)?;
        let p_inv_mod_q = modinv(&p, &q).ok_or(AheError::NotInvertible)?;

        Ok(PrivateKey {
            lambda,
            mu,
            p,
            q,
            p_squared,
            q_squared,
            h_p,
            h_q,
            p_inv_mod_q,
            public,
        })
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    /// Decrypts to the raw encoded plaintext (mantissa + exponent).
    pub fn decrypt_encoded(&self, ct: &Ciphertext) -> Result<EncodedNumber, AheError> {
        let c = ct.value();
        if c.is_zero() || c >= self.public.n_squared() {
            return Err(AheError::CiphertextOutOfRange);
        }
        let one = BigUint::one();
        let m_p = (l_function(&c.modpow(&(&self.p - &one), &self.p_squared), &self.p) * &self.h_p)
            % &self.p;
        let m_q = (l_function(&c.modpow(&(&self.q - &one), &self.q_squared), &self.q) * &self.h_q)
            % &self.q;
        // CRT combine: m = m_p + p * ((m_q - m_p) * p^-1 mod q)
        let m_p_mod_q = &m_p % &self.q;
        let diff = if m_q >= m_p_mod_q {
            &m_q - &m_p_mod_q
        } else {
            &self.q + &m_q - &m_p_mod_q
        };
        let mantissa = &m_p + &self.p * ((diff * &self.p_inv_mod_q) % &self.q);
        Ok(EncodedNumber::from_parts(mantissa, ct.exponent()))
    }

    pub fn decrypt(&self, ct: &Ciphertext) -> Result<f64, AheError> {
        self.decrypt_encoded(ct)?.decode(&self.public)
    }

    /// Textbook decryption via `L(c^lambda mod n^2) * mu mod n`. Kept as the
    /// reference the CRT path is checked against.
    #[cfg(test)]
    pub(crate) fn decrypt_textbook(&self, ct: &Ciphertext) -> Result<EncodedNumber, AheError> {
        let c = ct.value();
        if c.is_zero() || c >= self.public.n_squared() {
            return Err(AheError::CiphertextOutOfRange);
        }
        let x = c.modpow(&self.lambda, self.public.n_squared());
        let mantissa = (l_function(&x, self.public.n()) * &self.mu) % self.public.n();
        Ok(EncodedNumber::from_parts(mantissa, ct.exponent()))
    }
}

/// `L(x) = (x - 1) / d`, defined on `x = 1 mod d`.
fn l_function(x: &BigUint, d: &BigUint) -> BigUint {
    (x - BigUint::one()) / d
}

/// Modular inverse via extended Euclid; `None` if `gcd(a, m) != 1`.
pub(crate) fn modinv(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    let ext = BigInt::from(a.clone()).extended_gcd(&BigInt::from(m.clone()));
    if !ext.gcd.is_one() {
        return None;
    }
    let m_signed = BigInt::from(m.clone());
    let mut x = ext.x % &m_signed;
    if x.is_negative() {
        x += &m_signed;
    }
    x.to_biguint()
}
