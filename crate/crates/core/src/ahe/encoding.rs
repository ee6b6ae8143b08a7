//! Fixed-point plaintext encoding.
//!
//! A value `x` is stored as `mantissa / 2^exponent` with the mantissa reduced
//! into `Z_n`. Negatives map to `n - |mantissa|`. The ring is split in
//! thirds: mantissas at or below `n/3` decode as positive, those at or above
//! `2n/3` as negative, and anything in between is treated as an overflowed
//! (wrapped) sum and rejected.

use num_bigint::{BigInt, BigUint};
use num_traits::{Signed, ToPrimitive, Zero};

use super::{AheError, PublicKey};

/// Largest representable integer part, in bits.
pub const MAX_INT_BITS: u32 = 64;

/// Upper bound on ciphertext/plaintext exponents. Generous: the protocol
/// never exceeds `2 * fraction_bits`.
pub const MAX_EXPONENT: i32 = 512;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedNumber {
    pub mantissa: BigUint,
    pub exponent: i32,
}

/// Splits a finite f64 into `(m, e)` with `value = m * 2^e` exactly.
fn dyadic_parts(value: f64) -> (i64, i64) {
    let bits = value.to_bits();
    let negative = bits >> 63 == 1;
    let exp_field = ((bits >> 52) & 0x7ff) as i64;
    let frac = (bits & ((1u64 << 52) - 1)) as i64;
    let (m, e) = if exp_field == 0 {
        (frac, -1074) // subnormal (or zero)
    } else {
        (frac | (1 << 52), exp_field - 1075)
    };
    (if negative { -m } else { m }, e)
}

/// Scales `value` by `2^fraction_bits` and rounds to the nearest integer,
/// exactly (no double rounding). Returns the signed scaled mantissa.
fn scaled_mantissa(value: f64, fraction_bits: u32) -> BigInt {
    let (m, e) = dyadic_parts(value);
    let shift = e + i64::from(fraction_bits);
    if shift >= 0 {
        BigInt::from(m) << shift
    } else {
        let d = (-shift) as u64;
        let t = m.unsigned_abs(); // <= 2^53, so d >= 64 means underflow to 0
        let mag = if d >= 64 {
            0
        } else {
            let q = t >> d;
            let round_up = d >= 1 && (t >> (d - 1)) & 1 == 1;
            q + u64::from(round_up)
        };
        if m < 0 {
            -BigInt::from(mag)
        } else {
            BigInt::from(mag)
        }
    }
}

impl EncodedNumber {
    /// Encodes a finite value at `fraction_bits` of fractional precision, so
    /// `|decode(encode(x)) - x| <= 2^-fraction_bits`.
    pub fn encode(pk: &PublicKey, value: f64, fraction_bits: u32) -> Result<Self, AheError> {
        let exponent = i32::try_from(fraction_bits).map_err(|_| {
            AheError::ExponentOutOfRange(i32::MAX)
        })?;
        if exponent > MAX_EXPONENT {
            return Err(AheError::ExponentOutOfRange(exponent));
        }
        if !value.is_finite() {
            return Err(AheError::NonFinite);
        }
        if value.abs() > (2f64).powi(MAX_INT_BITS as i32) {
            return Err(AheError::ValueTooLarge);
        }
        let scaled = scaled_mantissa(value, fraction_bits);
        Self::from_signed_mantissa(pk, scaled, exponent)
    }

    /// Builds an encoding from an already-scaled signed mantissa.
    pub fn from_signed_mantissa(
        pk: &PublicKey,
        mantissa: BigInt,
        exponent: i32,
    ) -> Result<Self, AheError> {
        if !(0..=MAX_EXPONENT).contains(&exponent) {
            return Err(AheError::ExponentOutOfRange(exponent));
        }
        let magnitude = mantissa.abs().to_biguint().expect("abs is non-negative");
        if &magnitude > pk.max_encodable() {
            return Err(AheError::MantissaOutOfRange);
        }
        let mantissa = if mantissa.is_negative() && !magnitude.is_zero() {
            pk.n() - magnitude
        } else {
            magnitude
        };
        Ok(EncodedNumber { mantissa, exponent })
    }

    /// Raw ring element plus exponent; used by decryption.
    pub fn from_parts(mantissa: BigUint, exponent: i32) -> Self {
        EncodedNumber { mantissa, exponent }
    }

    /// Interprets the mantissa under the thirds rule. Errors if it lies in
    /// the guard band, which indicates a wrapped homomorphic sum.
    pub fn to_signed_mantissa(&self, pk: &PublicKey) -> Result<BigInt, AheError> {
        if &self.mantissa <= pk.max_encodable() {
            Ok(BigInt::from(self.mantissa.clone()))
        } else if &self.mantissa >= &(pk.n() - pk.max_encodable()) {
            Ok(BigInt::from(self.mantissa.clone()) - BigInt::from(pk.n().clone()))
        } else {
            Err(AheError::Overflow)
        }
    }

    pub fn decode(&self, pk: &PublicKey) -> Result<f64, AheError> {
        let signed = self.to_signed_mantissa(pk)?;
        let approx = signed.to_f64().ok_or(AheError::Overflow)?;
        Ok(approx * (2f64).powi(-self.exponent))
    }

    pub fn is_negative(&self, pk: &PublicKey) -> bool {
        &self.mantissa > &(pk.n() >> 1)
    }
}

/// Encodes a value straight to an `i64` mantissa for the bulk kernels, which
/// keep plaintext coefficients in machine words. Errors if the scaled value
/// needs more than 62 bits.
pub fn encode_mantissa_i64(value: f64, fraction_bits: u32) -> Result<i64, AheError> {
    if !value.is_finite() {
        return Err(AheError::NonFinite);
    }
    let scaled = scaled_mantissa(value, fraction_bits);
    let out = scaled.to_i64().ok_or(AheError::ValueTooLarge)?;
    if out.unsigned_abs() >= 1 << 62 {
        return Err(AheError::ValueTooLarge);
    }
    Ok(out)
}
