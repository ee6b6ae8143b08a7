//! Wire serialization for crypto values.
//!
//! Big integers travel as a `u32` little-endian byte count followed by
//! big-endian magnitude bytes. A ciphertext is its value followed by an
//! `i32` little-endian exponent.

use num_bigint::BigUint;

use super::cipher::Ciphertext;
use super::keys::PublicKey;
use super::AheError;

pub fn write_biguint(out: &mut Vec<u8>, v: &BigUint) {
    let bytes = v.to_bytes_be();
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&bytes);
}

pub fn read_biguint(input: &mut &[u8]) -> Result<BigUint, AheError> {
    let len = read_u32(input)? as usize;
    if input.len() < len {
        return Err(AheError::Deserialize(format!(
            "bigint length {len} exceeds remaining {} bytes",
            input.len()
        )));
    }
    let (head, rest) = input.split_at(len);
    *input = rest;
    Ok(BigUint::from_bytes_be(head))
}

pub fn write_ciphertext(out: &mut Vec<u8>, ct: &Ciphertext) {
    write_biguint(out, ct.value());
    out.extend_from_slice(&ct.exponent().to_le_bytes());
}

pub fn read_ciphertext(input: &mut &[u8]) -> Result<Ciphertext, AheError> {
    let value = read_biguint(input)?;
    let exponent = read_i32(input)?;
    Ok(Ciphertext::from_parts(value, exponent))
}

pub(crate) fn read_u32(input: &mut &[u8]) -> Result<u32, AheError> {
    if input.len() < 4 {
        return Err(AheError::Deserialize("truncated u32".into()));
    }
    let (head, rest) = input.split_at(4);
    *input = rest;
    Ok(u32::from_le_bytes(head.try_into().expect("4 bytes")))
}

pub(crate) fn read_i32(input: &mut &[u8]) -> Result<i32, AheError> {
    read_u32(input).map(|v| v as i32)
}

impl PublicKey {
    /// `bit_length` then the modulus.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.bit_length().to_le_bytes());
        write_biguint(&mut out, self.n());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AheError> {
        let mut input = bytes;
        let bit_length = read_u32(&mut input)?;
        let n = read_biguint(&mut input)?;
        if !input.is_empty() {
            return Err(AheError::Deserialize("trailing bytes after public key".into()));
        }
        PublicKey::checked_from_modulus(n, bit_length)
    }
}

impl Ciphertext {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_ciphertext(&mut out, self);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AheError> {
        let mut input = bytes;
        let ct = read_ciphertext(&mut input)?;
        if !input.is_empty() {
            return Err(AheError::Deserialize("trailing bytes after ciphertext".into()));
        }
        Ok(ct)
    }
}
