//! Protocol messages and their frame codecs.
//!
//! Every payload starts with the iteration as a u64-LE, followed by the
//! type-specific body: vectors are a count u32-LE plus elements (binary64 LE
//! for plaintext, the ahe layout for ciphertexts), the public key is its
//! bit length u32-LE plus big-endian modulus bytes, and `Stop` carries a
//! single reason byte. `IterationControl` is exactly iteration + loss.

use num_bigint::BigUint;

use crate::ahe::{read_ciphertext, write_ciphertext, Ciphertext, PublicKey};
use crate::transport::{msg_type, Frame};

use super::ProtocolError;

#[derive(Clone, Debug, PartialEq)]
pub struct PublicKeyMsg {
    pub key: PublicKey,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartialScoresMsg {
    pub iteration: u64,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncResidualsMsg {
    pub iteration: u64,
    pub ciphertexts: Vec<Ciphertext>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlindedEncGradMsg {
    pub iteration: u64,
    pub ciphertexts: Vec<Ciphertext>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnblindedGradMsg {
    pub iteration: u64,
    pub values: Vec<f64>,
}

/// A → B: advance to `iteration`. The loss slot is part of the wire layout
/// but A keeps L private and sends NaN there.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationControlMsg {
    pub iteration: u64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIterations,
    Aborted,
}

impl StopReason {
    fn to_byte(self) -> u8 {
        match self {
            StopReason::Converged => 0,
            StopReason::MaxIterations => 1,
            StopReason::Aborted => 2,
        }
    }

    fn from_byte(b: u8) -> Result<StopReason, ProtocolError> {
        match b {
            0 => Ok(StopReason::Converged),
            1 => Ok(StopReason::MaxIterations),
            2 => Ok(StopReason::Aborted),
            other => Err(ProtocolError::Codec(format!("unknown stop reason {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StopMsg {
    pub iteration: u64,
    pub reason: StopReason,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProtocolMessage {
    PublicKey(PublicKeyMsg),
    PartialScores(PartialScoresMsg),
    EncResiduals(EncResidualsMsg),
    BlindedEncGrad(BlindedEncGradMsg),
    UnblindedGrad(UnblindedGradMsg),
    IterationControl(IterationControlMsg),
    Stop(StopMsg),
}

impl ProtocolMessage {
    pub fn msg_type(&self) -> u8 {
        match self {
            ProtocolMessage::PublicKey(_) => msg_type::PUBLIC_KEY,
            ProtocolMessage::PartialScores(_) => msg_type::PARTIAL_SCORES,
            ProtocolMessage::EncResiduals(_) => msg_type::ENC_RESIDUALS,
            ProtocolMessage::BlindedEncGrad(_) => msg_type::BLINDED_ENC_GRAD,
            ProtocolMessage::UnblindedGrad(_) => msg_type::UNBLINDED_GRAD,
            ProtocolMessage::IterationControl(_) => msg_type::ITERATION_CONTROL,
            ProtocolMessage::Stop(_) => msg_type::STOP,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProtocolMessage::PublicKey(_) => "PublicKeyMsg",
            ProtocolMessage::PartialScores(_) => "PartialScoresMsg",
            ProtocolMessage::EncResiduals(_) => "EncResidualsMsg",
            ProtocolMessage::BlindedEncGrad(_) => "BlindedEncGradMsg",
            ProtocolMessage::UnblindedGrad(_) => "UnblindedGradMsg",
            ProtocolMessage::IterationControl(_) => "IterationControlMsg",
            ProtocolMessage::Stop(_) => "StopMsg",
        }
    }

    pub fn iteration(&self) -> u64 {
        match self {
            ProtocolMessage::PublicKey(_) => 0,
            ProtocolMessage::PartialScores(m) => m.iteration,
            ProtocolMessage::EncResiduals(m) => m.iteration,
            ProtocolMessage::BlindedEncGrad(m) => m.iteration,
            ProtocolMessage::UnblindedGrad(m) => m.iteration,
            ProtocolMessage::IterationControl(m) => m.iteration,
            ProtocolMessage::Stop(m) => m.iteration,
        }
    }

    pub fn to_frame(&self) -> Frame {
        let mut p = Vec::new();
        p.extend_from_slice(&self.iteration().to_le_bytes());
        match self {
            ProtocolMessage::PublicKey(m) => {
                p.extend_from_slice(&m.key.bit_length().to_le_bytes());
                p.extend_from_slice(&m.key.n().to_bytes_be());
            }
            ProtocolMessage::PartialScores(m) => write_f64_vec(&mut p, &m.scores),
            ProtocolMessage::EncResiduals(m) => write_ct_vec(&mut p, &m.ciphertexts),
            ProtocolMessage::BlindedEncGrad(m) => write_ct_vec(&mut p, &m.ciphertexts),
            ProtocolMessage::UnblindedGrad(m) => write_f64_vec(&mut p, &m.values),
            ProtocolMessage::IterationControl(m) => {
                p.extend_from_slice(&m.loss.to_le_bytes());
            }
            ProtocolMessage::Stop(m) => p.push(m.reason.to_byte()),
        }
        Frame::new(self.msg_type(), p)
    }

    pub fn from_frame(frame: &Frame) -> Result<ProtocolMessage, ProtocolError> {
        let mut input = frame.payload.as_slice();
        let iteration = read_u64(&mut input)?;
        let msg = match frame.msg_type {
            msg_type::PUBLIC_KEY => {
                if iteration != 0 {
                    return Err(ProtocolError::Codec(format!(
                        "PublicKeyMsg carries iteration {iteration}, must be 0"
                    )));
                }
                if input.len() < 4 {
                    return Err(ProtocolError::Codec("public key truncated".into()));
                }
                let bit_length = u32::from_le_bytes(input[..4].try_into().unwrap());
                let modulus = BigUint::from_bytes_be(&input[4..]);
                input = &input[input.len()..];
                let key = PublicKey::checked_from_modulus(modulus, bit_length)?;
                ProtocolMessage::PublicKey(PublicKeyMsg { key })
            }
            msg_type::PARTIAL_SCORES => ProtocolMessage::PartialScores(PartialScoresMsg {
                iteration,
                scores: read_f64_vec(&mut input)?,
            }),
            msg_type::ENC_RESIDUALS => ProtocolMessage::EncResiduals(EncResidualsMsg {
                iteration,
                ciphertexts: read_ct_vec(&mut input)?,
            }),
            msg_type::BLINDED_ENC_GRAD => ProtocolMessage::BlindedEncGrad(BlindedEncGradMsg {
                iteration,
                ciphertexts: read_ct_vec(&mut input)?,
            }),
            msg_type::UNBLINDED_GRAD => ProtocolMessage::UnblindedGrad(UnblindedGradMsg {
                iteration,
                values: read_f64_vec(&mut input)?,
            }),
            msg_type::ITERATION_CONTROL => {
                let loss = f64::from_le_bytes(
                    read_bytes(&mut input, 8)?.try_into().unwrap(),
                );
                ProtocolMessage::IterationControl(IterationControlMsg { iteration, loss })
            }
            msg_type::STOP => {
                let reason = StopReason::from_byte(read_bytes(&mut input, 1)?[0])?;
                ProtocolMessage::Stop(StopMsg { iteration, reason })
            }
            other => {
                return Err(ProtocolError::Codec(format!(
                    "unknown protocol message type 0x{other:02x}"
                )))
            }
        };
        if !input.is_empty() {
            return Err(ProtocolError::Codec(format!(
                "{} trailing bytes after {}",
                input.len(),
                msg.name()
            )));
        }
        Ok(msg)
    }
}

pub(crate) fn read_bytes<'a>(input: &mut &'a [u8], k: usize) -> Result<&'a [u8], ProtocolError> {
    if input.len() < k {
        return Err(ProtocolError::Codec("message truncated".into()));
    }
    let (head, rest) = input.split_at(k);
    *input = rest;
    Ok(head)
}

pub(crate) fn read_u64(input: &mut &[u8]) -> Result<u64, ProtocolError> {
    Ok(u64::from_le_bytes(read_bytes(input, 8)?.try_into().unwrap()))
}

pub(crate) fn read_count(input: &mut &[u8]) -> Result<usize, ProtocolError> {
    let c = u32::from_le_bytes(read_bytes(input, 4)?.try_into().unwrap()) as usize;
    // frames are capped at 256 MiB; reject counts no payload could back
    if c > (1 << 25) {
        return Err(ProtocolError::Codec(format!("implausible count {c}")));
    }
    Ok(c)
}

pub(crate) fn write_f64_vec(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_f64_vec(input: &mut &[u8]) -> Result<Vec<f64>, ProtocolError> {
    let count = read_count(input)?;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(f64::from_le_bytes(read_bytes(input, 8)?.try_into().unwrap()));
    }
    Ok(values)
}

pub(crate) fn write_ct_vec(out: &mut Vec<u8>, cts: &[Ciphertext]) {
    out.extend_from_slice(&(cts.len() as u32).to_le_bytes());
    for ct in cts {
        write_ciphertext(out, ct);
    }
}

pub(crate) fn read_ct_vec(input: &mut &[u8]) -> Result<Vec<Ciphertext>, ProtocolError> {
    let count = read_count(input)?;
    let mut cts = Vec::with_capacity(count);
    for _ in 0..count {
        cts.push(read_ciphertext(input)?);
    }
    Ok(cts)
}
