//! On-disk artifact formats.
//!
//! * Key files: JSON with hex-encoded integers; the private key file is
//!   mode-restricted to its owner.
//! * Model files: little-endian binary — u32 header length, JSON header,
//!   u32 weight count, then the weights as f64 bits. The header carries
//!   the role, iteration count, learning rate, and the standardizer the
//!   shard was trained under (so evaluation can replay it).
//! * trace.csv: one row per completed iteration with a stable header.
//! * metrics.json / leakage_report.json: plain serde JSON.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use num_bigint::BigUint;
use num_traits::Num;
use serde::{Deserialize, Serialize};

use vflr_core::ahe::{PrivateKey, PublicKey};
use vflr_core::data::Standardizer;
use vflr_core::lr::PartyModel;
use vflr_core::protocol::TraceRow;

use crate::CliError;

pub const TRACE_HEADER: [&str; 8] = [
    "iteration",
    "loss",
    "train_auc",
    "ms_step2",
    "ms_step3",
    "ms_step4",
    "ms_step5",
    "ms_step6",
];

// ---------------------------------------------------------------------------
// keys

#[derive(Serialize, Deserialize)]
struct PublicKeyFile {
    kind: String,
    bits: u32,
    n: String,
}

#[derive(Serialize, Deserialize)]
struct PrivateKeyFile {
    kind: String,
    bits: u32,
    p: String,
    q: String,
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut out = serde_json::to_string_pretty(value)?;
    out.push('\n');
    fs::write(path, out)?;
    Ok(())
}

fn parse_hex(field: &str, hex: &str) -> Result<BigUint, CliError> {
    BigUint::from_str_radix(hex, 16)
        .map_err(|e| CliError::Runtime(format!("key field {field}: {e}")))
}

pub fn save_public_key(path: &Path, key: &PublicKey) -> Result<(), CliError> {
    write_json_file(
        path,
        &PublicKeyFile {
            kind: "paillier-public".into(),
            bits: key.bit_length(),
            n: key.n().to_str_radix(16),
        },
    )
}

pub fn load_public_key(path: &Path) -> Result<PublicKey, CliError> {
    let file: PublicKeyFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if file.kind != "paillier-public" {
        return Err(CliError::Runtime(format!(
            "{} is not a public key file (kind {})",
            path.display(),
            file.kind
        )));
    }
    Ok(PublicKey::checked_from_modulus(
        parse_hex("n", &file.n)?,
        file.bits,
    )?)
}

pub fn save_private_key(path: &Path, key: &PrivateKey) -> Result<(), CliError> {
    write_json_file(
        path,
        &PrivateKeyFile {
            kind: "paillier-private".into(),
            bits: key.public().bit_length(),
            p: key.p().to_str_radix(16),
            q: key.q().to_str_radix(16),
        },
    )?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(path, fs::Permissions::from_mode(0o600))?;
    }
    Ok(())
}

pub fn load_private_key(path: &Path) -> Result<PrivateKey, CliError> {
    let file: PrivateKeyFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if file.kind != "paillier-private" {
        return Err(CliError::Runtime(format!(
            "{} is not a private key file (kind {})",
            path.display(),
            file.kind
        )));
    }
    Ok(PrivateKey::from_primes(
        file.bits,
        parse_hex("p", &file.p)?,
        parse_hex("q", &file.q)?,
    )?)
}

// ---------------------------------------------------------------------------
// models

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelHeader {
    pub role: String,
    pub iterations: u64,
    pub learning_rate: f64,
    pub standardizer: Option<Standardizer>,
}

pub fn save_model(
    path: &Path,
    role: &str,
    model: &PartyModel,
    standardizer: Option<&Standardizer>,
) -> Result<(), CliError> {
    let header = serde_json::to_vec(&ModelHeader {
        role: role.into(),
        iterations: model.iteration,
        learning_rate: model.learning_rate,
        standardizer: standardizer.cloned(),
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + model.weights.len() * 8);
    out.extend_from_slice(&u32::try_from(header.len()).unwrap().to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&u32::try_from(model.weights.len()).unwrap().to_le_bytes());
    for w in &model.weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ModelHeader, PartyModel), CliError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| CliError::Runtime(format!("model file {}: {msg}", path.display()));
    let mut rest = bytes.as_slice();
    let mut take = |k: usize, what: &str| -> Result<&[u8], CliError> {
        if rest.len() < k {
            return Err(bad(&format!("truncated {what}")));
        }
        let (head, tail) = rest.split_at(k);
        rest = tail;
        Ok(head)
    };
    let header_len = u32::from_le_bytes(take(4, "header length")?.try_into().unwrap()) as usize;
    let header: ModelHeader = serde_json::from_slice(take(header_len, "header")?)
        .map_err(|e| bad(&format!("header: {e}")))?;
    let count = u32::from_le_bytes(take(4, "weight count")?.try_into().unwrap()) as usize;
    let body = take(count * 8, "weights")?;
    if !rest.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let weights = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let model = PartyModel {
        weights,
        learning_rate: header.learning_rate,
        iteration: header.iterations,
    };
    Ok((header, model))
}

// ---------------------------------------------------------------------------
// traces and reports

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_HEADER)?;
    for row in trace {
        w.write_record(&[
            row.iteration.to_string(),
            row.loss.to_string(),
            row.train_auc.map(|a| a.to_string()).unwrap_or_default(),
            row.ms_step2.to_string(),
            row.ms_step3.to_string(),
            row.ms_step4.to_string(),
            row.ms_step5.to_string(),
            row.ms_step6.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub train_auc: f64,
    pub train_log_loss: f64,
    pub test_auc: Option<f64>,
    pub test_log_loss: Option<f64>,
}

pub fn write_report<T: Serialize>(path: &Path, report: &T) -> Result<(), CliError> {
    write_json_file(path, report)
}
