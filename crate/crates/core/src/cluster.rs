//! Parameter-server / worker execution of one party's share of training.
//!
//! Each party's heavy steps (scores, encryption, the homomorphic gradient,
//! decryption) shard by rows across a pool of workers; the parameter server
//! is the only node that speaks to the remote party. Workers run as threads
//! here, but every task and result crosses a real frame boundary (the
//! `WORKER_TASK` / `WORKER_RESULT` message types), so the pool exercises the
//! same wire discipline a multi-machine deployment would.
//!
//! Determinism rules: shards are contiguous and fixed up front, results are
//! reduced in ascending worker order, and plaintext reductions use the same
//! fixed-point accumulator as the serial backend — so the trained model is
//! bitwise independent of the worker count.

use std::ops::Range;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use thiserror::Error;

use crate::ahe::{
    generate_keypair, AheError, Ciphertext, CoeffMatrix, KernelStrategy, PrivateKey, PublicKey,
};
use crate::data::FeatureMatrix;
use crate::lr::{self, PartyModel, ResidualBatch};
use crate::protocol::{
    gradient_coeffs, read_bytes, read_count, read_ct_vec, read_f64_vec, read_u64, write_ct_vec,
    write_f64_vec, ComputeBackend, PartyA, PartyB, ProtocolError, RngSource, TrainConfig,
};
use crate::transport::{msg_type, Frame};

/// Seeded runs give each of A's workers its own stream above this base.
pub const A_WORKER_STREAMS: u64 = 0xA00;
/// Same for B's workers.
pub const B_WORKER_STREAMS: u64 = 0xB00;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("cannot shard {n} rows across {workers} workers")]
    BadPlan { n: usize, workers: usize },
    #[error("worker {worker_id} failed: {message}")]
    WorkerFailed { worker_id: usize, message: String },
    #[error("worker {worker_id} disconnected")]
    Disconnected { worker_id: usize },
    #[error("worker {worker_id} replied {got}, expected {expected}")]
    ReplyMismatch {
        worker_id: usize,
        expected: String,
        got: String,
    },
    #[error("partial sums disagree on ciphertext exponent: {0} vs {1}")]
    ExponentMismatch(i32, i32),
    #[error("forbidden cluster link {from} -> {to}")]
    ForbiddenLink { from: String, to: String },
    #[error("worker frame: {0}")]
    Codec(String),
    #[error(transparent)]
    Ahe(#[from] AheError),
}

fn reply_mismatch(
    worker_id: usize,
    expected: impl Into<String>,
    got: impl Into<String>,
) -> ClusterError {
    ClusterError::ReplyMismatch {
        worker_id,
        expected: expected.into(),
        got: got.into(),
    }
}

/// One worker's slice of the party's rows. Assignments are contiguous,
/// non-overlapping, and cover `[0, n)` in worker order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardAssignment {
    pub worker_id: usize,
    pub row_range: Range<usize>,
    pub feature_width: usize,
}

/// Splits `n` rows across `workers` shards whose sizes differ by at most
/// one (the first `n % workers` shards take the extra row).
pub fn plan_shards(
    n: usize,
    workers: usize,
    feature_width: usize,
) -> Result<Vec<ShardAssignment>, ClusterError> {
    if workers == 0 || n < workers {
        return Err(ClusterError::BadPlan { n, workers });
    }
    let base = n / workers;
    let extra = n % workers;
    let mut out = Vec::with_capacity(workers);
    let mut start = 0;
    for worker_id in 0..workers {
        let len = base + usize::from(worker_id < extra);
        out.push(ShardAssignment {
            worker_id,
            row_range: start..start + len,
            feature_width,
        });
        start += len;
    }
    Ok(out)
}

/// At most `workers` contiguous chunks of `0..len`, for element-wise jobs
/// (bulk encryption/decryption) that need no row alignment.
fn element_chunks(len: usize, workers: usize) -> Vec<Range<usize>> {
    let k = workers.min(len).max(1);
    let base = len / k;
    let extra = len % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        out.push(start..start + size);
        start += size;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum WorkerTask {
    /// Step 2: `Θ · x_i` over the worker's shard.
    PartialScores { weights: Vec<f64> },
    /// Step 4, plaintext path: fixed-point `Σ r_i x_i` over the shard.
    PlainGradShard { residuals: Vec<f64> },
    /// Step 4, encrypted path: `Σ_i (-x_ij / n) · ⟦r_i⟧` per feature.
    EncGradShard {
        ciphertexts: Vec<Ciphertext>,
        coeff_fraction_bits: u32,
    },
    /// Step 3 at A: bulk encryption of a residual chunk.
    EncryptResiduals { values: Vec<f64>, fraction_bits: u32 },
    /// Step 5 at A: bulk decryption of a ciphertext chunk.
    DecryptVector { ciphertexts: Vec<Ciphertext> },
    /// Hands B's workers the public key after the handshake.
    InstallKey { key: PublicKey },
    Shutdown,
}

#[derive(Clone, Debug, PartialEq)]
pub enum WorkerResult {
    Scores(Vec<f64>),
    PlainGradShard(Vec<i128>),
    EncGradShard(Vec<Ciphertext>),
    Encrypted(Vec<Ciphertext>),
    Decrypted(Vec<f64>),
    KeyInstalled,
    Failed(String),
}

fn result_name(result: &WorkerResult) -> &'static str {
    match result {
        WorkerResult::Scores(_) => "scores",
        WorkerResult::PlainGradShard(_) => "plain gradient shard",
        WorkerResult::EncGradShard(_) => "encrypted gradient shard",
        WorkerResult::Encrypted(_) => "ciphertexts",
        WorkerResult::Decrypted(_) => "plaintexts",
        WorkerResult::KeyInstalled => "key ack",
        WorkerResult::Failed(_) => "failure",
    }
}

/// A task as it crosses the wire: which job, plus the row (or element)
/// range it covers so the reply can be checked against what was asked.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEnvelope {
    pub task_id: u64,
    pub range: Range<usize>,
    pub task: WorkerTask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultEnvelope {
    pub task_id: u64,
    pub worker_id: usize,
    pub range: Range<usize>,
    pub result: WorkerResult,
}

const TASK_SCORES: u8 = 1;
const TASK_PLAIN_GRAD: u8 = 2;
const TASK_ENC_GRAD: u8 = 3;
const TASK_ENCRYPT: u8 = 4;
const TASK_DECRYPT: u8 = 5;
const TASK_INSTALL_KEY: u8 = 6;
const TASK_SHUTDOWN: u8 = 7;
const RESULT_FAILED: u8 = 0xFF;

fn write_range(out: &mut Vec<u8>, range: &Range<usize>) {
    out.extend_from_slice(&(range.start as u64).to_le_bytes());
    out.extend_from_slice(&(range.end as u64).to_le_bytes());
}

fn read_range(input: &mut &[u8]) -> Result<Range<usize>, ProtocolError> {
    let start = read_u64(input)? as usize;
    let end = read_u64(input)? as usize;
    if start > end {
        return Err(ProtocolError::Codec(format!(
            "range {start}..{end} runs backwards"
        )));
    }
    Ok(start..end)
}

fn read_u32(input: &mut &[u8]) -> Result<u32, ProtocolError> {
    Ok(u32::from_le_bytes(read_bytes(input, 4)?.try_into().unwrap()))
}

fn write_i128_vec(out: &mut Vec<u8>, values: &[i128]) {
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_i128_vec(input: &mut &[u8]) -> Result<Vec<i128>, ProtocolError> {
    let count = read_count(input)?;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(i128::from_le_bytes(read_bytes(input, 16)?.try_into().unwrap()));
    }
    Ok(values)
}

pub fn task_to_frame(env: &TaskEnvelope) -> Frame {
    let mut p = Vec::new();
    p.extend_from_slice(&env.task_id.to_le_bytes());
    write_range(&mut p, &env.range);
    match &env.task {
        WorkerTask::PartialScores { weights } => {
            p.push(TASK_SCORES);
            write_f64_vec(&mut p, weights);
        }
        WorkerTask::PlainGradShard { residuals } => {
            p.push(TASK_PLAIN_GRAD);
            write_f64_vec(&mut p, residuals);
        }
        WorkerTask::EncGradShard {
            ciphertexts,
            coeff_fraction_bits,
        } => {
            p.push(TASK_ENC_GRAD);
            p.extend_from_slice(&coeff_fraction_bits.to_le_bytes());
            write_ct_vec(&mut p, ciphertexts);
        }
        WorkerTask::EncryptResiduals {
            values,
            fraction_bits,
        } => {
            p.push(TASK_ENCRYPT);
            p.extend_from_slice(&fraction_bits.to_le_bytes());
            write_f64_vec(&mut p, values);
        }
        WorkerTask::DecryptVector { ciphertexts } => {
            p.push(TASK_DECRYPT);
            write_ct_vec(&mut p, ciphertexts);
        }
        WorkerTask::InstallKey { key } => {
            p.push(TASK_INSTALL_KEY);
            p.extend_from_slice(&key.to_bytes());
        }
        WorkerTask::Shutdown => p.push(TASK_SHUTDOWN),
    }
    Frame::new(msg_type::WORKER_TASK, p)
}

pub fn task_from_frame(frame: &Frame) -> Result<TaskEnvelope, ProtocolError> {
    if frame.msg_type != msg_type::WORKER_TASK {
        return Err(ProtocolError::Codec(format!(
            "frame type 0x{:02x} is not a worker task",
            frame.msg_type
        )));
    }
    let mut input = frame.payload.as_slice();
    let task_id = read_u64(&mut input)?;
    let range = read_range(&mut input)?;
    let kind = read_bytes(&mut input, 1)?[0];
    let task = match kind {
        TASK_SCORES => WorkerTask::PartialScores {
            weights: read_f64_vec(&mut input)?,
        },
        TASK_PLAIN_GRAD => WorkerTask::PlainGradShard {
            residuals: read_f64_vec(&mut input)?,
        },
        TASK_ENC_GRAD => {
            let coeff_fraction_bits = read_u32(&mut input)?;
            WorkerTask::EncGradShard {
                ciphertexts: read_ct_vec(&mut input)?,
                coeff_fraction_bits,
            }
        }
        TASK_ENCRYPT => {
            let fraction_bits = read_u32(&mut input)?;
            WorkerTask::EncryptResiduals {
                values: read_f64_vec(&mut input)?,
                fraction_bits,
            }
        }
        TASK_DECRYPT => WorkerTask::DecryptVector {
            ciphertexts: read_ct_vec(&mut input)?,
        },
        TASK_INSTALL_KEY => {
            let key = PublicKey::from_bytes(input)?;
            input = &[];
            WorkerTask::InstallKey { key }
        }
        TASK_SHUTDOWN => WorkerTask::Shutdown,
        other => {
            return Err(ProtocolError::Codec(format!(
                "unknown worker task kind {other}"
            )))
        }
    };
    if !input.is_empty() {
        return Err(ProtocolError::Codec(format!(
            "{} trailing bytes after worker task",
            input.len()
        )));
    }
    Ok(TaskEnvelope {
        task_id,
        range,
        task,
    })
}

pub fn result_to_frame(env: &ResultEnvelope) -> Frame {
    let mut p = Vec::new();
    p.extend_from_slice(&env.task_id.to_le_bytes());
    p.extend_from_slice(&(env.worker_id as u32).to_le_bytes());
    write_range(&mut p, &env.range);
    match &env.result {
        WorkerResult::Scores(values) => {
            p.push(TASK_SCORES);
            write_f64_vec(&mut p, values);
        }
        WorkerResult::PlainGradShard(acc) => {
            p.push(TASK_PLAIN_GRAD);
            write_i128_vec(&mut p, acc);
        }
        WorkerResult::EncGradShard(cts) => {
            p.push(TASK_ENC_GRAD);
            write_ct_vec(&mut p, cts);
        }
        WorkerResult::Encrypted(cts) => {
            p.push(TASK_ENCRYPT);
            write_ct_vec(&mut p, cts);
        }
        WorkerResult::Decrypted(values) => {
            p.push(TASK_DECRYPT);
            write_f64_vec(&mut p, values);
        }
        WorkerResult::KeyInstalled => p.push(TASK_INSTALL_KEY),
        WorkerResult::Failed(message) => {
            p.push(RESULT_FAILED);
            p.extend_from_slice(message.as_bytes());
        }
    }
    Frame::new(msg_type::WORKER_RESULT, p)
}

pub fn result_from_frame(frame: &Frame) -> Result<ResultEnvelope, ProtocolError> {
    if frame.msg_type != msg_type::WORKER_RESULT {
        return Err(ProtocolError::Codec(format!(
            "frame type 0x{:02x} is not a worker result",
            frame.msg_type
        )));
    }
    let mut input = frame.payload.as_slice();
    let task_id = read_u64(&mut input)?;
    let worker_id = read_u32(&mut input)? as usize;
    let range = read_range(&mut input)?;
    let kind = read_bytes(&mut input, 1)?[0];
    let result = match kind {
        TASK_SCORES => WorkerResult::Scores(read_f64_vec(&mut input)?),
        TASK_PLAIN_GRAD => WorkerResult::PlainGradShard(read_i128_vec(&mut input)?),
        TASK_ENC_GRAD => WorkerResult::EncGradShard(read_ct_vec(&mut input)?),
        TASK_ENCRYPT => WorkerResult::Encrypted(read_ct_vec(&mut input)?),
        TASK_DECRYPT => WorkerResult::Decrypted(read_f64_vec(&mut input)?),
        TASK_INSTALL_KEY => WorkerResult::KeyInstalled,
        RESULT_FAILED => {
            let message = String::from_utf8_lossy(input).into_owned();
            input = &[];
            WorkerResult::Failed(message)
        }
        other => {
            return Err(ProtocolError::Codec(format!(
                "unknown worker result kind {other}"
            )))
        }
    };
    if !input.is_empty() {
        return Err(ProtocolError::Codec(format!(
            "{} trailing bytes after worker result",
            input.len()
        )));
    }
    Ok(ResultEnvelope {
        task_id,
        worker_id,
        range,
        result,
    })
}

/// One worker thread's whole world: its shard, its keys, its rng.
struct WorkerState {
    worker_id: usize,
    features: FeatureMatrix,
    row_range: Range<usize>,
    n_total: usize,
    kernel: KernelStrategy,
    public_key: Option<PublicKey>,
    private_key: Option<Arc<PrivateKey>>,
    rng: RngSource,
    coeff_cache: Option<(u32, CoeffMatrix)>,
}

impl WorkerState {
    fn run(mut self, tasks: Receiver<Vec<u8>>, results: Sender<Vec<u8>>) {
        while let Ok(bytes) = tasks.recv() {
            let env = Frame::read_from(&mut bytes.as_slice())
                .map_err(ProtocolError::from)
                .and_then(|f| task_from_frame(&f));
            let env = match env {
                Ok(env) => env,
                Err(e) => {
                    // can't echo a task id we never parsed; the sentinel
                    // fails the server's echo check and aborts the round
                    let reply = ResultEnvelope {
                        task_id: u64::MAX,
                        worker_id: self.worker_id,
                        range: 0..0,
                        result: WorkerResult::Failed(e.to_string()),
                    };
                    if send_reply(&results, &reply).is_err() {
                        break;
                    }
                    continue;
                }
            };
            if matches!(env.task, WorkerTask::Shutdown) {
                break;
            }
            let result = self
                .execute(env.task, &env.range)
                .unwrap_or_else(|e| WorkerResult::Failed(e.to_string()));
            let reply = ResultEnvelope {
                task_id: env.task_id,
                worker_id: self.worker_id,
                range: env.range,
                result,
            };
            if send_reply(&results, &reply).is_err() {
                break;
            }
        }
    }

    fn execute(
        &mut self,
        task: WorkerTask,
        range: &Range<usize>,
    ) -> Result<WorkerResult, ProtocolError> {
        let rows = self.features.rows();
        match task {
            WorkerTask::PartialScores { weights } => {
                self.check_row_task(range)?;
                let model = PartyModel {
                    weights,
                    learning_rate: 0.0,
                    iteration: 0,
                };
                let batch = lr::partial_scores(&model, &self.features, 0..rows)?;
                Ok(WorkerResult::Scores(batch.partial_scores))
            }
            WorkerTask::PlainGradShard { residuals } => {
                self.check_row_task(range)?;
                if residuals.len() != rows {
                    return Err(ProtocolError::LengthMismatch {
                        what: "shard residuals",
                        expected: rows,
                        got: residuals.len(),
                    });
                }
                let batch = ResidualBatch {
                    residuals,
                    row_range: 0..rows,
                };
                Ok(WorkerResult::PlainGradShard(lr::gradient_fixed(
                    &batch,
                    &self.features,
                )?))
            }
            WorkerTask::EncGradShard {
                ciphertexts,
                coeff_fraction_bits,
            } => {
                self.check_row_task(range)?;
                if ciphertexts.len() != rows {
                    return Err(ProtocolError::LengthMismatch {
                        what: "shard ciphertexts",
                        expected: rows,
                        got: ciphertexts.len(),
                    });
                }
                if rows == 0 {
                    return Ok(WorkerResult::EncGradShard(Vec::new()));
                }
                let key = self.key()?.clone();
                let kernel = self.kernel;
                let coeffs = self.coeffs(coeff_fraction_bits)?;
                let sums = crate::ahe::weighted_sums_with(
                    &key,
                    &ciphertexts,
                    coeffs,
                    coeff_fraction_bits as i32,
                    kernel,
                )?;
                Ok(WorkerResult::EncGradShard(sums))
            }
            WorkerTask::EncryptResiduals {
                values,
                fraction_bits,
            } => {
                if values.len() != range.len() {
                    return Err(ProtocolError::LengthMismatch {
                        what: "values to encrypt",
                        expected: range.len(),
                        got: values.len(),
                    });
                }
                let key = self.key()?.clone();
                let cts = values
                    .iter()
                    .map(|&v| {
                        let encoded = key.encode(v, fraction_bits)?;
                        key.encrypt(&encoded, &mut self.rng)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(WorkerResult::Encrypted(cts))
            }
            WorkerTask::DecryptVector { ciphertexts } => {
                if ciphertexts.len() != range.len() {
                    return Err(ProtocolError::LengthMismatch {
                        what: "ciphertexts to decrypt",
                        expected: range.len(),
                        got: ciphertexts.len(),
                    });
                }
                let sk = self.private_key.clone().ok_or_else(|| {
                    ProtocolError::ConfigInvalid("worker holds no private key".into())
                })?;
                Ok(WorkerResult::Decrypted(sk.decrypt_vec(&ciphertexts)?))
            }
            WorkerTask::InstallKey { key } => {
                self.public_key = Some(key);
                Ok(WorkerResult::KeyInstalled)
            }
            WorkerTask::Shutdown => {
                Err(ProtocolError::ConfigInvalid("shutdown is not a job".into()))
            }
        }
    }

    fn check_row_task(&self, range: &Range<usize>) -> Result<(), ProtocolError> {
        if *range != self.row_range {
            return Err(ProtocolError::ConfigInvalid(format!(
                "task covers rows {range:?} but this worker owns {:?}",
                self.row_range
            )));
        }
        Ok(())
    }

    fn key(&self) -> Result<&PublicKey, ProtocolError> {
        self.public_key
            .as_ref()
            .ok_or_else(|| ProtocolError::ConfigInvalid("no public key installed".into()))
    }

    fn coeffs(&mut self, coeff_fraction_bits: u32) -> Result<&CoeffMatrix, ProtocolError> {
        let stale = !matches!(&self.coeff_cache, Some((cf, _)) if *cf == coeff_fraction_bits);
        if stale {
            // the -1/n scale uses the party's full row count, not the shard's
            let built = gradient_coeffs(&self.features, coeff_fraction_bits, self.n_total)?;
            self.coeff_cache = Some((coeff_fraction_bits, built));
        }
        Ok(&self.coeff_cache.as_ref().unwrap().1)
    }
}

fn send_reply(results: &Sender<Vec<u8>>, reply: &ResultEnvelope) -> Result<(), ()> {
    let bytes = result_to_frame(reply).encode().map_err(|_| ())?;
    results.send(bytes).map_err(|_| ())
}

struct WorkerLink {
    worker_id: usize,
    tasks: Sender<Vec<u8>>,
    results: Receiver<Vec<u8>>,
    thread: Option<JoinHandle<()>>,
}

/// The parameter server's handle on its workers. All methods scatter one
/// task per worker and gather the replies in ascending worker order.
pub struct WorkerPool {
    links: Vec<WorkerLink>,
    assignments: Vec<ShardAssignment>,
    rows: usize,
    cols: usize,
    next_task: u64,
}

impl WorkerPool {
    #[allow(clippy::too_many_arguments)]
    pub fn spawn(
        features: &FeatureMatrix,
        workers: usize,
        kernel: KernelStrategy,
        private_key: Option<PrivateKey>,
        public_key: Option<PublicKey>,
        seed: Option<u64>,
        stream_base: u64,
    ) -> Result<WorkerPool, ClusterError> {
        let plan = plan_shards(features.rows(), workers, features.cols())?;
        WorkerPool::spawn_with_plan(features, plan, kernel, private_key, public_key, seed, stream_base)
    }

    fn spawn_with_plan(
        features: &FeatureMatrix,
        plan: Vec<ShardAssignment>,
        kernel: KernelStrategy,
        private_key: Option<PrivateKey>,
        public_key: Option<PublicKey>,
        seed: Option<u64>,
        stream_base: u64,
    ) -> Result<WorkerPool, ClusterError> {
        let private_key = private_key.map(Arc::new);
        let mut links = Vec::with_capacity(plan.len());
        for asg in &plan {
            let (task_tx, task_rx) = mpsc::channel::<Vec<u8>>();
            let (result_tx, result_rx) = mpsc::channel::<Vec<u8>>();
            let state = WorkerState {
                worker_id: asg.worker_id,
                features: features.slice_rows(asg.row_range.clone()),
                row_range: asg.row_range.clone(),
                n_total: features.rows(),
                kernel,
                public_key: public_key.clone(),
                private_key: private_key.clone(),
                rng: RngSource::new(seed, stream_base + asg.worker_id as u64),
                coeff_cache: None,
            };
            let thread = thread::Builder::new()
                .name(format!("worker{}", asg.worker_id))
                .spawn(move || state.run(task_rx, result_tx))
                .map_err(|e| ClusterError::WorkerFailed {
                    worker_id: asg.worker_id,
                    message: e.to_string(),
                })?;
            links.push(WorkerLink {
                worker_id: asg.worker_id,
                tasks: task_tx,
                results: result_rx,
                thread: Some(thread),
            });
        }
        Ok(WorkerPool {
            links,
            rows: features.rows(),
            cols: features.cols(),
            assignments: plan,
            next_task: 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn workers(&self) -> usize {
        self.links.len()
    }

    pub fn assignments(&self) -> &[ShardAssignment] {
        &self.assignments
    }

    /// The communication graph: every link pairs the parameter server with
    /// one worker. Workers never talk to each other or to the remote party.
    pub fn topology(&self) -> Vec<(String, String)> {
        self.links
            .iter()
            .map(|l| ("ps".to_string(), format!("worker{}", l.worker_id)))
            .collect()
    }

    fn scatter_gather<F>(
        &mut self,
        mut make: F,
    ) -> Result<Vec<(usize, Range<usize>, WorkerResult)>, ClusterError>
    where
        F: FnMut(&ShardAssignment) -> Option<(Range<usize>, WorkerTask)>,
    {
        let task_id = self.next_task;
        self.next_task += 1;
        let mut sent: Vec<(usize, Range<usize>)> = Vec::new();
        for (idx, asg) in self.assignments.iter().enumerate() {
            let Some((range, task)) = make(asg) else {
                continue;
            };
            let env = TaskEnvelope {
                task_id,
                range: range.clone(),
                task,
            };
            let bytes = task_to_frame(&env)
                .encode()
                .map_err(|e| ClusterError::Codec(e.to_string()))?;
            self.links[idx]
                .tasks
                .send(bytes)
                .map_err(|_| ClusterError::Disconnected {
                    worker_id: asg.worker_id,
                })?;
            sent.push((idx, range));
        }
        // A bad reply aborts the round, but the rest must still be drained:
        // an undrained reply would surface as the answer to the next task.
        let mut out = Vec::with_capacity(sent.len());
        let mut first_err: Option<ClusterError> = None;
        for (idx, range) in sent {
            let link = &self.links[idx];
            let Ok(bytes) = link.results.recv() else {
                first_err.get_or_insert(ClusterError::Disconnected {
                    worker_id: link.worker_id,
                });
                continue;
            };
            if first_err.is_some() {
                continue;
            }
            let parsed = Frame::read_from(&mut bytes.as_slice())
                .map_err(|e| ClusterError::Codec(e.to_string()))
                .and_then(|f| {
                    result_from_frame(&f).map_err(|e| ClusterError::Codec(e.to_string()))
                })
                .and_then(|env| {
                    validate_reply(&env, link.worker_id, task_id, &range)?;
                    Ok(env)
                });
            match parsed {
                Ok(env) => out.push((link.worker_id, env.range, env.result)),
                Err(e) => first_err = Some(e),
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        Ok(out)
    }

    pub fn install_key(&mut self, key: &PublicKey) -> Result<(), ClusterError> {
        let replies = self.scatter_gather(|asg| {
            Some((
                asg.row_range.clone(),
                WorkerTask::InstallKey { key: key.clone() },
            ))
        })?;
        for (worker_id, _, result) in replies {
            if !matches!(result, WorkerResult::KeyInstalled) {
                return Err(reply_mismatch(worker_id, "key ack", result_name(&result)));
            }
        }
        Ok(())
    }

    /// Step 2: concatenates shard scores back into global row order.
    pub fn partial_scores(&mut self, weights: &[f64]) -> Result<Vec<f64>, ClusterError> {
        let replies = self.scatter_gather(|asg| {
            Some((
                asg.row_range.clone(),
                WorkerTask::PartialScores {
                    weights: weights.to_vec(),
                },
            ))
        })?;
        let mut scores = Vec::with_capacity(self.rows);
        for (worker_id, range, result) in replies {
            let WorkerResult::Scores(part) = result else {
                return Err(reply_mismatch(worker_id, "scores", result_name(&result)));
            };
            if part.len() != range.len() {
                return Err(reply_mismatch(
                    worker_id,
                    format!("{} scores", range.len()),
                    format!("{} scores", part.len()),
                ));
            }
            scores.extend(part);
        }
        Ok(scores)
    }

    /// Step 4 plaintext path: fixed-point accumulators summed across shards.
    /// Integer addition is associative, so any worker count produces the
    /// same bits. Callers finish with `lr::finish_gradient`.
    pub fn plain_gradient_fixed(&mut self, residuals: &[f64]) -> Result<Vec<i128>, ClusterError> {
        let replies = self.scatter_gather(|asg| {
            Some((
                asg.row_range.clone(),
                WorkerTask::PlainGradShard {
                    residuals: residuals[asg.row_range.clone()].to_vec(),
                },
            ))
        })?;
        let mut acc = vec![0i128; self.cols];
        for (worker_id, _, result) in replies {
            let WorkerResult::PlainGradShard(part) = result else {
                return Err(reply_mismatch(
                    worker_id,
                    "plain gradient shard",
                    result_name(&result),
                ));
            };
            if part.len() != self.cols {
                return Err(reply_mismatch(
                    worker_id,
                    format!("{} accumulators", self.cols),
                    format!("{} accumulators", part.len()),
                ));
            }
            lr::add_gradient_fixed(&mut acc, &part);
        }
        Ok(acc)
    }

    /// Step 4 encrypted path: shard partial sums are combined with
    /// homomorphic addition in ascending worker order, before any masking.
    pub fn enc_gradient(
        &mut self,
        enc_residuals: &[Ciphertext],
        coeff_fraction_bits: u32,
        key: &PublicKey,
    ) -> Result<Vec<Ciphertext>, ClusterError> {
        let replies = self.scatter_gather(|asg| {
            if asg.row_range.is_empty() {
                return None; // an empty shard contributes the additive identity
            }
            Some((
                asg.row_range.clone(),
                WorkerTask::EncGradShard {
                    ciphertexts: enc_residuals[asg.row_range.clone()].to_vec(),
                    coeff_fraction_bits,
                },
            ))
        })?;
        let mut total: Option<Vec<Ciphertext>> = None;
        for (worker_id, _, result) in replies {
            let WorkerResult::EncGradShard(part) = result else {
                return Err(reply_mismatch(
                    worker_id,
                    "encrypted gradient shard",
                    result_name(&result),
                ));
            };
            if part.len() != self.cols {
                return Err(reply_mismatch(
                    worker_id,
                    format!("{} sums", self.cols),
                    format!("{} sums", part.len()),
                ));
            }
            total = Some(match total {
                None => part,
                Some(sum) => {
                    let mut next = Vec::with_capacity(self.cols);
                    for (a, b) in sum.iter().zip(&part) {
                        if a.exponent() != b.exponent() {
                            return Err(ClusterError::ExponentMismatch(
                                a.exponent(),
                                b.exponent(),
                            ));
                        }
                        next.push(a.add(b, key)?);
                    }
                    next
                }
            });
        }
        total.ok_or_else(|| ClusterError::WorkerFailed {
            worker_id: 0,
            message: "no shard produced a gradient".into(),
        })
    }

    /// Step 3 at A: encryption fanned out over element chunks.
    pub fn encrypt_vector(
        &mut self,
        values: &[f64],
        fraction_bits: u32,
    ) -> Result<Vec<Ciphertext>, ClusterError> {
        let chunks = element_chunks(values.len(), self.links.len());
        let replies = self.scatter_gather(|asg| {
            let range = chunks.get(asg.worker_id)?.clone();
            Some((
                range.clone(),
                WorkerTask::EncryptResiduals {
                    values: values[range].to_vec(),
                    fraction_bits,
                },
            ))
        })?;
        let mut out = Vec::with_capacity(values.len());
        for (worker_id, range, result) in replies {
            let WorkerResult::Encrypted(part) = result else {
                return Err(reply_mismatch(worker_id, "ciphertexts", result_name(&result)));
            };
            if part.len() != range.len() {
                return Err(reply_mismatch(
                    worker_id,
                    format!("{} ciphertexts", range.len()),
                    format!("{} ciphertexts", part.len()),
                ));
            }
            out.extend(part);
        }
        Ok(out)
    }

    /// Step 5 at A: decryption fanned out over element chunks.
    pub fn decrypt_vector(&mut self, cts: &[Ciphertext]) -> Result<Vec<f64>, ClusterError> {
        let chunks = element_chunks(cts.len(), self.links.len());
        let replies = self.scatter_gather(|asg| {
            let range = chunks.get(asg.worker_id)?.clone();
            Some((
                range.clone(),
                WorkerTask::DecryptVector {
                    ciphertexts: cts[range].to_vec(),
                },
            ))
        })?;
        let mut out = Vec::with_capacity(cts.len());
        for (worker_id, range, result) in replies {
            let WorkerResult::Decrypted(part) = result else {
                return Err(reply_mismatch(worker_id, "plaintexts", result_name(&result)));
            };
            if part.len() != range.len() {
                return Err(reply_mismatch(
                    worker_id,
                    format!("{} plaintexts", range.len()),
                    format!("{} plaintexts", part.len()),
                ));
            }
            out.extend(part);
        }
        Ok(out)
    }
}

fn validate_reply(
    env: &ResultEnvelope,
    worker_id: usize,
    task_id: u64,
    range: &Range<usize>,
) -> Result<(), ClusterError> {
    if let WorkerResult::Failed(message) = &env.result {
        return Err(ClusterError::WorkerFailed {
            worker_id,
            message: message.clone(),
        });
    }
    if env.task_id != task_id {
        return Err(reply_mismatch(
            worker_id,
            format!("task {task_id}"),
            format!("task {}", env.task_id),
        ));
    }
    if env.worker_id != worker_id {
        return Err(reply_mismatch(
            worker_id,
            format!("worker {worker_id}"),
            format!("worker {}", env.worker_id),
        ));
    }
    if env.range != *range {
        return Err(reply_mismatch(
            worker_id,
            format!("rows {range:?}"),
            format!("rows {:?}", env.range),
        ));
    }
    Ok(())
}

/// Rejects any link that does not pair the parameter server with a worker:
/// no worker-to-worker edges, no worker reaching the remote party.
pub fn audit_topology(links: &[(String, String)]) -> Result<(), ClusterError> {
    for (from, to) in links {
        let ps_ends = usize::from(from == "ps") + usize::from(to == "ps");
        if ps_ends != 1 {
            return Err(ClusterError::ForbiddenLink {
                from: from.clone(),
                to: to.clone(),
            });
        }
    }
    Ok(())
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        for link in &self.links {
            let env = TaskEnvelope {
                task_id: self.next_task,
                range: 0..0,
                task: WorkerTask::Shutdown,
            };
            if let Ok(bytes) = task_to_frame(&env).encode() {
                let _ = link.tasks.send(bytes);
            }
        }
        for link in &mut self.links {
            if let Some(thread) = link.thread.take() {
                let _ = thread.join();
            }
        }
    }
}

/// A `ComputeBackend` that scatters every heavy step across a worker pool.
/// Drop-in replacement for `SerialBackend` on either side of the protocol;
/// for a fixed seed the plaintext results match it bitwise.
pub struct ClusterBackend {
    pool: WorkerPool,
    public_key: Option<PublicKey>,
    can_decrypt: bool,
}

impl ClusterBackend {
    pub fn for_party_a(
        features: &FeatureMatrix,
        private_key: PrivateKey,
        workers: usize,
        kernel: KernelStrategy,
        seed: Option<u64>,
    ) -> Result<ClusterBackend, ClusterError> {
        let public = private_key.public().clone();
        let pool = WorkerPool::spawn(
            features,
            workers,
            kernel,
            Some(private_key),
            Some(public.clone()),
            seed,
            A_WORKER_STREAMS,
        )?;
        Ok(ClusterBackend {
            pool,
            public_key: Some(public),
            can_decrypt: true,
        })
    }

    pub fn for_party_b(
        features: &FeatureMatrix,
        workers: usize,
        kernel: KernelStrategy,
        seed: Option<u64>,
    ) -> Result<ClusterBackend, ClusterError> {
        let pool = WorkerPool::spawn(features, workers, kernel, None, None, seed, B_WORKER_STREAMS)?;
        Ok(ClusterBackend {
            pool,
            public_key: None,
            can_decrypt: false,
        })
    }

    pub fn pool(&self) -> &WorkerPool {
        &self.pool
    }
}

impl ComputeBackend for ClusterBackend {
    fn rows(&self) -> usize {
        self.pool.rows()
    }

    fn cols(&self) -> usize {
        self.pool.cols()
    }

    fn install_public_key(&mut self, key: &PublicKey) -> Result<(), ProtocolError> {
        self.pool.install_key(key)?;
        self.public_key = Some(key.clone());
        Ok(())
    }

    fn public_key(&self) -> Option<&PublicKey> {
        self.public_key.as_ref()
    }

    fn partial_scores(&mut self, model: &PartyModel) -> Result<Vec<f64>, ProtocolError> {
        Ok(self.pool.partial_scores(&model.weights)?)
    }

    fn plain_gradient(&mut self, residuals: &[f64]) -> Result<Vec<f64>, ProtocolError> {
        let n = self.pool.rows();
        if residuals.len() != n {
            return Err(ProtocolError::LengthMismatch {
                what: "residuals",
                expected: n,
                got: residuals.len(),
            });
        }
        let acc = self.pool.plain_gradient_fixed(residuals)?;
        Ok(lr::finish_gradient(&acc, n))
    }

    fn encrypt_vector(
        &mut self,
        values: &[f64],
        fraction_bits: u32,
    ) -> Result<Vec<Ciphertext>, ProtocolError> {
        Ok(self.pool.encrypt_vector(values, fraction_bits)?)
    }

    fn enc_gradient(
        &mut self,
        enc_residuals: &[Ciphertext],
        coeff_fraction_bits: u32,
    ) -> Result<Vec<Ciphertext>, ProtocolError> {
        let n = self.pool.rows();
        if enc_residuals.len() != n {
            return Err(ProtocolError::LengthMismatch {
                what: "encrypted residuals",
                expected: n,
                got: enc_residuals.len(),
            });
        }
        let key = self
            .public_key
            .clone()
            .ok_or_else(|| ProtocolError::ConfigInvalid("no public key installed".into()))?;
        Ok(self.pool.enc_gradient(enc_residuals, coeff_fraction_bits, &key)?)
    }

    fn decrypt_vector(&mut self, cts: &[Ciphertext]) -> Result<Vec<f64>, ProtocolError> {
        if !self.can_decrypt {
            return Err(ProtocolError::ConfigInvalid(
                "this backend has no private key".into(),
            ));
        }
        Ok(self.pool.decrypt_vector(cts)?)
    }
}

impl PartyA<ClusterBackend> {
    /// A's parameter server: generates the keypair, spawns `workers`
    /// threads over row shards of `features`.
    pub fn new_cluster(
        cfg: TrainConfig,
        features: &FeatureMatrix,
        labels: Vec<u8>,
        workers: usize,
    ) -> Result<PartyA<ClusterBackend>, ProtocolError> {
        let mut rng = RngSource::new(cfg.seed, 0xA);
        let (_, private_key) = generate_keypair(cfg.key_bits, &mut rng)?;
        let backend =
            ClusterBackend::for_party_a(features, private_key, workers, cfg.kernel, cfg.seed)?;
        PartyA::new(cfg, backend, labels)
    }
}

impl PartyB<ClusterBackend> {
    pub fn new_cluster(
        cfg: TrainConfig,
        features: &FeatureMatrix,
        workers: usize,
    ) -> Result<PartyB<ClusterBackend>, ProtocolError> {
        let backend = ClusterBackend::for_party_b(features, workers, cfg.kernel, cfg.seed)?;
        PartyB::new(cfg, backend)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng as _};

    use super::*;
    use crate::protocol::{drive_in_process, ProtocolMessage, SerialBackend, StopReason, Transcript};

    fn test_key() -> (&'static PublicKey, &'static PrivateKey) {
        static KEY: OnceLock<(PublicKey, PrivateKey)> = OnceLock::new();
        let (pk, sk) = KEY.get_or_init(|| {
            let mut rng = RngSource::new(Some(0xC0FFEE), 0xF);
            generate_keypair(1024, &mut rng).unwrap()
        });
        (pk, sk)
    }

    fn dense(cols: usize, data: Vec<f64>) -> FeatureMatrix {
        FeatureMatrix::Dense { cols, data }
    }

    fn toy_features(rows: usize, cols: usize, salt: u64) -> FeatureMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(salt);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
        dense(cols, data)
    }

    fn encrypt_values(pk: &PublicKey, values: &[f64], f: u32, seed: u64) -> Vec<Ciphertext> {
        let mut rng = RngSource::new(Some(seed), 0xF0);
        values
            .iter()
            .map(|&v| pk.encrypt(&pk.encode(v, f).unwrap(), &mut rng).unwrap())
            .collect()
    }

    fn bits(values: &[f64]) -> Vec<u64> {
        values.iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn sharding_plan_is_contiguous_and_balanced() {
        let one = plan_shards(10, 1, 7).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].row_range, 0..10);
        assert_eq!(one[0].feature_width, 7);

        let three = plan_shards(10, 3, 2).unwrap();
        let ranges: Vec<_> = three.iter().map(|a| a.row_range.clone()).collect();
        assert_eq!(ranges, vec![0..4, 4..7, 7..10]);

        let singletons = plan_shards(7, 7, 1).unwrap();
        assert!(singletons.iter().enumerate().all(|(i, a)| a.row_range == (i..i + 1)));

        assert!(matches!(
            plan_shards(10, 11, 1),
            Err(ClusterError::BadPlan { n: 10, workers: 11 })
        ));
        assert!(plan_shards(0, 1, 1).is_err());
        assert!(plan_shards(5, 0, 1).is_err());
    }

    proptest! {
        #[test]
        fn prop_plan_partitions_every_row(n in 1usize..400, w in 1usize..16) {
            let workers = w.min(n);
            let plan = plan_shards(n, workers, 3).unwrap();
            prop_assert_eq!(plan.len(), workers);
            let mut next = 0;
            let mut sizes = Vec::new();
            for (i, asg) in plan.iter().enumerate() {
                prop_assert_eq!(asg.worker_id, i);
                prop_assert_eq!(asg.row_range.start, next);
                next = asg.row_range.end;
                sizes.push(asg.row_range.len());
            }
            prop_assert_eq!(next, n);
            let min = *sizes.iter().min().unwrap();
            let max = *sizes.iter().max().unwrap();
            prop_assert!(max - min <= 1);
        }
    }

    #[test]
    fn element_chunks_cover_everything_even_when_short() {
        assert_eq!(element_chunks(6, 4), vec![0..2, 2..4, 4..5, 5..6]);
        assert_eq!(element_chunks(2, 4), vec![0..1, 1..2]);
        assert_eq!(element_chunks(0, 4), vec![0..0]);
        assert_eq!(element_chunks(5, 1), vec![0..5]);
    }

    #[test]
    fn task_frame_layout_is_pinned() {
        let env = TaskEnvelope {
            task_id: 0x0102030405060708,
            range: 2..5,
            task: WorkerTask::Shutdown,
        };
        let frame = task_to_frame(&env);
        assert_eq!(frame.msg_type, 0x80);
        let mut expect = vec![8u8, 7, 6, 5, 4, 3, 2, 1];
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&5u64.to_le_bytes());
        expect.push(7);
        assert_eq!(frame.payload, expect);
        let bytes = frame.encode().unwrap();
        assert_eq!(&bytes[..4], b"VFLP");
        assert_eq!(bytes[5], 0x80);
        assert_eq!(task_from_frame(&frame).unwrap(), env);
    }

    #[test]
    fn every_task_kind_roundtrips() {
        let (pk, _) = test_key();
        let cts = encrypt_values(pk, &[0.5, -2.25], 40, 1);
        let tasks = vec![
            WorkerTask::PartialScores { weights: vec![1.5, -0.25] },
            WorkerTask::PlainGradShard { residuals: vec![0.1, -0.9, 0.5] },
            WorkerTask::EncGradShard { ciphertexts: cts.clone(), coeff_fraction_bits: 24 },
            WorkerTask::EncryptResiduals { values: vec![f64::NAN, 3.5], fraction_bits: 40 },
            WorkerTask::DecryptVector { ciphertexts: cts },
            WorkerTask::InstallKey { key: pk.clone() },
            WorkerTask::Shutdown,
        ];
        for (i, task) in tasks.into_iter().enumerate() {
            let env = TaskEnvelope { task_id: i as u64, range: 3..9, task };
            let back = task_from_frame(&task_to_frame(&env)).unwrap();
            // NaN breaks PartialEq, so compare through the re-encoded bytes
            assert_eq!(
                task_to_frame(&back).encode().unwrap(),
                task_to_frame(&env).encode().unwrap()
            );
        }
    }

    #[test]
    fn every_result_kind_roundtrips() {
        let (pk, _) = test_key();
        let cts = encrypt_values(pk, &[7.0], 40, 2);
        let results = vec![
            WorkerResult::Scores(vec![0.25, -1.5]),
            WorkerResult::PlainGradShard(vec![i128::MIN, -1, 0, 1, i128::MAX]),
            WorkerResult::EncGradShard(cts.clone()),
            WorkerResult::Encrypted(cts),
            WorkerResult::Decrypted(vec![-0.125]),
            WorkerResult::KeyInstalled,
            WorkerResult::Failed("worker exploded: détail".into()),
        ];
        for (i, result) in results.into_iter().enumerate() {
            let env = ResultEnvelope { task_id: i as u64, worker_id: 3, range: 0..2, result };
            let frame = result_to_frame(&env);
            assert_eq!(frame.msg_type, 0x81);
            assert_eq!(result_from_frame(&frame).unwrap(), env);
        }
    }

    #[test]
    fn malformed_worker_frames_rejected() {
        let env = TaskEnvelope {
            task_id: 9,
            range: 0..4,
            task: WorkerTask::PartialScores { weights: vec![1.0] },
        };
        let frame = task_to_frame(&env);

        // a result frame is not a task and vice versa
        assert!(task_from_frame(&Frame::new(msg_type::WORKER_RESULT, frame.payload.clone())).is_err());
        assert!(result_from_frame(&frame).is_err());

        // every truncation must fail, a trailing byte must fail
        for cut in 0..frame.payload.len() {
            let hurt = Frame::new(msg_type::WORKER_TASK, frame.payload[..cut].to_vec());
            assert!(task_from_frame(&hurt).is_err(), "cut at {cut} accepted");
        }
        let mut long = frame.payload.clone();
        long.push(0);
        assert!(task_from_frame(&Frame::new(msg_type::WORKER_TASK, long)).is_err());

        // unknown kind, backwards range
        let mut bad_kind = frame.payload.clone();
        bad_kind[24] = 9;
        assert!(task_from_frame(&Frame::new(msg_type::WORKER_TASK, bad_kind)).is_err());
        let mut backwards = frame.payload;
        backwards[8..16].copy_from_slice(&5u64.to_le_bytes());
        backwards[16..24].copy_from_slice(&1u64.to_le_bytes());
        assert!(task_from_frame(&Frame::new(msg_type::WORKER_TASK, backwards)).is_err());
    }

    #[test]
    fn reply_validation_catches_doctored_envelopes() {
        let good = ResultEnvelope {
            task_id: 5,
            worker_id: 2,
            range: 4..8,
            result: WorkerResult::Scores(vec![0.0; 4]),
        };
        assert!(validate_reply(&good, 2, 5, &(4..8)).is_ok());

        let failed = ResultEnvelope { result: WorkerResult::Failed("barf".into()), ..good.clone() };
        assert!(matches!(
            validate_reply(&failed, 2, 5, &(4..8)),
            Err(ClusterError::WorkerFailed { worker_id: 2, message }) if message == "barf"
        ));

        let stale = ResultEnvelope { task_id: 4, ..good.clone() };
        assert!(validate_reply(&stale, 2, 5, &(4..8)).is_err());
        let imposter = ResultEnvelope { worker_id: 1, ..good.clone() };
        assert!(validate_reply(&imposter, 2, 5, &(4..8)).is_err());
        let shifted = ResultEnvelope { range: 4..7, ..good };
        assert!(validate_reply(&shifted, 2, 5, &(4..8)).is_err());
    }

    #[test]
    fn scores_are_bitwise_identical_for_any_worker_count() {
        let features = toy_features(11, 3, 41);
        let weights = vec![0.8, -1.2, 0.31];
        let model = PartyModel { weights: weights.clone(), learning_rate: 0.0, iteration: 0 };
        let serial = lr::partial_scores(&model, &features, 0..11).unwrap().partial_scores;

        for workers in [1, 2, 4, 11] {
            let mut pool =
                WorkerPool::spawn(&features, workers, KernelStrategy::Auto, None, None, Some(1), 0)
                    .unwrap();
            let pooled = pool.partial_scores(&weights).unwrap();
            assert_eq!(bits(&pooled), bits(&serial), "{workers} workers");
            let zeros = pool.partial_scores(&[0.0, 0.0, 0.0]).unwrap();
            assert!(zeros.iter().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn plain_gradient_accumulators_are_exact_across_worker_counts() {
        let features = toy_features(13, 4, 42);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(43);
        let residuals: Vec<f64> = (0..13).map(|_| rng.gen_range(-0.5..0.5)).collect();

        let whole = lr::gradient_fixed(
            &ResidualBatch { residuals: residuals.clone(), row_range: 0..13 },
            &features,
        )
        .unwrap();

        for workers in [1, 3, 5] {
            let mut pool =
                WorkerPool::spawn(&features, workers, KernelStrategy::Auto, None, None, Some(1), 0)
                    .unwrap();
            let acc = pool.plain_gradient_fixed(&residuals).unwrap();
            assert_eq!(acc, whole, "{workers} workers");
            assert_eq!(
                bits(&lr::finish_gradient(&acc, 13)),
                bits(&lr::finish_gradient(&whole, 13))
            );
        }
    }

    #[test]
    fn enc_gradient_decrypts_identically_across_worker_counts() {
        let (pk, sk) = test_key();
        let features = toy_features(9, 2, 44);
        let residuals: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) / 8.0).collect();
        let cts = encrypt_values(pk, &residuals, 40, 3);

        let mut serial = SerialBackend::for_party_b(
            features.clone(),
            KernelStrategy::Auto,
            RngSource::new(Some(1), 0),
        );
        serial.install_public_key(pk).unwrap();
        let baseline = sk.decrypt_vec(&serial.enc_gradient(&cts, 40).unwrap()).unwrap();

        for workers in [1, 2, 3] {
            let mut pool = WorkerPool::spawn(
                &features,
                workers,
                KernelStrategy::Auto,
                None,
                Some(pk.clone()),
                Some(1),
                0,
            )
            .unwrap();
            let sums = pool.enc_gradient(&cts, 40, pk).unwrap();
            assert_eq!(bits(&sk.decrypt_vec(&sums).unwrap()), bits(&baseline), "{workers} workers");
        }

        // zero residuals sum to the exact zero gradient
        let zero_cts = encrypt_values(pk, &[0.0; 9], 40, 4);
        let mut pool = WorkerPool::spawn(
            &features,
            3,
            KernelStrategy::Auto,
            None,
            Some(pk.clone()),
            Some(1),
            0,
        )
        .unwrap();
        let sums = pool.enc_gradient(&zero_cts, 40, pk).unwrap();
        assert!(sk.decrypt_vec(&sums).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn encryption_and_decryption_shard_unevenly() {
        let (pk, sk) = test_key();
        let features = toy_features(8, 2, 45);
        let mut pool = WorkerPool::spawn(
            &features,
            4,
            KernelStrategy::Auto,
            Some(sk.clone()),
            Some(pk.clone()),
            Some(7),
            A_WORKER_STREAMS,
        )
        .unwrap();

        // 6 values over 4 workers -> chunks of 2, 2, 1, 1
        let values = [0.5, -1.25, 3.0, 0.0, -0.0625, 2.5];
        let cts = pool.encrypt_vector(&values, 40).unwrap();
        assert_eq!(cts.len(), 6);
        assert_eq!(bits(&pool.decrypt_vector(&cts).unwrap()), bits(&values));

        // fewer elements than workers
        let two = pool.encrypt_vector(&[1.0, -1.0], 40).unwrap();
        assert_eq!(bits(&pool.decrypt_vector(&two).unwrap()), bits(&[1.0, -1.0]));
        assert!(pool.decrypt_vector(&[]).unwrap().is_empty());
    }

    #[test]
    fn workers_without_keys_fail_cleanly() {
        let (pk, _) = test_key();
        let features = toy_features(6, 2, 46);
        let mut pool =
            WorkerPool::spawn(&features, 2, KernelStrategy::Auto, None, None, Some(1), 0).unwrap();

        let cts = encrypt_values(pk, &[0.1; 6], 40, 5);
        let no_pk = pool.enc_gradient(&cts, 40, pk).unwrap_err();
        assert!(matches!(
            &no_pk,
            ClusterError::WorkerFailed { message, .. } if message.contains("no public key")
        ));

        let no_sk = pool.decrypt_vector(&cts).unwrap_err();
        assert!(matches!(
            &no_sk,
            ClusterError::WorkerFailed { message, .. } if message.contains("private key")
        ));

        // the pool recovers once the key is installed
        pool.install_key(pk).unwrap();
        assert!(pool.enc_gradient(&cts, 40, pk).is_ok());
    }

    #[test]
    fn empty_shard_contributes_the_additive_identity() {
        let (pk, sk) = test_key();
        let features = toy_features(3, 2, 47);
        let plan = vec![
            ShardAssignment { worker_id: 0, row_range: 0..3, feature_width: 2 },
            ShardAssignment { worker_id: 1, row_range: 3..3, feature_width: 2 },
        ];
        let mut pool = WorkerPool::spawn_with_plan(
            &features,
            plan,
            KernelStrategy::Auto,
            None,
            Some(pk.clone()),
            Some(1),
            0,
        )
        .unwrap();

        let weights = vec![0.4, -0.7];
        let model = PartyModel { weights: weights.clone(), learning_rate: 0.0, iteration: 0 };
        let serial_scores = lr::partial_scores(&model, &features, 0..3).unwrap().partial_scores;
        assert_eq!(bits(&pool.partial_scores(&weights).unwrap()), bits(&serial_scores));

        let residuals = vec![0.25, -0.5, 0.125];
        let whole = lr::gradient_fixed(
            &ResidualBatch { residuals: residuals.clone(), row_range: 0..3 },
            &features,
        )
        .unwrap();
        assert_eq!(pool.plain_gradient_fixed(&residuals).unwrap(), whole);

        let cts = encrypt_values(pk, &residuals, 40, 6);
        let mut serial = SerialBackend::for_party_b(
            features.clone(),
            KernelStrategy::Auto,
            RngSource::new(Some(1), 0),
        );
        serial.install_public_key(pk).unwrap();
        let baseline = sk.decrypt_vec(&serial.enc_gradient(&cts, 40).unwrap()).unwrap();
        let pooled = sk.decrypt_vec(&pool.enc_gradient(&cts, 40, pk).unwrap()).unwrap();
        assert_eq!(bits(&pooled), bits(&baseline));
    }

    #[test]
    fn topology_is_strictly_star_shaped() {
        let features = toy_features(4, 2, 48);
        let pool =
            WorkerPool::spawn(&features, 4, KernelStrategy::Auto, None, None, Some(1), 0).unwrap();
        let links = pool.topology();
        assert_eq!(links.len(), 4);
        audit_topology(&links).unwrap();

        let mut doctored = links.clone();
        doctored.push(("worker0".into(), "worker1".into()));
        assert!(matches!(
            audit_topology(&doctored),
            Err(ClusterError::ForbiddenLink { .. })
        ));
        assert!(audit_topology(&[("ps".into(), "ps".into())]).is_err());
        assert!(audit_topology(&[("worker2".into(), "party_a".into())]).is_err());
    }

    fn toy_split(n: usize, salt: u64) -> (FeatureMatrix, FeatureMatrix, Vec<u8>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(salt);
        let truth = [0.9, -0.6, 0.4, 1.1];
        let (mut xa, mut xb, mut y) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let z: f64 = row.iter().zip(truth).map(|(x, w)| x * w).sum();
            y.push(u8::from(z > 0.1));
            xa.extend_from_slice(&row[..2]);
            xb.extend_from_slice(&row[2..]);
        }
        (dense(2, xa), dense(2, xb), y)
    }

    fn run_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            max_iterations: 4,
            seed: Some(seed),
            record_history: true,
            ..TrainConfig::default()
        }
    }

    fn cluster_run(
        workers: usize,
        seed: u64,
    ) -> (crate::protocol::ATrainResult, crate::protocol::BTrainResult, Transcript) {
        let (xa, xb, y) = toy_split(16, 99);
        let cfg = run_cfg(seed);
        let mut a = PartyA::new_cluster(cfg.clone(), &xa, y, workers).unwrap();
        let mut b = PartyB::new_cluster(cfg, &xb, workers).unwrap();
        let transcript = drive_in_process(&mut a, &mut b).unwrap();
        (a.into_result(), b.into_result(), transcript)
    }

    #[test]
    fn cluster_run_matches_serial_run_bitwise() {
        let (xa, xb, y) = toy_split(16, 99);
        let cfg = run_cfg(23);
        let mut sa = PartyA::new_serial(cfg.clone(), xa, y).unwrap();
        let mut sb = PartyB::new_serial(cfg, xb).unwrap();
        drive_in_process(&mut sa, &mut sb).unwrap();
        let (serial_a, serial_b) = (sa.into_result(), sb.into_result());

        let (ca, cb, _) = cluster_run(1, 23);
        assert_eq!(bits(&ca.model.weights), bits(&serial_a.model.weights));
        assert_eq!(bits(&cb.model.weights), bits(&serial_b.model.weights));
        assert_eq!(ca.stop, Some(StopReason::MaxIterations));
        assert_eq!(ca.stop, serial_a.stop);
        let serial_losses: Vec<f64> = serial_a.trace.iter().map(|r| r.loss).collect();
        let cluster_losses: Vec<f64> = ca.trace.iter().map(|r| r.loss).collect();
        assert_eq!(bits(&cluster_losses), bits(&serial_losses));
    }

    #[test]
    fn worker_count_never_changes_the_model() {
        let (a1, b1, t1) = cluster_run(1, 31);
        let (a4, b4, t4) = cluster_run(4, 31);

        assert_eq!(bits(&a1.model.weights), bits(&a4.model.weights));
        assert_eq!(bits(&b1.model.weights), bits(&b4.model.weights));

        // B's plaintext score vectors are bitwise identical on the wire
        let scores = |t: &Transcript| -> Vec<Vec<u8>> {
            t.from_b
                .iter()
                .filter(|m| matches!(m, ProtocolMessage::PartialScores(_)))
                .map(|m| m.to_frame().encode().unwrap())
                .collect()
        };
        assert_eq!(scores(&t1), scores(&t4));

        // so is everything A decrypts and sends back
        let unblinded = |t: &Transcript| -> Vec<Vec<u8>> {
            t.from_a
                .iter()
                .filter(|m| matches!(m, ProtocolMessage::UnblindedGrad(_)))
                .map(|m| m.to_frame().encode().unwrap())
                .collect()
        };
        assert_eq!(unblinded(&t1), unblinded(&t4));

        // per-iteration plaintext history agrees everywhere
        for (r1, r4) in b1.history.iter().zip(&b4.history) {
            assert_eq!(bits(&r1.partial_scores), bits(&r4.partial_scores));
            assert_eq!(bits(&r1.gradient_b), bits(&r4.gradient_b));
            assert_eq!(r1.mask_values, r4.mask_values);
        }
        assert_eq!(b1.history.len(), 4);
    }

    #[test]
    fn same_seed_and_worker_count_reproduce_the_transcript() {
        // NaN rides in IterationControl, so compare wire bytes, not messages
        let frames = |t: &Transcript| -> Vec<Vec<u8>> {
            t.all().map(|m| m.to_frame().encode().unwrap()).collect()
        };
        let (_, _, t1) = cluster_run(2, 57);
        let (_, _, t2) = cluster_run(2, 57);
        assert_eq!(frames(&t1), frames(&t2));

        let (_, _, t3) = cluster_run(2, 58);
        assert_ne!(frames(&t1), frames(&t3));
    }
}
