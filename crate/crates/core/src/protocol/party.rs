//! The two party-role state machines.
//!
//! Both are reactive: `handle` consumes one message and returns the messages
//! to send, so the same code runs over any transport. Party A drives the
//! loop (it owns the loss and the stop decision); party B only ever responds.

use std::time::Instant;

use rand::Rng;

use crate::ahe::{generate_keypair, PublicKey};
use crate::data::{FeatureMatrix, PartyRole};
use crate::lr::{self, PartyModel};

use super::backend::encrypt_mask_mantissa;
use super::messages::*;
use super::{ComputeBackend, ProtocolError, RngSource, SerialBackend, TrainConfig, WeightInit};

/// B's per-iteration blinding vector. Mask values are `mantissa · 2^-f`,
/// drawn fresh each iteration; the vector never crosses the party boundary.
#[derive(Clone, Debug)]
pub struct MaskVector {
    pub mantissas: Vec<i64>,
    pub iteration: u64,
}

impl MaskVector {
    pub(crate) fn draw(
        rng: &mut RngSource,
        m: usize,
        cfg: &TrainConfig,
        iteration: u64,
    ) -> MaskVector {
        let mantissas = if cfg.masking {
            let bound = 1i64 << (cfg.mask_bound_log2 + cfg.fraction_bits);
            (0..m).map(|_| rng.gen_range(-bound..=bound)).collect()
        } else {
            vec![0; m]
        };
        MaskVector {
            mantissas,
            iteration,
        }
    }

    pub fn value(&self, j: usize, fraction_bits: u32) -> f64 {
        self.mantissas[j] as f64 * (2f64).powi(-(fraction_bits as i32))
    }
}

/// One row of the convergence trace (A-side observations; the step timings
/// for B's steps measure request-to-response wall time including the wire).
#[derive(Clone, Debug)]
pub struct TraceRow {
    pub iteration: u64,
    pub loss: f64,
    pub train_auc: Option<f64>,
    pub ms_step2: f64,
    pub ms_step3: f64,
    pub ms_step4: f64,
    pub ms_step5: f64,
    pub ms_step6: f64,
}

/// Per-iteration record kept by A when `record_history` is on.
#[derive(Clone, Debug)]
pub struct IterationRecordA {
    pub iteration: u64,
    pub loss: f64,
    pub combined_scores: Vec<f64>,
    pub residuals: Vec<f64>,
    pub masked_gradient_b: Vec<f64>,
    pub gradient_a: Vec<f64>,
}

/// Per-iteration record kept by B when `record_history` is on.
#[derive(Clone, Debug)]
pub struct IterationRecordB {
    pub iteration: u64,
    pub partial_scores: Vec<f64>,
    pub gradient_b: Vec<f64>,
    pub mask_values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ATrainResult {
    pub model: PartyModel,
    pub trace: Vec<TraceRow>,
    pub history: Vec<IterationRecordA>,
    pub stop: Option<StopReason>,
    pub key: PublicKey,
    /// B's feature count, as A observed it from the gradient widths; `None`
    /// if the run aborted before the first step 5.
    pub peer_cols: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct BTrainResult {
    pub model: PartyModel,
    pub history: Vec<IterationRecordB>,
    pub stop: Option<StopReason>,
}

fn init_weights(m: usize, init: WeightInit, role: PartyRole) -> Vec<f64> {
    match init {
        WeightInit::Zeros => vec![0.0; m],
        WeightInit::SeededUniform { seed } => {
            use rand::SeedableRng;
            let stream = match role {
                PartyRole::A => 0xA,
                PartyRole::B => 0xB,
            };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ (stream << 56));
            (0..m).map(|_| rng.gen_range(-0.01..0.01)).collect()
        }
    }
}

fn ensure_finite(values: &[f64], what: &'static str) -> Result<(), ProtocolError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ProtocolError::NonFinite(what));
    }
    Ok(())
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

// ---------------------------------------------------------------------------
// Party A

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum AState {
    AwaitingScores,
    AwaitingBlindedGrad,
    Done,
}

#[derive(Clone, Debug)]
pub struct PartyA<S: ComputeBackend> {
    cfg: TrainConfig,
    backend: S,
    labels: Vec<u8>,
    n: usize,
    m_b: Option<usize>,
    model: PartyModel,
    public_key: PublicKey,
    state: AState,
    iteration: u64,
    residuals: Option<Vec<f64>>,
    pending: Option<PendingIteration>,
    last_loss: Option<f64>,
    stop: Option<StopReason>,
    trace: Vec<TraceRow>,
    history: Vec<IterationRecordA>,
    iter_started: Instant,
    enc_sent: Instant,
}

/// Step-3 artifacts carried until the iteration closes at step 6.
#[derive(Clone, Debug)]
struct PendingIteration {
    loss: f64,
    train_auc: Option<f64>,
    combined_scores: Option<Vec<f64>>,
    ms_step2: f64,
    ms_step3: f64,
}

impl PartyA<SerialBackend> {
    /// Serial-backend constructor; generates the keypair from the config's
    /// randomness source.
    pub fn new_serial(
        cfg: TrainConfig,
        features: FeatureMatrix,
        labels: Vec<u8>,
    ) -> Result<PartyA<SerialBackend>, ProtocolError> {
        let mut rng = RngSource::new(cfg.seed, 0xA);
        let (_, private_key) = generate_keypair(cfg.key_bits, &mut rng)?;
        let backend = SerialBackend::for_party_a(features, private_key, rng);
        PartyA::new(cfg, backend, labels)
    }
}

impl<S: ComputeBackend> PartyA<S> {
    /// `backend` must already hold both keys for this party.
    pub fn new(cfg: TrainConfig, backend: S, labels: Vec<u8>) -> Result<PartyA<S>, ProtocolError> {
        cfg.validate()?;
        let n = backend.rows();
        if n == 0 {
            return Err(ProtocolError::ConfigInvalid("party A has no rows".into()));
        }
        if labels.len() != n {
            return Err(ProtocolError::LengthMismatch {
                what: "labels",
                expected: n,
                got: labels.len(),
            });
        }
        for &y in &labels {
            if y > 1 {
                return Err(ProtocolError::Lr(lr::LrError::BadLabel(y)));
            }
        }
        let public_key = backend
            .public_key()
            .cloned()
            .ok_or_else(|| {
                ProtocolError::ConfigInvalid("party A backend must hold the keypair".into())
            })?;
        let model = PartyModel {
            weights: init_weights(backend.cols(), cfg.init, PartyRole::A),
            learning_rate: cfg.eta,
            iteration: 0,
        };
        Ok(PartyA {
            cfg,
            backend,
            labels,
            n,
            m_b: None,
            model,
            public_key,
            state: AState::AwaitingScores,
            iteration: 0,
            residuals: None,
            pending: None,
            last_loss: None,
            stop: None,
            trace: Vec::new(),
            history: Vec::new(),
            iter_started: Instant::now(),
            enc_sent: Instant::now(),
        })
    }

    pub fn model(&self) -> &PartyModel {
        &self.model
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public_key
    }

    pub fn finished(&self) -> bool {
        self.state == AState::Done
    }

    /// Opens the run: the handshake message, or an immediate stop for a
    /// zero-iteration config.
    pub fn start(&mut self) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        self.iter_started = Instant::now();
        let key_msg = ProtocolMessage::PublicKey(PublicKeyMsg {
            key: self.public_key.clone(),
        });
        if self.cfg.max_iterations == 0 {
            self.state = AState::Done;
            self.stop = Some(StopReason::MaxIterations);
            return Ok(vec![
                key_msg,
                ProtocolMessage::Stop(StopMsg {
                    iteration: 0,
                    reason: StopReason::MaxIterations,
                }),
            ]);
        }
        Ok(vec![key_msg])
    }

    pub fn handle(
        &mut self,
        msg: &ProtocolMessage,
    ) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        // Once finished, late messages from B's last round are not errors.
        if self.state == AState::Done {
            return Ok(vec![]);
        }
        match (self.state, msg) {
            (AState::AwaitingScores, ProtocolMessage::PartialScores(m)) => {
                self.check_iteration(m.iteration)?;
                self.step3(m)
            }
            (AState::AwaitingBlindedGrad, ProtocolMessage::BlindedEncGrad(m)) => {
                self.check_iteration(m.iteration)?;
                self.step5_and_6(m)
            }
            (state, other) => Err(ProtocolError::UnexpectedMessage {
                state: match state {
                    AState::AwaitingScores => "AwaitingScores",
                    AState::AwaitingBlindedGrad => "AwaitingBlindedGrad",
                    AState::Done => "Done",
                },
                got: other.name(),
            }),
        }
    }

    fn check_iteration(&self, got: u64) -> Result<(), ProtocolError> {
        if got != self.iteration {
            return Err(ProtocolError::IterationMismatch {
                expected: self.iteration,
                got,
            });
        }
        Ok(())
    }

    /// Step 3: combine scores, residuals + loss, send encrypted residuals.
    fn step3(&mut self, m: &PartialScoresMsg) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        if m.scores.len() != self.n {
            return Err(ProtocolError::LengthMismatch {
                what: "partial scores",
                expected: self.n,
                got: m.scores.len(),
            });
        }
        ensure_finite(&m.scores, "partial scores")?;
        let ms_step2 = ms_since(self.iter_started);

        let t3 = Instant::now();
        let own = self.backend.partial_scores(&self.model)?;
        let combined: Vec<f64> = own.iter().zip(&m.scores).map(|(a, b)| a + b).collect();
        let (residuals, loss) = lr::residuals_and_loss(&combined, &self.labels)?;
        let train_auc = if self.cfg.trace_auc {
            Some(lr::auc(&combined, &self.labels)?)
        } else {
            None
        };
        let ciphertexts = self
            .backend
            .encrypt_vector(&residuals.residuals, self.cfg.fraction_bits)?;
        let ms_step3 = ms_since(t3);

        self.residuals = Some(residuals.residuals);
        self.pending = Some(PendingIteration {
            loss,
            train_auc,
            combined_scores: self.cfg.record_history.then_some(combined),
            ms_step2,
            ms_step3,
        });
        self.state = AState::AwaitingBlindedGrad;
        self.enc_sent = Instant::now();
        Ok(vec![ProtocolMessage::EncResiduals(EncResidualsMsg {
            iteration: self.iteration,
            ciphertexts,
        })])
    }

    /// Steps 5 and 6: decrypt the blinded gradient for B, then close A's own
    /// iteration (gradient, update, stop-or-continue).
    fn step5_and_6(
        &mut self,
        m: &BlindedEncGradMsg,
    ) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        let ms_step4 = ms_since(self.enc_sent);
        match self.m_b {
            None => {
                let m_b = m.ciphertexts.len();
                if m_b == 0 {
                    return Err(ProtocolError::LengthMismatch {
                        what: "blinded gradient",
                        expected: 1,
                        got: 0,
                    });
                }
                if m_b >= self.n && !self.cfg.allow_unsafe_dims {
                    return Err(ProtocolError::LeakageRefused { n: self.n, m_b });
                }
                self.m_b = Some(m_b);
            }
            Some(m_b) => {
                if m.ciphertexts.len() != m_b {
                    return Err(ProtocolError::LengthMismatch {
                        what: "blinded gradient",
                        expected: m_b,
                        got: m.ciphertexts.len(),
                    });
                }
            }
        }

        let t5 = Instant::now();
        let masked = self.backend.decrypt_vector(&m.ciphertexts)?;
        ensure_finite(&masked, "decrypted masked gradient")?;
        let ms_step5 = ms_since(t5);

        let t6 = Instant::now();
        let residuals = self
            .residuals
            .take()
            .ok_or_else(|| ProtocolError::Codec("no cached residuals".into()))?;
        let gradient_a = self.backend.plain_gradient(&residuals)?;
        self.model = lr::apply_update(&self.model, &gradient_a)?;
        let ms_step6 = ms_since(t6);

        let pending = self
            .pending
            .take()
            .ok_or_else(|| ProtocolError::Codec("no pending iteration".into()))?;
        let converged = self
            .last_loss
            .is_some_and(|prev| (prev - pending.loss).abs() < self.cfg.tolerance);
        self.last_loss = Some(pending.loss);

        self.trace.push(TraceRow {
            iteration: self.iteration,
            loss: pending.loss,
            train_auc: pending.train_auc,
            ms_step2: pending.ms_step2,
            ms_step3: pending.ms_step3,
            ms_step4,
            ms_step5,
            ms_step6,
        });
        if self.cfg.record_history {
            self.history.push(IterationRecordA {
                iteration: self.iteration,
                loss: pending.loss,
                combined_scores: pending.combined_scores.unwrap_or_default(),
                residuals,
                masked_gradient_b: masked.clone(),
                gradient_a,
            });
        }

        let mut out = vec![ProtocolMessage::UnblindedGrad(UnblindedGradMsg {
            iteration: self.iteration,
            values: masked,
        })];
        self.iteration += 1;
        if converged {
            self.stop = Some(StopReason::Converged);
            self.state = AState::Done;
            out.push(ProtocolMessage::Stop(StopMsg {
                iteration: self.iteration,
                reason: StopReason::Converged,
            }));
        } else if self.iteration >= self.cfg.max_iterations {
            self.stop = Some(StopReason::MaxIterations);
            self.state = AState::Done;
            out.push(ProtocolMessage::Stop(StopMsg {
                iteration: self.iteration,
                reason: StopReason::MaxIterations,
            }));
        } else {
            self.state = AState::AwaitingScores;
            self.iter_started = Instant::now();
            out.push(ProtocolMessage::IterationControl(IterationControlMsg {
                iteration: self.iteration,
                // the layout has a loss slot; A keeps L private
                loss: f64::NAN,
            }));
        }
        Ok(out)
    }

    pub fn into_result(self) -> ATrainResult {
        ATrainResult {
            model: self.model,
            trace: self.trace,
            history: self.history,
            stop: self.stop,
            key: self.public_key,
            peer_cols: self.m_b,
        }
    }
}

// ---------------------------------------------------------------------------
// Party B

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BState {
    AwaitingPublicKey,
    AwaitingEncResiduals,
    AwaitingUnblinded,
    AwaitingControl,
    Done,
}

#[derive(Clone, Debug)]
pub struct PartyB<S: ComputeBackend> {
    cfg: TrainConfig,
    backend: S,
    n: usize,
    m_b: usize,
    model: PartyModel,
    public_key: Option<PublicKey>,
    state: BState,
    iteration: u64,
    mask: Option<MaskVector>,
    rng: RngSource,
    stop: Option<StopReason>,
    history: Vec<IterationRecordB>,
}

impl PartyB<SerialBackend> {
    pub fn new_serial(
        cfg: TrainConfig,
        features: FeatureMatrix,
    ) -> Result<PartyB<SerialBackend>, ProtocolError> {
        let kernel = cfg.kernel;
        let rng = RngSource::new(cfg.seed, 0xB0);
        let backend = SerialBackend::for_party_b(features, kernel, rng);
        PartyB::new(cfg, backend)
    }
}

impl<S: ComputeBackend> PartyB<S> {
    pub fn new(cfg: TrainConfig, backend: S) -> Result<PartyB<S>, ProtocolError> {
        cfg.validate()?;
        let n = backend.rows();
        let m_b = backend.cols();
        if n == 0 || m_b == 0 {
            return Err(ProtocolError::ConfigInvalid(
                "party B shard must be non-empty".into(),
            ));
        }
        // With m_B >= n, A's encrypted-residual equations let B recover
        // every residual (and so every label). Refuse by default.
        if m_b >= n && !cfg.allow_unsafe_dims {
            return Err(ProtocolError::LeakageRefused { n, m_b });
        }
        let model = PartyModel {
            weights: init_weights(m_b, cfg.init, PartyRole::B),
            learning_rate: cfg.eta,
            iteration: 0,
        };
        let rng = RngSource::new(cfg.seed, 0xB);
        Ok(PartyB {
            cfg,
            backend,
            n,
            m_b,
            model,
            public_key: None,
            state: BState::AwaitingPublicKey,
            iteration: 0,
            mask: None,
            rng,
            stop: None,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &PartyModel {
        &self.model
    }

    pub fn finished(&self) -> bool {
        self.state == BState::Done
    }

    fn state_name(&self) -> &'static str {
        match self.state {
            BState::AwaitingPublicKey => "AwaitingPublicKey",
            BState::AwaitingEncResiduals => "AwaitingEncResiduals",
            BState::AwaitingUnblinded => "AwaitingUnblinded",
            BState::AwaitingControl => "AwaitingControl",
            BState::Done => "Done",
        }
    }

    pub fn handle(
        &mut self,
        msg: &ProtocolMessage,
    ) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        // A stop is honored in any state: A may abort mid-iteration.
        if let ProtocolMessage::Stop(m) = msg {
            if self.state == BState::Done {
                return Err(ProtocolError::UnexpectedMessage {
                    state: "Done",
                    got: msg.name(),
                });
            }
            self.stop = Some(m.reason);
            self.mask = None;
            self.state = BState::Done;
            return Ok(vec![]);
        }
        match (self.state, msg) {
            (BState::AwaitingPublicKey, ProtocolMessage::PublicKey(m)) => self.step0_and_2(m),
            (BState::AwaitingEncResiduals, ProtocolMessage::EncResiduals(m)) => {
                self.check_iteration(m.iteration)?;
                self.step4(m)
            }
            (BState::AwaitingUnblinded, ProtocolMessage::UnblindedGrad(m)) => {
                self.check_iteration(m.iteration)?;
                self.step6(m)
            }
            (BState::AwaitingControl, ProtocolMessage::IterationControl(m)) => {
                if m.iteration != self.iteration + 1 {
                    return Err(ProtocolError::IterationMismatch {
                        expected: self.iteration + 1,
                        got: m.iteration,
                    });
                }
                self.iteration = m.iteration;
                self.step2()
            }
            (_, other) => Err(ProtocolError::UnexpectedMessage {
                state: self.state_name(),
                got: other.name(),
            }),
        }
    }

    fn check_iteration(&self, got: u64) -> Result<(), ProtocolError> {
        if got != self.iteration {
            return Err(ProtocolError::IterationMismatch {
                expected: self.iteration,
                got,
            });
        }
        Ok(())
    }

    fn step0_and_2(&mut self, m: &PublicKeyMsg) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        self.public_key = Some(m.key.clone());
        self.backend.install_public_key(&m.key)?;
        self.state = BState::AwaitingEncResiduals;
        self.step2()
    }

    fn step2(&mut self) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        let scores = self.backend.partial_scores(&self.model)?;
        if self.cfg.record_history {
            self.history.push(IterationRecordB {
                iteration: self.iteration,
                partial_scores: scores.clone(),
                gradient_b: Vec::new(),
                mask_values: Vec::new(),
            });
        }
        self.state = BState::AwaitingEncResiduals;
        Ok(vec![ProtocolMessage::PartialScores(PartialScoresMsg {
            iteration: self.iteration,
            scores,
        })])
    }

    fn step4(&mut self, m: &EncResidualsMsg) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        if m.ciphertexts.len() != self.n {
            return Err(ProtocolError::LengthMismatch {
                what: "encrypted residuals",
                expected: self.n,
                got: m.ciphertexts.len(),
            });
        }
        let key = self
            .public_key
            .clone()
            .ok_or_else(|| ProtocolError::ConfigInvalid("no public key installed".into()))?;
        let enc_grad = self
            .backend
            .enc_gradient(&m.ciphertexts, self.cfg.coeff_fraction_bits)?;

        let mask = MaskVector::draw(&mut self.rng, self.m_b, &self.cfg, self.iteration);
        let out_exponent = (self.cfg.fraction_bits + self.cfg.coeff_fraction_bits) as i32;
        let mut blinded = Vec::with_capacity(self.m_b);
        for (j, g) in enc_grad.iter().enumerate() {
            let enc_mask = encrypt_mask_mantissa(
                &key,
                mask.mantissas[j],
                self.cfg.coeff_fraction_bits,
                out_exponent,
                &mut self.rng,
            )?;
            blinded.push(g.add(&enc_mask, &key)?);
        }
        self.mask = Some(mask);
        self.state = BState::AwaitingUnblinded;
        Ok(vec![ProtocolMessage::BlindedEncGrad(BlindedEncGradMsg {
            iteration: self.iteration,
            ciphertexts: blinded,
        })])
    }

    fn step6(&mut self, m: &UnblindedGradMsg) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        if m.values.len() != self.m_b {
            return Err(ProtocolError::LengthMismatch {
                what: "unblinded gradient",
                expected: self.m_b,
                got: m.values.len(),
            });
        }
        ensure_finite(&m.values, "unblinded gradient")?;
        let mask = self.mask.take().ok_or(ProtocolError::StaleMask {
            mask_iteration: 0,
            current: self.iteration,
        })?;
        if mask.iteration != m.iteration {
            return Err(ProtocolError::StaleMask {
                mask_iteration: mask.iteration,
                current: m.iteration,
            });
        }
        let f = self.cfg.fraction_bits;
        let gradient_b: Vec<f64> = m
            .values
            .iter()
            .enumerate()
            .map(|(j, v)| v - mask.value(j, f))
            .collect();
        self.model = lr::apply_update(&self.model, &gradient_b)?;
        if self.cfg.record_history {
            if let Some(rec) = self.history.last_mut() {
                rec.gradient_b = gradient_b;
                rec.mask_values = (0..self.m_b).map(|j| mask.value(j, f)).collect();
            }
        }
        self.state = BState::AwaitingControl;
        Ok(vec![])
    }

    pub fn into_result(self) -> BTrainResult {
        BTrainResult {
            model: self.model,
            history: self.history,
            stop: self.stop,
        }
    }

    /// Test hook: age the retained mask to simulate a delayed unblind.
    #[cfg(test)]
    pub(crate) fn backdate_mask(&mut self) {
        if let Some(mask) = &mut self.mask {
            mask.iteration = mask.iteration.wrapping_sub(1);
        }
    }

    #[cfg(test)]
    pub(crate) fn current_mask(&self) -> Option<&MaskVector> {
        self.mask.as_ref()
    }

    #[cfg(test)]
    pub(crate) fn set_weights(&mut self, w: Vec<f64>) {
        self.model.weights = w;
    }
}
