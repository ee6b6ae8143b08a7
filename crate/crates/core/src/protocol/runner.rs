//! Drives the two state machines to completion: an in-process pump for
//! deterministic tests, and per-party loops over any `Channel` for real
//! deployments (loopback or sockets).

use std::collections::VecDeque;

use crate::transport::{loopback_pair, Channel};

use super::messages::{ProtocolMessage, StopMsg, StopReason};
use super::party::{ATrainResult, BTrainResult, PartyA, PartyB};
use super::{ComputeBackend, ProtocolError, TrainConfig};

/// Everything that crossed the party boundary, by sender.
#[derive(Clone, Debug, Default)]
pub struct Transcript {
    pub from_a: Vec<ProtocolMessage>,
    pub from_b: Vec<ProtocolMessage>,
}

impl Transcript {
    pub fn all(&self) -> impl Iterator<Item = &ProtocolMessage> {
        self.from_a.iter().chain(self.from_b.iter())
    }
}

/// Verifies the out-of-band agreement both parties must share before
/// training: equal row counts and identical hyperparameters.
pub fn handshake_check(
    a_cfg: &TrainConfig,
    b_cfg: &TrainConfig,
    n_a: usize,
    n_b: usize,
) -> Result<(), ProtocolError> {
    if n_a != n_b {
        return Err(ProtocolError::RowCountMismatch { a: n_a, b: n_b });
    }
    if a_cfg != b_cfg {
        return Err(ProtocolError::ConfigMismatch(
            "parties were constructed with different TrainConfigs".into(),
        ));
    }
    Ok(())
}

/// Runs both parties to completion in one thread, message by message.
/// Every message still passes through the frame codec, so the transcript
/// is exactly what a socket would carry.
pub fn drive_in_process<SA, SB>(
    a: &mut PartyA<SA>,
    b: &mut PartyB<SB>,
) -> Result<Transcript, ProtocolError>
where
    SA: ComputeBackend,
    SB: ComputeBackend,
{
    let mut transcript = Transcript::default();
    let mut to_b: VecDeque<ProtocolMessage> = VecDeque::new();
    let mut to_a: VecDeque<ProtocolMessage> = VecDeque::new();

    for msg in a.start()? {
        transcript.from_a.push(msg.clone());
        to_b.push_back(msg);
    }
    while !(to_a.is_empty() && to_b.is_empty()) {
        while let Some(msg) = to_b.pop_front() {
            let msg = reencode(msg)?;
            for out in b.handle(&msg)? {
                transcript.from_b.push(out.clone());
                to_a.push_back(out);
            }
        }
        while let Some(msg) = to_a.pop_front() {
            let msg = reencode(msg)?;
            for out in a.handle(&msg)? {
                transcript.from_a.push(out.clone());
                to_b.push_back(out);
            }
        }
    }
    Ok(transcript)
}

/// Round-trips a message through its wire form, as a real transport would.
fn reencode(msg: ProtocolMessage) -> Result<ProtocolMessage, ProtocolError> {
    ProtocolMessage::from_frame(&msg.to_frame())
}

fn send_msg<C: Channel>(
    ch: &mut C,
    msg: &ProtocolMessage,
    log: Option<&mut Vec<ProtocolMessage>>,
) -> Result<(), ProtocolError> {
    if let Some(log) = log {
        log.push(msg.clone());
    }
    ch.send(&msg.to_frame())?;
    Ok(())
}

/// Runs party A over a channel until it finishes. On any protocol error A
/// tells B to abort before surfacing the error.
pub fn run_party_a<S: ComputeBackend, C: Channel>(
    a: &mut PartyA<S>,
    ch: &mut C,
    mut sent_log: Option<&mut Vec<ProtocolMessage>>,
) -> Result<(), ProtocolError> {
    for msg in a.start()? {
        send_msg(ch, &msg, sent_log.as_deref_mut())?;
    }
    while !a.finished() {
        let frame = ch.recv()?;
        let msg = ProtocolMessage::from_frame(&frame)?;
        match a.handle(&msg) {
            Ok(outs) => {
                for out in outs {
                    send_msg(ch, &out, sent_log.as_deref_mut())?;
                }
            }
            Err(e) => {
                let abort = ProtocolMessage::Stop(StopMsg {
                    iteration: msg.iteration(),
                    reason: StopReason::Aborted,
                });
                send_msg(ch, &abort, sent_log.as_deref_mut()).ok();
                return Err(e);
            }
        }
    }
    Ok(())
}

/// Runs party B over a channel until A stops the run.
pub fn run_party_b<S: ComputeBackend, C: Channel>(
    b: &mut PartyB<S>,
    ch: &mut C,
    mut sent_log: Option<&mut Vec<ProtocolMessage>>,
) -> Result<(), ProtocolError> {
    while !b.finished() {
        let frame = ch.recv()?;
        let msg = ProtocolMessage::from_frame(&frame)?;
        if let ProtocolMessage::Stop(m) = &msg {
            if m.reason == StopReason::Aborted {
                b.handle(&msg)?;
                return Err(ProtocolError::PeerAborted(format!(
                    "at iteration {}",
                    m.iteration
                )));
            }
        }
        match b.handle(&msg) {
            Ok(outs) => {
                for out in outs {
                    send_msg(ch, &out, sent_log.as_deref_mut())?;
                }
            }
            Err(e) => {
                let abort = ProtocolMessage::Stop(StopMsg {
                    iteration: msg.iteration(),
                    reason: StopReason::Aborted,
                });
                send_msg(ch, &abort, sent_log.as_deref_mut()).ok();
                return Err(e);
            }
        }
    }
    Ok(())
}

/// Full two-thread training run over an in-process loopback: A on the
/// calling thread, B on a spawned one. Returns both results plus the
/// transcript of everything sent.
pub fn run_duplex<SA, SB>(
    mut a: PartyA<SA>,
    mut b: PartyB<SB>,
) -> Result<(ATrainResult, BTrainResult, Transcript), ProtocolError>
where
    SA: ComputeBackend + 'static,
    SB: ComputeBackend + Send + 'static,
{
    let (mut ch_a, mut ch_b) = loopback_pair();
    let handle = std::thread::spawn(move || {
        let mut sent = Vec::new();
        let res = run_party_b(&mut b, &mut ch_b, Some(&mut sent));
        (res, b.into_result(), sent)
    });
    let mut from_a = Vec::new();
    let a_run = run_party_a(&mut a, &mut ch_a, Some(&mut from_a));
    let (b_run, b_result, from_b) = handle.join().expect("party B thread panicked");
    match (a_run, b_run) {
        // A seeing a dead channel is usually the echo of B's failure
        (Err(ProtocolError::Transport(_)), Err(e)) => Err(e),
        (Err(e), _) => Err(e),
        (_, Err(e)) => Err(e),
        (Ok(()), Ok(())) => Ok((
            a.into_result(),
            b_result,
            Transcript { from_a, from_b },
        )),
    }
}
