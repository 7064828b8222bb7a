//! Reliable, per-pair FIFO message passing between the parties and the OT
//! mediator.
//!
//! [`TransportHandle`] is what protocol code talks to. It validates
//! addressing, enforces the payload bound and keeps the per-phase
//! communication counters; the actual delivery is done by a [`Backend`]
//! (in-memory channels or TCP byte streams).

mod envelope;
mod inbox;
pub mod memory;
pub mod socket;
pub mod wire;

use std::io;
use std::time::Duration;

use thiserror::Error;

use crate::metrics::PhaseMetrics;

pub use envelope::{Address, Envelope, PartyId, Phase, HEADER_LEN, MAX_PAYLOAD};
pub use inbox::MatchKey;
pub use memory::{MemoryNetwork, Scheduling, TranscriptEntry};
pub use socket::SocketEndpoint;

/// Default bound on a blocking receive in free-running mode.
pub const DEFAULT_RECEIVE_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("address error: {0}")]
    Address(String),
    #[error("transport closed")]
    ChannelClosed,
    #[error("no matching message within the receive timeout")]
    Timeout,
    #[error("every participant is blocked; no message can make progress")]
    Deadlock,
    #[error("payload of {0} bytes exceeds the frame limit")]
    PayloadTooLarge(usize),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<io::Error> for TransportError {
    fn from(e: io::Error) -> Self {
        TransportError::Io(e.to_string())
    }
}

/// Delivery mechanism behind a [`TransportHandle`].
pub trait Backend: Send {
    /// Delivers `env`; broadcasts fan out to every other party.
    fn deliver(&mut self, env: Envelope) -> Result<(), TransportError>;

    /// Blocks until an envelope matching `key` is available and removes it.
    fn next_match(&mut self, key: &MatchKey, timeout: Option<Duration>) -> Result<Envelope, TransportError>;
}

pub struct TransportHandle {
    me: Address,
    parties: u16,
    backend: Box<dyn Backend>,
    metrics: PhaseMetrics,
    timeout: Option<Duration>,
}

impl TransportHandle {
    pub fn new(me: Address, parties: u16, backend: Box<dyn Backend>) -> Self {
        TransportHandle { me, parties, backend, metrics: PhaseMetrics::default(), timeout: Some(DEFAULT_RECEIVE_TIMEOUT) }
    }

    pub fn me(&self) -> Address {
        self.me
    }

    /// The party id of this endpoint; panics on the mediator endpoint.
    pub fn party(&self) -> PartyId {
        self.me.party().expect("mediator endpoint has no party id")
    }

    pub fn parties(&self) -> u16 {
        self.parties
    }

    /// `None` waits forever.
    pub fn set_timeout(&mut self, timeout: Option<Duration>) {
        self.timeout = timeout;
    }

    pub fn metrics(&self) -> &PhaseMetrics {
        &self.metrics
    }

    pub fn metrics_mut(&mut self) -> &mut PhaseMetrics {
        &mut self.metrics
    }

    fn check_destination(&self, to: Address) -> Result<(), TransportError> {
        match to {
            Address::Party(p) if p.index() == 0 || p.index() > self.parties => {
                Err(TransportError::Address(format!("no party {p} in a network of {}", self.parties)))
            }
            Address::Party(_) | Address::Mediator if to == self.me => {
                Err(TransportError::Address(format!("{} cannot send to itself", self.me)))
            }
            _ => Ok(()),
        }
    }

    fn check_envelope(&self, env: &Envelope) -> Result<(), TransportError> {
        if env.from != self.me {
            return Err(TransportError::Address(format!("{} cannot send as {}", self.me, env.from)));
        }
        if env.payload.len() > MAX_PAYLOAD {
            return Err(TransportError::PayloadTooLarge(env.payload.len()));
        }
        self.check_destination(env.to)
    }

    /// Point-to-point send.
    pub fn send(&mut self, env: Envelope) -> Result<(), TransportError> {
        if env.is_broadcast() {
            return self.broadcast(env);
        }
        self.check_envelope(&env)?;
        let phase = env.phase;
        self.backend.deliver(env)?;
        self.metrics.counters_mut(phase).messages_sent += 1;
        Ok(())
    }

    /// Delivers to every other party; counts once for the sender.
    pub fn broadcast(&mut self, env: Envelope) -> Result<(), TransportError> {
        if !env.is_broadcast() {
            return Err(TransportError::Address(format!("broadcast addressed to {}", env.to)));
        }
        self.check_envelope(&env)?;
        let phase = env.phase;
        self.backend.deliver(env)?;
        self.metrics.counters_mut(phase).broadcasts_sent += 1;
        Ok(())
    }

    /// Convenience wrapper building the envelope from this endpoint.
    pub fn send_to(&mut self, to: impl Into<Address>, phase: Phase, round: u32, payload: Vec<u8>) -> Result<(), TransportError> {
        let env = Envelope::new(self.me, to, phase, round, payload);
        self.send(env)
    }

    pub fn broadcast_payload(&mut self, phase: Phase, round: u32, payload: Vec<u8>) -> Result<(), TransportError> {
        let env = Envelope::new(self.me, Address::Broadcast, phase, round, payload);
        self.broadcast(env)
    }

    /// Blocks for the next message of `phase`; other phases stay queued.
    pub fn receive(&mut self, phase: Phase) -> Result<Envelope, TransportError> {
        self.receive_matching(MatchKey::phase(phase))
    }

    pub fn receive_from(&mut self, phase: Phase, from: impl Into<Address>, round: u32) -> Result<Envelope, TransportError> {
        self.receive_matching(MatchKey::exact(phase, from, round))
    }

    pub fn receive_matching(&mut self, key: MatchKey) -> Result<Envelope, TransportError> {
        let env = self.backend.next_match(&key, self.timeout)?;
        let counters = self.metrics.counters_mut(env.phase);
        if env.is_broadcast() {
            counters.broadcasts_received += 1;
        } else {
            counters.messages_received += 1;
        }
        Ok(env)
    }
}

impl std::fmt::Debug for TransportHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransportHandle").field("me", &self.me).field("parties", &self.parties).finish_non_exhaustive()
    }
}
