//! 1-out-of-m oblivious transfer as an ideal functionality.
//!
//! A mediator endpoint stores the sender's message vector and the
//! receiver's index and hands the chosen message to the receiver only. The
//! sender gets no reply at all, so nothing it observes depends on the
//! choice. Parties talk to the mediator with `OtControl` envelopes, which
//! stay out of the protocol-phase counters; the OT work itself is recorded
//! as one initialization per session per party and one transfer
//! interaction per party (the load, or the fetch).
//!
//! Session ids are `(sender, receiver, phase, seq)` where `seq` counts the
//! sessions each party has opened for that triple. Both ends open sessions
//! in the same order, so they agree on ids without talking.

use std::collections::HashMap;

use log::{debug, warn};
use thiserror::Error;

use crate::numtheory::Natural;
use crate::transport::wire::{PayloadReader, PayloadWriter};
use crate::transport::{Address, MatchKey, PartyId, Phase, TransportError, TransportHandle};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OtError {
    #[error("invalid OT parameter: {0}")]
    Parameter(String),
    #[error("role error: {0}")]
    Role(String),
    #[error("expected {expected} messages, got {got}")]
    Arity { expected: u32, got: usize },
    #[error("session {id} is {found:?}, operation needs {needed:?}")]
    State { id: SessionId, found: OtState, needed: OtState },
    #[error("choice {choice} outside [1, {arity}]")]
    Choice { choice: u32, arity: u32 },
    #[error("mediator rejected session {id}: {reason}")]
    Rejected { id: SessionId, reason: RejectReason },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionId {
    pub sender: PartyId,
    pub receiver: PartyId,
    pub phase: Phase,
    pub seq: u64,
}

impl std::fmt::Display for SessionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}->{}/{}#{}", self.sender, self.receiver, self.phase, self.seq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum OtState {
    Initialized,
    MessagesLoaded,
    /// Receiver side: the choice is with the mediator.
    Requested,
    Delivered,
}

/// One party's local view of a session. States only move forward.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OtSession {
    id: SessionId,
    arity: u32,
    state: OtState,
}

impl OtSession {
    pub fn id(&self) -> SessionId {
        self.id
    }

    pub fn arity(&self) -> u32 {
        self.arity
    }

    pub fn sender(&self) -> PartyId {
        self.id.sender
    }

    pub fn receiver(&self) -> PartyId {
        self.id.receiver
    }

    pub fn state(&self) -> OtState {
        self.state
    }

    fn expect(&self, needed: OtState) -> Result<(), OtError> {
        if self.state != needed {
            return Err(OtError::State { id: self.id, found: self.state, needed });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    WrongRole,
    ArityMismatch,
    ChoiceOutOfRange,
    Duplicate,
}

impl RejectReason {
    fn code(self) -> u8 {
        match self {
            RejectReason::WrongRole => 1,
            RejectReason::ArityMismatch => 2,
            RejectReason::ChoiceOutOfRange => 3,
            RejectReason::Duplicate => 4,
        }
    }

    fn from_code(code: u8) -> Result<Self, TransportError> {
        Ok(match code {
            1 => RejectReason::WrongRole,
            2 => RejectReason::ArityMismatch,
            3 => RejectReason::ChoiceOutOfRange,
            4 => RejectReason::Duplicate,
            other => return Err(TransportError::Malformed(format!("unknown reject code {other}"))),
        })
    }
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RejectReason::WrongRole => "wrong role",
            RejectReason::ArityMismatch => "arity mismatch",
            RejectReason::ChoiceOutOfRange => "choice out of range",
            RejectReason::Duplicate => "duplicate request",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Control {
    Load { id: SessionId, messages: Vec<Natural> },
    Choose { id: SessionId, arity: u32, choice: u32 },
    Deliver { id: SessionId, value: Natural },
    Reject { id: SessionId, reason: RejectReason },
}

const LOAD: u8 = 1;
const CHOOSE: u8 = 2;
const DELIVER: u8 = 3;
const REJECT: u8 = 4;

fn write_id(w: PayloadWriter, id: &SessionId) -> PayloadWriter {
    w.u16(id.sender.index()).u16(id.receiver.index()).u8(id.phase.tag()).u64(id.seq)
}

fn read_id(r: &mut PayloadReader<'_>, parties: u16) -> Result<SessionId, TransportError> {
    let sender = PartyId::new(r.u16()?, parties)?;
    let receiver = PartyId::new(r.u16()?, parties)?;
    let phase = Phase::from_tag(r.u8()?)?;
    let seq = r.u64()?;
    Ok(SessionId { sender, receiver, phase, seq })
}

impl Control {
    fn encode(&self) -> Vec<u8> {
        match self {
            Control::Load { id, messages } => write_id(PayloadWriter::new().u8(LOAD), id).naturals(messages),
            Control::Choose { id, arity, choice } => {
                write_id(PayloadWriter::new().u8(CHOOSE), id).u32(*arity).u32(*choice)
            }
            Control::Deliver { id, value } => write_id(PayloadWriter::new().u8(DELIVER), id).natural(value),
            Control::Reject { id, reason } => write_id(PayloadWriter::new().u8(REJECT), id).u8(reason.code()),
        }
        .finish()
    }

    fn decode(payload: &[u8], parties: u16) -> Result<Self, TransportError> {
        let mut r = PayloadReader::new(payload);
        let kind = r.u8()?;
        let id = read_id(&mut r, parties)?;
        let msg = match kind {
            LOAD => Control::Load { id, messages: r.naturals()? },
            CHOOSE => Control::Choose { id, arity: r.u32()?, choice: r.u32()? },
            DELIVER => Control::Deliver { id, value: r.natural()? },
            REJECT => Control::Reject { id, reason: RejectReason::from_code(r.u8()?)? },
            other => return Err(TransportError::Malformed(format!("unknown OT control kind {other}"))),
        };
        r.finish()?;
        Ok(msg)
    }
}

/// Per-party OT bookkeeping: session numbering and deliveries that arrived
/// while a different session was being awaited.
#[derive(Debug)]
pub struct OtEndpoint {
    me: PartyId,
    next_seq: HashMap<(PartyId, PartyId, Phase), u64>,
    arrived: HashMap<SessionId, Result<Natural, RejectReason>>,
}

impl OtEndpoint {
    pub fn new(me: PartyId) -> Self {
        OtEndpoint { me, next_seq: HashMap::new(), arrived: HashMap::new() }
    }

    pub fn me(&self) -> PartyId {
        self.me
    }

    /// Opens the next session for `(sender, receiver, phase)`. Both ends
    /// call this; each counts one initialization.
    pub fn init(
        &mut self,
        net: &mut TransportHandle,
        sender: PartyId,
        receiver: PartyId,
        phase: Phase,
        arity: u32,
    ) -> Result<OtSession, OtError> {
        if sender == receiver {
            return Err(OtError::Parameter(format!("{sender} cannot transfer to itself")));
        }
        if arity < 2 {
            return Err(OtError::Parameter(format!("arity {arity} is below 2")));
        }
        if phase == Phase::OtControl {
            return Err(OtError::Parameter("sessions belong to a protocol phase".into()));
        }
        if self.me != sender && self.me != receiver {
            return Err(OtError::Role(format!("{} is neither sender {sender} nor receiver {receiver}", self.me)));
        }
        let counter = self.next_seq.entry((sender, receiver, phase)).or_insert(0);
        let id = SessionId { sender, receiver, phase, seq: *counter };
        *counter += 1;
        net.metrics_mut().record_ot_init(phase);
        Ok(OtSession { id, arity, state: OtState::Initialized })
    }

    /// Sender side: hands the message vector to the mediator.
    pub fn send(&mut self, net: &mut TransportHandle, session: &mut OtSession, messages: &[Natural]) -> Result<(), OtError> {
        if self.me != session.sender() {
            return Err(OtError::Role(format!("{} is not the sender of {}", self.me, session.id)));
        }
        session.expect(OtState::Initialized)?;
        if messages.len() != session.arity as usize {
            return Err(OtError::Arity { expected: session.arity, got: messages.len() });
        }
        let ctl = Control::Load { id: session.id, messages: messages.to_vec() };
        net.send_to(Address::Mediator, Phase::OtControl, 0, ctl.encode())?;
        net.metrics_mut().record_ot_transfer(session.id.phase);
        session.state = OtState::MessagesLoaded;
        Ok(())
    }

    /// Receiver side: submits the 1-based `choice` without waiting.
    pub fn request(&mut self, net: &mut TransportHandle, session: &mut OtSession, choice: u32) -> Result<(), OtError> {
        if self.me != session.receiver() {
            return Err(OtError::Role(format!("{} is not the receiver of {}", self.me, session.id)));
        }
        session.expect(OtState::Initialized)?;
        if choice < 1 || choice > session.arity {
            return Err(OtError::Choice { choice, arity: session.arity });
        }
        let ctl = Control::Choose { id: session.id, arity: session.arity, choice };
        net.send_to(Address::Mediator, Phase::OtControl, 0, ctl.encode())?;
        net.metrics_mut().record_ot_transfer(session.id.phase);
        session.state = OtState::Requested;
        Ok(())
    }

    /// Receiver side: waits for the value chosen in [`OtEndpoint::request`].
    pub fn collect(&mut self, net: &mut TransportHandle, session: &mut OtSession) -> Result<Natural, OtError> {
        session.expect(OtState::Requested)?;
        let id = session.id;
        let outcome = loop {
            if let Some(outcome) = self.arrived.remove(&id) {
                break outcome;
            }
            let env = net.receive_matching(MatchKey::from_sender(Phase::OtControl, Address::Mediator))?;
            match Control::decode(&env.payload, net.parties())? {
                Control::Deliver { id: got, value } => {
                    self.arrived.insert(got, Ok(value));
                }
                Control::Reject { id: got, reason } => {
                    self.arrived.insert(got, Err(reason));
                }
                other => {
                    return Err(TransportError::Malformed(format!("unexpected control message {other:?}")).into());
                }
            }
        };
        session.state = OtState::Delivered;
        outcome.map_err(|reason| OtError::Rejected { id, reason })
    }

    /// Receiver side: `request` then `collect`.
    pub fn choose(&mut self, net: &mut TransportHandle, session: &mut OtSession, choice: u32) -> Result<Natural, OtError> {
        self.request(net, session, choice)?;
        self.collect(net, session)
    }
}

#[derive(Debug, Default)]
struct Pending {
    messages: Option<Vec<Natural>>,
    choice: Option<(u32, u32)>,
}

/// Totals reported by the mediator when the network shuts down.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MediatorStats {
    pub delivered: u64,
    pub rejected: u64,
}

/// Serves OT sessions until every party has left the network.
pub fn run_mediator(mut net: TransportHandle) -> Result<MediatorStats, OtError> {
    net.set_timeout(None);
    let parties = net.parties();
    let mut sessions: HashMap<SessionId, Pending> = HashMap::new();
    let mut stats = MediatorStats::default();
    loop {
        let env = match net.receive(Phase::OtControl) {
            Ok(env) => env,
            Err(TransportError::ChannelClosed) => {
                if !sessions.is_empty() {
                    debug!("mediator exiting with {} unfinished sessions", sessions.len());
                }
                return Ok(stats);
            }
            Err(e) => return Err(e.into()),
        };
        let from = env.from;
        let ctl = Control::decode(&env.payload, parties)?;
        let (id, verdict) = match ctl {
            Control::Load { id, messages } => {
                let entry = sessions.entry(id).or_default();
                let verdict = if from != Address::Party(id.sender) {
                    Err(RejectReason::WrongRole)
                } else if entry.messages.is_some() {
                    Err(RejectReason::Duplicate)
                } else if messages.len() < 2 {
                    Err(RejectReason::ArityMismatch)
                } else {
                    entry.messages = Some(messages);
                    Ok(())
                };
                (id, verdict)
            }
            Control::Choose { id, arity, choice } => {
                let entry = sessions.entry(id).or_default();
                let verdict = if from != Address::Party(id.receiver) {
                    Err(RejectReason::WrongRole)
                } else if entry.choice.is_some() {
                    Err(RejectReason::Duplicate)
                } else if choice < 1 || choice > arity {
                    Err(RejectReason::ChoiceOutOfRange)
                } else {
                    entry.choice = Some((arity, choice));
                    Ok(())
                };
                (id, verdict)
            }
            other => {
                warn!("mediator ignoring {other:?} from {from}");
                continue;
            }
        };
        let reply = match verdict {
            Err(reason) => {
                sessions.remove(&id);
                Some(Control::Reject { id, reason })
            }
            Ok(()) => match sessions.get(&id) {
                Some(Pending { messages: Some(messages), choice: Some((arity, choice)) }) => {
                    let reply = if messages.len() != *arity as usize {
                        Control::Reject { id, reason: RejectReason::ArityMismatch }
                    } else {
                        Control::Deliver { id, value: messages[*choice as usize - 1].clone() }
                    };
                    sessions.remove(&id);
                    Some(reply)
                }
                _ => None,
            },
        };
        if let Some(reply) = reply {
            match reply {
                Control::Deliver { .. } => stats.delivered += 1,
                _ => stats.rejected += 1,
            }
            net.send_to(id.receiver, Phase::OtControl, 0, reply.encode())?;
        }
    }
}
