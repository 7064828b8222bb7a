//! Envelope type and the byte-stream framing.
//!
//! Frame layout (all integers big-endian):
//!
//! ```text
//! +--------+-------+------+------+-------+---------+
//! | len:4  | tag:1 | from:2 | to:2 | round:4 | payload |
//! +--------+-------+------+------+-------+---------+
//! ```
//!
//! `len` counts every byte after the length prefix. `to = 0` is broadcast and
//! `0xFFFF` addresses the OT mediator.

use std::fmt;
use std::io::{self, Read, Write};

use super::TransportError;

/// Upper bound on a single payload.
pub const MAX_PAYLOAD: usize = 1 << 20;

/// Bytes between the length prefix and the payload.
pub const HEADER_LEN: usize = 1 + 2 + 2 + 4;

const BROADCAST_WIRE: u16 = 0;
const MEDIATOR_WIRE: u16 = 0xFFFF;

/// One-based party index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PartyId(u16);

impl PartyId {
    /// Builds an id, checking `1 <= index <= parties`.
    pub fn new(index: u16, parties: u16) -> Result<Self, TransportError> {
        if index == 0 || index > parties || index == MEDIATOR_WIRE {
            return Err(TransportError::Address(format!("party {index} outside 1..={parties}")));
        }
        Ok(PartyId(index))
    }

    /// Unchecked constructor for tests.
    #[cfg(test)]
    pub(crate) const fn from_index(index: u16) -> Self {
        PartyId(index)
    }

    pub fn index(self) -> u16 {
        self.0
    }

    /// Zero-based slot, handy for vectors.
    pub fn slot(self) -> usize {
        usize::from(self.0) - 1
    }

    /// All parties `1..=n` in ascending order.
    pub fn all(parties: u16) -> impl Iterator<Item = PartyId> {
        (1..=parties).map(PartyId)
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Address {
    Party(PartyId),
    Broadcast,
    Mediator,
}

impl Address {
    pub fn to_wire(self) -> u16 {
        match self {
            Address::Party(p) => p.0,
            Address::Broadcast => BROADCAST_WIRE,
            Address::Mediator => MEDIATOR_WIRE,
        }
    }

    pub fn from_wire(raw: u16) -> Self {
        match raw {
            BROADCAST_WIRE => Address::Broadcast,
            MEDIATOR_WIRE => Address::Mediator,
            p => Address::Party(PartyId(p)),
        }
    }

    pub fn party(self) -> Option<PartyId> {
        match self {
            Address::Party(p) => Some(p),
            _ => None,
        }
    }
}

impl From<PartyId> for Address {
    fn from(p: PartyId) -> Self {
        Address::Party(p)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Address::Party(p) => p.fmt(f),
            Address::Broadcast => f.write_str("*"),
            Address::Mediator => f.write_str("OT"),
        }
    }
}

/// Protocol phase carried in every frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    TrialDiv,
    DistMul,
    BiprimeFilter,
    BiprimeGcd,
    OtControl,
}

impl Phase {
    /// Phases that appear in the communication accounting.
    pub const PROTOCOL: [Phase; 4] = [Phase::TrialDiv, Phase::DistMul, Phase::BiprimeFilter, Phase::BiprimeGcd];

    pub fn tag(self) -> u8 {
        match self {
            Phase::TrialDiv => 1,
            Phase::DistMul => 2,
            Phase::BiprimeFilter => 3,
            Phase::BiprimeGcd => 4,
            Phase::OtControl => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, TransportError> {
        Ok(match tag {
            1 => Phase::TrialDiv,
            2 => Phase::DistMul,
            3 => Phase::BiprimeFilter,
            4 => Phase::BiprimeGcd,
            5 => Phase::OtControl,
            other => return Err(TransportError::Malformed(format!("unknown phase tag {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::TrialDiv => "TrialDiv",
            Phase::DistMul => "DistMul",
            Phase::BiprimeFilter => "BiprimeFilter",
            Phase::BiprimeGcd => "BiprimeGcd",
            Phase::OtControl => "OtControl",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub from: Address,
    pub to: Address,
    pub phase: Phase,
    pub round: u32,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn new(from: impl Into<Address>, to: impl Into<Address>, phase: Phase, round: u32, payload: Vec<u8>) -> Self {
        Envelope { from: from.into(), to: to.into(), phase, round, payload }
    }

    pub fn is_broadcast(&self) -> bool {
        self.to == Address::Broadcast
    }

    /// Serializes into a length-prefixed frame.
    pub fn encode(&self) -> Result<Vec<u8>, TransportError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(TransportError::PayloadTooLarge(self.payload.len()));
        }
        let body_len = HEADER_LEN + self.payload.len();
        let mut frame = Vec::with_capacity(4 + body_len);
        frame.extend_from_slice(&(body_len as u32).to_be_bytes());
        frame.push(self.phase.tag());
        frame.extend_from_slice(&self.from.to_wire().to_be_bytes());
        frame.extend_from_slice(&self.to.to_wire().to_be_bytes());
        frame.extend_from_slice(&self.round.to_be_bytes());
        frame.extend_from_slice(&self.payload);
        Ok(frame)
    }

    /// Parses one complete frame, including its length prefix.
    pub fn decode(frame: &[u8]) -> Result<Self, TransportError> {
        if frame.len() < 4 {
            return Err(TransportError::Malformed("frame shorter than length prefix".into()));
        }
        let body_len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        if frame.len() - 4 != body_len {
            return Err(TransportError::Malformed(format!(
                "length prefix {body_len} does not match {} body bytes",
                frame.len() - 4
            )));
        }
        Self::decode_body(&frame[4..])
    }

    fn decode_body(body: &[u8]) -> Result<Self, TransportError> {
        if body.len() < HEADER_LEN {
            return Err(TransportError::Malformed("frame body shorter than header".into()));
        }
        if body.len() - HEADER_LEN > MAX_PAYLOAD {
            return Err(TransportError::PayloadTooLarge(body.len() - HEADER_LEN));
        }
        let phase = Phase::from_tag(body[0])?;
        let from = Address::from_wire(u16::from_be_bytes([body[1], body[2]]));
        let to = Address::from_wire(u16::from_be_bytes([body[3], body[4]]));
        let round = u32::from_be_bytes(body[5..9].try_into().unwrap());
        Ok(Envelope { from, to, phase, round, payload: body[HEADER_LEN..].to_vec() })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), TransportError> {
        let frame = self.encode()?;
        w.write_all(&frame).map_err(TransportError::from)
    }

    /// Reads one frame; `Ok(None)` on clean end of stream.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Self>, TransportError> {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let body_len = u32::from_be_bytes(len) as usize;
        if body_len < HEADER_LEN {
            return Err(TransportError::Malformed(format!("frame length {body_len} below header size")));
        }
        if body_len - HEADER_LEN > MAX_PAYLOAD {
            return Err(TransportError::PayloadTooLarge(body_len - HEADER_LEN));
        }
        let mut body = vec![0u8; body_len];
        r.read_exact(&mut body)?;
        Self::decode_body(&body).map(Some)
    }
}
