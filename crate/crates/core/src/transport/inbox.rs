use std::collections::{HashMap, VecDeque};

use super::envelope::{Address, Envelope, Phase};

/// Selects which queued envelope a receive may consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchKey {
    pub phase: Phase,
    pub from: Option<Address>,
    pub round: Option<u32>,
}

impl MatchKey {
    pub fn phase(phase: Phase) -> Self {
        MatchKey { phase, from: None, round: None }
    }

    pub fn exact(phase: Phase, from: impl Into<Address>, round: u32) -> Self {
        MatchKey { phase, from: Some(from.into()), round: Some(round) }
    }

    pub fn from_sender(phase: Phase, from: impl Into<Address>) -> Self {
        MatchKey { phase, from: Some(from.into()), round: None }
    }

    fn accepts(&self, env: &Envelope) -> bool {
        self.round.is_none_or(|r| r == env.round)
    }
}

/// Per-endpoint storage of delivered but not yet consumed envelopes, indexed
/// by `(phase, sender)`. Arrival order is kept per sender and across senders.
#[derive(Debug, Default)]
pub(crate) struct Inbox {
    queues: HashMap<(Phase, Address), VecDeque<(u64, Envelope)>>,
    next_seq: u64,
    len: usize,
}

impl Inbox {
    pub fn push(&mut self, env: Envelope) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.len += 1;
        self.queues.entry((env.phase, env.from)).or_default().push_back((seq, env));
    }

    pub fn take(&mut self, key: &MatchKey) -> Option<Envelope> {
        let found = match key.from {
            Some(from) => {
                let queue = self.queues.get(&(key.phase, from))?;
                queue.iter().position(|(_, e)| key.accepts(e)).map(|pos| ((key.phase, from), pos))
            }
            None => self
                .queues
                .iter()
                .filter(|((phase, _), _)| *phase == key.phase)
                .filter_map(|(k, q)| {
                    q.iter().enumerate().find(|(_, (_, e))| key.accepts(e)).map(|(pos, (seq, _))| (*seq, *k, pos))
                })
                .min_by_key(|(seq, _, _)| *seq)
                .map(|(_, k, pos)| (k, pos)),
        };
        let (k, pos) = found?;
        let queue = self.queues.get_mut(&k).expect("queue exists");
        let (_, env) = queue.remove(pos).expect("position valid");
        if queue.is_empty() {
            self.queues.remove(&k);
        }
        self.len -= 1;
        Some(env)
    }

    pub fn len(&self) -> usize {
        self.len
    }
}
