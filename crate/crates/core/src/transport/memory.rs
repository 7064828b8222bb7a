//! In-process backend.
//!
//! All endpoints share one lock-protected set of inboxes. In
//! [`Scheduling::Deterministic`] mode a single logical baton is passed
//! round-robin between endpoints: only the holder may send or receive, and
//! the holder gives it up only when it blocks on an empty receive or
//! finishes. Every delivery is then stamped with a reproducible logical
//! clock. All endpoints must be created before any participant thread starts
//! so that the rotation order is fixed.

use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::envelope::{Address, Envelope, Phase};
use super::inbox::{Inbox, MatchKey};
use super::{Backend, TransportError, TransportHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheduling {
    /// Threads run freely; receives block on a condition variable.
    #[default]
    Free,
    /// Single logical clock with round-robin hand-off.
    Deterministic,
}

/// One delivered envelope as seen by the network, in logical-clock order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub clock: u64,
    pub from: Address,
    pub to: Address,
    pub phase: Phase,
    pub round: u32,
    pub payload: Vec<u8>,
}

#[derive(Debug)]
struct State {
    inboxes: Vec<Inbox>,
    registered: Vec<bool>,
    finished: Vec<bool>,
    closed: Option<TransportError>,
    turn: usize,
    progress: u64,
    last_progress: u64,
    idle_passes: usize,
    clock: u64,
    transcript: Vec<TranscriptEntry>,
}

#[derive(Debug)]
struct Shared {
    parties: u16,
    scheduling: Scheduling,
    state: Mutex<State>,
    /// Baton hand-off and shutdown.
    cv: Condvar,
    /// Per-slot arrival signal, used in free mode.
    arrivals: Vec<Condvar>,
}

#[derive(Debug, Clone)]
pub struct MemoryNetwork {
    shared: Arc<Shared>,
}

impl MemoryNetwork {
    pub fn new(parties: u16, scheduling: Scheduling) -> Self {
        let slots = usize::from(parties) + 1;
        let state = State {
            inboxes: (0..slots).map(|_| Inbox::default()).collect(),
            registered: vec![false; slots],
            finished: vec![false; slots],
            closed: None,
            turn: 0,
            progress: 0,
            last_progress: 0,
            idle_passes: 0,
            clock: 0,
            transcript: Vec::new(),
        };
        let arrivals = (0..slots).map(|_| Condvar::new()).collect();
        MemoryNetwork {
            shared: Arc::new(Shared { parties, scheduling, state: Mutex::new(state), cv: Condvar::new(), arrivals }),
        }
    }

    pub fn parties(&self) -> u16 {
        self.shared.parties
    }

    pub fn scheduling(&self) -> Scheduling {
        self.shared.scheduling
    }

    /// Creates the handle for `addr`. Each address may be claimed once.
    pub fn endpoint(&self, addr: Address) -> Result<TransportHandle, TransportError> {
        let slot = self.slot_of(addr)?;
        let mut st = self.shared.lock();
        if st.registered[slot] {
            return Err(TransportError::Address(format!("endpoint {addr} already claimed")));
        }
        st.registered[slot] = true;
        drop(st);
        let backend = MemoryBackend { shared: Arc::clone(&self.shared), slot };
        let mut handle = TransportHandle::new(addr, self.shared.parties, Box::new(backend));
        if self.shared.scheduling == Scheduling::Deterministic {
            handle.set_timeout(None);
        }
        Ok(handle)
    }

    fn slot_of(&self, addr: Address) -> Result<usize, TransportError> {
        match addr {
            Address::Party(p) if p.index() >= 1 && p.index() <= self.shared.parties => Ok(p.slot()),
            Address::Mediator => Ok(usize::from(self.shared.parties)),
            other => Err(TransportError::Address(format!("{other} is not an endpoint"))),
        }
    }

    /// Wakes every blocked receiver with [`TransportError::ChannelClosed`].
    pub fn close(&self) {
        let mut st = self.shared.lock();
        if st.closed.is_none() {
            st.closed = Some(TransportError::ChannelClosed);
        }
        self.shared.wake_all();
    }

    pub fn is_closed(&self) -> bool {
        self.shared.lock().closed.is_some()
    }

    /// Delivery log; only recorded in deterministic mode.
    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.shared.lock().transcript.clone()
    }

    /// Envelopes delivered but never consumed, over all endpoints.
    pub fn pending(&self) -> usize {
        self.shared.lock().inboxes.iter().map(Inbox::len).sum()
    }
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn deterministic(&self) -> bool {
        self.scheduling == Scheduling::Deterministic
    }

    fn wake_all(&self) {
        self.cv.notify_all();
        for cv in &self.arrivals {
            cv.notify_all();
        }
    }

    fn wake(&self, slot: usize) {
        if self.deterministic() {
            self.cv.notify_all();
        } else {
            self.arrivals[slot].notify_one();
        }
    }

    fn wait_turn<'a>(&'a self, mut st: MutexGuard<'a, State>, slot: usize) -> MutexGuard<'a, State> {
        while self.deterministic() && st.closed.is_none() && st.turn != slot {
            st = self.cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st
    }

    fn active(st: &State, slot: usize) -> bool {
        st.registered[slot] && !st.finished[slot]
    }

    fn advance_turn(&self, st: &mut State, from: usize) {
        let slots = st.registered.len();
        if let Some(next) = (1..=slots).map(|d| (from + d) % slots).find(|&s| Self::active(st, s)) {
            st.turn = next;
        }
        self.cv.notify_all();
    }

    /// Gives up the baton after an empty receive; detects a full idle cycle.
    fn pass_turn(&self, st: &mut State, slot: usize) {
        if st.progress == st.last_progress {
            st.idle_passes += 1;
        } else {
            st.idle_passes = 1;
            st.last_progress = st.progress;
        }
        let active = (0..st.registered.len()).filter(|&s| Self::active(st, s)).count();
        if st.idle_passes >= active {
            st.closed = Some(TransportError::Deadlock);
            self.wake_all();
            return;
        }
        self.advance_turn(st, slot);
    }

    fn leave(&self, slot: usize) {
        let mut st = self.lock();
        st.finished[slot] = true;
        st.progress += 1;
        let parties = usize::from(self.parties);
        let all_parties_done = (0..parties).all(|s| !st.registered[s] || st.finished[s]);
        if all_parties_done && st.closed.is_none() {
            st.closed = Some(TransportError::ChannelClosed);
        }
        if st.turn == slot {
            self.advance_turn(&mut st, slot);
        }
        self.wake_all();
    }
}

struct MemoryBackend {
    shared: Arc<Shared>,
    slot: usize,
}

impl MemoryBackend {
    fn slot_of(&self, addr: Address) -> Option<usize> {
        match addr {
            Address::Party(p) => Some(p.slot()),
            Address::Mediator => Some(usize::from(self.shared.parties)),
            Address::Broadcast => None,
        }
    }
}

impl Backend for MemoryBackend {
    fn deliver(&mut self, env: Envelope) -> Result<(), TransportError> {
        let shared = &self.shared;
        let st = shared.lock();
        let mut st = shared.wait_turn(st, self.slot);
        if let Some(err) = &st.closed {
            return Err(err.clone());
        }
        if shared.deterministic() {
            let clock = st.clock;
            st.clock += 1;
            st.transcript.push(TranscriptEntry {
                clock,
                from: env.from,
                to: env.to,
                phase: env.phase,
                round: env.round,
                payload: env.payload.clone(),
            });
        }
        match self.slot_of(env.to) {
            Some(dest) => {
                st.inboxes[dest].push(env);
                shared.wake(dest);
            }
            None => {
                let sender = self.slot;
                for dest in 0..usize::from(shared.parties) {
                    if dest != sender {
                        st.inboxes[dest].push(env.clone());
                        shared.wake(dest);
                    }
                }
            }
        }
        st.progress += 1;
        Ok(())
    }

    fn next_match(&mut self, key: &MatchKey, timeout: Option<Duration>) -> Result<Envelope, TransportError> {
        let shared = &self.shared;
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = shared.lock();
        loop {
            st = shared.wait_turn(st, self.slot);
            if let Some(env) = st.inboxes[self.slot].take(key) {
                st.progress += 1;
                return Ok(env);
            }
            if let Some(err) = &st.closed {
                return Err(err.clone());
            }
            if shared.deterministic() {
                shared.pass_turn(&mut st, self.slot);
                continue;
            }
            let cv = &shared.arrivals[self.slot];
            st = match deadline {
                None => cv.wait(st).unwrap_or_else(|e| e.into_inner()),
                Some(deadline) => {
                    let now = Instant::now();
                    if now >= deadline {
                        return Err(TransportError::Timeout);
                    }
                    cv.wait_timeout(st, deadline - now).unwrap_or_else(|e| e.into_inner()).0
                }
            };
        }
    }
}

impl Drop for MemoryBackend {
    fn drop(&mut self) {
        self.shared.leave(self.slot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::PartyId;
    use proptest::prelude::*;
    use std::thread;

    fn pid(i: u16) -> PartyId {
        PartyId::new(i, 4).unwrap()
    }

    #[test]
    fn send_then_receive_is_byte_identical_and_counted() {
        let net = MemoryNetwork::new(2, Scheduling::Free);
        let mut a = net.endpoint(pid(1).into()).unwrap();
        let mut b = net.endpoint(pid(2).into()).unwrap();
        a.send_to(pid(2), Phase::TrialDiv, 7, vec![1, 2, 3]).unwrap();
        assert_eq!(a.metrics().counters(Phase::TrialDiv).messages_sent, 1);
        let got = b.receive(Phase::TrialDiv).unwrap();
        assert_eq!(got.payload, vec![1, 2, 3]);
        assert_eq!(got.round, 7);
        assert_eq!(b.metrics().counters(Phase::TrialDiv).messages_received, 1);
    }

    #[test]
    fn fifo_per_pair_and_out_of_phase_retention() {
        let net = MemoryNetwork::new(2, Scheduling::Free);
        let mut a = net.endpoint(pid(1).into()).unwrap();
        let mut b = net.endpoint(pid(2).into()).unwrap();
        a.send_to(pid(2), Phase::DistMul, 0, vec![9]).unwrap();
        a.send_to(pid(2), Phase::TrialDiv, 0, vec![1]).unwrap();
        a.send_to(pid(2), Phase::TrialDiv, 0, vec![2]).unwrap();
        assert_eq!(b.receive(Phase::TrialDiv).unwrap().payload, vec![1]);
        assert_eq!(b.receive(Phase::TrialDiv).unwrap().payload, vec![2]);
        assert_eq!(b.receive(Phase::DistMul).unwrap().payload, vec![9]);
    }

    #[test]
    fn broadcast_reaches_all_peers_but_not_sender() {
        let net = MemoryNetwork::new(4, Scheduling::Free);
        let mut hs: Vec<_> = PartyId::all(4).map(|p| net.endpoint(p.into()).unwrap()).collect();
        hs[1].broadcast_payload(Phase::BiprimeFilter, 1, vec![42]).unwrap();
        assert_eq!(hs[1].metrics().counters(Phase::BiprimeFilter).broadcasts_sent, 1);
        for (i, h) in hs.iter_mut().enumerate() {
            if i == 1 {
                continue;
            }
            let env = h.receive(Phase::BiprimeFilter).unwrap();
            assert_eq!(env.payload, vec![42]);
            assert_eq!(h.metrics().counters(Phase::BiprimeFilter).broadcasts_received, 1);
        }
        hs[1].set_timeout(Some(Duration::from_millis(20)));
        assert_eq!(hs[1].receive(Phase::BiprimeFilter), Err(TransportError::Timeout));
    }

    #[test]
    fn bad_addresses_are_rejected() {
        let net = MemoryNetwork::new(2, Scheduling::Free);
        let mut a = net.endpoint(pid(1).into()).unwrap();
        assert!(matches!(a.send_to(PartyId::from_index(3), Phase::TrialDiv, 0, vec![]), Err(TransportError::Address(_))));
        assert!(matches!(a.send_to(pid(1), Phase::TrialDiv, 0, vec![]), Err(TransportError::Address(_))));
        assert!(net.endpoint(pid(1).into()).is_err());
        assert!(matches!(
            a.send(Envelope::new(pid(2), pid(1), Phase::TrialDiv, 0, vec![])),
            Err(TransportError::Address(_))
        ));
    }

    #[test]
    fn close_unblocks_waiters() {
        let net = MemoryNetwork::new(2, Scheduling::Free);
        let mut b = net.endpoint(pid(2).into()).unwrap();
        let waiter = thread::spawn(move || b.receive(Phase::TrialDiv));
        thread::sleep(Duration::from_millis(20));
        net.close();
        assert_eq!(waiter.join().unwrap(), Err(TransportError::ChannelClosed));
    }

    #[test]
    fn deterministic_mode_detects_deadlock() {
        let net = MemoryNetwork::new(2, Scheduling::Deterministic);
        let mut a = net.endpoint(pid(1).into()).unwrap();
        let mut b = net.endpoint(pid(2).into()).unwrap();
        let ta = thread::spawn(move || a.receive(Phase::TrialDiv));
        let tb = thread::spawn(move || b.receive(Phase::TrialDiv));
        assert_eq!(ta.join().unwrap(), Err(TransportError::Deadlock));
        assert_eq!(tb.join().unwrap(), Err(TransportError::Deadlock));
    }

    fn ping_pong(scheduling: Scheduling) -> Vec<TranscriptEntry> {
        let net = MemoryNetwork::new(3, scheduling);
        let handles: Vec<_> = PartyId::all(3).map(|p| net.endpoint(p.into()).unwrap()).collect();
        let threads: Vec<_> = handles
            .into_iter()
            .map(|mut h| {
                thread::spawn(move || {
                    let me = h.party();
                    for round in 0..20u32 {
                        for peer in PartyId::all(3).filter(|&p| p != me) {
                            h.send_to(peer, Phase::DistMul, round, vec![me.index() as u8, round as u8]).unwrap();
                        }
                        for peer in PartyId::all(3).filter(|&p| p != me) {
                            let env = h.receive_from(Phase::DistMul, peer, round).unwrap();
                            assert_eq!(env.payload, vec![peer.index() as u8, round as u8]);
                        }
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert_eq!(net.pending(), 0);
        net.transcript()
    }

    #[test]
    fn deterministic_transcripts_repeat() {
        let first = ping_pong(Scheduling::Deterministic);
        assert_eq!(first.len(), 20 * 6);
        for _ in 0..5 {
            assert_eq!(ping_pong(Scheduling::Deterministic), first);
        }
        assert!(ping_pong(Scheduling::Free).is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        // Senders interleave arbitrarily; each receiver must see every pair's
        // stream complete, unduplicated and in order.
        #[test]
        fn no_loss_duplication_or_reordering(counts in proptest::collection::vec(1usize..40, 4), jitter in any::<u64>()) {
            let net = MemoryNetwork::new(4, Scheduling::Free);
            let handles: Vec<_> = PartyId::all(4).map(|p| net.endpoint(p.into()).unwrap()).collect();
            let counts = Arc::new(counts);
            let threads: Vec<_> = handles.into_iter().map(|mut h| {
                let counts = Arc::clone(&counts);
                thread::spawn(move || {
                    let me = h.party();
                    let mine = counts[me.slot()];
                    for seq in 0..mine {
                        let peer = PartyId::from_index(((me.slot() + 1 + (seq + jitter as usize) % 3) % 4 + 1) as u16);
                        h.send_to(peer, Phase::TrialDiv, seq as u32, (seq as u32).to_be_bytes().to_vec()).unwrap();
                        if (seq as u64 ^ jitter) % 5 == 0 {
                            thread::yield_now();
                        }
                    }
                    let mut expected: Vec<Vec<u32>> = vec![Vec::new(); 4];
                    for (sender, &count) in counts.iter().enumerate() {
                        for seq in 0..count {
                            let dest = (sender + 1 + (seq + jitter as usize) % 3) % 4;
                            if dest == me.slot() {
                                expected[sender].push(seq as u32);
                            }
                        }
                    }
                    for (sender, seqs) in expected.iter().enumerate() {
                        let from = PartyId::from_index(sender as u16 + 1);
                        for &seq in seqs {
                            let env = h.receive_matching(MatchKey::from_sender(Phase::TrialDiv, from)).unwrap();
                            assert_eq!(env.round, seq);
                            assert_eq!(env.payload, seq.to_be_bytes().to_vec());
                        }
                    }
                })
            }).collect();
            for t in threads {
                t.join().unwrap();
            }
            prop_assert_eq!(net.pending(), 0);
        }
    }
}
