//! Communication accounting and the closed-form overhead figures it is
//! checked against.
//!
//! A "communication" is one message handled by a party: a point-to-point
//! send, a broadcast (once, for the sender), a received message or
//! broadcast, or one interaction with an oblivious transfer (loading the
//! sender's vector, or fetching the chosen value). OT initializations are
//! tallied separately. Mediator control traffic is kept out of the protocol
//! phases.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::config::{ProtocolConfig, TrialDivisionMode};
use crate::numtheory::primes_below;
use crate::transport::{PartyId, Phase};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseCounters {
    pub messages_sent: u64,
    pub messages_received: u64,
    pub broadcasts_sent: u64,
    pub broadcasts_received: u64,
    pub ot_transfers: u64,
    pub ot_inits: u64,
}

impl PhaseCounters {
    pub fn communications(&self) -> u64 {
        self.messages_sent + self.messages_received + self.broadcasts_sent + self.broadcasts_received + self.ot_transfers
    }

    fn saturating_sub(&self, other: &PhaseCounters) -> PhaseCounters {
        PhaseCounters {
            messages_sent: self.messages_sent.saturating_sub(other.messages_sent),
            messages_received: self.messages_received.saturating_sub(other.messages_received),
            broadcasts_sent: self.broadcasts_sent.saturating_sub(other.broadcasts_sent),
            broadcasts_received: self.broadcasts_received.saturating_sub(other.broadcasts_received),
            ot_transfers: self.ot_transfers.saturating_sub(other.ot_transfers),
            ot_inits: self.ot_inits.saturating_sub(other.ot_inits),
        }
    }

    fn add(&mut self, other: &PhaseCounters) {
        self.messages_sent += other.messages_sent;
        self.messages_received += other.messages_received;
        self.broadcasts_sent += other.broadcasts_sent;
        self.broadcasts_received += other.broadcasts_received;
        self.ot_transfers += other.ot_transfers;
        self.ot_inits += other.ot_inits;
    }
}

/// One party's counters, per phase. Counters only grow during a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PhaseMetrics {
    phases: BTreeMap<Phase, PhaseCounters>,
}

impl PhaseMetrics {
    pub fn counters(&self, phase: Phase) -> PhaseCounters {
        self.phases.get(&phase).copied().unwrap_or_default()
    }

    pub fn counters_mut(&mut self, phase: Phase) -> &mut PhaseCounters {
        self.phases.entry(phase).or_default()
    }

    pub fn record_ot_init(&mut self, phase: Phase) {
        self.counters_mut(phase).ot_inits += 1;
    }

    pub fn record_ot_transfer(&mut self, phase: Phase) {
        self.counters_mut(phase).ot_transfers += 1;
    }

    /// Counter growth since `earlier`.
    pub fn since(&self, earlier: &PhaseMetrics) -> PhaseMetrics {
        let phases = self
            .phases
            .iter()
            .map(|(phase, c)| (*phase, c.saturating_sub(&earlier.counters(*phase))))
            .collect();
        PhaseMetrics { phases }
    }

    pub fn accumulate(&mut self, other: &PhaseMetrics) {
        for (phase, c) in &other.phases {
            self.counters_mut(*phase).add(c);
        }
    }
}

/// How an attempt ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttemptOutcome {
    RejectedTrialDivision,
    RejectedFilter,
    RejectedGcd,
    Accepted,
}

/// What one party did during one candidate attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttemptLog {
    pub attempt: u64,
    pub party: PartyId,
    pub outcome: AttemptOutcome,
    /// Divisibility tests executed per candidate number before a verdict.
    pub trial_tests_per_number: u64,
    pub filter_rounds_run: u32,
    pub filter_rounds_led: u32,
    /// Bit length of the modulus, once computed.
    pub modulus_bits: Option<u64>,
    pub counters: PhaseMetrics,
}

/// JSON-lines record: one per (attempt, party, phase).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub attempt: u64,
    pub party: u16,
    pub phase: String,
    pub messages: u64,
    pub broadcasts: u64,
    pub ot_inits: u64,
}

impl AttemptLog {
    pub fn records(&self) -> Vec<MetricsRecord> {
        Phase::PROTOCOL
            .iter()
            .map(|&phase| {
                let c = self.counters.counters(phase);
                MetricsRecord {
                    attempt: self.attempt,
                    party: self.party.index(),
                    phase: phase.name().to_string(),
                    messages: c.communications(),
                    broadcasts: c.broadcasts_sent,
                    ot_inits: c.ot_inits,
                }
            })
            .collect()
    }
}

/// Writes records sorted by attempt, then party, then phase order.
pub fn write_json_lines<W: Write>(logs: &[AttemptLog], out: &mut W) -> io::Result<()> {
    let mut sorted: Vec<&AttemptLog> = logs.iter().collect();
    sorted.sort_by_key(|l| (l.attempt, l.party));
    for log in sorted {
        for record in log.records() {
            serde_json::to_writer(&mut *out, &record)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Closed-form per-party communication figures for one successful attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectedCounts {
    /// `B * (log2 n + 1)` with `B` the configured bound.
    pub trial_division_worst: u64,
    /// `2 * B`.
    pub trial_division_best: u64,
    /// Odd primes actually tested per candidate number.
    pub trial_division_tests: u64,
    /// Worst/best for both candidate numbers, over the tested primes.
    pub trial_division_both_worst: u64,
    pub trial_division_both_best: u64,
    /// `2k(n-1) + n`.
    pub distmul: u64,
    /// `2k(n-1)`.
    pub distmul_ot_inits: u64,
    /// `s * (n + 1)`.
    pub filter_worst: u64,
    /// `3 * s`.
    pub filter_best: u64,
    /// `4k(n-1) + n`, assuming `2k`-bit products.
    pub gcd_paper: u64,
    pub gcd_paper_ot_inits: u64,
}

pub fn expected_counts(config: &ProtocolConfig) -> ExpectedCounts {
    let n = u64::from(config.parties());
    let t = u64::from(config.depth());
    let k = u64::from(config.bits);
    let b = config.trial_bound;
    let s = u64::from(config.filter_rounds);
    let tests = primes_below(config.trial_bound).len() as u64;
    ExpectedCounts {
        trial_division_worst: b * (t + 1),
        trial_division_best: 2 * b,
        trial_division_tests: tests,
        trial_division_both_worst: 2 * tests * (t + 1),
        trial_division_both_best: 2 * 2 * tests,
        distmul: 2 * k * (n - 1) + n,
        distmul_ot_inits: 2 * k * (n - 1),
        filter_worst: s * (n + 1),
        filter_best: 3 * s,
        gcd_paper: 4 * k * (n - 1) + n,
        gcd_paper_ot_inits: 4 * k * (n - 1),
    }
}

/// gcd-phase communications when the random side is `width` bits wide.
pub fn gcd_counts_for_width(config: &ProtocolConfig, width: u64) -> (u64, u64) {
    let n = u64::from(config.parties());
    (2 * width * (n - 1) + n, 2 * width * (n - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expectation {
    Exact(u64),
    Within(u64, u64),
}

impl Expectation {
    fn holds(self, observed: u64) -> bool {
        match self {
            Expectation::Exact(v) => observed == v,
            Expectation::Within(lo, hi) => (lo..=hi).contains(&observed),
        }
    }
}

impl fmt::Display for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expectation::Exact(v) => write!(f, "= {v}"),
            Expectation::Within(lo, hi) => write!(f, "in [{lo}, {hi}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountCheck {
    pub party: PartyId,
    pub phase: Phase,
    pub what: &'static str,
    pub observed: u64,
    pub expected: Expectation,
    /// The uncorrected textbook figure, where it differs from `expected`.
    pub reference: Option<u64>,
}

impl CountCheck {
    pub fn ok(&self) -> bool {
        self.expected.holds(self.observed)
    }
}

impl fmt::Display for CountCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {}: observed {} expected {} [{}]",
            self.party,
            self.phase,
            self.what,
            self.observed,
            self.expected,
            if self.ok() { "ok" } else { "VIOLATION" }
        )?;
        if let Some(r) = self.reference {
            write!(f, " (reference figure {r})")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CountReport {
    pub checks: Vec<CountCheck>,
}

impl CountReport {
    pub fn violations(&self) -> impl Iterator<Item = &CountCheck> {
        self.checks.iter().filter(|c| !c.ok())
    }

    pub fn is_clean(&self) -> bool {
        self.violations().next().is_none()
    }
}

/// Compares one party's counters for one attempt against the closed forms,
/// normalized to the tests and rounds that actually ran.
pub fn assert_counts(log: &AttemptLog, config: &ProtocolConfig) -> CountReport {
    let n = u64::from(config.parties());
    let t = u64::from(config.depth());
    let k = u64::from(config.bits);
    let mut checks = Vec::new();
    let mut push = |phase, what, observed, expected, reference| {
        checks.push(CountCheck { party: log.party, phase, what, observed, expected, reference });
    };

    let td = log.counters.counters(Phase::TrialDiv);
    let tests = log.trial_tests_per_number;
    if config.trial_division == TrialDivisionMode::Tree {
        push(Phase::TrialDiv, "communications", td.communications(), Expectation::Within(2 * 2 * tests, 2 * tests * (t + 1)), None);
        push(Phase::TrialDiv, "ot_inits", td.ot_inits, Expectation::Exact(0), None);
    } else {
        // Load or fetch, the comparison value, and the verdict.
        push(Phase::TrialDiv, "communications", td.communications(), Expectation::Exact(2 * tests * 3), None);
        push(Phase::TrialDiv, "ot_inits", td.ot_inits, Expectation::Exact(2 * tests), None);
    }

    if log.outcome == AttemptOutcome::RejectedTrialDivision {
        return CountReport { checks };
    }

    let dm = log.counters.counters(Phase::DistMul);
    push(Phase::DistMul, "communications", dm.communications(), Expectation::Exact(2 * k * (n - 1) + n), None);
    push(Phase::DistMul, "ot_inits", dm.ot_inits, Expectation::Exact(2 * k * (n - 1)), None);

    let fl = log.counters.counters(Phase::BiprimeFilter);
    let run = u64::from(log.filter_rounds_run);
    let led = u64::from(log.filter_rounds_led);
    push(Phase::BiprimeFilter, "communications", fl.communications(), Expectation::Within(3 * run, run * (n + 1)), None);
    push(
        Phase::BiprimeFilter,
        "communications by role",
        fl.communications(),
        Expectation::Exact(led * (n + 1) + (run - led) * 3),
        None,
    );

    if log.outcome == AttemptOutcome::RejectedFilter {
        return CountReport { checks };
    }

    let gc = log.counters.counters(Phase::BiprimeGcd);
    let width = log.modulus_bits.unwrap_or(2 * k);
    let (comms, inits) = gcd_counts_for_width(config, width);
    push(Phase::BiprimeGcd, "communications", gc.communications(), Expectation::Exact(comms), Some(4 * k * (n - 1) + n));
    push(Phase::BiprimeGcd, "ot_inits", gc.ot_inits, Expectation::Exact(inits), Some(4 * k * (n - 1)));
    CountReport { checks }
}
