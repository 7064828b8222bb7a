//! The candidate loop: draw shares, trial-divide, multiply, run both
//! biprimality tests, and start over with fresh shares on any rejection.

use std::time::{Duration, Instant};

use log::{debug, info};
use num_traits::{One, Zero};
use rand::RngCore;
use thiserror::Error;

use crate::biprime::{gcd_test, run_filter_test};
use crate::config::{ConfigError, ProtocolConfig};
use crate::distmul::compute_modulus;
use crate::metrics::{AttemptLog, AttemptOutcome, PhaseMetrics};
use crate::numtheory::{is_probable_prime, primes_below, residue, Natural, NumError, DEFAULT_MR_ROUNDS};
use crate::ot::{OtEndpoint, OtError};
use crate::shares::{designate_special, ShareSet, ShareSource};
use crate::transport::{TransportError, TransportHandle};
use crate::trialdiv::{run_wave, Candidate, DivisibilityJob};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Number(#[from] NumError),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("parties out of step: {0}")]
    Desync(String),
    #[error("no modulus found within {attempts} attempts")]
    GaveUp { attempts: u64 },
    #[error("share reconstruction is only available in test mode")]
    TestModeOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep the final shares in the outcome so a harness can check them.
    pub test_mode: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub modulus: Natural,
    pub attempts: u64,
    /// Totals over all attempts.
    pub metrics: PhaseMetrics,
    pub attempt_logs: Vec<AttemptLog>,
    pub elapsed: Duration,
    /// Set by a harness that checked the reconstructed factors.
    pub verified: Option<bool>,
    shares: Option<ShareSet>,
}

impl RunOutcome {
    /// The accepted shares; only present in test mode.
    pub fn revealed_shares(&self) -> Option<&ShareSet> {
        self.shares.as_ref()
    }
}

/// Sums every party's accepted shares. Refused unless every outcome was
/// produced in test mode.
pub fn reconstruct_for_test(outcomes: &[RunOutcome]) -> Result<(Natural, Natural), ProtocolError> {
    let sets = outcomes.iter().map(|o| o.shares.clone().ok_or(ProtocolError::TestModeOnly)).collect::<Result<Vec<_>, _>>()?;
    sum_shares(&sets)
}

/// `(Σ p_i, Σ q_i)` over one share set per party.
pub fn sum_shares(sets: &[ShareSet]) -> Result<(Natural, Natural), ProtocolError> {
    let mut owners: Vec<_> = sets.iter().map(|s| s.owner).collect();
    owners.sort();
    owners.dedup();
    if owners.len() != sets.len() || sets.is_empty() {
        return Err(ProtocolError::Parameter("need exactly one share set per party".into()));
    }
    if sets.iter().filter(|s| s.special).count() != 1 {
        return Err(ProtocolError::Parameter("exactly one share set must be special".into()));
    }
    let p = sets.iter().map(|s| &s.p_share).sum();
    let q = sets.iter().map(|s| &s.q_share).sum();
    Ok((p, q))
}

/// Result of checking reconstructed factors against a modulus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verification {
    pub p: Natural,
    pub q: Natural,
    pub p_prime: bool,
    pub q_prime: bool,
    pub product_matches: bool,
    pub three_mod_four: bool,
}

impl Verification {
    pub fn check<R: RngCore + ?Sized>(p: Natural, q: Natural, modulus: &Natural, rng: &mut R) -> Self {
        let p_prime = is_probable_prime(&p, DEFAULT_MR_ROUNDS, rng);
        let q_prime = is_probable_prime(&q, DEFAULT_MR_ROUNDS, rng);
        let product_matches = &(&p * &q) == modulus;
        let three = Natural::from(3u32);
        let three_mod_four = &p % 4u32 == three && &q % 4u32 == three;
        Verification { p, q, p_prime, q_prime, product_matches, three_mod_four }
    }

    pub fn ok(&self) -> bool {
        self.p_prime && self.q_prime && self.product_matches && self.three_mod_four
    }
}

/// Trial-divides both candidates by every odd prime below the bound, in
/// waves; stops after the first wave with a rejection. Returns whether
/// both survived and how many primes were tested per candidate.
fn trial_division<R: RngCore + ?Sized>(
    config: &ProtocolConfig,
    attempt: u64,
    primes: &[u64],
    shares: &ShareSet,
    net: &mut TransportHandle,
    ot: &mut OtEndpoint,
    rng: &mut R,
) -> Result<(bool, u64), ProtocolError> {
    let mut tested = 0u64;
    for (w, wave) in primes.chunks(config.wave_size).enumerate() {
        let base = w * config.wave_size;
        let jobs: Vec<DivisibilityJob> = wave
            .iter()
            .enumerate()
            .flat_map(|(i, &beta)| {
                let index = 2 * (base + i) as u32;
                [
                    DivisibilityJob { index, beta, candidate: Candidate::P, residue: residue(&shares.p_share, beta) },
                    DivisibilityJob { index: index + 1, beta, candidate: Candidate::Q, residue: residue(&shares.q_share, beta) },
                ]
            })
            .collect();
        let verdicts = run_wave(config, attempt, &jobs, net, ot, rng)?;
        tested += wave.len() as u64;
        if verdicts.iter().any(|v| !v) {
            return Ok((false, tested));
        }
    }
    Ok((true, tested))
}

/// Runs this party's side of the protocol until a modulus is accepted.
/// Every party must call this with the same configuration.
pub fn run_party(
    config: &ProtocolConfig,
    net: &mut TransportHandle,
    source: &mut dyn ShareSource,
    rng: &mut dyn RngCore,
    options: RunOptions,
) -> Result<RunOutcome, ProtocolError> {
    config.validate()?;
    let start = Instant::now();
    let me = net.party();
    if net.parties() != config.parties() {
        return Err(ProtocolError::Parameter(format!(
            "transport has {} parties, configuration {}",
            net.parties(),
            config.parties()
        )));
    }
    let special = designate_special(config);
    let primes = primes_below(config.trial_bound);
    let mut ot = OtEndpoint::new(me);
    let mut logs = Vec::new();
    let mut totals = PhaseMetrics::default();

    for attempt in 1..=config.max_attempts {
        let before = net.metrics().clone();
        let shares = source.shares(config, me, me == special, attempt);
        let mut log = AttemptLog {
            attempt,
            party: me,
            outcome: AttemptOutcome::RejectedTrialDivision,
            trial_tests_per_number: 0,
            filter_rounds_run: 0,
            filter_rounds_led: 0,
            modulus_bits: None,
            counters: PhaseMetrics::default(),
        };
        let mut accepted = None;

        let (survived, tested) = trial_division(config, attempt, primes.as_slice(), &shares, net, &mut ot, rng)?;
        log.trial_tests_per_number = tested;
        if survived {
            let modulus = compute_modulus(config, attempt, &shares, net, &mut ot, rng)?;
            log.modulus_bits = Some(modulus.bits());
            let filter = run_filter_test(config, attempt, &modulus, &shares, net, rng)?;
            log.filter_rounds_run = filter.rounds.len() as u32;
            log.filter_rounds_led = filter.rounds_led_by(me);
            if !filter.passed() {
                log.outcome = AttemptOutcome::RejectedFilter;
            } else if !gcd_test(config, attempt, &modulus, &shares, net, &mut ot, rng)?.passed {
                log.outcome = AttemptOutcome::RejectedGcd;
            } else {
                log.outcome = AttemptOutcome::Accepted;
                accepted = Some(modulus);
            }
        }

        log.counters = net.metrics().since(&before);
        totals.accumulate(&log.counters);
        debug!("{me} attempt {attempt}: {:?}", log.outcome);
        logs.push(log);

        if let Some(modulus) = accepted {
            debug_assert!(!modulus.is_zero() && &modulus % 4u32 == Natural::one());
            info!("{me} accepted a {}-bit modulus after {attempt} attempts", modulus.bits());
            return Ok(RunOutcome {
                modulus,
                attempts: attempt,
                metrics: totals,
                attempt_logs: logs,
                elapsed: start.elapsed(),
                verified: None,
                shares: options.test_mode.then_some(shares),
            });
        }
    }
    Err(ProtocolError::GaveUp { attempts: config.max_attempts })
}
