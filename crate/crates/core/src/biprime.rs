//! The two distributed biprimality tests run on a candidate modulus `N`.
//!
//! Filter test: an elected leader picks `γ` with Jacobi symbol 1, the
//! special party contributes `γ^((N+1-p_i-q_i)/4)`, everyone else
//! `γ^(-(p_i+q_i)/4)`, and the leader accepts iff the product is `±1`.
//!
//! Gcd test: the parties open `G = (Σ r_i)(p + q - 1) mod N` and accept iff
//! `gcd(G, N) = 1`. Each party adds `r_i(Δ_i - 1)` locally and shares of
//! `r_i·Δ_j` come from OT products over the modulus `N` itself, so nothing
//! wraps before the final reduction.

use std::collections::BTreeMap;

use num_bigint::RandBigInt;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;

use crate::config::ProtocolConfig;
use crate::distmul::{open_sum, sum_cross_terms, CrossSpec};
use crate::numtheory::{mod_inverse, mod_pow, sample_unit_with_jacobi_one, Natural};
use crate::ot::OtEndpoint;
use crate::protocol::ProtocolError;
use crate::shares::ShareSet;
use crate::transport::wire::{PayloadReader, PayloadWriter};
use crate::transport::{PartyId, Phase, TransportHandle};
use crate::trialdiv::hash_to_range;

/// Leader of filter round `round`: `H_n(seed ‖ "|gamma|" ‖ round)`, with
/// `"|" ‖ attempt` appended when an attempt is given.
pub fn round_leader(config: &ProtocolConfig, round: u32, attempt: Option<u64>) -> PartyId {
    let mut input = config.seed.clone();
    input.extend_from_slice(format!("|gamma|{round}").as_bytes());
    if let Some(a) = attempt {
        input.extend_from_slice(format!("|{a}").as_bytes());
    }
    let index = hash_to_range(config.hash, &input, u64::from(config.parties()));
    config.party(index as u16).expect("hash_to_range stays within [1, n]")
}

/// This party's factor of `γ^((N+1-p-q)/4)`.
pub fn filter_contribution(gamma: &Natural, modulus: &Natural, shares: &ShareSet) -> Result<Natural, ProtocolError> {
    let delta = shares.delta();
    if shares.special {
        let top = modulus + 1u32;
        if top < delta {
            return Err(ProtocolError::Parameter("share sum exceeds N + 1".into()));
        }
        let exponent = top - delta;
        if !(&exponent % 4u32).is_zero() {
            return Err(ProtocolError::Parameter("N + 1 - p_i - q_i is not a multiple of 4".into()));
        }
        Ok(mod_pow(gamma, &(exponent >> 2), modulus)?)
    } else {
        if !(&delta % 4u32).is_zero() {
            return Err(ProtocolError::Parameter("p_i + q_i is not a multiple of 4".into()));
        }
        let inverse = mod_inverse(gamma, modulus)?;
        Ok(mod_pow(&inverse, &(delta >> 2), modulus)?)
    }
}

/// Accepts `1` and `N - 1`.
pub fn is_plus_minus_one(value: &Natural, modulus: &Natural) -> bool {
    value.is_one() || value + 1u32 == *modulus
}

/// One filter round as seen by one party.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterRound {
    pub index: u32,
    pub leader: PartyId,
    pub gamma: Natural,
    /// Contributions this party saw: its own, plus everyone's at the leader.
    pub contributions: BTreeMap<PartyId, Natural>,
    pub verdict: bool,
}

const GAMMA_STEP: u32 = 1;
const CONTRIBUTION_STEP: u32 = 2;
const VERDICT_STEP: u32 = 3;

fn filter_round_tag(round: u32, step: u32) -> u32 {
    round * 4 + step
}

fn read_tagged(payload: &[u8], attempt: u64, what: &str) -> Result<Natural, ProtocolError> {
    let mut r = PayloadReader::new(payload);
    let (a, value) = (r.u64()?, r.natural()?);
    r.finish()?;
    if a != attempt {
        return Err(ProtocolError::Desync(format!("{what} for attempt {a}, expected {attempt}")));
    }
    Ok(value)
}

fn tagged(attempt: u64, value: &Natural) -> Vec<u8> {
    PayloadWriter::new().u64(attempt).natural(value).finish()
}

/// Runs round `round` (1-based) of the filter test.
pub fn filter_round<R: RngCore + ?Sized>(
    config: &ProtocolConfig,
    attempt: u64,
    round: u32,
    modulus: &Natural,
    shares: &ShareSet,
    net: &mut TransportHandle,
    rng: &mut R,
) -> Result<FilterRound, ProtocolError> {
    if modulus.is_even() || modulus <= &Natural::from(8u32) {
        return Err(ProtocolError::Parameter(format!("filter test needs odd N > 8, got {modulus}")));
    }
    let me = net.party();
    let leader = round_leader(config, round, Some(attempt));
    let phase = Phase::BiprimeFilter;
    let gamma = if me == leader {
        let gamma = sample_unit_with_jacobi_one(modulus, rng)?;
        net.broadcast_payload(phase, filter_round_tag(round, GAMMA_STEP), tagged(attempt, &gamma))?;
        gamma
    } else {
        let env = net.receive_from(phase, leader, filter_round_tag(round, GAMMA_STEP))?;
        read_tagged(&env.payload, attempt, "gamma")?
    };
    let mine = filter_contribution(&gamma, modulus, shares)?;
    let mut contributions = BTreeMap::from([(me, mine.clone())]);
    let verdict = if me == leader {
        let mut product = mine;
        for peer in config.party_ids().filter(|p| *p != me) {
            let env = net.receive_from(phase, peer, filter_round_tag(round, CONTRIBUTION_STEP))?;
            let value = read_tagged(&env.payload, attempt, "filter contribution")?;
            product = product * &value % modulus;
            contributions.insert(peer, value);
        }
        let verdict = is_plus_minus_one(&product, modulus);
        let payload = PayloadWriter::new().u64(attempt).u8(u8::from(verdict)).finish();
        net.broadcast_payload(phase, filter_round_tag(round, VERDICT_STEP), payload)?;
        verdict
    } else {
        net.send_to(leader, phase, filter_round_tag(round, CONTRIBUTION_STEP), tagged(attempt, &mine))?;
        let env = net.receive_from(phase, leader, filter_round_tag(round, VERDICT_STEP))?;
        let mut r = PayloadReader::new(&env.payload);
        let (a, v) = (r.u64()?, r.u8()?);
        r.finish()?;
        if a != attempt || v > 1 {
            return Err(ProtocolError::Desync(format!("bad filter verdict (attempt {a}, byte {v})")));
        }
        v == 1
    };
    Ok(FilterRound { index: round, leader, gamma, contributions, verdict })
}

/// Rounds `1..=s`, stopping at the first rejection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterReport {
    pub rounds: Vec<FilterRound>,
}

impl FilterReport {
    pub fn passed(&self) -> bool {
        self.rounds.iter().all(|r| r.verdict)
    }

    pub fn rounds_led_by(&self, party: PartyId) -> u32 {
        self.rounds.iter().filter(|r| r.leader == party).count() as u32
    }
}

pub fn run_filter_test<R: RngCore + ?Sized>(
    config: &ProtocolConfig,
    attempt: u64,
    modulus: &Natural,
    shares: &ShareSet,
    net: &mut TransportHandle,
    rng: &mut R,
) -> Result<FilterReport, ProtocolError> {
    let mut rounds = Vec::new();
    for round in 1..=config.filter_rounds {
        let outcome = filter_round(config, attempt, round, modulus, shares, net, rng)?;
        let verdict = outcome.verdict;
        rounds.push(outcome);
        if !verdict {
            break;
        }
    }
    Ok(FilterReport { rounds })
}

/// One party's view of the gcd test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GcdOutcome {
    pub passed: bool,
    /// The opened value `G`.
    pub g_total: Natural,
    /// This party's secret `r_i`.
    pub r: Natural,
    /// This party's opened share `g_i`.
    pub g_share: Natural,
}

const G_ROUND: u32 = 1;

pub fn gcd_test<R: RngCore + ?Sized>(
    config: &ProtocolConfig,
    attempt: u64,
    modulus: &Natural,
    shares: &ShareSet,
    net: &mut TransportHandle,
    ot: &mut OtEndpoint,
    rng: &mut R,
) -> Result<GcdOutcome, ProtocolError> {
    if modulus <= &Natural::from(2u32) {
        return Err(ProtocolError::Parameter(format!("gcd test needs N > 2, got {modulus}")));
    }
    let r = rng.gen_biguint_range(&Natural::one(), modulus);
    let delta = shares.delta() % modulus;
    let local = (&r * (&delta + modulus - 1u32)) % modulus;
    let spec = CrossSpec { b_width: modulus.bits(), modulus, phase: Phase::BiprimeGcd };
    let cross = sum_cross_terms(config, spec, &delta, &r, net, ot, rng)?;
    let g_share = (local + cross) % modulus;
    let g_total = open_sum(config, attempt, Phase::BiprimeGcd, G_ROUND, &g_share, modulus, net)?;
    let passed = g_total.gcd(modulus).is_one();
    Ok(GcdOutcome { passed, g_total, r, g_share })
}

#[cfg(test)]
mod tests {
    use std::thread;

    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    use super::*;
    use crate::numtheory::jacobi;
    use crate::ot::run_mediator;
    use crate::transport::{Address, MemoryNetwork, Scheduling};

    fn nat(v: u64) -> Natural {
        Natural::from(v)
    }

    /// Special share `v - 4`, other share 4; needs `v ≡ 3 mod 4`, `v >= 7`.
    fn two_party_shares(c: &ProtocolConfig, p: u64, q: u64) -> Vec<ShareSet> {
        vec![
            ShareSet::new(c.party(1).unwrap(), nat(p - 4), nat(q - 4), true).unwrap(),
            ShareSet::new(c.party(2).unwrap(), nat(4), nat(4), false).unwrap(),
        ]
    }

    #[test]
    fn every_admissible_gamma_passes_for_77() {
        let c = ProtocolConfig::new(2, 8, b"77".to_vec()).unwrap();
        let n = nat(77);
        let shares = two_party_shares(&c, 7, 11);
        let mut admissible = 0;
        for g in 2..77u64 {
            let gamma = nat(g);
            if g.gcd(&77) != 1 || jacobi(&gamma, &n).unwrap() != 1 {
                continue;
            }
            admissible += 1;
            let product = shares.iter().map(|s| filter_contribution(&gamma, &n, s).unwrap()).fold(nat(1), |acc, v| acc * v % &n);
            assert!(is_plus_minus_one(&product, &n), "gamma {g}");
            // The contributions multiply to γ^((N+1-p-q)/4).
            assert_eq!(product, gamma.modpow(&nat((78 - 18) / 4), &n));
        }
        assert_eq!(admissible, 29);
    }

    #[test]
    fn leader_election_is_public_and_in_range() {
        let c = ProtocolConfig::new(8, 16, b"lead".to_vec()).unwrap();
        let leaders: Vec<_> = (1..=40).map(|r| round_leader(&c, r, Some(3))).collect();
        assert_eq!(leaders, (1..=40).map(|r| round_leader(&c, r, Some(3))).collect::<Vec<_>>());
        assert!(leaders.iter().collect::<std::collections::HashSet<_>>().len() > 1);
    }

    #[test]
    fn contribution_rejects_broken_layout() {
        let c = ProtocolConfig::new(2, 8, b"x".to_vec()).unwrap();
        let bad = ShareSet { owner: c.party(2).unwrap(), p_share: nat(5), q_share: nat(4), special: false };
        assert!(filter_contribution(&nat(4), &nat(77), &bad).is_err());
    }

    struct Run {
        filter: Vec<FilterReport>,
        gcd: Vec<GcdOutcome>,
        counts: Vec<(u64, u64)>,
    }

    fn run(c: &ProtocolConfig, modulus: u64, shares: Vec<ShareSet>, with_gcd: bool) -> Run {
        let net = MemoryNetwork::new(c.parties(), Scheduling::Free);
        let handles: Vec<_> = c.party_ids().map(|p| net.endpoint(p.into()).unwrap()).collect();
        let med = net.endpoint(Address::Mediator).unwrap();
        let mediator = thread::spawn(move || run_mediator(med));
        let workers: Vec<_> = handles
            .into_iter()
            .zip(shares)
            .map(|(mut h, s)| {
                let c = c.clone();
                thread::spawn(move || {
                    let mut rng = ChaCha20Rng::seed_from_u64(u64::from(h.party().index()));
                    let mut ot = OtEndpoint::new(h.party());
                    let n = nat(modulus);
                    let f = run_filter_test(&c, 0, &n, &s, &mut h, &mut rng).unwrap();
                    let g = if with_gcd { Some(gcd_test(&c, 0, &n, &s, &mut h, &mut ot, &mut rng).unwrap()) } else { None };
                    let fc = h.metrics().counters(Phase::BiprimeFilter).communications();
                    let gc = h.metrics().counters(Phase::BiprimeGcd).communications();
                    (f, g, (fc, gc))
                })
            })
            .collect();
        let mut out = Run { filter: vec![], gcd: vec![], counts: vec![] };
        for w in workers {
            let (f, g, counts) = w.join().unwrap();
            out.filter.push(f);
            out.gcd.extend(g);
            out.counts.push(counts);
        }
        mediator.join().unwrap().unwrap();
        out
    }

    #[test]
    fn distributed_filter_accepts_a_biprime_with_exact_counts() {
        let c = ProtocolConfig::new(4, 8, b"filter".to_vec()).unwrap().with_filter_rounds(6).unwrap();
        // p = 7 + 4 + 4 + 8 = 23, q = 11 + 4 + 8 + 8 = 31.
        let raw = [(7u64, 11u64), (4, 4), (4, 8), (8, 8)];
        let shares: Vec<ShareSet> =
            raw.iter().enumerate().map(|(i, &(p, q))| ShareSet::new(c.party(i as u16 + 1).unwrap(), nat(p), nat(q), i == 0).unwrap()).collect();
        let out = run(&c, 23 * 31, shares, true);
        for (i, report) in out.filter.iter().enumerate() {
            assert!(report.passed());
            assert_eq!(report.rounds.len(), 6);
            let me = c.party(i as u16 + 1).unwrap();
            let led = u64::from(report.rounds_led_by(me));
            assert_eq!(out.counts[i].0, led * 5 + (6 - led) * 3);
        }
        // g = (Σ r)(p + q - 1) mod N, and 53 shares no factor with 713.
        let sum_r: Natural = out.gcd.iter().map(|g| &g.r).sum();
        let expected = sum_r * nat(23 + 31 - 1) % nat(713);
        for g in &out.gcd {
            assert_eq!(g.g_total, expected);
        }
        let width = nat(713).bits();
        for (_, gc) in &out.counts {
            assert_eq!(*gc, 2 * width * 3 + 4);
        }
    }

    #[test]
    fn filter_rejects_a_three_prime_modulus_and_stops() {
        // p = 15 = 3·5, q = 19, N = 285.
        let c = ProtocolConfig::new(2, 8, b"reject".to_vec()).unwrap().with_filter_rounds(40).unwrap();
        let shares = two_party_shares(&c, 15, 19);
        let out = run(&c, 285, shares, false);
        assert!(!out.filter[0].passed());
        assert_eq!(out.filter[0].rounds.len(), out.filter[1].rounds.len());
        assert!(out.filter[0].rounds.len() < 40);
    }

    #[test]
    fn gcd_test_catches_a_shared_factor() {
        // p = 7, q = 15 ≡ 3 mod 4, N = 105 and p + q - 1 = 21 shares 3 and 7.
        let c = ProtocolConfig::new(2, 8, b"gcd".to_vec()).unwrap();
        let shares = two_party_shares(&c, 7, 15);
        let out = run(&c, 105, shares, true);
        assert!(out.gcd.iter().all(|g| !g.passed));
    }
}
