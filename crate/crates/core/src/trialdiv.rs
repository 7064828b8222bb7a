//! Distributed trial division of the hidden sums `p = Σ p_i`, `q = Σ q_i`
//! by small odd primes.
//!
//! The main path is a reduction tree: in turn `k` every party outside the
//! next survivor set sends its running residue to a survivor chosen by a
//! public hash, the survivor adds it, and after `log2 n` turns the last
//! survivor (always party 1) broadcasts whether the sum is nonzero mod β.
//! Residues travel in the clear between paired parties.
//!
//! For two parties an OT-based comparison is also available: the sender
//! offers β random values, the receiver fetches the one at `-p_2 mod β`,
//! the sender reveals the one at `p_1 mod β`, and equal values mean β
//! divides the sum.

use std::collections::BTreeMap;

use num_bigint::RandBigInt;
use rand::RngCore;
use sha2::{Digest, Sha256, Sha512};

use crate::config::{HashFunction, ProtocolConfig, TrialDivisionMode};
use crate::numtheory::Natural;
use crate::ot::OtEndpoint;
use crate::protocol::ProtocolError;
use crate::transport::wire::{PayloadReader, PayloadWriter};
use crate::transport::{PartyId, Phase, TransportHandle};

/// `H_m`: big-endian value of the first 8 digest bytes, mod `m`, plus one.
pub fn hash_to_range(hash: HashFunction, input: &[u8], m: u64) -> u64 {
    assert!(m >= 1, "hash_to_range needs a non-empty range");
    let digest: Vec<u8> = match hash {
        HashFunction::Sha256 => Sha256::digest(input).to_vec(),
        HashFunction::Sha512 => Sha512::digest(input).to_vec(),
    };
    let head: [u8; 8] = digest[..8].try_into().expect("digest is at least 8 bytes");
    u64::from_be_bytes(head) % m + 1
}

/// Hash input for the pairing draw: `β ‖ seed ‖ "|" ‖ turn ‖ "|" ‖ j`, in
/// ASCII decimal, with `"|" ‖ attempt` appended when an attempt is given.
pub fn pairing_input(beta: u64, seed: &[u8], turn: u32, j: u64, attempt: Option<u64>) -> Vec<u8> {
    let mut out = beta.to_string().into_bytes();
    out.extend_from_slice(seed);
    out.extend_from_slice(format!("|{turn}|{j}").as_bytes());
    if let Some(a) = attempt {
        out.extend_from_slice(format!("|{a}").as_bytes());
    }
    out
}

/// One turn of the reduction tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairingPlan {
    pub turn: u32,
    /// The smaller half of the previous survivors, ascending.
    pub survivors: Vec<PartyId>,
    /// Each dropped party and the survivor it reports to.
    pub mapping: BTreeMap<PartyId, PartyId>,
}

impl PairingPlan {
    pub fn target_of(&self, party: PartyId) -> Option<PartyId> {
        self.mapping.get(&party).copied()
    }

    /// The dropped party reporting to `survivor`.
    pub fn source_of(&self, survivor: PartyId) -> Option<PartyId> {
        self.mapping.iter().find(|(_, s)| **s == survivor).map(|(from, _)| *from)
    }

    pub fn is_bijection(&self) -> bool {
        let mut images: Vec<PartyId> = self.mapping.values().copied().collect();
        images.sort();
        images == self.survivors
    }
}

/// Builds the turn-`turn` pairing from the previous survivor set. Every
/// party computes the same plan from public inputs.
pub fn build_pairing(
    config: &ProtocolConfig,
    beta: u64,
    turn: u32,
    prior: &[PartyId],
    attempt: Option<u64>,
) -> Result<PairingPlan, ProtocolError> {
    let t = config.depth();
    if turn < 1 || turn > t {
        return Err(ProtocolError::Parameter(format!("turn {turn} outside [1, {t}]")));
    }
    let expected = 1usize << (t - turn + 1);
    if prior.len() != expected {
        return Err(ProtocolError::Parameter(format!(
            "turn {turn} needs {expected} prior survivors, got {}",
            prior.len()
        )));
    }
    let mut ordered = prior.to_vec();
    ordered.sort();
    let half = ordered.len() / 2;
    let (survivors, dropped) = ordered.split_at(half);
    let m = half as u64;
    let mut taken = vec![false; half];
    let mut mapping = BTreeMap::new();
    for &party in dropped {
        let mut j = 0u64;
        let c = loop {
            let c = hash_to_range(config.hash, &pairing_input(beta, &config.seed, turn, j, attempt), m) as usize - 1;
            if !taken[c] {
                break c;
            }
            j += 1;
        };
        taken[c] = true;
        mapping.insert(party, survivors[c]);
    }
    Ok(PairingPlan { turn, survivors: survivors.to_vec(), mapping })
}

/// All `log2 n` turns for one β.
pub fn build_tree(config: &ProtocolConfig, beta: u64, attempt: Option<u64>) -> Result<Vec<PairingPlan>, ProtocolError> {
    let mut prior: Vec<PartyId> = config.party_ids().collect();
    let mut plans = Vec::with_capacity(config.depth() as usize);
    for turn in 1..=config.depth() {
        let plan = build_pairing(config, beta, turn, &prior, attempt)?;
        prior = plan.survivors.clone();
        plans.push(plan);
    }
    Ok(plans)
}

/// Which hidden sum a test is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Candidate {
    P,
    Q,
}

impl Candidate {
    fn tag(self) -> u8 {
        match self {
            Candidate::P => 0,
            Candidate::Q => 1,
        }
    }
}

/// One divisibility test, from one party's side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DivisibilityJob {
    /// Unique within the attempt; `< 2^28`.
    pub index: u32,
    pub beta: u64,
    pub candidate: Candidate,
    /// This party's share mod β.
    pub residue: u64,
}

const VERDICT_TURN: u32 = 0;
const MAX_JOB_INDEX: u32 = 1 << 28;

fn round_of(job: &DivisibilityJob, turn: u32) -> u32 {
    (job.index << 4) | turn
}

fn message(attempt: u64, job: &DivisibilityJob, value: u64) -> Vec<u8> {
    PayloadWriter::new().u64(attempt).u32(job.beta as u32).u8(job.candidate.tag()).u64(value).finish()
}

fn read_message(payload: &[u8], attempt: u64, job: &DivisibilityJob) -> Result<u64, ProtocolError> {
    let mut r = PayloadReader::new(payload);
    let (a, beta, tag, value) = (r.u64()?, r.u32()?, r.u8()?, r.u64()?);
    r.finish()?;
    if a != attempt || u64::from(beta) != job.beta || tag != job.candidate.tag() {
        return Err(ProtocolError::Desync(format!(
            "trial division message for attempt {a}, beta {beta}, tag {tag}; expected attempt {attempt}, beta {}, tag {}",
            job.beta,
            job.candidate.tag()
        )));
    }
    Ok(value)
}

/// Runs a batch of tests together. Returns, per job, `true` iff the hidden
/// sum is not divisible by the job's β. All parties must pass jobs with the
/// same indices, primes and candidates in the same order.
pub fn run_wave<R: RngCore + ?Sized>(
    config: &ProtocolConfig,
    attempt: u64,
    jobs: &[DivisibilityJob],
    net: &mut TransportHandle,
    ot: &mut OtEndpoint,
    rng: &mut R,
) -> Result<Vec<bool>, ProtocolError> {
    for job in jobs {
        if job.index >= MAX_JOB_INDEX {
            return Err(ProtocolError::Parameter(format!("job index {} too large", job.index)));
        }
        if job.beta < 3 || job.beta % 2 == 0 || job.beta > u64::from(u32::MAX) || job.residue >= job.beta {
            return Err(ProtocolError::Parameter(format!("bad job {job:?}")));
        }
    }
    match config.trial_division {
        TrialDivisionMode::Tree => tree_wave(config, attempt, jobs, net),
        TrialDivisionMode::ObliviousPair => pair_wave(config, attempt, jobs, net, ot, rng),
    }
}

fn tree_wave(
    config: &ProtocolConfig,
    attempt: u64,
    jobs: &[DivisibilityJob],
    net: &mut TransportHandle,
) -> Result<Vec<bool>, ProtocolError> {
    let me = net.party();
    let mut plans: BTreeMap<u64, Vec<PairingPlan>> = BTreeMap::new();
    for job in jobs {
        if let std::collections::btree_map::Entry::Vacant(slot) = plans.entry(job.beta) {
            slot.insert(build_tree(config, job.beta, Some(attempt))?);
        }
    }
    let mut acc: Vec<u64> = jobs.iter().map(|j| j.residue).collect();
    // Within a turn all sends precede all receives, so no party waits on a
    // message whose sender is itself waiting.
    for turn in 1..=config.depth() {
        let idx = turn as usize - 1;
        for (job, value) in jobs.iter().zip(&acc) {
            if let Some(to) = plans[&job.beta][idx].target_of(me) {
                net.send_to(to, Phase::TrialDiv, round_of(job, turn), message(attempt, job, *value))?;
            }
        }
        for (job, value) in jobs.iter().zip(acc.iter_mut()) {
            let plan = &plans[&job.beta][idx];
            if let Some(from) = plan.survivors.contains(&me).then(|| plan.source_of(me)).flatten() {
                let env = net.receive_from(Phase::TrialDiv, from, round_of(job, turn))?;
                let other = read_message(&env.payload, attempt, job)?;
                if other >= job.beta {
                    return Err(ProtocolError::Desync(format!("residue {other} not below {}", job.beta)));
                }
                *value = (*value + other) % job.beta;
            }
        }
    }
    let root = config.party(1)?;
    let mut verdicts = Vec::with_capacity(jobs.len());
    for (job, value) in jobs.iter().zip(&acc) {
        if me == root {
            let survives = *value != 0;
            net.broadcast_payload(Phase::TrialDiv, round_of(job, VERDICT_TURN), message(attempt, job, u64::from(survives)))?;
            verdicts.push(survives);
        } else {
            let env = net.receive_from(Phase::TrialDiv, root, round_of(job, VERDICT_TURN))?;
            verdicts.push(read_verdict(&env.payload, attempt, job)?);
        }
    }
    Ok(verdicts)
}

fn read_verdict(payload: &[u8], attempt: u64, job: &DivisibilityJob) -> Result<bool, ProtocolError> {
    match read_message(payload, attempt, job)? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(ProtocolError::Desync(format!("verdict byte {other}"))),
    }
}

fn pair_wave<R: RngCore + ?Sized>(
    config: &ProtocolConfig,
    attempt: u64,
    jobs: &[DivisibilityJob],
    net: &mut TransportHandle,
    ot: &mut OtEndpoint,
    rng: &mut R,
) -> Result<Vec<bool>, ProtocolError> {
    let me = net.party();
    let sender = config.party(1)?;
    let receiver = config.party(2)?;
    let mut verdicts = Vec::with_capacity(jobs.len());
    if me == sender {
        for job in jobs {
            let beta = job.beta as usize;
            let values: Vec<Natural> = (0..beta).map(|_| rng.gen_biguint(u64::from(config.bits))).collect();
            let mut session = ot.init(net, sender, receiver, Phase::TrialDiv, job.beta as u32)?;
            ot.send(net, &mut session, &values)?;
            let reveal = PayloadWriter::new().natural(&values[job.residue as usize]).finish();
            net.send_to(receiver, Phase::TrialDiv, round_of(job, 1), reveal)?;
        }
        for job in jobs {
            let env = net.receive_from(Phase::TrialDiv, receiver, round_of(job, VERDICT_TURN))?;
            verdicts.push(read_verdict(&env.payload, attempt, job)?);
        }
    } else {
        let mut sessions = Vec::with_capacity(jobs.len());
        for job in jobs {
            let mut session = ot.init(net, sender, receiver, Phase::TrialDiv, job.beta as u32)?;
            let index = (job.beta - job.residue) % job.beta;
            ot.request(net, &mut session, index as u32 + 1)?;
            sessions.push(session);
        }
        for (job, session) in jobs.iter().zip(sessions.iter_mut()) {
            let fetched = ot.collect(net, session)?;
            let env = net.receive_from(Phase::TrialDiv, sender, round_of(job, 1))?;
            let mut r = PayloadReader::new(&env.payload);
            let revealed = r.natural()?;
            r.finish()?;
            let survives = fetched != revealed;
            net.broadcast_payload(Phase::TrialDiv, round_of(job, VERDICT_TURN), message(attempt, job, u64::from(survives)))?;
            verdicts.push(survives);
        }
    }
    Ok(verdicts)
}

/// A single tree test of `residue`'s hidden sum against `beta`.
pub fn tree_divisibility_test(
    config: &ProtocolConfig,
    attempt: u64,
    beta: u64,
    residue: u64,
    net: &mut TransportHandle,
) -> Result<bool, ProtocolError> {
    let job = DivisibilityJob { index: 0, beta, candidate: Candidate::P, residue };
    Ok(tree_wave(config, attempt, &[job], net)?[0])
}

/// The two-party OT comparison for one β. Party 1 passes `p_1`, party 2
/// passes `p_2`; a false result may be a collision with probability at
/// most `(β - 1) / 2^k`.
pub fn two_party_beta_test<R: RngCore + ?Sized>(
    config: &ProtocolConfig,
    attempt: u64,
    beta: u64,
    share: &Natural,
    net: &mut TransportHandle,
    ot: &mut OtEndpoint,
    rng: &mut R,
) -> Result<bool, ProtocolError> {
    if config.parties() != 2 {
        return Err(ProtocolError::Parameter("the pair test needs exactly two parties".into()));
    }
    let residue = crate::numtheory::residue(share, beta);
    let job = DivisibilityJob { index: 0, beta, candidate: Candidate::P, residue };
    run_wave_with_mode(config, attempt, &[job], net, ot, rng, TrialDivisionMode::ObliviousPair).map(|v| v[0])
}

fn run_wave_with_mode<R: RngCore + ?Sized>(
    config: &ProtocolConfig,
    attempt: u64,
    jobs: &[DivisibilityJob],
    net: &mut TransportHandle,
    ot: &mut OtEndpoint,
    rng: &mut R,
    mode: TrialDivisionMode,
) -> Result<Vec<bool>, ProtocolError> {
    let config = config.clone().with_trial_division(mode)?;
    run_wave(&config, attempt, jobs, net, ot, rng)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;
    use std::thread;

    use proptest::prelude::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    use super::*;
    use crate::ot::run_mediator;
    use crate::transport::{Address, MemoryNetwork, Scheduling};

    fn cfg(n: u16, seed: &[u8]) -> ProtocolConfig {
        ProtocolConfig::new(n, 16, seed.to_vec()).unwrap()
    }

    #[test]
    fn range_of_one_is_constant() {
        for i in 0..50u32 {
            assert_eq!(hash_to_range(HashFunction::Sha256, &i.to_be_bytes(), 1), 1);
        }
    }

    #[test]
    fn hash_to_range_matches_digest_prefix() {
        // sha256("abc") starts ba7816bf8f01cfea.
        let head = 0xba78_16bf_8f01_cfeau64;
        assert_eq!(hash_to_range(HashFunction::Sha256, b"abc", 1000), head % 1000 + 1);
        // sha512("abc") starts ddaf35a193617aba.
        assert_eq!(hash_to_range(HashFunction::Sha512, b"abc", 7), 0xddaf_35a1_9361_7abau64 % 7 + 1);
    }

    #[test]
    fn hash_to_range_is_close_to_uniform() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut buckets = [0u32; 16];
        let trials = 10_000;
        for _ in 0..trials {
            let mut input = [0u8; 24];
            rng.fill_bytes(&mut input);
            let c = hash_to_range(HashFunction::Sha256, &input, 16);
            assert!((1..=16).contains(&c));
            buckets[c as usize - 1] += 1;
        }
        for count in buckets {
            let freq = f64::from(count) / f64::from(trials);
            assert!((freq - 1.0 / 16.0).abs() <= 0.02, "bucket frequency {freq}");
        }
    }

    #[test]
    fn pairing_input_encoding() {
        assert_eq!(pairing_input(13, b"ab", 2, 5, None), b"13ab|2|5".to_vec());
        assert_eq!(pairing_input(3, &[0xff], 1, 0, Some(42)), b"3\xff|1|0|42".to_vec());
    }

    #[test]
    fn two_parties_map_the_single_dropped_party() {
        let c = cfg(2, b"x");
        let ids: Vec<_> = c.party_ids().collect();
        let plan = build_pairing(&c, 3, 1, &ids, None).unwrap();
        assert_eq!(plan.survivors, vec![ids[0]]);
        assert_eq!(plan.target_of(ids[1]), Some(ids[0]));
        assert!(plan.is_bijection());
    }

    #[test]
    fn pairing_rejects_bad_turns() {
        let c = cfg(4, b"x");
        let ids: Vec<_> = c.party_ids().collect();
        assert!(build_pairing(&c, 3, 0, &ids, None).is_err());
        assert!(build_pairing(&c, 3, 3, &ids, None).is_err());
        assert!(build_pairing(&c, 3, 2, &ids, None).is_err());
    }

    /// Mapping oracle: the first-occurrence order of hash draws.
    fn oracle_mapping(c: &ProtocolConfig, beta: u64, turn: u32, dropped: &[PartyId], survivors: &[PartyId]) -> Vec<(PartyId, PartyId)> {
        let m = survivors.len() as u64;
        let mut used = HashSet::new();
        let mut out = Vec::new();
        for &d in dropped {
            let pick = (0u64..)
                .map(|j| hash_to_range(c.hash, &pairing_input(beta, &c.seed, turn, j, None), m))
                .find(|x| !used.contains(x))
                .unwrap();
            used.insert(pick);
            out.push((d, survivors[pick as usize - 1]));
        }
        out
    }

    #[test]
    fn pairing_matches_an_independent_draw() {
        let c = cfg(16, b"oracle");
        let ids: Vec<_> = c.party_ids().collect();
        for beta in [3u64, 5, 7, 101] {
            let plan = build_pairing(&c, beta, 1, &ids, None).unwrap();
            let expected = oracle_mapping(&c, beta, 1, &ids[8..], &ids[..8]);
            assert_eq!(plan.mapping.into_iter().collect::<Vec<_>>(), expected);
        }
    }

    #[test]
    fn pairings_vary_with_beta_and_turn() {
        let c = cfg(64, b"vary");
        let ids: Vec<_> = c.party_ids().collect();
        let maps: HashSet<_> = [3u64, 5, 7, 11, 13]
            .iter()
            .map(|&b| build_pairing(&c, b, 1, &ids, None).unwrap().mapping)
            .collect();
        assert!(maps.len() > 1);
        let t1 = build_tree(&c, 3, None).unwrap();
        let draws: HashSet<_> = (1..=3u32).map(|turn| hash_to_range(c.hash, &pairing_input(3, &c.seed, turn, 0, None), 1 << 20)).collect();
        assert_eq!(draws.len(), 3);
        assert!(t1.iter().all(PairingPlan::is_bijection));
    }

    proptest! {
        #[test]
        fn trees_are_bijective_and_halve(t in 1u32..=6, beta in 3u64..10_000, seed in proptest::collection::vec(any::<u8>(), 0..16), attempt in proptest::option::of(any::<u64>())) {
            let c = ProtocolConfig::new(1 << t, 16, seed).unwrap();
            let plans = build_tree(&c, beta, attempt).unwrap();
            prop_assert_eq!(plans.len(), t as usize);
            for (i, plan) in plans.iter().enumerate() {
                prop_assert_eq!(plan.survivors.len(), 1usize << (t as usize - i - 1));
                prop_assert!(plan.is_bijection());
            }
            prop_assert_eq!(plans.last().unwrap().survivors.clone(), vec![c.party(1).unwrap()]);
        }
    }

    /// Runs `jobs_for(party)` at every party; returns each party's verdicts.
    fn run_cluster(c: &ProtocolConfig, jobs_for: impl Fn(u16) -> Vec<DivisibilityJob>) -> Vec<Vec<bool>> {
        let net = MemoryNetwork::new(c.parties(), Scheduling::Free);
        let handles: Vec<_> = c.party_ids().map(|p| net.endpoint(p.into()).unwrap()).collect();
        let med = net.endpoint(Address::Mediator).unwrap();
        let mediator = thread::spawn(move || run_mediator(med));
        let workers: Vec<_> = handles
            .into_iter()
            .map(|mut h| {
                let c = c.clone();
                let jobs = jobs_for(h.party().index());
                thread::spawn(move || {
                    let mut ot = OtEndpoint::new(h.party());
                    let mut rng = ChaCha20Rng::seed_from_u64(u64::from(h.party().index()));
                    run_wave(&c, 0, &jobs, &mut h, &mut ot, &mut rng).unwrap()
                })
            })
            .collect();
        let out = workers.into_iter().map(|w| w.join().unwrap()).collect();
        mediator.join().unwrap().unwrap();
        out
    }

    #[test]
    fn worked_examples() {
        let c = cfg(4, b"ex");
        for (residues, expected) in [([3u64, 1, 0, 1], false), ([1, 1, 1, 1], true)] {
            let all = run_cluster(&c, |i| {
                vec![DivisibilityJob { index: 0, beta: 5, candidate: Candidate::P, residue: residues[i as usize - 1] }]
            });
            assert!(all.iter().all(|v| v == &vec![expected]));
        }
    }

    #[test]
    fn exhaustive_small_tuples() {
        for n in [2u16, 4] {
            let c = cfg(n, b"exhaustive");
            for beta in [3u64, 5, 7] {
                let total = beta.pow(u32::from(n));
                let digit = |tuple: u64, party: u16| (tuple / beta.pow(u32::from(party) - 1)) % beta;
                let all = run_cluster(&c, |i| {
                    (0..total)
                        .map(|tuple| DivisibilityJob { index: tuple as u32, beta, candidate: Candidate::Q, residue: digit(tuple, i) })
                        .collect()
                });
                for tuple in 0..total {
                    let sum: u64 = (1..=n).map(|i| digit(tuple, i)).sum();
                    for verdicts in &all {
                        assert_eq!(verdicts[tuple as usize], sum % beta != 0, "n={n} beta={beta} tuple={tuple}");
                    }
                }
            }
        }
    }

    #[test]
    fn pair_test_matches_divisibility() {
        let c = ProtocolConfig::new(2, 64, b"pair".to_vec()).unwrap().with_trial_division(TrialDivisionMode::ObliviousPair).unwrap();
        let cases = [(7u64, 3u64, 5u64), (7, 4, 5), (0, 0, 3), (10, 1, 11), (12, 2, 7)];
        let all = run_cluster(&c, |i| {
            cases
                .iter()
                .enumerate()
                .map(|(k, &(p1, p2, beta))| DivisibilityJob {
                    index: k as u32,
                    beta,
                    candidate: Candidate::P,
                    residue: if i == 1 { p1 % beta } else { p2 % beta },
                })
                .collect()
        });
        let expected: Vec<bool> = cases.iter().map(|&(a, b, beta)| (a + b) % beta != 0).collect();
        assert_eq!(all, vec![expected.clone(), expected]);
    }

    #[test]
    fn tree_counts_stay_in_the_envelope() {
        let c = cfg(8, b"counts");
        let net = MemoryNetwork::new(8, Scheduling::Free);
        let handles: Vec<_> = c.party_ids().map(|p| net.endpoint(p.into()).unwrap()).collect();
        let workers: Vec<_> = handles
            .into_iter()
            .map(|mut h| {
                let c = c.clone();
                thread::spawn(move || {
                    for (k, beta) in [3u64, 5, 7, 11].into_iter().enumerate() {
                        tree_divisibility_test(&c, k as u64, beta, 1, &mut h).unwrap();
                    }
                    let comms = h.metrics().counters(Phase::TrialDiv).communications();
                    (h.party().index(), comms)
                })
            })
            .collect();
        for w in workers {
            let (party, comms) = w.join().unwrap();
            assert!((2 * 4..=4 * 4).contains(&comms), "party {party} made {comms}");
            if party == 1 {
                assert_eq!(comms, 4 * 4);
            }
        }
    }
}
