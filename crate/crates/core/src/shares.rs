//! Secret candidate shares.
//!
//! Exactly one party (the special party) ends its shares in binary `11`;
//! every other share ends in `00`. The sums `p` and `q` are then both
//! `3 mod 4`.

use num_bigint::RandBigInt;
use num_traits::One;
use rand::RngCore;

use crate::config::ProtocolConfig;
use crate::numtheory::Natural;
use crate::transport::PartyId;
use crate::trialdiv::hash_to_range;

/// One party's secret shares of `p` and `q`. Never transmitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShareSet {
    pub owner: PartyId,
    pub p_share: Natural,
    pub q_share: Natural,
    pub special: bool,
}

impl ShareSet {
    /// Builds a share set, checking the trailing-bit invariant.
    pub fn new(owner: PartyId, p_share: Natural, q_share: Natural, special: bool) -> Result<Self, String> {
        let want = if special { 3u32 } else { 0 };
        for (name, v) in [("p", &p_share), ("q", &q_share)] {
            if (v % 4u32) != Natural::from(want) {
                return Err(format!("{name} share of {owner} is not {want} mod 4"));
            }
            if !special && v < &Natural::from(4u32) {
                return Err(format!("{name} share of {owner} is below 4"));
            }
        }
        Ok(ShareSet { owner, p_share, q_share, special })
    }

    /// `Δ_i = p_i + q_i`.
    pub fn delta(&self) -> Natural {
        &self.p_share + &self.q_share
    }
}

/// The party holding the `11` shares: `H_n(seed ‖ "|" ‖ "special")`.
pub fn designate_special(config: &ProtocolConfig) -> PartyId {
    let mut input = config.seed.clone();
    input.extend_from_slice(b"|special");
    let index = hash_to_range(config.hash, &input, u64::from(config.parties()));
    config.party(index as u16).expect("hash_to_range stays within [1, n]")
}

/// Draws `4·x + 3` (special) or `4·x` with `x` uniform in `[1, 2^(k-2) - 1]`,
/// so every share is below `2^k`.
pub fn generate_shares<R: RngCore + ?Sized>(config: &ProtocolConfig, party: PartyId, special: bool, rng: &mut R) -> ShareSet {
    let upper = Natural::one() << (config.bits - 2);
    let mut draw = || {
        let hat = rng.gen_biguint_range(&Natural::one(), &upper);
        let v = hat << 2;
        if special {
            v + 3u32
        } else {
            v
        }
    };
    let p_share = draw();
    let q_share = draw();
    ShareSet { owner: party, p_share, q_share, special }
}

/// Where a party's shares come from on each attempt.
pub trait ShareSource: Send {
    fn shares(&mut self, config: &ProtocolConfig, party: PartyId, special: bool, attempt: u64) -> ShareSet;
}

/// Fresh random shares every attempt.
#[derive(Debug)]
pub struct RandomShares<R> {
    rng: R,
}

impl<R: RngCore + Send> RandomShares<R> {
    pub fn new(rng: R) -> Self {
        RandomShares { rng }
    }
}

impl<R: RngCore + Send> ShareSource for RandomShares<R> {
    fn shares(&mut self, config: &ProtocolConfig, party: PartyId, special: bool, _attempt: u64) -> ShareSet {
        generate_shares(config, party, special, &mut self.rng)
    }
}

/// A fixed script of `(p_i, q_i)` pairs, replayed cyclically. For tests.
#[derive(Debug, Clone)]
pub struct ScriptedShares {
    script: Vec<(Natural, Natural)>,
}

impl ScriptedShares {
    pub fn new(script: Vec<(Natural, Natural)>) -> Self {
        assert!(!script.is_empty(), "empty share script");
        ScriptedShares { script }
    }
}

impl ShareSource for ScriptedShares {
    fn shares(&mut self, _config: &ProtocolConfig, party: PartyId, special: bool, attempt: u64) -> ShareSet {
        let (p, q) = self.script[(attempt.saturating_sub(1) as usize) % self.script.len()].clone();
        ShareSet::new(party, p, q, special).expect("scripted shares respect the mod-4 layout")
    }
}
