//! Products of secret values held by different parties, and the
//! n-party modulus `N = (Σ p_i)(Σ q_i)` built from them.
//!
//! `distr_product` turns `a` (held by one party) and `b` (held by another)
//! into additive shares of `a·b mod M` with one 1-out-of-2 OT per bit of
//! `b`: the a-holder offers `(c, c + a)` under a fresh uniform mask `c`,
//! the b-holder takes the entry selected by the bit. The a-holder never
//! waits on anything, which is what keeps pairwise scheduling deadlock-free.

use num_bigint::RandBigInt;
use num_traits::{One, Zero};
use rand::RngCore;

use crate::config::ProtocolConfig;
use crate::numtheory::Natural;
use crate::ot::OtEndpoint;
use crate::protocol::ProtocolError;
use crate::shares::ShareSet;
use crate::transport::wire::{PayloadReader, PayloadWriter};
use crate::transport::{PartyId, Phase, TransportHandle};

/// Public parameters of one product session.
#[derive(Debug, Clone, Copy)]
pub struct ProductSpec<'a> {
    pub a_holder: PartyId,
    pub b_holder: PartyId,
    /// Number of bits of `b` walked; `b < 2^bit_width`.
    pub bit_width: u64,
    pub modulus: &'a Natural,
    pub phase: Phase,
}

/// Runs one product session; `value` is `a` for the a-holder and `b` for
/// the b-holder. Returns this party's share; the two shares sum to
/// `a·b mod modulus`.
pub fn distr_product<R: RngCore + ?Sized>(
    spec: ProductSpec<'_>,
    value: &Natural,
    net: &mut TransportHandle,
    ot: &mut OtEndpoint,
    rng: &mut R,
) -> Result<Natural, ProtocolError> {
    let me = net.party();
    let m = spec.modulus;
    if m <= &Natural::one() {
        return Err(ProtocolError::Parameter("product modulus must exceed 1".into()));
    }
    if me == spec.a_holder {
        let a = value % m;
        let mut s1 = Natural::zero();
        for i in 0..spec.bit_width {
            let c0 = rng.gen_biguint_below(m);
            let c1 = (&c0 + &a) % m;
            let mut session = ot.init(net, spec.a_holder, spec.b_holder, spec.phase, 2)?;
            ot.send(net, &mut session, &[c0.clone(), c1])?;
            s1 += (c0 << i) % m;
        }
        Ok((m - s1 % m) % m)
    } else if me == spec.b_holder {
        if value.bits() > spec.bit_width {
            return Err(ProtocolError::Parameter(format!("b has {} bits, session walks {}", value.bits(), spec.bit_width)));
        }
        let mut sessions = Vec::with_capacity(spec.bit_width as usize);
        for i in 0..spec.bit_width {
            let mut session = ot.init(net, spec.a_holder, spec.b_holder, spec.phase, 2)?;
            ot.request(net, &mut session, u32::from(value.bit(i)) + 1)?;
            sessions.push(session);
        }
        let mut s2 = Natural::zero();
        for (i, session) in sessions.iter_mut().enumerate() {
            let c = ot.collect(net, session)?;
            s2 += (c << i) % m;
        }
        Ok(s2 % m)
    } else {
        Err(ProtocolError::Parameter(format!("{me} is not part of the product {} x {}", spec.a_holder, spec.b_holder)))
    }
}

/// Public parameters shared by every cross product of one phase.
#[derive(Debug, Clone, Copy)]
pub struct CrossSpec<'a> {
    /// Bits walked on the b side.
    pub b_width: u64,
    pub modulus: &'a Natural,
    pub phase: Phase,
}

/// Shares of the two cross products between `me` and one peer, `a_lo·b_hi`
/// and `a_hi·b_lo`, where `(a, b)` is each side's input pair and `lo < hi`
/// are the two ids. Both products run in that order at both ends.
pub fn pairwise_cross_terms<R: RngCore + ?Sized>(
    spec: CrossSpec<'_>,
    peer: PartyId,
    my_a: &Natural,
    my_b: &Natural,
    net: &mut TransportHandle,
    ot: &mut OtEndpoint,
    rng: &mut R,
) -> Result<Natural, ProtocolError> {
    let me = net.party();
    let (lo, hi) = if me < peer { (me, peer) } else { (peer, me) };
    let product = |a_holder, b_holder| ProductSpec {
        a_holder,
        b_holder,
        bit_width: spec.b_width,
        modulus: spec.modulus,
        phase: spec.phase,
    };
    let x = distr_product(product(lo, hi), if me == lo { my_a } else { my_b }, net, ot, rng)?;
    let y = distr_product(product(hi, lo), if me == hi { my_a } else { my_b }, net, ot, rng)?;
    Ok((x + y) % spec.modulus)
}

/// `Σ_{j≠i}` of the pairwise cross-term shares. Every party walks its
/// pairs in ascending `(lo, hi)` order, so a b-holder only ever waits on a
/// pair its peer has already reached.
pub fn sum_cross_terms<R: RngCore + ?Sized>(
    config: &ProtocolConfig,
    spec: CrossSpec<'_>,
    my_a: &Natural,
    my_b: &Natural,
    net: &mut TransportHandle,
    ot: &mut OtEndpoint,
    rng: &mut R,
) -> Result<Natural, ProtocolError> {
    let me = net.party();
    let mut total = Natural::zero();
    for peer in config.party_ids().filter(|p| *p != me) {
        total += pairwise_cross_terms(spec, peer, my_a, my_b, net, ot, rng)?;
    }
    Ok(total % spec.modulus)
}

/// Broadcasts `mine` and returns the sum of all parties' values mod `modulus`.
pub fn open_sum(
    config: &ProtocolConfig,
    attempt: u64,
    phase: Phase,
    round: u32,
    mine: &Natural,
    modulus: &Natural,
    net: &mut TransportHandle,
) -> Result<Natural, ProtocolError> {
    let me = net.party();
    net.broadcast_payload(phase, round, PayloadWriter::new().u64(attempt).natural(mine).finish())?;
    let mut total = mine.clone();
    for peer in config.party_ids().filter(|p| *p != me) {
        let env = net.receive_from(phase, peer, round)?;
        let mut r = PayloadReader::new(&env.payload);
        let (a, value) = (r.u64()?, r.natural()?);
        r.finish()?;
        if a != attempt {
            return Err(ProtocolError::Desync(format!("{peer} sent a {phase} value for attempt {a}, expected {attempt}")));
        }
        total += value;
    }
    Ok(total % modulus)
}

const F_ROUND: u32 = 1;

/// Computes `N = p·q` from everyone's shares without revealing them.
/// Products live mod `2^L`, `L = 2k + 2t + 2`, which exceeds any `p·q`.
pub fn compute_modulus<R: RngCore + ?Sized>(
    config: &ProtocolConfig,
    attempt: u64,
    shares: &ShareSet,
    net: &mut TransportHandle,
    ot: &mut OtEndpoint,
    rng: &mut R,
) -> Result<Natural, ProtocolError> {
    let modulus = Natural::one() << config.product_share_bits();
    let spec = CrossSpec { b_width: u64::from(config.bits), modulus: &modulus, phase: Phase::DistMul };
    let cross = sum_cross_terms(config, spec, &shares.p_share, &shares.q_share, net, ot, rng)?;
    let f = (&shares.p_share * &shares.q_share + cross) % &modulus;
    open_sum(config, attempt, Phase::DistMul, F_ROUND, &f, &modulus, net)
}
