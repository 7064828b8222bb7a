//! Big-integer helpers used by every protocol phase.
//!
//! Arithmetic is backed by `num-bigint`; the Jacobi symbol, Miller-Rabin and
//! the small-prime sieve are implemented here. Nothing in this module is
//! constant time.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use rand::RngCore;
use thiserror::Error;

/// Arbitrary-precision non-negative integer.
pub type Natural = BigUint;

/// Rejection-sampling cap for [`sample_unit_with_jacobi_one`].
pub const SAMPLING_RETRY_CAP: usize = 4096;

/// Default Miller-Rabin rounds for local verification.
pub const DEFAULT_MR_ROUNDS: usize = 40;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NumError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("value is not invertible modulo the given modulus")]
    NotInvertible,
    #[error("no admissible sample found after {0} attempts")]
    SamplingExhausted(usize),
}

/// Odd primes `3 <= p < bound`, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrimeList(Vec<u64>);

impl PrimeList {
    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = u64> + '_ {
        self.0.iter().copied()
    }
}

pub fn mod_pow(base: &Natural, exponent: &Natural, modulus: &Natural) -> Result<Natural, NumError> {
    if *modulus < Natural::from(2u8) {
        return Err(NumError::Parameter("modulus must be at least 2".into()));
    }
    Ok(base.modpow(exponent, modulus))
}

pub fn mod_inverse(a: &Natural, modulus: &Natural) -> Result<Natural, NumError> {
    if modulus.is_zero() {
        return Err(NumError::Parameter("modulus must be positive".into()));
    }
    if modulus.is_one() {
        return Err(NumError::NotInvertible);
    }
    a.modinv(modulus).ok_or(NumError::NotInvertible)
}

/// Jacobi symbol `(a/n)` for odd `n >= 3`.
pub fn jacobi(a: &Natural, n: &Natural) -> Result<i8, NumError> {
    if n.is_even() || *n < Natural::from(3u8) {
        return Err(NumError::Parameter("jacobi symbol needs an odd modulus >= 3".into()));
    }
    let mut a = a % n;
    let mut n = n.clone();
    let mut sign = 1i8;
    while !a.is_zero() {
        let twos = a.trailing_zeros().unwrap_or(0);
        if twos > 0 {
            a >>= twos;
            // (2/n) = -1 iff n = 3, 5 (mod 8)
            let n_mod8 = low_bits(&n, 8);
            if twos % 2 == 1 && (n_mod8 == 3 || n_mod8 == 5) {
                sign = -sign;
            }
        }
        if low_bits(&a, 4) == 3 && low_bits(&n, 4) == 3 {
            sign = -sign;
        }
        std::mem::swap(&mut a, &mut n);
        a %= &n;
    }
    Ok(if n.is_one() { sign } else { 0 })
}

fn low_bits(x: &Natural, modulus: u64) -> u64 {
    x.iter_u64_digits().next().unwrap_or(0) % modulus
}

const SMALL_PRIMES: [u64; 15] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47];

/// Miller-Rabin with `rounds` uniformly random bases drawn from `rng`.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &Natural, rounds: usize, rng: &mut R) -> bool {
    let rounds = rounds.max(1);
    if *n < Natural::from(2u8) {
        return false;
    }
    for &p in &SMALL_PRIMES {
        if *n == Natural::from(p) {
            return true;
        }
        if (n % p).is_zero() {
            return false;
        }
    }
    let one = Natural::one();
    let n_minus_one = n - &one;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;
    let two = Natural::from(2u8);
    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_one);
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = (&x * &x) % n;
            if x == n_minus_one {
                continue 'witness;
            }
            if x == one {
                return false;
            }
        }
        return false;
    }
    true
}

/// All odd primes `p` with `3 <= p < bound`.
pub fn primes_below(bound: u64) -> PrimeList {
    if bound <= 3 {
        return PrimeList(Vec::new());
    }
    let size = bound as usize;
    let mut composite = vec![false; size];
    let mut primes = Vec::new();
    let mut i = 3usize;
    while i < size {
        if !composite[i] {
            primes.push(i as u64);
            let mut j = i * i;
            while j < size {
                composite[j] = true;
                j += 2 * i;
            }
        }
        i += 2;
    }
    PrimeList(primes)
}

/// Rejection-samples `gamma` uniformly from `[2, modulus - 1]` until it is a
/// unit with Jacobi symbol 1.
pub fn sample_unit_with_jacobi_one<R: RngCore + ?Sized>(
    modulus: &Natural,
    rng: &mut R,
) -> Result<Natural, NumError> {
    if modulus.is_even() || *modulus < Natural::from(15u8) {
        return Err(NumError::Parameter("modulus must be odd and at least 15".into()));
    }
    let low = Natural::from(2u8);
    for _ in 0..SAMPLING_RETRY_CAP {
        let gamma = rng.gen_biguint_range(&low, modulus);
        if gamma.gcd(modulus).is_one() && jacobi(&gamma, modulus)? == 1 {
            return Ok(gamma);
        }
    }
    Err(NumError::SamplingExhausted(SAMPLING_RETRY_CAP))
}

/// Reduces a natural modulo a small modulus.
pub fn residue(x: &Natural, modulus: u64) -> u64 {
    (x % modulus).to_u64().expect("remainder fits the modulus")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn nat(x: u64) -> Natural {
        Natural::from(x)
    }

    fn pow_oracle(a: u64, b: u64, m: u64) -> u64 {
        let mut acc = 1 % m;
        for _ in 0..b {
            acc = acc * (a % m) % m;
        }
        acc
    }

    fn sieve_oracle(limit: usize) -> Vec<bool> {
        let mut is_prime = vec![true; limit.max(2)];
        is_prime[0] = false;
        is_prime[1] = false;
        for i in 2..limit {
            if is_prime[i] {
                for j in (i * i..limit).step_by(i) {
                    is_prime[j] = false;
                }
            }
        }
        is_prime
    }

    #[test]
    fn mod_pow_examples() {
        assert_eq!(pow_oracle(2, 10, 1000), 24);
        assert_eq!(mod_pow(&nat(2), &nat(10), &nat(1000)).unwrap(), nat(24));
        assert_eq!(mod_pow(&nat(123), &nat(0), &nat(77)).unwrap(), nat(1));
        assert_eq!(mod_pow(&nat(100), &nat(1), &nat(77)).unwrap(), nat(23));
        assert!(matches!(mod_pow(&nat(3), &nat(3), &nat(1)), Err(NumError::Parameter(_))));
    }

    #[test]
    fn mod_inverse_examples() {
        let brute = (1u64..7).find(|x| 3 * x % 7 == 1).unwrap();
        assert_eq!(brute, 5);
        assert_eq!(mod_inverse(&nat(3), &nat(7)).unwrap(), nat(5));
        assert_eq!(mod_inverse(&nat(1), &nat(9)).unwrap(), nat(1));
        assert_eq!(mod_inverse(&nat(4), &nat(8)), Err(NumError::NotInvertible));
    }

    #[test]
    fn jacobi_matches_euler_criterion_on_small_primes() {
        for p in [3u64, 5, 7, 11, 13] {
            for a in 0..p {
                let e = pow_oracle(a, (p - 1) / 2, p);
                let expected = match e {
                    0 => 0,
                    1 => 1,
                    x if x == p - 1 => -1,
                    _ => unreachable!(),
                };
                assert_eq!(jacobi(&nat(a), &nat(p)).unwrap(), expected, "a={a} p={p}");
            }
        }
    }

    #[test]
    fn jacobi_edge_cases() {
        assert_eq!(jacobi(&nat(1), &nat(9)).unwrap(), 1);
        assert_eq!(jacobi(&nat(0), &nat(9)).unwrap(), 0);
        assert!(jacobi(&nat(2), &nat(8)).is_err());
        assert!(jacobi(&nat(2), &nat(1)).is_err());
    }

    #[test]
    fn miller_rabin_agrees_with_sieve() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        assert!(is_probable_prime(&nat(7), 20, &mut rng));
        assert!(!is_probable_prime(&nat(9), 20, &mut rng));
        let sieve = sieve_oracle(10_000);
        for n in 0..10_000u64 {
            assert_eq!(is_probable_prime(&nat(n), 20, &mut rng), sieve[n as usize], "n={n}");
        }
    }

    #[test]
    fn miller_rabin_rejects_carmichael_numbers() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for c in [561u64, 1105, 1729, 2465, 2821, 6601, 8911, 41041, 825265] {
            assert!(!is_probable_prime(&nat(c), DEFAULT_MR_ROUNDS, &mut rng));
        }
        let mersenne = (Natural::one() << 127) - 1u8;
        assert!(is_probable_prime(&mersenne, DEFAULT_MR_ROUNDS, &mut rng));
    }

    #[test]
    fn primes_below_examples() {
        assert_eq!(primes_below(10).as_slice(), &[3, 5, 7]);
        assert_eq!(primes_below(4).as_slice(), &[3]);
        assert!(primes_below(3).is_empty());
    }

    #[test]
    fn primes_below_matches_sieve_up_to_1e5() {
        let sieve = sieve_oracle(100_001);
        let mut expected = Vec::new();
        let mut bound = 3u64;
        for b in [3u64, 4, 5, 100, 541, 1000, 9973, 65_536, 100_000] {
            while bound < b {
                if bound >= 3 && sieve[bound as usize] {
                    expected.push(bound);
                }
                bound += 1;
            }
            assert_eq!(primes_below(b).as_slice(), expected.as_slice(), "bound {b}");
        }
    }

    #[test]
    fn unit_sampling_on_15_hits_exactly_the_admissible_set() {
        let n = nat(15);
        let admissible: Vec<u64> = (2..15)
            .filter(|&g| num_integer::gcd(g, 15) == 1 && jacobi(&nat(g), &n).unwrap() == 1)
            .collect();
        assert_eq!(admissible, vec![2, 4, 8]);
        let mut seen = std::collections::BTreeSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..500 {
            let g = sample_unit_with_jacobi_one(&n, &mut rng).unwrap();
            seen.insert(g.to_u64().unwrap());
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), admissible);
    }

    #[test]
    fn unit_sampling_is_deterministic_per_seed() {
        let n = nat(7 * 11);
        let a = sample_unit_with_jacobi_one(&n, &mut ChaCha20Rng::seed_from_u64(11)).unwrap();
        let b = sample_unit_with_jacobi_one(&n, &mut ChaCha20Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert!(sample_unit_with_jacobi_one(&nat(14), &mut ChaCha20Rng::seed_from_u64(0)).is_err());
        assert!(sample_unit_with_jacobi_one(&nat(13), &mut ChaCha20Rng::seed_from_u64(0)).is_err());
    }

    proptest! {
        #[test]
        fn mod_pow_matches_iterated_multiplication(a in 0u64..1024, b in 0u64..1024, m in 2u64..1024) {
            prop_assert_eq!(mod_pow(&nat(a), &nat(b), &nat(m)).unwrap(), nat(pow_oracle(a, b, m)));
        }

        #[test]
        fn jacobi_is_multiplicative(n in (1u64..5000).prop_map(|x| 2 * x + 1), a in 0u64..10_000, b in 0u64..10_000) {
            let (a, b) = (a % n, b % n);
            let lhs = jacobi(&nat(a * b), &nat(n)).unwrap();
            let rhs = jacobi(&nat(a), &nat(n)).unwrap() * jacobi(&nat(b), &nat(n)).unwrap();
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn mod_inverse_roundtrips(a in 1u64..100_000, m in 2u64..100_000) {
            match mod_inverse(&nat(a), &nat(m)) {
                Ok(inv) => prop_assert_eq!((nat(a) * inv) % nat(m), nat(1)),
                Err(_) => prop_assert!(num_integer::gcd(a, m) != 1),
            }
        }
    }
}
