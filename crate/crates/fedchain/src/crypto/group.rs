//! Safe-prime group parameters.
//!
//! The group is the order-q subgroup of quadratic residues modulo a safe
//! prime p = 2q + 1. Squaring any element of [2, p-2] lands in the subgroup,
//! and because q is prime every residue other than 1 generates it.

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::Rng;

use super::CryptoError;

/// Miller-Rabin rounds; each round has error at most 1/4, so 40 rounds put
/// the composite-acceptance probability below 2^-80.
const MILLER_RABIN_ROUNDS: usize = 40;

const SMALL_PRIMES: [u32; 54] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191,
    193, 197, 199, 211, 223, 227, 229, 233, 239, 241, 251,
];

/// A safe-prime group: modulus `p = 2q + 1`, prime subgroup order `q`, and a
/// generator `g` of the order-q subgroup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupParams {
    p: BigUint,
    q: BigUint,
    g: BigUint,
}

impl GroupParams {
    /// Validate externally supplied parameters against the subgroup
    /// invariants: p and q probable primes, p = 2q + 1, g != 1, g^q = 1.
    pub fn new(p: BigUint, q: BigUint, g: BigUint) -> Result<Self, CryptoError> {
        if p != (&q << 1u32) + BigUint::one() {
            return Err(CryptoError::InvalidGroup("p != 2q + 1".into()));
        }
        if !is_probable_prime(&p) {
            return Err(CryptoError::InvalidGroup("p is not prime".into()));
        }
        if !is_probable_prime(&q) {
            return Err(CryptoError::InvalidGroup("q is not prime".into()));
        }
        if g <= BigUint::one() || g >= p {
            return Err(CryptoError::InvalidGroup("g not in (1, p)".into()));
        }
        if g.modpow(&q, &p) != BigUint::one() {
            return Err(CryptoError::InvalidGroup("g^q mod p != 1".into()));
        }
        Ok(Self { p, q, g })
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    /// Subgroup membership: 0 < x < p and x^q mod p = 1.
    pub fn in_subgroup(&self, x: &BigUint) -> bool {
        !x.is_zero() && x < &self.p && x.modpow(&self.q, &self.p) == BigUint::one()
    }

    /// Multiplication modulo p.
    pub fn mul(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a * b) % &self.p
    }

    /// g raised to an exponent, reduced modulo the subgroup order first.
    pub fn pow_g(&self, e: &BigUint) -> BigUint {
        self.g.modpow(&(e % &self.q), &self.p)
    }

    /// Multiplicative inverse modulo p (p prime, x nonzero).
    pub fn inv(&self, x: &BigUint) -> BigUint {
        let two = BigUint::from(2u32);
        x.modpow(&(&self.p - two), &self.p)
    }
}

/// Generate a safe-prime group of exactly `bit_length` bits.
///
/// Candidate subgroup orders are drawn with their top two bits set so the
/// modulus keeps full width; the search gives up with a budget error once
/// the attempt allowance is exhausted (which is certain for widths with no
/// full-width safe prime, e.g. 4 bits). Deterministic for a seeded `rng`.
pub fn generate_group<R: Rng + ?Sized>(
    bit_length: u32,
    rng: &mut R,
) -> Result<GroupParams, CryptoError> {
    if bit_length < 4 {
        return Err(CryptoError::GenerationBudget {
            bit_length,
            attempts: 0,
        });
    }
    let q_bits = bit_length as u64 - 1;
    let budget = (600 * bit_length as usize).max(4096);
    for attempt in 1..=budget {
        let mut q = rng.gen_biguint(q_bits);
        // Force exact width with the two most significant bits set, and odd.
        q.set_bit(q_bits - 1, true);
        if q_bits >= 2 {
            q.set_bit(q_bits - 2, true);
        }
        q.set_bit(0, true);
        // p = 2q + 1 is divisible by 3 whenever q = 1 mod 3.
        if q_bits > 2 && (&q % 3u32) == BigUint::one() {
            continue;
        }
        if !is_probable_prime(&q) {
            continue;
        }
        let p = (&q << 1u32) + BigUint::one();
        if !is_probable_prime(&p) {
            continue;
        }
        let g = pick_generator(&p, rng);
        debug_assert_eq!(g.modpow(&q, &p), BigUint::one());
        let _ = attempt;
        return Ok(GroupParams { p, q, g });
    }
    Err(CryptoError::GenerationBudget {
        bit_length,
        attempts: budget,
    })
}

/// A uniform square of [2, p-2] generates the quadratic-residue subgroup.
fn pick_generator<R: Rng + ?Sized>(p: &BigUint, rng: &mut R) -> BigUint {
    let two = BigUint::from(2u32);
    let hi = p - &two; // gen_biguint_range samples [lo, hi)
    loop {
        let a = rng.gen_biguint_range(&two, &hi);
        let g = a.modpow(&two, p);
        if g != BigUint::one() {
            return g;
        }
    }
}

/// Probabilistic primality: small-prime trial division, then Miller-Rabin
/// with bases drawn from a splitmix stream keyed by the candidate itself,
/// keeping the test deterministic for a given input.
pub(crate) fn is_probable_prime(n: &BigUint) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for &sp in &SMALL_PRIMES {
        let spb = BigUint::from(sp);
        if n == &spb {
            return true;
        }
        if (n % &spb).is_zero() {
            return false;
        }
    }
    // n - 1 = d * 2^s with d odd
    let n_minus_1 = n - BigUint::one();
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;

    let mut state = splitmix_seed(n);
    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = witness_in_range(n, &mut state);
        let mut x = a.modpow(&d, n);
        if x == BigUint::one() || x == n_minus_1 {
            continue;
        }
        for _ in 0..s.saturating_sub(1) {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn splitmix_seed(n: &BigUint) -> u64 {
    let digits = n.to_u64_digits();
    digits.iter().fold(0x9e37_79b9_7f4a_7c15u64, |acc, d| {
        splitmix(acc ^ d)
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform-enough witness in [2, n-2] built from splitmix output blocks.
fn witness_in_range(n: &BigUint, state: &mut u64) -> BigUint {
    let bits = n.bits();
    let words = bits.div_ceil(64) as usize;
    loop {
        let mut digits = Vec::with_capacity(words);
        for _ in 0..words {
            *state = splitmix(*state);
            digits.push(*state);
        }
        let candidate = BigUint::from_slice(
            &digits
                .iter()
                .flat_map(|d| [(*d & 0xffff_ffff) as u32, (*d >> 32) as u32])
                .collect::<Vec<_>>(),
        ) % n;
        let two = BigUint::from(2u32);
        if candidate >= two && candidate <= n - &two {
            return candidate;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn accepts_hand_built_test_group() {
        // 4^11 mod 23 = 1 and 4 != 1, p = 2*11 + 1.
        let params = GroupParams::new(23u32.into(), 11u32.into(), 4u32.into()).unwrap();
        assert!(params.in_subgroup(&BigUint::from(4u32)));
    }

    #[test]
    fn rejects_bad_parameters() {
        // p != 2q + 1
        assert!(GroupParams::new(23u32.into(), 7u32.into(), 4u32.into()).is_err());
        // q composite (p = 19, q = 9)
        assert!(GroupParams::new(19u32.into(), 9u32.into(), 4u32.into()).is_err());
        // g = 1
        assert!(GroupParams::new(23u32.into(), 11u32.into(), 1u32.into()).is_err());
        // g outside the subgroup: 5^11 mod 23 = 22
        assert!(GroupParams::new(23u32.into(), 11u32.into(), 5u32.into()).is_err());
    }

    #[test]
    fn generates_valid_group_deterministically() {
        let mut rng = seeded_rng(11);
        let a = generate_group(16, &mut rng).unwrap();
        // Invariants are re-checked by the validating constructor.
        let b = GroupParams::new(a.p().clone(), a.q().clone(), a.g().clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.p().bits(), 16);

        let mut rng2 = seeded_rng(11);
        let c = generate_group(16, &mut rng2).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn tiny_width_exhausts_budget() {
        let mut rng = seeded_rng(3);
        match generate_group(4, &mut rng) {
            Err(CryptoError::GenerationBudget { bit_length: 4, .. }) => {}
            other => panic!("expected generation budget error, got {other:?}"),
        }
    }

    #[test]
    fn primality_spot_checks() {
        assert!(is_probable_prime(&BigUint::from(2u32)));
        assert!(is_probable_prime(&BigUint::from(23u32)));
        assert!(is_probable_prime(&BigUint::from(24611u32)));
        assert!(is_probable_prime(&BigUint::from(49223u32)));
        assert!(!is_probable_prime(&BigUint::from(1u32)));
        assert!(!is_probable_prime(&BigUint::from(49221u32)));
        // Carmichael number 561 = 3 * 11 * 17 must be rejected.
        assert!(!is_probable_prime(&BigUint::from(561u32)));
    }
}
