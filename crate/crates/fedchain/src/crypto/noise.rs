//! Exact discrete Gaussian sampling.
//!
//! The sampler works entirely in rational arithmetic: Bernoulli(exp(-x))
//! trials drive a geometric sampler, the geometric sampler drives a discrete
//! Laplace, and the Laplace proposals are thinned by rejection into the
//! discrete Gaussian. No floating-point approximation of exp is involved,
//! so the output distribution is exact for any rational sigma.

use num_bigint::{BigInt, BigUint, RandBigInt};
use num_rational::Ratio;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;

use super::CryptoError;

/// Bernoulli(gamma) for rational gamma in [0, 1].
fn sample_bernoulli<R: Rng + ?Sized>(gamma: &Ratio<BigUint>, rng: &mut R) -> bool {
    debug_assert!(gamma.numer() <= gamma.denom());
    rng.gen_biguint_below(gamma.denom()) < *gamma.numer()
}

/// Bernoulli(exp(-gamma)) for gamma in [0, 1], via the alternating-series
/// trick: run Bernoulli(gamma / k) for k = 1, 2, ... until the first failure
/// and accept when the failure index is odd.
fn sample_bernoulli_exp1<R: Rng + ?Sized>(gamma: &Ratio<BigUint>, rng: &mut R) -> bool {
    let mut k = BigUint::one();
    loop {
        let step = Ratio::new(gamma.numer().clone(), gamma.denom() * &k);
        if sample_bernoulli(&step, rng) {
            k += 1u8;
        } else {
            break;
        }
    }
    (k % 2u8).is_one()
}

/// Bernoulli(exp(-gamma)) for any rational gamma >= 0, by splitting off
/// unit-size factors.
fn sample_bernoulli_exp<R: Rng + ?Sized>(gamma: &Ratio<BigUint>, rng: &mut R) -> bool {
    let one = Ratio::<BigUint>::one();
    let mut rest = gamma.clone();
    while rest > one {
        if !sample_bernoulli_exp1(&one, rng) {
            return false;
        }
        rest -= &one;
    }
    sample_bernoulli_exp1(&rest, rng)
}

/// Geometric sampler with success probability 1 - exp(-x) for rational
/// x > 0, counting failures before the first success.
fn sample_geometric_exp<R: Rng + ?Sized>(x: &Ratio<BigUint>, rng: &mut R) -> BigUint {
    let num = x.numer();
    let den = x.denom();
    // Low bits: uniform u < den accepted with probability exp(-u/den).
    let low = loop {
        let candidate = rng.gen_biguint_below(den);
        if sample_bernoulli_exp(&Ratio::new(candidate.clone(), den.clone()), rng) {
            break candidate;
        }
    };
    // High bits: a run of Bernoulli(exp(-1)) successes.
    let one = Ratio::<BigUint>::one();
    let mut high = BigUint::zero();
    while sample_bernoulli_exp1(&one, rng) {
        high += 1u8;
    }
    (low + den * high) / num
}

/// Discrete Laplace with rational scale t > 0: P(y) proportional to
/// exp(-|y| / t) over the integers.
fn sample_discrete_laplace<R: Rng + ?Sized>(scale: &Ratio<BigUint>, rng: &mut R) -> BigInt {
    let inv = Ratio::new(scale.denom().clone(), scale.numer().clone());
    loop {
        let negative = rng.gen::<bool>();
        let magnitude = sample_geometric_exp(&inv, rng);
        if negative && magnitude.is_zero() {
            // Zero already counted on the positive branch.
            continue;
        }
        let value = BigInt::from(magnitude);
        return if negative { -value } else { value };
    }
}

/// Discrete Gaussian with rational sigma > 0: P(y) proportional to
/// exp(-y^2 / (2 sigma^2)) over the integers. Proposals come from a
/// discrete Laplace with scale t = floor(sigma) + 1.
fn sample_discrete_gaussian_exact<R: Rng + ?Sized>(
    sigma: &Ratio<BigUint>,
    rng: &mut R,
) -> BigInt {
    let t = sigma.floor().to_integer() + BigUint::one();
    let scale = Ratio::from_integer(t);
    let sigma2 = sigma * sigma;
    let mean = &sigma2 / &scale;
    let denom = Ratio::from_integer(BigUint::from(2u8)) * &sigma2;
    loop {
        let y = sample_discrete_laplace(&scale, rng);
        let y_abs = Ratio::from_integer(y.magnitude().clone());
        let diff = if y_abs >= mean {
            &y_abs - &mean
        } else {
            &mean - &y_abs
        };
        let gamma = &diff * &diff / &denom;
        if sample_bernoulli_exp(&gamma, rng) {
            return y;
        }
    }
}

/// Convert a finite nonnegative f64 into the exact rational it represents.
fn sigma_to_ratio(sigma: f64) -> Result<Ratio<BigUint>, CryptoError> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(CryptoError::InvalidConfig(format!(
            "sigma must be finite and nonnegative, got {sigma}"
        )));
    }
    let exact = Ratio::<BigInt>::from_float(sigma)
        .ok_or_else(|| CryptoError::InvalidConfig("sigma is not representable".into()))?;
    Ok(Ratio::new(
        exact.numer().magnitude().clone(),
        exact.denom().magnitude().clone(),
    ))
}

/// Draw one sample from the discrete Gaussian with parameter `sigma`.
/// `sigma = 0` always yields 0.
pub fn sample_discrete_gaussian<R: Rng + ?Sized>(
    sigma: f64,
    rng: &mut R,
) -> Result<i64, CryptoError> {
    let ratio = sigma_to_ratio(sigma)?;
    if ratio.numer().is_zero() {
        return Ok(0);
    }
    let sample = sample_discrete_gaussian_exact(&ratio, rng);
    sample.to_i64().ok_or(CryptoError::InvalidConfig(
        "sample exceeds the i64 range".into(),
    ))
}

/// Add independent discrete Gaussian noise to every coordinate in place.
/// `sigma = 0` leaves the vector untouched.
pub fn add_discrete_gaussian<R: Rng + ?Sized>(
    values: &mut [i64],
    sigma: f64,
    rng: &mut R,
) -> Result<(), CryptoError> {
    let ratio = sigma_to_ratio(sigma)?;
    if ratio.numer().is_zero() {
        return Ok(());
    }
    for v in values.iter_mut() {
        let noise = sample_discrete_gaussian_exact(&ratio, rng)
            .to_i64()
            .ok_or(CryptoError::InvalidConfig(
                "sample exceeds the i64 range".into(),
            ))?;
        *v += noise;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn sigma_zero_is_identity() {
        let mut rng = seeded_rng(5);
        let mut values = vec![3, -7, 0, 42];
        add_discrete_gaussian(&mut values, 0.0, &mut rng).unwrap();
        assert_eq!(values, vec![3, -7, 0, 42]);
        assert_eq!(sample_discrete_gaussian(0.0, &mut rng).unwrap(), 0);
    }

    #[test]
    fn invalid_sigma_rejected() {
        let mut rng = seeded_rng(5);
        assert!(sample_discrete_gaussian(-1.0, &mut rng).is_err());
        assert!(sample_discrete_gaussian(f64::NAN, &mut rng).is_err());
        assert!(sample_discrete_gaussian(f64::INFINITY, &mut rng).is_err());
    }

    #[test]
    fn sampler_is_deterministic_under_a_fixed_seed() {
        let draw = |seed| {
            let mut rng = seeded_rng(seed);
            (0..32)
                .map(|_| sample_discrete_gaussian(4.0, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn bernoulli_exp_matches_closed_form() {
        // P[Bernoulli(exp(-1)) = 1] = 0.3679; estimate over 40k trials.
        let mut rng = seeded_rng(11);
        let one = Ratio::<BigUint>::one();
        let trials = 40_000;
        let hits = (0..trials)
            .filter(|_| sample_bernoulli_exp(&one, &mut rng))
            .count();
        let rate = hits as f64 / trials as f64;
        assert!(
            (rate - (-1.0f64).exp()).abs() < 0.01,
            "exp(-1) acceptance rate off: {rate}"
        );
    }

    #[test]
    fn geometric_mean_matches_closed_form() {
        // E[Geom(1 - exp(-x))] = 1 / (exp(x) - 1); x = 1/4 gives ~3.5208.
        let mut rng = seeded_rng(13);
        let x = Ratio::new(BigUint::from(1u8), BigUint::from(4u8));
        let trials = 40_000u32;
        let total: f64 = (0..trials)
            .map(|_| sample_geometric_exp(&x, &mut rng).to_f64().unwrap())
            .sum();
        let mean = total / trials as f64;
        let expected = 1.0 / (0.25f64.exp() - 1.0);
        assert!(
            (mean - expected).abs() < 0.1,
            "geometric mean off: {mean} vs {expected}"
        );
    }

    #[test]
    fn moments_match_sigma_four() {
        // At sigma = 4 the discrete Gaussian has mean 0 and variance within
        // a negligible margin of sigma^2 = 16.
        let mut rng = seeded_rng(17);
        let n = 100_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| sample_discrete_gaussian(4.0, &mut rng).unwrap() as f64)
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.1, "mean drifted: {mean}");
        assert!((var - 16.0).abs() < 0.7, "variance drifted: {var}");
    }

    #[test]
    fn histogram_tracks_exact_density() {
        // Total-variation distance between 100k draws at sigma = 4 and the
        // exact density, truncated where the tail mass is negligible.
        let mut rng = seeded_rng(19);
        let n = 100_000usize;
        let half_width = 40i64;
        let mut counts = vec![0u64; (2 * half_width + 1) as usize];
        for _ in 0..n {
            let s = sample_discrete_gaussian(4.0, &mut rng).unwrap();
            assert!(s.abs() <= half_width, "tail sample far outside 10 sigma");
            counts[(s + half_width) as usize] += 1;
        }
        let sigma2 = 16.0f64;
        let weights: Vec<f64> = (-half_width..=half_width)
            .map(|y| (-(y * y) as f64 / (2.0 * sigma2)).exp())
            .collect();
        let z: f64 = weights.iter().sum();
        let tv: f64 = counts
            .iter()
            .zip(&weights)
            .map(|(&c, w)| (c as f64 / n as f64 - w / z).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.03, "TV distance too large: {tv}");
    }

    #[test]
    fn noised_vector_shifts_every_coordinate_independently() {
        let mut rng = seeded_rng(23);
        let mut values = vec![0i64; 2_000];
        add_discrete_gaussian(&mut values, 4.0, &mut rng).unwrap();
        let distinct: std::collections::HashSet<i64> = values.iter().copied().collect();
        assert!(distinct.len() > 5, "noise collapsed to too few values");
        let mean = values.iter().sum::<i64>() as f64 / values.len() as f64;
        assert!(mean.abs() < 0.5, "noise mean drifted: {mean}");
    }
}
