//! Discretization of real-valued updates and the encrypted-sum pipeline.
//!
//! Clients clip each coordinate to [-c, c], scale by s, and round half to
//! even. Before encryption each integer is centered into [0, M) by adding
//! M/2, so negative values become valid exponents; the server removes the
//! n * M/2 offset after summation. The dlog bound B caps |sum of client
//! values| per coordinate, which is why the recovery window after shifting
//! is [0, 2B] and the modulus must satisfy M > 2B.

use num_bigint::{BigInt, BigUint};
use rand::Rng;

use super::dlog::DlogTable;
use super::elgamal::{decrypt, encode, encrypt, Ciphertext};
use super::group::GroupParams;
use super::CryptoError;

/// A discretized update vector together with the parameters that shaped it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    pub values: Vec<i64>,
    pub scale: u64,
    pub clip: f64,
}

/// Parameters tying together the modular summation domain, the discrete-log
/// recovery bound, and the discretization scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationConfig {
    /// Modulus M for the centered summation domain.
    pub modulus: u64,
    /// Bound B on the absolute per-coordinate sum across clients.
    pub dlog_bound: u64,
    /// Discretization scale s.
    pub scale: u64,
    /// Clip radius c.
    pub clip: f64,
    /// Discrete Gaussian noise parameter (0 disables noise).
    pub sigma: f64,
}

impl AggregationConfig {
    /// Derive a config for `n_clients` from the discretization parameters:
    /// B = ceil(n*s*c) + ceil(6*sigma*sqrt(n)), M fixed at 2^32.
    pub fn derive(n_clients: usize, scale: u64, clip: f64, sigma: f64) -> Result<Self, CryptoError> {
        let modulus = 1u64 << 32;
        let n = n_clients as f64;
        if n_clients == 0 {
            return Err(CryptoError::InvalidConfig("n_clients must be >= 1".into()));
        }
        if scale == 0 {
            return Err(CryptoError::InvalidConfig("scale must be >= 1".into()));
        }
        if clip <= 0.0 || !clip.is_finite() {
            return Err(CryptoError::InvalidConfig("clip must be positive".into()));
        }
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(CryptoError::InvalidConfig("sigma must be >= 0".into()));
        }
        let bound = (n * scale as f64 * clip).ceil() + (6.0 * sigma * n.sqrt()).ceil();
        if bound >= (modulus / 2) as f64 {
            return Err(CryptoError::InvalidConfig(
                "derived dlog bound exceeds M/2".into(),
            ));
        }
        let config = Self {
            modulus,
            dlog_bound: bound as u64,
            scale,
            clip,
            sigma,
        };
        config.validate(n_clients)?;
        Ok(config)
    }

    /// Desk-scale defaults: s = 2^10, c = 1.0, sigma = 0, M = 2^32.
    pub fn desk_default(n_clients: usize) -> Result<Self, CryptoError> {
        Self::derive(n_clients, 1 << 10, 1.0, 0.0)
    }

    /// Check the mutual invariants for a given client count.
    pub fn validate(&self, n_clients: usize) -> Result<(), CryptoError> {
        if self.modulus <= 2 * self.dlog_bound {
            return Err(CryptoError::InvalidConfig(format!(
                "modulus {} must exceed 2 * dlog_bound {}",
                self.modulus, self.dlog_bound
            )));
        }
        let n = n_clients as f64;
        let required = n * self.scale as f64 * self.clip + 6.0 * self.sigma * n.sqrt();
        if (self.dlog_bound as f64) < required {
            return Err(CryptoError::InvalidConfig(format!(
                "dlog_bound {} below n*s*c + noise slack {:.1}",
                self.dlog_bound, required
            )));
        }
        Ok(())
    }
}

/// Clip to [-c, c], scale by s, round half to even.
pub fn quantize(values: &[f64], config: &AggregationConfig) -> Result<QuantizedVector, CryptoError> {
    let mut out = Vec::with_capacity(values.len());
    for (index, &v) in values.iter().enumerate() {
        if v.is_nan() {
            return Err(CryptoError::NonFinite { index });
        }
        let clipped = v.clamp(-config.clip, config.clip);
        out.push((clipped * config.scale as f64).round_ties_even() as i64);
    }
    Ok(QuantizedVector {
        values: out,
        scale: config.scale,
        clip: config.clip,
    })
}

/// Inverse of the discretization: value / scale per coordinate.
pub fn dequantize(q: &QuantizedVector) -> Vec<f64> {
    q.values.iter().map(|&v| v as f64 / q.scale as f64).collect()
}

/// Center each coordinate into [0, M) and encrypt its exponent encoding,
/// one ciphertext per coordinate.
pub fn encrypt_update<R: Rng + ?Sized>(
    q: &QuantizedVector,
    pk: &BigUint,
    params: &GroupParams,
    config: &AggregationConfig,
    rng: &mut R,
) -> Result<Vec<Ciphertext>, CryptoError> {
    let m = config.modulus as i128;
    let half = m / 2;
    let mut out = Vec::with_capacity(q.values.len());
    for (index, &v) in q.values.iter().enumerate() {
        let centered = (v as i128 + half).rem_euclid(m) as u64;
        if &BigUint::from(centered) >= params.q() {
            return Err(CryptoError::ValueOutOfRange {
                index,
                reason: format!("centered value {centered} exceeds the group order"),
            });
        }
        let elem = encode(params, &BigInt::from(centered));
        out.push(encrypt(params, pk, &elem, rng)?);
    }
    Ok(out)
}

/// Homomorphically sum one ciphertext vector per client and recover the
/// per-coordinate integer sums.
///
/// The aggregate exponent per coordinate is sum_i(v_i) + n * M/2; the search
/// window is shifted down by n * M/2 - B so BSGS only scans [0, 2B]. A miss
/// means the true sum left [-B, B]: overflow or tampering.
pub fn aggregate_decrypt(
    submissions: &[Vec<Ciphertext>],
    sk: &BigUint,
    params: &GroupParams,
    config: &AggregationConfig,
) -> Result<Vec<i64>, CryptoError> {
    let n = submissions.len();
    if n == 0 {
        return Err(CryptoError::InvalidConfig("no submissions".into()));
    }
    let dim = submissions[0].len();
    for s in submissions {
        if s.len() != dim {
            return Err(CryptoError::InvalidConfig(
                "submission dimensions disagree".into(),
            ));
        }
    }
    // The integer exponent sum can reach n * M; it must stay below q so the
    // group exponent never wraps.
    let total_span = BigUint::from(n as u64) * BigUint::from(config.modulus);
    if &total_span >= params.q() {
        return Err(CryptoError::InvalidConfig(
            "n * modulus must stay below the group order".into(),
        ));
    }

    let bound = config.dlog_bound;
    let offset = (n as u128) * (config.modulus as u128 / 2) - bound as u128;
    let offset_big = BigUint::from(offset);
    let shift_exp = (params.q() - (&offset_big % params.q())) % params.q();
    let shift = params.pow_g(&shift_exp);
    let table = DlogTable::new(params, 2 * bound);

    let mut sums = Vec::with_capacity(dim);
    for coord in 0..dim {
        let mut acc = submissions[0][coord].clone();
        for submission in &submissions[1..] {
            acc = super::elgamal::hom_combine(params, &acc, &submission[coord]);
        }
        let elem = decrypt(params, sk, &acc)?;
        let shifted = params.mul(&elem, &shift);
        let recovered = table.recover(&shifted)?;
        sums.push(recovered as i64 - bound as i64);
    }
    Ok(sums)
}
