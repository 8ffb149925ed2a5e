//! Bounded discrete-log recovery with baby-step giant-step.
//!
//! Decryption of a combined ciphertext yields g^m for the aggregate exponent
//! m; reading m back is a bounded search. BSGS does it in O(sqrt(B)) group
//! operations: a table of g^j for j < ceil(sqrt(B+1)) (baby steps), then
//! repeated multiplication by g^-m (giant steps) until a table hit.

use std::collections::HashMap;

use num_bigint::BigUint;
use num_traits::One;

use super::group::GroupParams;
use super::CryptoError;

/// Reusable baby-step table for repeated recoveries at a fixed bound.
pub struct DlogTable {
    baby: HashMap<BigUint, u64>,
    giant_factor: BigUint,
    stride: u64,
    bound: u64,
    p: BigUint,
}

impl DlogTable {
    /// Precompute the baby steps for exponents in [0, bound].
    pub fn new(params: &GroupParams, bound: u64) -> Self {
        let stride = (bound as f64).sqrt().ceil() as u64 + 1;
        let mut baby = HashMap::with_capacity(stride as usize);
        let mut e = BigUint::one();
        for j in 0..stride {
            baby.entry(e.clone()).or_insert(j);
            e = params.mul(&e, params.g());
        }
        // g^-stride = g^(q - stride mod q)
        let stride_mod_q = BigUint::from(stride) % params.q();
        let inv_exp = (params.q() - &stride_mod_q) % params.q();
        let giant_factor = params.pow_g(&inv_exp);
        Self {
            baby,
            giant_factor,
            stride,
            bound,
            p: params.p().clone(),
        }
    }

    /// Smallest m in [0, bound] with g^m = elem, or an out-of-bound error.
    pub fn recover(&self, elem: &BigUint) -> Result<u64, CryptoError> {
        let mut gamma = elem.clone();
        let giants = self.bound / self.stride + 1;
        for i in 0..=giants {
            if let Some(&j) = self.baby.get(&gamma) {
                let candidate = i * self.stride + j;
                if candidate <= self.bound {
                    return Ok(candidate);
                }
            }
            gamma = (&gamma * &self.giant_factor) % &self.p;
        }
        Err(CryptoError::DlogOutOfBound { bound: self.bound })
    }
}

/// One-shot bounded recovery. Builds a table and discards it; callers with
/// many recoveries at the same bound should hold a [`DlogTable`].
pub fn dlog_recover(
    elem: &BigUint,
    bound: u64,
    params: &GroupParams,
) -> Result<u64, CryptoError> {
    DlogTable::new(params, bound).recover(elem)
}
