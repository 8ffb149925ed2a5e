//! Exponential ElGamal over a safe-prime group, plus the discretization
//! pipeline that turns real-valued model updates into homomorphically
//! summable integers.
//!
//! Messages are encoded as exponents: `encode(m) = g^m mod p`, so the
//! componentwise product of two ciphertexts decrypts to the encoding of the
//! *sum* of the underlying messages. The aggregate exponent is read back with
//! a bounded baby-step giant-step search.

mod dlog;
mod elgamal;
mod group;
mod noise;
mod quantize;
mod serial;

pub use dlog::{dlog_recover, DlogTable};
pub use elgamal::{decrypt, encode, encrypt, encrypt_with_ephemeral, hom_combine, keygen, Ciphertext, KeyPair};
pub use group::{generate_group, GroupParams};
pub use noise::{add_discrete_gaussian, sample_discrete_gaussian};
pub use quantize::{
    aggregate_decrypt, dequantize, encrypt_update, quantize, AggregationConfig, QuantizedVector,
};
pub use serial::{
    ciphertexts_from_str, ciphertexts_to_string, parse_key_file, write_key_file, KeyFile,
};

use thiserror::Error;

/// Errors from group setup, encryption, recovery, and the update pipeline.
#[derive(Debug, Error)]
pub enum CryptoError {
    /// No safe prime of the requested size was found within the attempt budget.
    #[error("no safe prime of {bit_length} bits found within {attempts} attempts")]
    GenerationBudget { bit_length: u32, attempts: usize },

    /// Supplied group parameters violate the safe-prime subgroup invariants.
    #[error("invalid group parameters: {0}")]
    InvalidGroup(String),

    /// A value that must lie in the order-q subgroup does not.
    #[error("element is not in the order-q subgroup")]
    NotInSubgroup,

    /// A ciphertext component lies outside the subgroup.
    #[error("ciphertext components are not in the order-q subgroup")]
    InvalidCiphertext,

    /// No exponent in `[0, bound]` matches the group element.
    #[error("no discrete log in [0, {bound}]: aggregate overflow or tampering")]
    DlogOutOfBound { bound: u64 },

    /// Non-finite input where a real vector is required.
    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },

    /// A coordinate left the domain the group or modulus can represent.
    #[error("coordinate {index} out of range: {reason}")]
    ValueOutOfRange { index: usize, reason: String },

    /// Aggregation parameters violate their mutual invariants.
    #[error("invalid aggregation config: {0}")]
    InvalidConfig(String),

    /// Malformed key file or ciphertext serialization.
    #[error("parse error: {0}")]
    Parse(String),
}
