//! Exponential ElGamal: keygen, exponent encoding, encryption, decryption,
//! and the homomorphic ciphertext product.

use num_bigint::{BigInt, BigUint, RandBigInt};
use num_traits::One;
use rand::Rng;

use super::group::GroupParams;
use super::CryptoError;

/// Secret exponent x in [1, q-1] and public element h = g^x mod p.
#[derive(Debug, Clone)]
pub struct KeyPair {
    sk: BigUint,
    pk: BigUint,
}

impl KeyPair {
    /// Assemble a keypair from parts, checking g^sk = pk.
    pub fn new(params: &GroupParams, sk: BigUint, pk: BigUint) -> Result<Self, CryptoError> {
        if sk < BigUint::one() || &sk >= params.q() {
            return Err(CryptoError::InvalidGroup("sk not in [1, q-1]".into()));
        }
        if params.pow_g(&sk) != pk {
            return Err(CryptoError::InvalidGroup("g^sk != pk".into()));
        }
        Ok(Self { sk, pk })
    }

    pub fn sk(&self) -> &BigUint {
        &self.sk
    }

    pub fn pk(&self) -> &BigUint {
        &self.pk
    }
}

/// An ElGamal ciphertext; both components lie in the order-q subgroup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    pub c1: BigUint,
    pub c2: BigUint,
}

/// Draw x uniform in [1, q-1] and publish h = g^x mod p.
pub fn keygen<R: Rng + ?Sized>(params: &GroupParams, rng: &mut R) -> KeyPair {
    let sk = rng.gen_biguint_range(&BigUint::one(), params.q());
    let pk = params.pow_g(&sk);
    KeyPair { sk, pk }
}

/// Encode a message as a subgroup element by exponentiation: g^(m mod q).
pub fn encode(params: &GroupParams, m: &BigInt) -> BigUint {
    let q = BigInt::from(params.q().clone());
    let reduced = ((m % &q) + &q) % &q;
    let e = reduced.to_biguint().expect("reduced exponent is nonnegative");
    params.pow_g(&e)
}

/// Encrypt a subgroup element under the public key with a fresh ephemeral
/// exponent: c1 = g^k, c2 = m * h^k.
pub fn encrypt<R: Rng + ?Sized>(
    params: &GroupParams,
    pk: &BigUint,
    m_elem: &BigUint,
    rng: &mut R,
) -> Result<Ciphertext, CryptoError> {
    let k = rng.gen_biguint_range(&BigUint::one(), params.q());
    encrypt_with_ephemeral(params, pk, m_elem, &k)
}

/// Encryption with a caller-chosen ephemeral exponent, for replaying a known
/// transcript. `k` must lie in [1, q-1].
pub fn encrypt_with_ephemeral(
    params: &GroupParams,
    pk: &BigUint,
    m_elem: &BigUint,
    k: &BigUint,
) -> Result<Ciphertext, CryptoError> {
    if !params.in_subgroup(m_elem) {
        return Err(CryptoError::NotInSubgroup);
    }
    if k < &BigUint::one() || k >= params.q() {
        return Err(CryptoError::InvalidGroup("ephemeral k not in [1, q-1]".into()));
    }
    let c1 = params.pow_g(k);
    let c2 = params.mul(m_elem, &pk.modpow(k, params.p()));
    Ok(Ciphertext { c1, c2 })
}

/// Recover the group element: c2 * (c1^x)^-1 mod p.
pub fn decrypt(
    params: &GroupParams,
    sk: &BigUint,
    ct: &Ciphertext,
) -> Result<BigUint, CryptoError> {
    if !params.in_subgroup(&ct.c1) || !params.in_subgroup(&ct.c2) {
        return Err(CryptoError::InvalidCiphertext);
    }
    let shared = ct.c1.modpow(sk, params.p());
    Ok(params.mul(&ct.c2, &params.inv(&shared)))
}

/// Componentwise ciphertext product. Decrypting the result yields the
/// product of the plaintext elements, i.e. the encoding of the exponent sum.
pub fn hom_combine(params: &GroupParams, a: &Ciphertext, b: &Ciphertext) -> Ciphertext {
    Ciphertext {
        c1: params.mul(&a.c1, &b.c1),
        c2: params.mul(&a.c2, &b.c2),
    }
}
