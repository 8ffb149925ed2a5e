//! Text formats for keys and ciphertext vectors.
//!
//! Key files are `key=value` lines with lowercase hex values: `p`, `q`, `g`,
//! `h`, and optionally the secret exponent `x`. Ciphertext vectors start
//! with an `n=<count>` header followed by one `<c1> <c2>` hex pair per line.

use num_bigint::BigUint;

use super::elgamal::Ciphertext;
use super::group::GroupParams;
use super::CryptoError;

/// A parsed key file: group parameters, the public key, and the secret
/// exponent when present.
#[derive(Debug, Clone)]
pub struct KeyFile {
    pub params: GroupParams,
    pub pk: BigUint,
    pub sk: Option<BigUint>,
}

fn hex(value: &BigUint) -> String {
    format!("{value:x}")
}

fn parse_hex(field: &str, value: &str) -> Result<BigUint, CryptoError> {
    if value.is_empty() {
        return Err(CryptoError::Parse(format!("{field} has an empty value")));
    }
    BigUint::parse_bytes(value.as_bytes(), 16)
        .ok_or_else(|| CryptoError::Parse(format!("{field} is not lowercase hex: {value:?}")))
}

/// Render a key file. Include `sk` only in files that stay private.
pub fn write_key_file(params: &GroupParams, pk: &BigUint, sk: Option<&BigUint>) -> String {
    let mut out = String::new();
    out.push_str(&format!("p={}\n", hex(params.p())));
    out.push_str(&format!("q={}\n", hex(params.q())));
    out.push_str(&format!("g={}\n", hex(params.g())));
    out.push_str(&format!("h={}\n", hex(pk)));
    if let Some(sk) = sk {
        out.push_str(&format!("x={}\n", hex(sk)));
    }
    out
}

/// Parse and validate a key file: the group must verify, `h` must lie in
/// the message subgroup, and when `x` is present it must reproduce `h`.
pub fn parse_key_file(text: &str) -> Result<KeyFile, CryptoError> {
    let mut fields: [Option<BigUint>; 5] = [None, None, None, None, None];
    const NAMES: [&str; 5] = ["p", "q", "g", "h", "x"];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CryptoError::Parse(format!("line {}: expected key=value", lineno + 1))
        })?;
        let slot = NAMES
            .iter()
            .position(|n| *n == key)
            .ok_or_else(|| CryptoError::Parse(format!("unknown key {key:?}")))?;
        if fields[slot].is_some() {
            return Err(CryptoError::Parse(format!("duplicate key {key:?}")));
        }
        fields[slot] = Some(parse_hex(key, value)?);
    }
    let [p, q, g, h, x] = fields;
    let missing = |name: &str| CryptoError::Parse(format!("missing key {name:?}"));
    let params = GroupParams::new(
        p.ok_or_else(|| missing("p"))?,
        q.ok_or_else(|| missing("q"))?,
        g.ok_or_else(|| missing("g"))?,
    )?;
    let pk = h.ok_or_else(|| missing("h"))?;
    if !params.in_subgroup(&pk) {
        return Err(CryptoError::NotInSubgroup);
    }
    if let Some(sk) = &x {
        if sk.bits() == 0 || sk >= params.q() {
            return Err(CryptoError::Parse("x outside [1, q)".into()));
        }
        if params.pow_g(sk) != pk {
            return Err(CryptoError::Parse("h does not equal g^x".into()));
        }
    }
    Ok(KeyFile { params, pk, sk: x })
}

/// Render a ciphertext vector with its length header.
pub fn ciphertexts_to_string(cts: &[Ciphertext]) -> String {
    let mut out = format!("n={}\n", cts.len());
    for ct in cts {
        out.push_str(&format!("{} {}\n", hex(&ct.c1), hex(&ct.c2)));
    }
    out
}

/// Parse a ciphertext vector, enforcing the declared length.
pub fn ciphertexts_from_str(text: &str) -> Result<Vec<Ciphertext>, CryptoError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| CryptoError::Parse("empty ciphertext block".into()))?;
    let count: usize = header
        .trim()
        .strip_prefix("n=")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| CryptoError::Parse(format!("bad header {header:?}")))?;
    let mut out = Vec::with_capacity(count);
    for line in lines {
        let mut parts = line.trim().split_ascii_whitespace();
        let c1 = parts
            .next()
            .ok_or_else(|| CryptoError::Parse("missing c1".into()))?;
        let c2 = parts
            .next()
            .ok_or_else(|| CryptoError::Parse("missing c2".into()))?;
        if parts.next().is_some() {
            return Err(CryptoError::Parse(format!("trailing fields in {line:?}")));
        }
        out.push(Ciphertext {
            c1: parse_hex("c1", c1)?,
            c2: parse_hex("c2", c2)?,
        });
    }
    if out.len() != count {
        return Err(CryptoError::Parse(format!(
            "header says {count} ciphertexts, found {}",
            out.len()
        )));
    }
    Ok(out)
}
