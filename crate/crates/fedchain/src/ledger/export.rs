//! Line-delimited JSON chain export: one object per block, fields in
//! struct order, hashes as lowercase hex. Import re-validates every
//! field so a tampered file either fails to parse or fails `verify_blocks`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{hex, Block, LedgerError, PayloadKind, Transaction};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TxWire {
    sender: String,
    digest: String,
    kind: String,
    round: u64,
    timestamp: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockWire {
    index: u64,
    prev_hash: String,
    transactions: Vec<TxWire>,
    tx_root: String,
    nonce: u64,
    timestamp: u64,
    hash: String,
}

fn to_wire(block: &Block) -> BlockWire {
    BlockWire {
        index: block.index,
        prev_hash: hex(&block.prev_hash),
        transactions: block
            .transactions
            .iter()
            .map(|tx| TxWire {
                sender: tx.sender.clone(),
                digest: hex(&tx.digest),
                kind: tx.kind.as_str().to_string(),
                round: tx.round,
                timestamp: tx.timestamp,
            })
            .collect(),
        tx_root: hex(&block.tx_root),
        nonce: block.nonce,
        timestamp: block.timestamp,
        hash: hex(&block.hash),
    }
}

/// Exactly 64 lowercase hex digits -> 32 bytes.
fn unhex32(s: &str, what: &str, line: usize) -> Result<[u8; 32], LedgerError> {
    let malformed = || LedgerError::Parse(format!("line {line}: {what} is not 64 lowercase hex digits"));
    if s.len() != 64 {
        return Err(malformed());
    }
    let mut out = [0u8; 32];
    for (i, byte) in out.iter_mut().enumerate() {
        let pair = &s[2 * i..2 * i + 2];
        if pair.bytes().any(|b| !matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(malformed());
        }
        *byte = u8::from_str_radix(pair, 16).map_err(|_| malformed())?;
    }
    Ok(out)
}

fn kind_from_str(s: &str, line: usize) -> Result<PayloadKind, LedgerError> {
    match s {
        "update" => Ok(PayloadKind::Update),
        "validation" => Ok(PayloadKind::Validation),
        "registration" => Ok(PayloadKind::Registration),
        other => Err(LedgerError::Parse(format!(
            "line {line}: unknown transaction kind {other:?}"
        ))),
    }
}

fn from_wire(wire: BlockWire, line: usize) -> Result<Block, LedgerError> {
    let mut transactions = Vec::with_capacity(wire.transactions.len());
    for tx in wire.transactions {
        transactions.push(Transaction {
            sender: tx.sender,
            digest: unhex32(&tx.digest, "transaction digest", line)?,
            kind: kind_from_str(&tx.kind, line)?,
            round: tx.round,
            timestamp: tx.timestamp,
        });
    }
    Ok(Block {
        index: wire.index,
        prev_hash: unhex32(&wire.prev_hash, "prev_hash", line)?,
        transactions,
        tx_root: unhex32(&wire.tx_root, "tx_root", line)?,
        nonce: wire.nonce,
        timestamp: wire.timestamp,
        hash: unhex32(&wire.hash, "hash", line)?,
    })
}

/// Writes one JSON object per block, in order, each terminated by `\n`.
pub fn export_chain<W: Write>(blocks: &[Block], mut writer: W) -> Result<(), LedgerError> {
    for block in blocks {
        let line = serde_json::to_string(&to_wire(block))
            .map_err(|e| LedgerError::Parse(format!("serialize block {}: {e}", block.index)))?;
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn export_chain_file(blocks: &[Block], path: &Path) -> Result<(), LedgerError> {
    export_chain(blocks, BufWriter::new(File::create(path)?))
}

/// Parses an export back into blocks. Shape and hex are validated here;
/// hash correctness is the job of `verify_blocks`.
pub fn import_chain<R: Read>(reader: R) -> Result<Vec<Block>, LedgerError> {
    let mut blocks = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let wire: BlockWire = serde_json::from_str(&line)
            .map_err(|e| LedgerError::Parse(format!("line {line_no}: {e}")))?;
        blocks.push(from_wire(wire, line_no)?);
    }
    if blocks.is_empty() {
        return Err(LedgerError::Parse("export contains no blocks".to_string()));
    }
    Ok(blocks)
}

pub fn import_chain_file(path: &Path) -> Result<Vec<Block>, LedgerError> {
    import_chain(File::open(path)?)
}
