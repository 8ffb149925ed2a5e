//! Simulated audit blockchain: a registry of parties behind a smart-contract
//! facade, a SHA-256 transaction pool, single-miner proof-of-work, and
//! authorized-only retrieval of off-chain payloads.
//!
//! Payloads never go on chain. A submission stores the raw bytes in a
//! content-addressed side store and enqueues only the 32-byte digest; mining
//! seals pending digests under proof-of-work. Timestamps are logical
//! counters so identical call sequences produce identical chains.

mod export;

pub use export::{export_chain, export_chain_file, import_chain, import_chain_file};

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use sha2::{Digest, Sha256};

/// Leading-zero-bit difficulty used by training runs.
pub const DEFAULT_DIFFICULTY: u32 = 8;

/// Errors from registry, pool, and retrieval operations. Chain validation
/// failures are ordinary return values, not errors.
#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("party {party} already registered with a different key")]
    IdentityConflict { party: String },
    #[error("party {party} is not authorized")]
    AccessDenied { party: String },
    #[error("digest {digest} not found in any mined block")]
    NotFound { digest: String },
    #[error("transaction pool is empty")]
    EmptyPool,
    #[error("stored payload no longer matches digest {digest}")]
    Corrupt { digest: String },
    #[error("chain export is malformed: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Party role in the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Client => "client",
            Role::Server => "server",
        }
    }
}

/// What a transaction's payload carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Update,
    Validation,
    Registration,
}

impl PayloadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PayloadKind::Update => "update",
            PayloadKind::Validation => "validation",
            PayloadKind::Registration => "registration",
        }
    }
}

/// Smart-contract registry entry for one party. The ABI descriptor and
/// bytecode digest are synthesized deterministically; no contract VM exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractRecord {
    pub party: String,
    pub role: Role,
    pub pk_fingerprint: [u8; 32],
    pub abi: String,
    pub bytecode_digest: [u8; 32],
    pub registered_at: u64,
}

/// One pooled or mined transaction: only the payload digest goes on chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub sender: String,
    pub digest: [u8; 32],
    pub kind: PayloadKind,
    pub round: u64,
    pub timestamp: u64,
}

/// A sealed block. `hash` commits to the preimage
/// `u64-BE(index) || prev_hash || tx_root || u64-BE(timestamp) || u64-BE(nonce)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub index: u64,
    pub prev_hash: [u8; 32],
    pub transactions: Vec<Transaction>,
    pub tx_root: [u8; 32],
    pub nonce: u64,
    pub timestamp: u64,
    pub hash: [u8; 32],
}

/// Outcome of `verify_chain`: valid, or the first offending block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainCheck {
    Valid,
    BadBlock { index: u64, reason: String },
}

impl ChainCheck {
    pub fn is_valid(&self) -> bool {
        matches!(self, ChainCheck::Valid)
    }
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn tx_root_of(transactions: &[Transaction]) -> [u8; 32] {
    let mut concat = Vec::with_capacity(transactions.len() * 32);
    for tx in transactions {
        concat.extend_from_slice(&tx.digest);
    }
    sha256(&concat)
}

/// Bit-exact block hash preimage; see the struct docs for the layout.
fn block_preimage(index: u64, prev_hash: &[u8; 32], tx_root: &[u8; 32], timestamp: u64, nonce: u64) -> [u8; 88] {
    let mut pre = [0u8; 88];
    pre[0..8].copy_from_slice(&index.to_be_bytes());
    pre[8..40].copy_from_slice(prev_hash);
    pre[40..72].copy_from_slice(tx_root);
    pre[72..80].copy_from_slice(&timestamp.to_be_bytes());
    pre[80..88].copy_from_slice(&nonce.to_be_bytes());
    pre
}

fn leading_zero_bits(hash: &[u8; 32]) -> u32 {
    let mut bits = 0u32;
    for &byte in hash {
        if byte == 0 {
            bits += 8;
        } else {
            bits += byte.leading_zeros();
            break;
        }
    }
    bits
}

/// The constant genesis block: index 0, zero prev-hash, no transactions,
/// nonce 0, timestamp 0.
pub fn genesis_block() -> Block {
    let prev_hash = [0u8; 32];
    let tx_root = tx_root_of(&[]);
    let hash = sha256(&block_preimage(0, &prev_hash, &tx_root, 0, 0));
    Block {
        index: 0,
        prev_hash,
        transactions: Vec::new(),
        tx_root,
        nonce: 0,
        timestamp: 0,
        hash,
    }
}

/// Validate a block sequence: genesis constant, consecutive indices, linked
/// prev-hashes, recomputed tx roots and hashes, and the difficulty bound on
/// every non-genesis block. Returns the first violation.
pub fn verify_blocks(blocks: &[Block], difficulty: u32) -> ChainCheck {
    let bad = |index: u64, reason: &str| ChainCheck::BadBlock {
        index,
        reason: reason.to_string(),
    };
    let Some(first) = blocks.first() else {
        return bad(0, "chain has no genesis block");
    };
    if *first != genesis_block() {
        return bad(0, "genesis differs from the constant genesis");
    }
    for (i, block) in blocks.iter().enumerate().skip(1) {
        let prev = &blocks[i - 1];
        if block.index != prev.index + 1 {
            return bad(block.index, "index not consecutive");
        }
        if block.prev_hash != prev.hash {
            return bad(block.index, "prev_hash does not link to predecessor");
        }
        if block.tx_root != tx_root_of(&block.transactions) {
            return bad(block.index, "tx_root does not match transactions");
        }
        let recomputed = sha256(&block_preimage(
            block.index,
            &block.prev_hash,
            &block.tx_root,
            block.timestamp,
            block.nonce,
        ));
        if block.hash != recomputed {
            return bad(block.index, "hash does not match preimage");
        }
        if leading_zero_bits(&block.hash) < difficulty {
            return bad(block.index, "hash misses the difficulty target");
        }
    }
    ChainCheck::Valid
}

/// The single-writer chain: registry, access policy, pending pool, sealed
/// blocks, and the off-chain content-addressed payload store.
#[derive(Debug, Clone)]
pub struct Chain {
    blocks: Vec<Block>,
    difficulty: u32,
    registry: BTreeMap<String, ContractRecord>,
    access: BTreeSet<String>,
    pool: VecDeque<Transaction>,
    store: HashMap<[u8; 32], Vec<u8>>,
    clock: u64,
}

impl Chain {
    pub fn new(difficulty: u32) -> Self {
        Self {
            blocks: vec![genesis_block()],
            difficulty,
            registry: BTreeMap::new(),
            access: BTreeSet::new(),
            pool: VecDeque::new(),
            store: HashMap::new(),
            clock: 0,
        }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn difficulty(&self) -> u32 {
        self.difficulty
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    pub fn record(&self, party: &str) -> Option<&ContractRecord> {
        self.registry.get(party)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Grant retrieval access to a party outside the registry (an external
    /// auditor). Registered parties are authorized automatically.
    pub fn grant_access(&mut self, party: &str) {
        self.access.insert(party.to_string());
    }

    /// Register a party. Re-registration with the same key is idempotent
    /// and enqueues nothing; a different key is an identity conflict.
    pub fn register(
        &mut self,
        party: &str,
        role: Role,
        pk_bytes: &[u8],
    ) -> Result<ContractRecord, LedgerError> {
        let fingerprint = sha256(pk_bytes);
        if let Some(existing) = self.registry.get(party) {
            if existing.pk_fingerprint == fingerprint {
                return Ok(existing.clone());
            }
            return Err(LedgerError::IdentityConflict {
                party: party.to_string(),
            });
        }
        let timestamp = self.tick();
        let fp_hex = hex(&fingerprint);
        let record = ContractRecord {
            party: party.to_string(),
            role,
            pk_fingerprint: fingerprint,
            abi: format!("abi(v1,{party},{},{fp_hex})", role.as_str()),
            bytecode_digest: sha256(
                format!("bytecode\n{party}\n{}\n{fp_hex}\n", role.as_str()).as_bytes(),
            ),
            registered_at: timestamp,
        };
        self.registry.insert(party.to_string(), record.clone());
        self.access.insert(party.to_string());
        let payload = registration_payload(party, role, pk_bytes);
        let digest = sha256(&payload);
        self.store.insert(digest, payload);
        self.pool.push_back(Transaction {
            sender: party.to_string(),
            digest,
            kind: PayloadKind::Registration,
            round: 0,
            timestamp,
        });
        Ok(record)
    }

    /// Digest a payload, park the raw bytes off chain, and enqueue the
    /// transaction.
    pub fn submit_tx(
        &mut self,
        sender: &str,
        payload: &[u8],
        kind: PayloadKind,
        round: u64,
    ) -> Result<Transaction, LedgerError> {
        if !self.registry.contains_key(sender) {
            return Err(LedgerError::AccessDenied {
                party: sender.to_string(),
            });
        }
        let timestamp = self.tick();
        let digest = sha256(payload);
        self.store.insert(digest, payload.to_vec());
        let tx = Transaction {
            sender: sender.to_string(),
            digest,
            kind,
            round,
            timestamp,
        };
        self.pool.push_back(tx.clone());
        Ok(tx)
    }

    /// Seal up to `max_tx_per_block` pooled transactions (FIFO) into a new
    /// block, searching nonces from 0 until the hash meets the difficulty.
    pub fn mine(&mut self, max_tx_per_block: usize) -> Result<Block, LedgerError> {
        if self.pool.is_empty() {
            return Err(LedgerError::EmptyPool);
        }
        let take = max_tx_per_block.max(1).min(self.pool.len());
        let transactions: Vec<Transaction> = self.pool.drain(..take).collect();
        let tx_root = tx_root_of(&transactions);
        let prev = self.blocks.last().expect("chain always has genesis");
        let index = prev.index + 1;
        let prev_hash = prev.hash;
        let timestamp = self.tick();
        let mut nonce = 0u64;
        let hash = loop {
            let candidate = sha256(&block_preimage(index, &prev_hash, &tx_root, timestamp, nonce));
            if leading_zero_bits(&candidate) >= self.difficulty {
                break candidate;
            }
            nonce += 1;
        };
        let block = Block {
            index,
            prev_hash,
            transactions,
            tx_root,
            nonce,
            timestamp,
            hash,
        };
        self.blocks.push(block.clone());
        Ok(block)
    }

    /// Recheck every block and link; violations come back as values.
    pub fn verify(&self) -> ChainCheck {
        verify_blocks(&self.blocks, self.difficulty)
    }

    /// Fetch the payload behind a mined digest, for authorized parties only.
    /// Digests still in the pool are invisible.
    pub fn retrieve(&self, requester: &str, digest: &[u8; 32]) -> Result<Vec<u8>, LedgerError> {
        if !self.access.contains(requester) {
            return Err(LedgerError::AccessDenied {
                party: requester.to_string(),
            });
        }
        let mined = self
            .blocks
            .iter()
            .flat_map(|b| &b.transactions)
            .any(|tx| &tx.digest == digest);
        if !mined {
            return Err(LedgerError::NotFound {
                digest: hex(digest),
            });
        }
        let payload = self.store.get(digest).ok_or(LedgerError::NotFound {
            digest: hex(digest),
        })?;
        if sha256(payload) != *digest {
            return Err(LedgerError::Corrupt {
                digest: hex(digest),
            });
        }
        Ok(payload.clone())
    }
}

fn registration_payload(party: &str, role: Role, pk_bytes: &[u8]) -> Vec<u8> {
    format!("register\n{party}\n{}\n{}\n", role.as_str(), hex(pk_bytes)).into_bytes()
}
