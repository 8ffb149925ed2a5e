//! The KGC/server/client protocol actors and the synchronous round
//! primitives: key distribution, local training on private shards, the
//! quantize-noise-encrypt submission pipeline, and homomorphic aggregation
//! into the global model.
//!
//! The privacy boundary is structural. A [`ClientSubmission`] carries only
//! ciphertexts and the ledger transaction anchoring them; the ciphertext
//! list is not exposed outside this module, so the server-side code path
//! holds individual updates only in encrypted form and sees plaintext only
//! as the decrypted *sum* across the full roster.

mod config;
mod driver;

pub use config::{reports_to_csv, RoundReport, RunConfig, METRICS_CSV_HEADER};
pub use driver::{
    run_training, validate_model_hook, ModelKind, RunOptions, RunOutcome, ValidationRecord,
    EARLY_STOP_MIN_DELTA, EARLY_STOP_PATIENCE,
};

use std::collections::BTreeSet;

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::crypto::{
    add_discrete_gaussian, aggregate_decrypt, ciphertexts_to_string, encrypt_update,
    generate_group, keygen, quantize, AggregationConfig, Ciphertext, CryptoError, GroupParams,
    KeyPair,
};
use crate::data::{DataError, Dataset};
use crate::ledger::{Chain, LedgerError, PayloadKind, Role, Transaction};
use crate::nn::{Model, NnError, Tensor};
use crate::rng::derive_rng;

/// Party id the server registers under.
pub const SERVER_ID: &str = "server";
/// Party id the auditor registers under.
pub const AUDITOR_ID: &str = "auditor";

/// Errors from setup, local training, submission, aggregation, and the
/// round driver.
#[derive(Debug, thiserror::Error)]
pub enum FederationError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("client {client} has an empty shard")]
    EmptyShard { client: String },
    #[error("synchronous round violation: {0}")]
    Synchrony(String),
    #[error("round {round} aborted: {source}")]
    RoundAbort {
        round: u64,
        #[source]
        source: Box<FederationError>,
    },
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Key generation center: the single group and keypair of a simulation,
/// plus the ids it has issued credentials to.
#[derive(Debug, Clone)]
pub struct KgcState {
    group: GroupParams,
    keypair: KeyPair,
    roster: Vec<String>,
}

impl KgcState {
    pub fn group(&self) -> &GroupParams {
        &self.group
    }

    pub fn public_key(&self) -> &BigUint {
        self.keypair.pk()
    }

    /// Every party issued credentials, server first.
    pub fn roster(&self) -> &[String] {
        &self.roster
    }
}

/// A client's credentials: the group and the public key, never the secret.
#[derive(Debug, Clone)]
pub struct ClientCredential {
    pub id: String,
    pub group: GroupParams,
    pub pk: BigUint,
}

/// The server's credentials: the group and the full keypair.
#[derive(Debug, Clone)]
pub struct ServerCredential {
    pub id: String,
    pub group: GroupParams,
    pub keypair: KeyPair,
}

/// Generate the group and keypair, issue credentials, and register every
/// party on the ledger. Clients receive the public key only; the server
/// credential carries the decryption key.
pub fn kgc_setup(
    n_clients: usize,
    group_bits: u32,
    seed: u64,
    chain: &mut Chain,
) -> Result<(KgcState, ServerCredential, Vec<ClientCredential>), FederationError> {
    if n_clients == 0 {
        return Err(FederationError::Config(
            "at least one client is required".into(),
        ));
    }
    let group = generate_group(group_bits, &mut derive_rng(seed, "group", &[]))?;
    let keypair = keygen(&group, &mut derive_rng(seed, "keygen", &[]));
    let pk_bytes = keypair.pk().to_bytes_be();
    chain.register(SERVER_ID, Role::Server, &pk_bytes)?;
    let mut roster = vec![SERVER_ID.to_string()];
    let mut clients = Vec::with_capacity(n_clients);
    for i in 0..n_clients {
        let id = format!("client-{i}");
        chain.register(&id, Role::Client, &pk_bytes)?;
        roster.push(id.clone());
        clients.push(ClientCredential {
            id,
            group: group.clone(),
            pk: keypair.pk().clone(),
        });
    }
    let server = ServerCredential {
        id: SERVER_ID.to_string(),
        group: group.clone(),
        keypair: keypair.clone(),
    };
    Ok((
        KgcState {
            group,
            keypair,
            roster,
        },
        server,
        clients,
    ))
}

/// A client actor: its private shard, local model, and submission
/// parameters.
#[derive(Debug, Clone)]
pub struct ClientState {
    id: String,
    shard: Dataset,
    local_model: Model,
    config: AggregationConfig,
    group: GroupParams,
    pk: BigUint,
}

impl ClientState {
    pub fn new(
        credential: ClientCredential,
        shard: Dataset,
        local_model: Model,
        config: AggregationConfig,
    ) -> Self {
        Self {
            id: credential.id,
            shard,
            local_model,
            config,
            group: credential.group,
            pk: credential.pk,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn shard_len(&self) -> usize {
        self.shard.len()
    }
}

/// Local-training knobs for one round on one client.
///
/// The batch order derives from `(seed, round, epoch)` and not from the
/// client id, so clients holding identical shards under identical seeds
/// produce identical deltas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub round: u64,
}

/// Copy the shard rows at `idxs` into a fresh batch tensor.
fn gather(
    images: &Tensor,
    labels: &[usize],
    idxs: &[usize],
) -> Result<(Tensor, Vec<usize>), NnError> {
    let shape = images.shape();
    let row: usize = shape[1..].iter().product();
    let data = images.data();
    let mut out = Vec::with_capacity(idxs.len() * row);
    let mut out_labels = Vec::with_capacity(idxs.len());
    for &i in idxs {
        out.extend_from_slice(&data[i * row..(i + 1) * row]);
        out_labels.push(labels[i]);
    }
    let mut batch_shape = shape.to_vec();
    batch_shape[0] = idxs.len();
    Ok((Tensor::from_vec(&batch_shape, out)?, out_labels))
}

/// Load the broadcast global state, run `epochs` of minibatch SGD on the
/// client's shard, and return the `(local - global)` state delta.
pub fn client_local_train(
    client: &mut ClientState,
    global_state: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<f64>, FederationError> {
    if client.shard.is_empty() {
        return Err(FederationError::EmptyShard {
            client: client.id.clone(),
        });
    }
    if cfg.batch_size == 0 {
        return Err(FederationError::Config(
            "batch_size must be at least 1".into(),
        ));
    }
    client.local_model.load_state_vector(global_state)?;
    let images = client.shard.images_nchw();
    let labels = client.shard.labels();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..client.shard.len()).collect();
        order.shuffle(&mut derive_rng(
            cfg.seed,
            "local-train",
            &[cfg.round, epoch as u64],
        ));
        for batch_idxs in order.chunks(cfg.batch_size) {
            let (batch, batch_labels) = gather(&images, labels, batch_idxs)?;
            let (_, cache) = client.local_model.forward(&batch, true)?;
            let grads = client.local_model.backward(&cache, &batch_labels)?;
            client.local_model.sgd_step(&grads, cfg.learning_rate);
        }
    }
    let local = client.local_model.state_vector();
    Ok(local
        .iter()
        .zip(global_state)
        .map(|(l, g)| l - g)
        .collect())
}

/// One client's encrypted round submission: the ciphertext vector and the
/// ledger transaction whose digest commits to its canonical serialization.
#[derive(Debug, Clone)]
pub struct ClientSubmission {
    client_id: String,
    ciphertexts: Vec<Ciphertext>,
    tx: Transaction,
}

impl ClientSubmission {
    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn transaction(&self) -> &Transaction {
        &self.tx
    }

    pub fn dimension(&self) -> usize {
        self.ciphertexts.len()
    }
}

/// Quantize, noise, and encrypt a delta, then anchor the ciphertext digest
/// on the ledger. There is no plaintext side channel: the payload stored
/// off-chain is the ciphertext serialization itself.
pub fn client_submit<R: Rng + ?Sized>(
    client: &ClientState,
    delta: &[f64],
    round: u64,
    chain: &mut Chain,
    rng: &mut R,
) -> Result<ClientSubmission, FederationError> {
    let mut quantized = quantize(delta, &client.config)?;
    add_discrete_gaussian(&mut quantized.values, client.config.sigma, rng)?;
    let ciphertexts = encrypt_update(&quantized, &client.pk, &client.group, &client.config, rng)?;
    let payload = ciphertexts_to_string(&ciphertexts);
    let tx = chain.submit_tx(&client.id, payload.as_bytes(), PayloadKind::Update, round)?;
    Ok(ClientSubmission {
        client_id: client.id.clone(),
        ciphertexts,
        tx,
    })
}

/// The aggregating server: the global model, the decryption key, and the
/// synchronous round contract.
#[derive(Debug, Clone)]
pub struct ServerState {
    global: Model,
    sk: BigUint,
    group: GroupParams,
    round: u64,
    roster: Vec<String>,
    config: AggregationConfig,
}

impl ServerState {
    /// `roster` is the set of client ids whose submission every round must
    /// contain exactly once.
    pub fn new(
        global: Model,
        credential: &ServerCredential,
        roster: Vec<String>,
        config: AggregationConfig,
    ) -> Self {
        Self {
            global,
            sk: credential.keypair.sk().clone(),
            group: credential.group.clone(),
            round: 0,
            roster,
            config,
        }
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn global(&self) -> &Model {
        &self.global
    }

    pub fn into_global(self) -> Model {
        self.global
    }
}

/// Combine the roster's submissions homomorphically, decrypt the
/// per-coordinate sums, average uniformly, and fold the averaged delta into
/// the global model. Aggregation refuses to run on anything other than
/// exactly one submission per roster client.
pub fn server_aggregate(
    server: &mut ServerState,
    submissions: &[ClientSubmission],
) -> Result<(), FederationError> {
    let mut expected: BTreeSet<&str> = server.roster.iter().map(String::as_str).collect();
    for submission in submissions {
        if !expected.remove(submission.client_id.as_str()) {
            return Err(FederationError::Synchrony(format!(
                "unexpected or duplicate submission from {}",
                submission.client_id
            )));
        }
    }
    if !expected.is_empty() {
        let missing: Vec<&str> = expected.into_iter().collect();
        return Err(FederationError::Synchrony(format!(
            "missing submissions from {}",
            missing.join(", ")
        )));
    }
    let state_len = server.global.state_len();
    for submission in submissions {
        if submission.ciphertexts.len() != state_len {
            return Err(FederationError::Synchrony(format!(
                "{} submitted {} coordinates, expected {state_len}",
                submission.client_id,
                submission.ciphertexts.len()
            )));
        }
    }
    let vectors: Vec<Vec<Ciphertext>> = submissions
        .iter()
        .map(|s| s.ciphertexts.clone())
        .collect();
    let sums = aggregate_decrypt(&vectors, &server.sk, &server.group, &server.config)?;
    let n = submissions.len() as f64;
    let scale = server.config.scale as f64;
    let mut state = server.global.state_vector();
    for (coord, &sum) in state.iter_mut().zip(&sums) {
        *coord += sum as f64 / (n * scale);
    }
    server.global.load_state_vector(&state)?;
    server.round += 1;
    Ok(())
}
