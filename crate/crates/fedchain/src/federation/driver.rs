//! The round driver: setup and registration, then per round broadcast,
//! (optionally threaded) local training, encrypted submission, homomorphic
//! aggregation, and mining, with a loss-plateau stopping rule and a final
//! auditor validation record.

use std::time::Instant;

use num_bigint::BigUint;

use crate::crypto::AggregationConfig;
use crate::data::{partition, Dataset};
use crate::ledger::{hex, sha256, Chain, PayloadKind, Role, Transaction};
use crate::nn::{build_ann, build_cnn, evaluate, save_checkpoint, AnnSpec, CnnSpec, Model, Tensor};
use crate::rng::derive_rng;

use super::config::{RoundReport, RunConfig};
use super::{
    client_local_train, client_submit, kgc_setup, server_aggregate, ClientState, FederationError,
    ServerState, TrainConfig, AUDITOR_ID,
};

/// Rounds without a sufficient test-loss improvement before training stops.
pub const EARLY_STOP_PATIENCE: usize = 5;
/// Minimum test-loss improvement that resets the patience counter.
pub const EARLY_STOP_MIN_DELTA: f64 = 1e-4;

/// Evaluation batch width. Rows are scored independently in inference mode,
/// so this affects speed only, never results.
const EVAL_BATCH: usize = 256;

/// Driver knobs that do not influence results: worker threads for the
/// client-training phase and whether wall times land in the reports.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub threads: usize,
    pub timings: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            timings: false,
        }
    }
}

/// Which architecture a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Cnn,
    Ann,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::Ann => "ann",
        }
    }

    /// Build the default architecture of this kind from the run seed.
    pub fn build(self, seed: u64) -> Result<Model, FederationError> {
        let mut rng = derive_rng(seed, "model-init", &[]);
        let model = match self {
            ModelKind::Cnn => build_cnn(&CnnSpec::default(), &mut rng)?,
            ModelKind::Ann => build_ann(&AnnSpec::default(), &mut rng)?,
        };
        Ok(model)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cnn" => Ok(ModelKind::Cnn),
            "ann" => Ok(ModelKind::Ann),
            other => Err(format!("unknown model {other:?} (expected cnn or ann)")),
        }
    }
}

/// Stop when the observed loss fails to improve on the best seen by at
/// least [`EARLY_STOP_MIN_DELTA`] for [`EARLY_STOP_PATIENCE`] consecutive
/// observations.
#[derive(Debug, Clone)]
struct EarlyStop {
    best: f64,
    streak: usize,
}

impl EarlyStop {
    fn new() -> Self {
        Self {
            best: f64::INFINITY,
            streak: 0,
        }
    }

    /// Returns true when training should stop after this observation.
    fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - EARLY_STOP_MIN_DELTA {
            self.best = loss;
            self.streak = 0;
            false
        } else {
            self.streak += 1;
            self.streak >= EARLY_STOP_PATIENCE
        }
    }
}

/// Everything a finished run hands back.
#[derive(Debug)]
pub struct RunOutcome {
    pub reports: Vec<RoundReport>,
    pub model: Model,
    pub chain: Chain,
    pub stopped_early: bool,
}

/// Auditor record of a held-out evaluation, anchored on the ledger.
#[derive(Debug, Clone)]
pub struct ValidationRecord {
    pub round: u64,
    pub accuracy: f64,
    pub loss: f64,
    pub checkpoint_digest: [u8; 32],
    pub tx: Transaction,
}

/// Evaluate the model on held-out data and submit an auditor transaction
/// binding (accuracy, loss, checkpoint digest) to the ledger. The caller
/// mines it; until then it sits in the pool.
pub fn validate_model_hook(
    model: &Model,
    held_out: &Dataset,
    auditor: &str,
    round: u64,
    chain: &mut Chain,
) -> Result<ValidationRecord, FederationError> {
    let (accuracy, loss) = evaluate(
        model,
        &held_out.images_nchw(),
        held_out.labels(),
        EVAL_BATCH,
    )?;
    let mut checkpoint = Vec::new();
    save_checkpoint(model, &mut checkpoint)?;
    let checkpoint_digest = sha256(&checkpoint);
    let payload = format!(
        "validation\nround={round}\naccuracy={accuracy}\nloss={loss}\ncheckpoint={}\n",
        hex(&checkpoint_digest)
    );
    let tx = chain.submit_tx(auditor, payload.as_bytes(), PayloadKind::Validation, round)?;
    Ok(ValidationRecord {
        round,
        accuracy,
        loss,
        checkpoint_digest,
        tx,
    })
}

/// Train every client against the broadcast state, in parallel when more
/// than one worker is allowed. Results are ordered by client position, so
/// threading never changes the outcome.
fn train_clients(
    clients: &mut [ClientState],
    global_state: &[f64],
    cfg: &TrainConfig,
    threads: usize,
) -> Result<Vec<Vec<f64>>, FederationError> {
    let workers = threads.max(1).min(clients.len().max(1));
    if workers <= 1 {
        return clients
            .iter_mut()
            .map(|client| client_local_train(client, global_state, cfg))
            .collect();
    }
    let mut slots: Vec<Option<Result<Vec<f64>, FederationError>>> = Vec::new();
    slots.resize_with(clients.len(), || None);
    let chunk = clients.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (client_chunk, slot_chunk) in clients.chunks_mut(chunk).zip(slots.chunks_mut(chunk)) {
            scope.spawn(move || {
                for (client, slot) in client_chunk.iter_mut().zip(slot_chunk) {
                    *slot = Some(client_local_train(client, global_state, cfg));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.expect("every slot is filled before the scope ends"))
        .collect()
}

struct EvalSets<'a> {
    train_images: &'a Tensor,
    train_labels: &'a [usize],
    test_images: &'a Tensor,
    test_labels: &'a [usize],
}

fn run_round(
    config: &RunConfig,
    opts: &RunOptions,
    server: &mut ServerState,
    clients: &mut [ClientState],
    chain: &mut Chain,
    round: u64,
    eval: &EvalSets<'_>,
) -> Result<RoundReport, FederationError> {
    let global_state = server.global().state_vector();
    let train_cfg = TrainConfig {
        epochs: config.local_epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        seed: config.seed,
        round,
    };
    let deltas = train_clients(clients, &global_state, &train_cfg, opts.threads)?;
    let mut submissions = Vec::with_capacity(clients.len());
    for (i, (client, delta)) in clients.iter().zip(&deltas).enumerate() {
        let mut rng = derive_rng(config.seed, "submit", &[round, i as u64]);
        submissions.push(client_submit(client, delta, round, chain, &mut rng)?);
    }
    let agg_start = Instant::now();
    server_aggregate(server, &submissions)?;
    let agg_ms = if opts.timings {
        agg_start.elapsed().as_millis() as u64
    } else {
        0
    };
    let mine_start = Instant::now();
    let block = chain.mine(chain.pool_len())?;
    let mine_ms = if opts.timings {
        mine_start.elapsed().as_millis() as u64
    } else {
        0
    };
    let (_, train_loss) = evaluate(
        server.global(),
        eval.train_images,
        eval.train_labels,
        EVAL_BATCH,
    )?;
    let (test_accuracy, test_loss) = evaluate(
        server.global(),
        eval.test_images,
        eval.test_labels,
        EVAL_BATCH,
    )?;
    Ok(RoundReport {
        round,
        train_loss,
        test_accuracy,
        test_loss,
        agg_ms,
        mine_ms,
        block_hash: hex(&block.hash),
    })
}

/// Run the full protocol: KGC setup and on-chain registration (mined into
/// their own block), then for each round broadcast, local training,
/// encrypted submission, aggregation, and a block anchoring exactly that
/// round's submissions; finally the auditor validation hook on `held_out`.
///
/// Stops early when the test loss plateaus (see [`EARLY_STOP_PATIENCE`]).
/// Every error surfaces with the round it happened in.
pub fn run_training(
    config: &RunConfig,
    kind: ModelKind,
    train: &Dataset,
    test: &Dataset,
    held_out: Option<&Dataset>,
    opts: &RunOptions,
) -> Result<RunOutcome, FederationError> {
    config.validate()?;
    if train.is_empty() {
        return Err(FederationError::Config("training set is empty".into()));
    }
    if test.is_empty() {
        return Err(FederationError::Config("test set is empty".into()));
    }
    let agg = AggregationConfig::derive(config.clients, config.scale, config.clip, config.sigma)?;
    let mut chain = Chain::new(config.difficulty);
    let (_kgc, server_cred, client_creds) =
        kgc_setup(config.clients, config.group_bits, config.seed, &mut chain)?;
    chain.register(AUDITOR_ID, Role::Client, &server_cred.keypair.pk().to_bytes_be())?;
    let need = BigUint::from(config.clients) * BigUint::from(agg.modulus);
    if &need >= server_cred.group.q() {
        return Err(FederationError::Config(format!(
            "group_bits={} is too small for {} clients over the 2^32 summation modulus",
            config.group_bits, config.clients
        )));
    }
    let global = kind.build(config.seed)?;
    // partition guarantees one non-empty shard per client.
    let shards = partition(train, config.clients, config.seed)?;
    let mut clients = Vec::with_capacity(config.clients);
    for (credential, shard) in client_creds.into_iter().zip(&shards) {
        let data = train.subset(&shard.indices)?;
        clients.push(ClientState::new(credential, data, global.clone(), agg.clone()));
    }
    let roster: Vec<String> = clients.iter().map(|c| c.id().to_string()).collect();
    let mut server = ServerState::new(global, &server_cred, roster, agg);
    // Registrations get their own block, so each round's block carries
    // exactly that round's submissions.
    chain.mine(chain.pool_len())?;

    let train_images = train.images_nchw();
    let test_images = test.images_nchw();
    let eval = EvalSets {
        train_images: &train_images,
        train_labels: train.labels(),
        test_images: &test_images,
        test_labels: test.labels(),
    };

    let mut reports = Vec::new();
    let mut stopper = EarlyStop::new();
    let mut stopped_early = false;
    for round in 1..=config.rounds {
        let report = run_round(config, opts, &mut server, &mut clients, &mut chain, round, &eval)
            .map_err(|source| FederationError::RoundAbort {
                round,
                source: Box::new(source),
            })?;
        let test_loss = report.test_loss;
        reports.push(report);
        if stopper.observe(test_loss) {
            stopped_early = true;
            break;
        }
    }

    if let Some(held) = held_out {
        if !held.is_empty() {
            let last_round = reports.last().map_or(0, |r| r.round);
            validate_model_hook(server.global(), held, AUDITOR_ID, last_round, &mut chain)?;
            chain.mine(chain.pool_len())?;
        }
    }

    Ok(RunOutcome {
        reports,
        model: server.into_global(),
        chain,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, synth_digits, SplitSpec};
    use crate::ledger::ChainCheck;
    use crate::nn::load_checkpoint;

    fn desk_run_config() -> RunConfig {
        RunConfig {
            clients: 4,
            rounds: 2,
            local_epochs: 1,
            batch_size: 10,
            learning_rate: 0.1,
            scale: 1 << 10,
            clip: 1.0,
            sigma: 0.0,
            group_bits: 64,
            difficulty: 0,
            seed: 9,
            dataset_dir: None,
        }
    }

    fn small_splits() -> (Dataset, Dataset, Dataset) {
        let all = synth_digits(130, 9).unwrap();
        let spec = SplitSpec {
            train: 100,
            test: 20,
            validation: 10,
            seed: 9,
        };
        split(&all, &spec).unwrap()
    }

    #[test]
    fn model_kind_parses_and_builds() {
        assert_eq!("cnn".parse::<ModelKind>().unwrap(), ModelKind::Cnn);
        assert_eq!("ann".parse::<ModelKind>().unwrap(), ModelKind::Ann);
        assert!("mlp".parse::<ModelKind>().is_err());
        assert_eq!(ModelKind::Cnn.build(1).unwrap().param_count(), 5922);
        assert_eq!(ModelKind::Ann.build(1).unwrap().param_count(), 109_386);
    }

    #[test]
    fn early_stop_requires_a_full_patience_streak() {
        let mut stop = EarlyStop::new();
        // Improving run never stops.
        for loss in [1.0, 0.8, 0.6, 0.4, 0.2, 0.1, 0.05] {
            assert!(!stop.observe(loss));
        }
        // Plateau: 5 consecutive non-improvements fire the rule.
        let mut stop = EarlyStop::new();
        assert!(!stop.observe(1.0));
        for _ in 0..EARLY_STOP_PATIENCE - 1 {
            assert!(!stop.observe(1.0));
        }
        assert!(stop.observe(1.0));
        // Losses hovering within the delta of the best, above or below,
        // all count toward the streak.
        let mut stop = EarlyStop::new();
        assert!(!stop.observe(1.0));
        let hover = [
            1.0 - EARLY_STOP_MIN_DELTA / 2.0,
            1.0 + EARLY_STOP_MIN_DELTA,
            1.0,
            1.0 - EARLY_STOP_MIN_DELTA / 2.0,
        ];
        for loss in hover {
            assert!(!stop.observe(loss));
        }
        assert!(stop.observe(1.0 - EARLY_STOP_MIN_DELTA / 2.0));
        // A real improvement resets the streak.
        let mut stop = EarlyStop::new();
        assert!(!stop.observe(1.0));
        for _ in 0..EARLY_STOP_PATIENCE - 1 {
            assert!(!stop.observe(1.0));
        }
        assert!(!stop.observe(0.5));
        for _ in 0..EARLY_STOP_PATIENCE - 1 {
            assert!(!stop.observe(0.5));
        }
        assert!(stop.observe(0.5));
    }

    #[test]
    fn run_training_is_deterministic_and_fully_anchored() {
        let (train, test, held) = small_splits();
        let config = desk_run_config();
        let run = |threads: usize| {
            run_training(
                &config,
                ModelKind::Cnn,
                &train,
                &test,
                Some(&held),
                &RunOptions {
                    threads,
                    timings: false,
                },
            )
            .unwrap()
        };
        let a = run(1);
        let b = run(1);
        let c = run(2);

        assert_eq!(a.reports.len(), 2);
        assert!(!a.stopped_early);
        for (i, report) in a.reports.iter().enumerate() {
            assert_eq!(report.round, i as u64 + 1);
            assert!((0.0..=1.0).contains(&report.test_accuracy));
            assert!(report.train_loss.is_finite() && report.test_loss.is_finite());
            assert_eq!(report.agg_ms, 0);
            assert_eq!(report.mine_ms, 0);
            assert_eq!(report.block_hash.len(), 64);
        }

        // Bit-identical across repeats and across thread counts.
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.reports, c.reports);
        assert_eq!(a.model.state_vector(), b.model.state_vector());
        assert_eq!(a.model.state_vector(), c.model.state_vector());
        assert_eq!(a.chain.blocks(), b.chain.blocks());
        assert_eq!(a.chain.blocks(), c.chain.blocks());

        // Chain shape: genesis, registrations, one block per round, the
        // validation record.
        let blocks = a.chain.blocks();
        assert_eq!(a.chain.verify(), ChainCheck::Valid);
        assert_eq!(blocks.len(), 5);
        assert!(blocks[1]
            .transactions
            .iter()
            .all(|tx| tx.kind == PayloadKind::Registration));
        assert_eq!(blocks[1].transactions.len(), config.clients + 2);
        for (i, block) in blocks[2..4].iter().enumerate() {
            let round = i as u64 + 1;
            assert_eq!(block.transactions.len(), config.clients);
            assert!(block
                .transactions
                .iter()
                .all(|tx| tx.kind == PayloadKind::Update && tx.round == round));
            assert_eq!(hex(&block.hash), a.reports[i].block_hash);
        }
        assert_eq!(blocks[4].transactions.len(), 1);
        assert_eq!(blocks[4].transactions[0].kind, PayloadKind::Validation);

        // Every submission digest appears exactly once on the whole chain.
        let mut seen = std::collections::HashSet::new();
        for block in blocks {
            for tx in &block.transactions {
                assert!(seen.insert(tx.digest));
            }
        }
    }

    #[test]
    fn timings_flag_only_fills_the_timing_columns() {
        let (train, test, _) = small_splits();
        let mut config = desk_run_config();
        config.rounds = 1;
        let base = run_training(
            &config,
            ModelKind::Cnn,
            &train,
            &test,
            None,
            &RunOptions::default(),
        )
        .unwrap();
        let timed = run_training(
            &config,
            ModelKind::Cnn,
            &train,
            &test,
            None,
            &RunOptions {
                threads: 1,
                timings: true,
            },
        )
        .unwrap();
        assert_eq!(base.model.state_vector(), timed.model.state_vector());
        assert_eq!(base.reports[0].block_hash, timed.reports[0].block_hash);
        assert_eq!(base.reports[0].agg_ms, 0);
        // The timed run may legitimately measure 0 ms; equality of
        // everything else is the point.
        let mut t = timed.reports[0].clone();
        t.agg_ms = 0;
        t.mine_ms = 0;
        assert_eq!(base.reports[0], t);
    }

    #[test]
    fn zero_rounds_leaves_the_initial_model_untouched() {
        let (train, test, _) = small_splits();
        let mut config = desk_run_config();
        config.rounds = 0;
        let outcome = run_training(
            &config,
            ModelKind::Cnn,
            &train,
            &test,
            None,
            &RunOptions::default(),
        )
        .unwrap();
        assert!(outcome.reports.is_empty());
        assert!(!outcome.stopped_early);
        let initial = ModelKind::Cnn.build(config.seed).unwrap();
        assert_eq!(outcome.model.state_vector(), initial.state_vector());
        // Genesis plus the registration block only.
        assert_eq!(outcome.chain.blocks().len(), 2);
    }

    #[test]
    fn more_clients_than_samples_is_rejected_before_any_round() {
        let all = synth_digits(12, 3).unwrap();
        let spec = SplitSpec {
            train: 6,
            test: 6,
            validation: 0,
            seed: 3,
        };
        let (train, test, _) = split(&all, &spec).unwrap();
        let mut config = desk_run_config();
        config.clients = 8;
        let err = run_training(
            &config,
            ModelKind::Cnn,
            &train,
            &test,
            None,
            &RunOptions::default(),
        )
        .unwrap_err();
        assert!(
            matches!(err, FederationError::Data(_)),
            "partitioning 6 samples over 8 clients must fail: {err}"
        );
    }

    #[test]
    fn validation_hook_binds_accuracy_and_checkpoint_to_the_ledger() {
        let held = synth_digits(20, 5).unwrap();
        let model = ModelKind::Cnn.build(5).unwrap();
        let mut chain = Chain::new(0);
        chain.register(AUDITOR_ID, Role::Client, b"auditor-pk").unwrap();

        let record = validate_model_hook(&model, &held, AUDITOR_ID, 3, &mut chain).unwrap();
        let (accuracy, loss) =
            evaluate(&model, &held.images_nchw(), held.labels(), EVAL_BATCH).unwrap();
        assert_eq!(record.accuracy, accuracy);
        assert_eq!(record.loss, loss);
        assert_eq!(record.round, 3);
        assert_eq!(record.tx.kind, PayloadKind::Validation);

        // The digest is exactly the checkpoint serialization's hash, and a
        // tampered checkpoint no longer matches it.
        let mut bytes = Vec::new();
        save_checkpoint(&model, &mut bytes).unwrap();
        assert_eq!(record.checkpoint_digest, sha256(&bytes));
        assert!(load_checkpoint(&mut bytes.as_slice()).is_ok());
        let mut tampered = bytes.clone();
        let last = tampered.len() - 1;
        tampered[last] ^= 1;
        assert_ne!(record.checkpoint_digest, sha256(&tampered));

        // Mining makes the record retrievable by the auditor.
        chain.mine(4).unwrap();
        let payload = chain.retrieve(AUDITOR_ID, &record.tx.digest).unwrap();
        let text = String::from_utf8(payload).unwrap();
        assert!(text.starts_with("validation\nround=3\n"));
        assert!(text.contains(&format!("accuracy={accuracy}")));
        assert!(text.contains(&hex(&record.checkpoint_digest)));
    }

    /// A single client's round, folded into the global model, matches a
    /// centralized SGD run on the same data to within quantization error.
    #[test]
    fn one_client_round_matches_centralized_sgd() {
        let all = synth_digits(40, 21).unwrap();
        let spec = SplitSpec {
            train: 30,
            test: 10,
            validation: 0,
            seed: 21,
        };
        let (train, test, _) = split(&all, &spec).unwrap();
        let config = RunConfig {
            clients: 1,
            rounds: 1,
            local_epochs: 1,
            batch_size: 5,
            learning_rate: 0.1,
            // Large scale makes quantization error tiny; the wide clip keeps
            // batch-norm statistic deltas out of the clipping region so the
            // unclipped oracle stays comparable.
            scale: 1 << 20,
            clip: 4.0,
            sigma: 0.0,
            group_bits: 64,
            difficulty: 0,
            seed: 21,
            dataset_dir: None,
        };
        let outcome = run_training(
            &config,
            ModelKind::Cnn,
            &train,
            &test,
            None,
            &RunOptions::default(),
        )
        .unwrap();

        // Centralized oracle: the same init, shard order, and batch
        // schedule, driven through the model API directly.
        let mut oracle = ModelKind::Cnn.build(config.seed).unwrap();
        let shards = partition(&train, 1, config.seed).unwrap();
        let shard = train.subset(&shards[0].indices).unwrap();
        let images = shard.images_nchw();
        let mut order: Vec<usize> = (0..shard.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut derive_rng(config.seed, "local-train", &[1, 0]));
        for batch_idxs in order.chunks(config.batch_size) {
            let mut data = Vec::new();
            let mut labels = Vec::new();
            let row = 28 * 28;
            for &i in batch_idxs {
                data.extend_from_slice(&images.data()[i * row..(i + 1) * row]);
                labels.push(shard.labels()[i]);
            }
            let batch = Tensor::from_vec(&[batch_idxs.len(), 1, 28, 28], data).unwrap();
            let (_, cache) = oracle.forward(&batch, true).unwrap();
            let grads = oracle.backward(&cache, &labels).unwrap();
            oracle.sgd_step(&grads, config.learning_rate);
        }

        let fed = outcome.model.state_vector();
        let central = oracle.state_vector();
        let tolerance = 1.0 / (2.0 * config.scale as f64) + 1e-12;
        for (f, c) in fed.iter().zip(&central) {
            assert!((f - c).abs() <= tolerance, "{f} vs {c}");
        }
        let initial = ModelKind::Cnn.build(config.seed).unwrap().state_vector();
        let moved = fed.iter().zip(&initial).filter(|(f, i)| f != i).count();
        assert!(moved > 0, "the round moved no parameters");
    }
}
