//! Subcommands of the `fedchain` binary.
//!
//! One binary, five subcommands: `train` runs a federated experiment and
//! writes its artifacts under `--out`, `demo-elgamal` walks one additive
//! aggregation on the console, `verify-chain` re-checks an exported ledger,
//! `bench` times the hot primitives, and `export-synth` materializes the
//! synthetic digit set as IDX files.
//!
//! Precedence for `train` is flags over `--config` file keys over defaults.
//! Exit codes: 0 success, 1 domain failure (a failed verification or an
//! aborted run), 2 usage or I/O error. Every failure is a single
//! `error: ...` line on stderr.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use num_bigint::{BigInt, BigUint};

use crate::crypto::{
    decrypt, dlog_recover, encode, encrypt, generate_group, hom_combine, keygen, CryptoError,
};
use crate::data::{load_idx, save_idx, split, synth_digits, DataError, Dataset, SplitSpec};
use crate::federation::{
    reports_to_csv, run_training, FederationError, ModelKind, RunConfig, RunOptions, RunOutcome,
};
use crate::ledger::{
    hex, import_chain_file, sha256, verify_blocks, Chain, ChainCheck, LedgerError, PayloadKind,
    Role,
};
use crate::nn::{save_checkpoint_file, NnError};
use crate::rng::derive_rng;

#[derive(Parser)]
#[command(
    name = "fedchain",
    version,
    about = "Federated training with encrypted aggregation and an on-chain audit trail"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
// One value per process; the size spread between variants is irrelevant.
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Run a federated training experiment and write its artifacts.
    Train(TrainArgs),
    /// Walk one encrypted addition (default 4 + 5) on the console.
    DemoElgamal(DemoArgs),
    /// Re-verify an exported chain file.
    VerifyChain(VerifyArgs),
    /// Time encryption, ciphertext folding, dlog recovery, and mining.
    Bench(BenchArgs),
    /// Write the synthetic digit dataset as an IDX image/label pair.
    ExportSynth(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// key=value run description; flags given here override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    rounds: Option<u64>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Fixed-point quantization scale s.
    #[arg(long)]
    scale: Option<u64>,
    /// Per-coordinate clip bound c.
    #[arg(long)]
    clip: Option<f64>,
    /// Discrete Gaussian noise width; 0 disables noise.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    group_bits: Option<u32>,
    /// Proof-of-work difficulty in leading zero bits.
    #[arg(long)]
    difficulty: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding an IDX `*images-idx3-ubyte` / `*labels-idx1-ubyte` pair.
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    /// Train on generated digits instead of a dataset directory.
    #[arg(long)]
    synthetic: bool,
    /// Architecture to train: cnn or ann.
    #[arg(long)]
    model: Option<ModelKind>,
    /// Worker threads for the client-training phase.
    #[arg(long)]
    threads: Option<usize>,
    /// Record aggregation and mining times in the metrics CSV.
    #[arg(long)]
    timings: bool,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    /// Held-out samples for the auditor's validation record; 0 disables it.
    #[arg(long)]
    validation_count: Option<usize>,
    /// Output directory; every artifact lands under it.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 4)]
    m1: u64,
    #[arg(long, default_value_t = 5)]
    m2: u64,
    #[arg(long, default_value_t = 64)]
    group_bits: u32,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Recovery bound B; m1 + m2 must stay within it.
    #[arg(long, default_value_t = 1 << 20)]
    bound: u64,
}

#[derive(Args)]
struct VerifyArgs {
    /// Chain export in JSON-lines form, as written by `train`.
    path: PathBuf,
    /// Difficulty the chain was mined at.
    #[arg(long, default_value_t = 8)]
    difficulty: u32,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    group_bits: u32,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    encrypt_count: usize,
    #[arg(long, default_value_t = 1000)]
    combine_count: usize,
    #[arg(long, default_value_t = 1 << 20)]
    dlog_bound: u64,
    #[arg(long, default_value_t = 100)]
    mine_blocks: usize,
    #[arg(long, default_value_t = 0)]
    difficulty: u32,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, default_value_t = 3200)]
    count: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Parse the argument list and run the selected subcommand, returning the
/// process exit code. Usage errors and help/version are handled by clap.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.exit_code() == 0 { 0 } else { 2 };
            let _ = err.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::DemoElgamal(args) => cmd_demo_elgamal(args),
        Command::VerifyChain(args) => cmd_verify_chain(args),
        Command::Bench(args) => cmd_bench(args),
        Command::ExportSynth(args) => cmd_export_synth(args),
    };
    match result {
        Ok(()) => 0,
        Err(failure) => {
            eprintln!("error: {}", failure.message.replace('\n', "; "));
            failure.code
        }
    }
}

/// A subcommand failure carrying its exit code. 1 means the computation
/// itself failed or refused; 2 means the invocation or its inputs were bad.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn domain(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

impl From<std::io::Error> for Failure {
    fn from(err: std::io::Error) -> Self {
        usage(err.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(err: DataError) -> Self {
        usage(err.to_string())
    }
}

impl From<LedgerError> for Failure {
    fn from(err: LedgerError) -> Self {
        match err {
            LedgerError::Parse(_) | LedgerError::Io(_) => usage(err.to_string()),
            _ => domain(err.to_string()),
        }
    }
}

impl From<NnError> for Failure {
    fn from(err: NnError) -> Self {
        match err {
            NnError::Io(_) => usage(err.to_string()),
            _ => domain(err.to_string()),
        }
    }
}

impl From<CryptoError> for Failure {
    fn from(err: CryptoError) -> Self {
        match err {
            CryptoError::GenerationBudget { .. } => usage(err.to_string()),
            _ => domain(err.to_string()),
        }
    }
}

impl From<FederationError> for Failure {
    fn from(err: FederationError) -> Self {
        match err {
            FederationError::Config(_) => usage(err.to_string()),
            FederationError::Data(inner) => inner.into(),
            FederationError::Ledger(LedgerError::Parse(_) | LedgerError::Io(_)) => {
                usage(err.to_string())
            }
            _ => domain(err.to_string()),
        }
    }
}

/// Everything `train` needs: the run description plus CLI-level knobs that
/// shape the experiment around it.
#[derive(Debug, Clone, PartialEq)]
struct TrainSettings {
    run: RunConfig,
    model: ModelKind,
    synthetic: bool,
    threads: usize,
    timings: bool,
    train_count: usize,
    test_count: usize,
    validation_count: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            model: ModelKind::Cnn,
            synthetic: false,
            threads: 1,
            timings: false,
            train_count: 2000,
            test_count: 1000,
            validation_count: 200,
        }
    }
}

const SETTING_KEYS: [&str; 7] = [
    "model",
    "synthetic",
    "threads",
    "timings",
    "train_count",
    "test_count",
    "validation_count",
];

/// Parse a settings file: the `RunConfig` keys plus the CLI-level keys above.
/// `digest.*` keys (present in run manifests) record outputs and are ignored
/// on input, which is what lets a manifest be replayed as a config file.
fn parse_settings_file(text: &str) -> Result<TrainSettings, Failure> {
    let mut settings = TrainSettings::default();
    let mut seen = BTreeSet::new();
    // Lines this parser consumes become blank lines in the core text so
    // RunConfig::parse reports the original line numbers.
    let mut core = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        let parsed = if line.is_empty() || line.starts_with('#') {
            None
        } else {
            line.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .filter(|(k, _)| SETTING_KEYS.contains(k) || k.starts_with("digest."))
        };
        let Some((key, value)) = parsed else {
            core.push_str(raw);
            core.push('\n');
            continue;
        };
        core.push('\n');
        if key.starts_with("digest.") {
            continue;
        }
        if !seen.insert(key.to_string()) {
            return Err(usage(format!("line {line_no}: duplicate key {key}")));
        }
        let bad = |what: &str| usage(format!("line {line_no}: {key} must be {what}, got {value:?}"));
        match key {
            "model" => settings.model = value.parse().map_err(|_| bad("cnn or ann"))?,
            "synthetic" => settings.synthetic = value.parse().map_err(|_| bad("true or false"))?,
            "threads" => settings.threads = value.parse().map_err(|_| bad("an integer"))?,
            "timings" => settings.timings = value.parse().map_err(|_| bad("true or false"))?,
            "train_count" => settings.train_count = value.parse().map_err(|_| bad("an integer"))?,
            "test_count" => settings.test_count = value.parse().map_err(|_| bad("an integer"))?,
            "validation_count" => {
                settings.validation_count = value.parse().map_err(|_| bad("an integer"))?
            }
            _ => unreachable!("filtered above"),
        }
    }
    settings.run = RunConfig::parse(&core).map_err(|e| usage(e.to_string()))?;
    Ok(settings)
}

/// Canonical settings text: the run config followed by the CLI-level keys.
/// Round-trips through `parse_settings_file`.
fn settings_to_file_string(settings: &TrainSettings) -> String {
    let mut out = settings.run.to_file_string();
    writeln!(out, "model={}", settings.model.as_str()).unwrap();
    writeln!(out, "synthetic={}", settings.synthetic).unwrap();
    writeln!(out, "threads={}", settings.threads).unwrap();
    writeln!(out, "timings={}", settings.timings).unwrap();
    writeln!(out, "train_count={}", settings.train_count).unwrap();
    writeln!(out, "test_count={}", settings.test_count).unwrap();
    writeln!(out, "validation_count={}", settings.validation_count).unwrap();
    out
}

/// Flags beat file keys. Boolean flags only switch on; use the config file
/// to pin them off.
fn apply_flags(settings: &mut TrainSettings, args: &TrainArgs) {
    let run = &mut settings.run;
    macro_rules! take {
        ($field:ident into $target:expr) => {
            if let Some(value) = args.$field.clone() {
                $target = value;
            }
        };
    }
    take!(clients into run.clients);
    take!(rounds into run.rounds);
    take!(local_epochs into run.local_epochs);
    take!(batch_size into run.batch_size);
    take!(learning_rate into run.learning_rate);
    take!(scale into run.scale);
    take!(clip into run.clip);
    take!(sigma into run.sigma);
    take!(group_bits into run.group_bits);
    take!(difficulty into run.difficulty);
    take!(seed into run.seed);
    if let Some(dir) = &args.dataset_dir {
        run.dataset_dir = Some(dir.clone());
    }
    take!(model into settings.model);
    take!(threads into settings.threads);
    take!(train_count into settings.train_count);
    take!(test_count into settings.test_count);
    take!(validation_count into settings.validation_count);
    settings.synthetic |= args.synthetic;
    settings.timings |= args.timings;
}

/// Pick the IDX image/label pair out of a dataset directory. Accepts any
/// `*images-idx3-ubyte` / `*labels-idx1-ubyte` names; prefers ones containing
/// "train" so a directory holding both pools selects the training files.
fn find_idx_pair(dir: &Path) -> Result<(PathBuf, PathBuf), Failure> {
    let mut names: Vec<String> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))? {
        let entry = entry.map_err(|e| usage(format!("{}: {e}", dir.display())))?;
        if let Ok(name) = entry.file_name().into_string() {
            names.push(name);
        }
    }
    names.sort();
    let pick = |suffix: &str| {
        names
            .iter()
            .filter(|n| n.ends_with(suffix))
            .max_by_key(|n| n.contains("train"))
            .cloned()
    };
    match (pick("images-idx3-ubyte"), pick("labels-idx1-ubyte")) {
        (Some(images), Some(labels)) => Ok((dir.join(images), dir.join(labels))),
        _ => Err(usage(format!(
            "{}: no *images-idx3-ubyte / *labels-idx1-ubyte pair found",
            dir.display()
        ))),
    }
}

fn load_splits(settings: &TrainSettings) -> Result<(Dataset, Dataset, Dataset), Failure> {
    let spec = SplitSpec {
        train: settings.train_count,
        test: settings.test_count,
        validation: settings.validation_count,
        seed: settings.run.seed,
    };
    let pool = if settings.synthetic {
        let total = spec.train + spec.test + spec.validation;
        synth_digits(total.max(10), settings.run.seed)?
    } else if let Some(dir) = &settings.run.dataset_dir {
        let (images, labels) = find_idx_pair(dir)?;
        load_idx(&images, &labels)?
    } else {
        return Err(usage(
            "no dataset: pass --synthetic or point dataset_dir at IDX files",
        ));
    };
    Ok(split(&pool, &spec)?)
}

fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let mut settings = match &args.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            parse_settings_file(&text)
                .map_err(|f| Failure {
                    code: f.code,
                    message: format!("{}: {}", path.display(), f.message),
                })?
        }
        None => TrainSettings::default(),
    };
    apply_flags(&mut settings, args);
    settings.run.validate().map_err(Failure::from)?;
    let (train, test, validation) = load_splits(&settings)?;
    let held_out = (!validation.is_empty()).then_some(&validation);
    let opts = RunOptions {
        threads: settings.threads,
        timings: settings.timings,
    };
    let outcome = run_training(&settings.run, settings.model, &train, &test, held_out, &opts)?;
    write_outputs(&args.out, &settings, &outcome)
}

/// Write metrics.csv, model.ckpt, chain.jsonl, and manifest.txt under `out`.
/// The manifest is the canonical settings plus a digest of each artifact as
/// it landed on disk; replaying it with `--config` reproduces the run.
fn write_outputs(out: &Path, settings: &TrainSettings, outcome: &RunOutcome) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| usage(format!("{}: {e}", out.display())))?;
    let metrics_path = out.join("metrics.csv");
    fs::write(&metrics_path, reports_to_csv(&outcome.reports))?;
    let checkpoint_path = out.join("model.ckpt");
    save_checkpoint_file(&outcome.model, &checkpoint_path)?;
    let chain_path = out.join("chain.jsonl");
    crate::ledger::export_chain_file(outcome.chain.blocks(), &chain_path)?;

    let mut manifest = settings_to_file_string(settings);
    for (label, path) in [
        ("metrics_csv", &metrics_path),
        ("model_ckpt", &checkpoint_path),
        ("chain_jsonl", &chain_path),
    ] {
        let digest = sha256(&fs::read(path)?);
        writeln!(manifest, "digest.{label}={}", hex(&digest)).unwrap();
    }
    fs::write(out.join("manifest.txt"), manifest)?;

    for report in &outcome.reports {
        println!(
            "round {}: train_loss={} test_accuracy={} test_loss={}",
            report.round, report.train_loss, report.test_accuracy, report.test_loss
        );
    }
    if outcome.stopped_early {
        let last = outcome.reports.last().map(|r| r.round).unwrap_or(0);
        println!("early stop after round {last}");
    }
    for name in ["metrics.csv", "model.ckpt", "chain.jsonl", "manifest.txt"] {
        println!("wrote {}", out.join(name).display());
    }
    Ok(())
}

fn radix16(value: &BigUint) -> String {
    value.to_str_radix(16)
}

fn cmd_demo_elgamal(args: &DemoArgs) -> Result<(), Failure> {
    let sum = args
        .m1
        .checked_add(args.m2)
        .filter(|s| *s <= args.bound)
        .ok_or_else(|| usage(format!("m1 + m2 must stay within --bound {}", args.bound)))?;
    let group = generate_group(args.group_bits, &mut derive_rng(args.seed, "group", &[]))?;
    let keys = keygen(&group, &mut derive_rng(args.seed, "keygen", &[]));
    println!(
        "group: p={} q={} g={}",
        radix16(group.p()),
        radix16(group.q()),
        radix16(group.g())
    );
    println!("m1 = {}", args.m1);
    println!("m2 = {}", args.m2);
    let e1 = encode(&group, &BigInt::from(args.m1));
    let e2 = encode(&group, &BigInt::from(args.m2));
    let c1 = encrypt(&group, keys.pk(), &e1, &mut derive_rng(args.seed, "demo", &[1]))?;
    let c2 = encrypt(&group, keys.pk(), &e2, &mut derive_rng(args.seed, "demo", &[2]))?;
    println!("c1 = ({}, {})", radix16(&c1.c1), radix16(&c1.c2));
    println!("c2 = ({}, {})", radix16(&c2.c1), radix16(&c2.c2));
    let combined = hom_combine(&group, &c1, &c2);
    println!(
        "combined = ({}, {})",
        radix16(&combined.c1),
        radix16(&combined.c2)
    );
    let decrypted = decrypt(&group, keys.sk(), &combined)?;
    println!("decrypted = {}", radix16(&decrypted));
    let recovered = dlog_recover(&decrypted, args.bound, &group)?;
    debug_assert_eq!(recovered, sum);
    println!("recovered exponent = {recovered}");
    Ok(())
}

fn cmd_verify_chain(args: &VerifyArgs) -> Result<(), Failure> {
    let blocks = import_chain_file(&args.path).map_err(|e| {
        let f = Failure::from(e);
        Failure {
            code: f.code,
            message: format!("{}: {}", args.path.display(), f.message),
        }
    })?;
    match verify_blocks(&blocks, args.difficulty) {
        ChainCheck::Valid => {
            println!(
                "ok: {} blocks verified at difficulty {}",
                blocks.len(),
                args.difficulty
            );
            Ok(())
        }
        ChainCheck::BadBlock { index, reason } => {
            Err(domain(format!("bad block {index}: {reason}")))
        }
    }
}

fn csv_row(out: &mut String, operation: &str, count: usize, elapsed: Duration) {
    let secs = elapsed.as_secs_f64().max(1e-9);
    writeln!(
        out,
        "{operation},{count},{:.3},{:.1}",
        secs * 1e3,
        count as f64 / secs
    )
    .unwrap();
}

fn cmd_bench(args: &BenchArgs) -> Result<(), Failure> {
    let group = generate_group(args.group_bits, &mut derive_rng(args.seed, "group", &[]))?;
    let keys = keygen(&group, &mut derive_rng(args.seed, "keygen", &[]));
    let mut out = String::from("operation,count,total_ms,per_second\n");

    let elems: Vec<BigUint> = (0..args.encrypt_count.max(1))
        .map(|i| encode(&group, &BigInt::from(i as u64)))
        .collect();
    let mut rng = derive_rng(args.seed, "bench-encrypt", &[]);
    let start = Instant::now();
    let mut ciphertexts = Vec::with_capacity(elems.len());
    for elem in &elems {
        ciphertexts.push(encrypt(&group, keys.pk(), elem, &mut rng)?);
    }
    csv_row(&mut out, "encrypt", ciphertexts.len(), start.elapsed());

    let start = Instant::now();
    let mut acc = ciphertexts[0].clone();
    for i in 0..args.combine_count {
        acc = hom_combine(&group, &acc, &ciphertexts[i % ciphertexts.len()]);
    }
    std::hint::black_box(&acc);
    csv_row(&mut out, "hom_combine", args.combine_count, start.elapsed());

    let elem = encode(&group, &BigInt::from(args.dlog_bound));
    let start = Instant::now();
    let recovered = dlog_recover(&elem, args.dlog_bound, &group)?;
    csv_row(&mut out, "dlog_recover", 1, start.elapsed());
    if recovered != args.dlog_bound {
        return Err(domain("dlog benchmark recovered the wrong exponent"));
    }

    let mut chain = Chain::new(args.difficulty);
    chain.register("bench", Role::Client, b"bench-key")?;
    chain.mine(chain.pool_len())?;
    let start = Instant::now();
    for round in 0..args.mine_blocks {
        chain.submit_tx("bench", &round.to_be_bytes(), PayloadKind::Update, round as u64)?;
        chain.mine(1)?;
    }
    csv_row(&mut out, "mine", args.mine_blocks, start.elapsed());

    print!("{out}");
    Ok(())
}

fn cmd_export_synth(args: &ExportArgs) -> Result<(), Failure> {
    let dataset = synth_digits(args.count, args.seed)?;
    fs::create_dir_all(&args.out).map_err(|e| usage(format!("{}: {e}", args.out.display())))?;
    let images = args.out.join("synth-train-images-idx3-ubyte");
    let labels = args.out.join("synth-train-labels-idx1-ubyte");
    save_idx(&dataset, &images, &labels)?;
    println!("wrote {}", images.display());
    println!("wrote {}", labels.display());
    Ok(())
}
