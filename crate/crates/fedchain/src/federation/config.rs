//! Run configuration and metrics: the line-based `key=value` run
//! description and the per-round CSV it emits.

use std::fmt::Write as _;
use std::path::PathBuf;

use super::FederationError;

/// Metrics CSV header; one data row per completed round.
pub const METRICS_CSV_HEADER: &str =
    "round,train_loss,test_accuracy,test_loss,agg_ms,mine_ms,block_hash";

/// A complete training-run description. `parse` and `to_file_string`
/// round-trip: the canonical form re-parses to an equal config.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub clients: usize,
    pub rounds: u64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub scale: u64,
    pub clip: f64,
    pub sigma: f64,
    pub group_bits: u32,
    pub difficulty: u32,
    pub seed: u64,
    pub dataset_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            rounds: 20,
            local_epochs: 1,
            batch_size: 10,
            learning_rate: 0.05,
            scale: 1 << 10,
            clip: 1.0,
            sigma: 0.0,
            group_bits: 64,
            difficulty: 8,
            seed: 7,
            dataset_dir: None,
        }
    }
}

impl RunConfig {
    /// Parse `key=value` lines. Blank lines and `#` comments are skipped;
    /// unknown or repeated keys are errors; absent keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, FederationError> {
        let mut config = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                FederationError::Config(format!(
                    "line {line_no}: expected key=value, got {line:?}"
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(FederationError::Config(format!(
                    "line {line_no}: duplicate key {key}"
                )));
            }
            let bad = |what: &str| {
                FederationError::Config(format!(
                    "line {line_no}: {key} must be {what}, got {value:?}"
                ))
            };
            match key {
                "clients" => config.clients = value.parse().map_err(|_| bad("an integer"))?,
                "rounds" => config.rounds = value.parse().map_err(|_| bad("an integer"))?,
                "local_epochs" => {
                    config.local_epochs = value.parse().map_err(|_| bad("an integer"))?
                }
                "batch_size" => config.batch_size = value.parse().map_err(|_| bad("an integer"))?,
                "learning_rate" => {
                    config.learning_rate = value.parse().map_err(|_| bad("a real number"))?
                }
                "scale" => config.scale = value.parse().map_err(|_| bad("an integer"))?,
                "clip" => config.clip = value.parse().map_err(|_| bad("a real number"))?,
                "sigma" => config.sigma = value.parse().map_err(|_| bad("a real number"))?,
                "group_bits" => config.group_bits = value.parse().map_err(|_| bad("an integer"))?,
                "difficulty" => config.difficulty = value.parse().map_err(|_| bad("an integer"))?,
                "seed" => config.seed = value.parse().map_err(|_| bad("an integer"))?,
                "dataset_dir" => {
                    if value.is_empty() {
                        return Err(bad("a path"));
                    }
                    config.dataset_dir = Some(PathBuf::from(value));
                }
                _ => {
                    return Err(FederationError::Config(format!(
                        "line {line_no}: unknown key {key}"
                    )))
                }
            }
        }
        Ok(config)
    }

    /// Canonical form: every key exactly once, fixed order, `dataset_dir`
    /// only when set.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        writeln!(out, "clients={}", self.clients).unwrap();
        writeln!(out, "rounds={}", self.rounds).unwrap();
        writeln!(out, "local_epochs={}", self.local_epochs).unwrap();
        writeln!(out, "batch_size={}", self.batch_size).unwrap();
        writeln!(out, "learning_rate={}", self.learning_rate).unwrap();
        writeln!(out, "scale={}", self.scale).unwrap();
        writeln!(out, "clip={}", self.clip).unwrap();
        writeln!(out, "sigma={}", self.sigma).unwrap();
        writeln!(out, "group_bits={}", self.group_bits).unwrap();
        writeln!(out, "difficulty={}", self.difficulty).unwrap();
        writeln!(out, "seed={}", self.seed).unwrap();
        if let Some(dir) = &self.dataset_dir {
            writeln!(out, "dataset_dir={}", dir.display()).unwrap();
        }
        out
    }

    /// Structural checks that need neither the group nor a dataset.
    pub fn validate(&self) -> Result<(), FederationError> {
        let fail = |msg: String| Err(FederationError::Config(msg));
        if self.clients == 0 {
            return fail("clients must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail(format!(
                "learning_rate must be a finite non-negative number, got {}",
                self.learning_rate
            ));
        }
        if self.scale == 0 {
            return fail("scale must be at least 1".into());
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return fail(format!("clip must be a finite positive number, got {}", self.clip));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return fail(format!(
                "sigma must be a finite non-negative number, got {}",
                self.sigma
            ));
        }
        // The subgroup order q has group_bits - 1 bits; the summation
        // domain clients * 2^32 must fit strictly below it.
        if self.group_bits < 64 {
            let need = self.clients as u128 * (1u128 << 32);
            if (1u128 << (self.group_bits.max(1) - 1)) <= need {
                return fail(format!(
                    "group_bits={} cannot hold the 2^32 summation modulus for {} clients",
                    self.group_bits, self.clients
                ));
            }
        }
        Ok(())
    }
}

/// One completed round: losses and accuracy of the post-aggregation global
/// model, wall times (zero unless timing collection is on), and the hash of
/// the block anchoring the round's submissions.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub agg_ms: u64,
    pub mine_ms: u64,
    pub block_hash: String,
}

/// Render reports as the metrics CSV. The header is always present, so a
/// zero-round run yields a header-only file.
pub fn reports_to_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.round, r.train_loss, r.test_accuracy, r.test_loss, r.agg_ms, r.mine_ms, r.block_hash
        )
        .unwrap();
    }
    out
}
