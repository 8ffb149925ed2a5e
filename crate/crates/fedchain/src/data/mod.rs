//! Dataset handling: IDX ingestion, splitting, client sharding, and a
//! synthetic digit generator for environments without the real corpus.

mod idx;
mod synth;

pub use idx::{load_idx, save_idx};
pub use synth::synth_digits;

use rand::seq::SliceRandom;

use crate::nn::Tensor;
use crate::rng::derive_rng;

pub const IMAGE_SIDE: usize = 28;
pub const NUM_CLASSES: usize = 10;

/// Errors from dataset IO and slicing.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("bad dataset format: {0}")]
    Format(String),
    #[error("invalid dataset operation: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A labeled image set: images are [n, 28, 28] with pixel values in [0, 1],
/// labels are digits 0..=9. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self, DataError> {
        match images.shape() {
            [n, IMAGE_SIDE, IMAGE_SIDE] if *n == labels.len() => {}
            [n, ..] if *n != labels.len() => {
                return Err(DataError::Invalid(format!(
                    "{n} images but {} labels",
                    labels.len()
                )))
            }
            other => {
                return Err(DataError::Invalid(format!(
                    "images must be [n, {IMAGE_SIDE}, {IMAGE_SIDE}], got {other:?}"
                )))
            }
        }
        if let Some(bad) = images.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(DataError::Invalid(format!("pixel {bad} outside [0, 1]")));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(DataError::Invalid(format!("label {bad} outside 0..=9")));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Images viewed as [n, 1, 28, 28] for convolutional models.
    pub fn images_nchw(&self) -> Tensor {
        self.images
            .clone()
            .reshape(&[self.len(), 1, IMAGE_SIDE, IMAGE_SIDE])
            .expect("dataset invariant guarantees the product")
    }

    /// Gather the rows named by `indices` into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        let row = IMAGE_SIDE * IMAGE_SIDE;
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(DataError::Invalid(format!(
                    "index {i} outside dataset of {}",
                    self.len()
                )));
            }
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        let images = Tensor::from_vec(&[indices.len(), IMAGE_SIDE, IMAGE_SIDE], data)
            .expect("gathered rows match the shape");
        Ok(Dataset { images, labels })
    }
}

/// Requested train/test/validation sizes plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: usize,
    pub test: usize,
    pub validation: usize,
    pub seed: u64,
}

impl SplitSpec {
    /// Check the counts against an available sample total.
    pub fn validate(&self, available: usize) -> Result<(), DataError> {
        let total = self
            .train
            .checked_add(self.test)
            .and_then(|t| t.checked_add(self.validation))
            .ok_or_else(|| DataError::Invalid("split counts overflow".into()))?;
        if total > available {
            return Err(DataError::Invalid(format!(
                "split wants {total} samples, only {available} available"
            )));
        }
        Ok(())
    }
}

/// One client's slice of the training split: indices into that split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub client: usize,
    pub indices: Vec<usize>,
}

/// Shuffle with the split seed, then cut contiguous train/test/validation
/// ranges. Deterministic for a fixed seed.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset), DataError> {
    spec.validate(dataset.len())?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut derive_rng(spec.seed, "split", &[]));
    let train_end = spec.train;
    let test_end = train_end + spec.test;
    let val_end = test_end + spec.validation;
    Ok((
        dataset.subset(&order[..train_end])?,
        dataset.subset(&order[train_end..test_end])?,
        dataset.subset(&order[test_end..val_end])?,
    ))
}

/// Deal the training split into `n_clients` IID shards: seeded shuffle,
/// equal base size, remainder assigned round-robin from client 0.
pub fn partition(train: &Dataset, n_clients: usize, seed: u64) -> Result<Vec<Shard>, DataError> {
    if n_clients == 0 {
        return Err(DataError::Invalid("need at least one client".into()));
    }
    if n_clients > train.len() {
        return Err(DataError::Invalid(format!(
            "{n_clients} clients but only {} samples",
            train.len()
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut derive_rng(seed, "partition", &[]));
    let base = train.len() / n_clients;
    let extra = train.len() % n_clients;
    let mut shards = Vec::with_capacity(n_clients);
    let mut at = 0usize;
    for client in 0..n_clients {
        let size = base + usize::from(client < extra);
        shards.push(Shard {
            client,
            indices: order[at..at + size].to_vec(),
        });
        at += size;
    }
    Ok(shards)
}
