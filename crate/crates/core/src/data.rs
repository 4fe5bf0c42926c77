//! Labeled datasets and minibatch scheduling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Examples stacked along the first axis, with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub id: String,
    pub inputs: Tensor,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(id: impl Into<String>, inputs: Tensor, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        let ds = Self {
            id: id.into(),
            inputs,
            labels,
            num_classes,
        };
        ds.check()?;
        Ok(ds)
    }

    pub fn check(&self) -> Result<()> {
        if self.inputs.rank() < 2 {
            return Err(Error::dim(format!(
                "dataset inputs need a leading example axis, got {:?}",
                self.inputs.shape()
            )));
        }
        if self.inputs.rows() != self.labels.len() {
            return Err(Error::dim(format!(
                "{} examples but {} labels",
                self.inputs.rows(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y as usize >= self.num_classes) {
            return Err(Error::dim(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example input shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            id: self.id.clone(),
            inputs: self.inputs.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    pub fn with_labels(&self, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        Self::new(self.id.clone(), self.inputs.clone(), labels, num_classes)
    }
}

/// A target task: a train split plus a held-out test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: String,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl Task {
    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &Tensor, labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let c = logits.row_len().max(1);
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y as usize)
        .count();
    hits as f64 / labels.len() as f64
}

/// First index of the maximum; ties resolve to the lower index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// How examples are grouped into SGD steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchPolicy {
    /// Full batch up to 1024 examples, otherwise shuffled minibatches of 128.
    #[default]
    Auto,
    FullBatch,
    MiniBatch(usize),
}

impl BatchPolicy {
    pub const FULL_BATCH_LIMIT: usize = 1024;
    pub const AUTO_BATCH: usize = 128;

    /// Effective batch size for `n` examples.
    pub fn batch_size(self, n: usize) -> usize {
        match self {
            BatchPolicy::Auto if n <= Self::FULL_BATCH_LIMIT => n,
            BatchPolicy::Auto => Self::AUTO_BATCH,
            BatchPolicy::FullBatch => n,
            BatchPolicy::MiniBatch(b) => b.clamp(1, n.max(1)),
        }
    }
}

/// Yields the example indices for each step. Minibatches walk seeded
/// permutations epoch by epoch; a full batch is always `0..n`.
pub struct Batcher {
    n: usize,
    batch: usize,
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
}

impl Batcher {
    pub fn new(n: usize, policy: BatchPolicy, seed: u64) -> Self {
        let batch = policy.batch_size(n);
        Self {
            n,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
            perm: (0..n).collect(),
            pos: n,
        }
    }

    pub fn is_full_batch(&self) -> bool {
        self.batch >= self.n
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.is_full_batch() {
            return (0..self.n).collect();
        }
        if self.pos + self.batch > self.n {
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.perm[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}
