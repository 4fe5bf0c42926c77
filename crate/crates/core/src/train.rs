//! Shared SGD driver for every training procedure in the crate.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, Graph, NodeId};
use crate::data::{BatchPolicy, Batcher};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    #[serde(default)]
    pub batch: BatchPolicy,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(lr: f64, steps: usize, seed: u64) -> Self {
        Self {
            lr,
            steps,
            batch: BatchPolicy::Auto,
            seed,
        }
    }

    pub fn with_batch(mut self, batch: BatchPolicy) -> Self {
        self.batch = batch;
        self
    }

    pub fn check(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Runs `cfg.steps` plain SGD steps over parameter groups, each with its
/// own learning rate. Groups with a zero rate enter the graph as constants.
/// `build` receives the graph, the per-group parameter nodes and the batch
/// indices, and returns the scalar loss node.
pub(crate) fn sgd_loop<F>(
    groups: &mut [Vec<Tensor>],
    lrs: &[f64],
    cfg: &TrainConfig,
    n: usize,
    mut build: F,
) -> Result<()>
where
    F: FnMut(&mut Graph<f32>, &[Vec<NodeId>], &[usize]) -> Result<NodeId>,
{
    debug_assert_eq!(groups.len(), lrs.len());
    let mut batcher = Batcher::new(n, cfg.batch, cfg.seed);
    for step in 0..cfg.steps {
        let idx = batcher.next_batch();
        let diverged = |e: Error| match e {
            Error::NonFinite(op) => Error::Divergence {
                step,
                reason: format!("non-finite output from {op}"),
            },
            other => other,
        };
        let mut g = Graph::new();
        let nodes = groups
            .iter()
            .zip(lrs)
            .map(|(group, &lr)| {
                group
                    .iter()
                    .map(|p| if lr > 0.0 { g.param(p.clone()) } else { g.input(p.clone()) })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
            .map_err(diverged)?;
        let loss = build(&mut g, &nodes, &idx).map_err(diverged)?;
        if lrs.iter().all(|&lr| lr == 0.0) {
            continue;
        }
        let grads = g.backward(loss)?;
        for ((group, ids), &lr) in groups.iter_mut().zip(&nodes).zip(lrs) {
            if lr == 0.0 {
                continue;
            }
            // Parameters that do not reach the loss keep their value.
            let owned: Vec<Tensor> = ids
                .iter()
                .zip(group.iter())
                .map(|(&id, p)| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            let gs: Vec<&Tensor> = owned.iter().collect();
            sgd_step(group, &gs, lr)?;
        }
    }
    Ok(())
}
