//! Single-configuration studies: domain affinity, the one-extra-layer
//! oracle and its second-backbone control, cross-task transfer of selected
//! features, data subsampling, and budget/offset sweeps over relevance ranks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::TrainedBackbone;
use crate::data::{LabeledDataset, Task};
use crate::error::{Error, Result};
use crate::features::{build_h_all, AggregationConfig, FeatureBundle};
use crate::probes::{fit_selected, head2toe_bundle, scratch_train, score_features, train_head, train_head_on, Head2ToeConfig, RegSpec};
use crate::selector::{
    layer_group_norms, layerwise_scores, select_layerwise, select_offset_window, RelevanceScores, SelectionResult, Strategy,
};
use crate::store::{extract_to_store, ActivationStore};
use crate::tensor::{self, Tensor};
use crate::train::TrainConfig;

/// Train and test activations of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitStores {
    pub train: ActivationStore,
    pub test: ActivationStore,
}

impl SplitStores {
    pub fn extract(backbone: &TrainedBackbone, task: &Task) -> Result<Self> {
        Ok(Self {
            train: extract_to_store(backbone, &task.train, "train")?,
            test: extract_to_store(backbone, &task.test, "test")?,
        })
    }

    /// Train and test bundles over `layers` (all layers when empty).
    pub fn bundles(&self, agg: &AggregationConfig, layers: &[String]) -> Result<(FeatureBundle, FeatureBundle)> {
        let names: Vec<&str> = if layers.is_empty() {
            self.train.layer_names()
        } else {
            layers.iter().map(String::as_str).collect()
        };
        Ok((build_h_all(&self.train, agg, &names)?, build_h_all(&self.test, agg, &names)?))
    }
}

/// Test accuracy of an unregularized head trained on `train`.
pub fn probe_accuracy(train: &FeatureBundle, test: &FeatureBundle, cfg: &TrainConfig) -> Result<f64> {
    let head = train_head_on(train, &RegSpec::none(), cfg)?;
    head.accuracy(&test.matrix, &test.labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityRecord {
    pub task: String,
    pub acc_linear: f64,
    pub acc_scratch: f64,
    pub affinity: f64,
}

impl AffinityRecord {
    pub fn new(task: impl Into<String>, acc_linear: f64, acc_scratch: f64) -> Self {
        Self {
            task: task.into(),
            acc_linear,
            acc_scratch,
            affinity: acc_linear - acc_scratch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinityConfig {
    pub aggregation: AggregationConfig,
    pub probe: TrainConfig,
    pub scratch: TrainConfig,
}

/// Linear probe on the embedding versus the same network trained from
/// scratch, on matched schedules.
pub fn domain_affinity(task: &Task, backbone: &TrainedBackbone, cfg: &AffinityConfig) -> Result<AffinityRecord> {
    let stores = SplitStores::extract(backbone, task)?;
    let (train, test) = stores.bundles(&cfg.aggregation, std::slice::from_ref(&backbone.spec.embedding))?;
    let acc_linear = probe_accuracy(&train, &test, &cfg.probe)?;
    let scratch = scratch_train(&backbone.spec, &task.train, &cfg.scratch)?;
    let acc_scratch = scratch.evaluate(&task.test)?;
    Ok(AffinityRecord::new(task.id.clone(), acc_linear, acc_scratch))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Test accuracy of embedding ⊕ layer, for every store layer.
    pub table: Vec<(String, f64)>,
    pub best: String,
    pub best_accuracy: f64,
    /// Embedding-only probe, for reference.
    pub linear: f64,
}

fn concat_layers(store: &ActivationStore, agg: &AggregationConfig, a: &str, b: &str) -> Result<FeatureBundle> {
    build_h_all(store, agg, &[a])?.concat(&build_h_all(store, agg, &[b])?)
}

/// Adds each layer in turn to the embedding and reports test accuracy.
pub fn oracle_single_layer(
    stores: &SplitStores,
    embedding: &str,
    agg: &AggregationConfig,
    cfg: &TrainConfig,
) -> Result<OracleResult> {
    let names = stores.train.layer_names();
    if names.len() < 2 {
        return Err(Error::Harness("the oracle needs at least two layers".into()));
    }
    let (lp_train, lp_test) = stores.bundles(agg, &[embedding.to_string()])?;
    let linear = probe_accuracy(&lp_train, &lp_test, cfg)?;
    let mut table = Vec::with_capacity(names.len());
    for name in names {
        let train = concat_layers(&stores.train, agg, embedding, name)?;
        let test = concat_layers(&stores.test, agg, embedding, name)?;
        table.push((name.to_string(), probe_accuracy(&train, &test, cfg)?));
    }
    let (best, best_accuracy) = table
        .iter()
        .fold(None::<(String, f64)>, |acc, (n, a)| match acc {
            Some((_, b)) if *a <= b => acc,
            _ => Some((n.clone(), *a)),
        })
        .expect("non-empty table");
    Ok(OracleResult {
        table,
        best,
        best_accuracy,
        linear,
    })
}

/// Probe on the concatenated `layer` features of two backbones' stores.
pub fn control_ensemble(
    a: &SplitStores,
    b: &SplitStores,
    layer: &str,
    agg: &AggregationConfig,
    cfg: &TrainConfig,
) -> Result<f64> {
    if a.train.labels() != b.train.labels() || a.test.labels() != b.test.labels() {
        return Err(Error::Harness("control stores describe different splits".into()));
    }
    let one = [layer.to_string()];
    let (atr, ate) = a.bundles(agg, &one)?;
    let (btr, bte) = b.bundles(agg, &one)?;
    probe_accuracy(&atr.concat(&btr)?, &ate.concat(&bte)?, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub tasks: Vec<String>,
    /// `accuracy[i][j]`: task j with the features selected on task i.
    pub accuracy: Vec<Vec<f64>>,
    /// `accuracy[i][j] − accuracy[j][j]`.
    pub delta: Vec<Vec<f64>>,
    pub selections: Vec<SelectionResult>,
}

/// Evaluates every task with features selected on every other task.
pub fn transfer_matrix(tasks: &[(String, SplitStores)], cfg: &Head2ToeConfig) -> Result<TransferMatrix> {
    if tasks.len() < 2 {
        return Err(Error::Harness("a transfer matrix needs at least two tasks".into()));
    }
    let bundles = tasks
        .iter()
        .map(|(_, s)| s.bundles(&cfg.aggregation, &cfg.layers))
        .collect::<Result<Vec<_>>>()?;
    if bundles.iter().any(|(tr, _)| tr.spans != bundles[0].0.spans) {
        return Err(Error::Harness("tasks do not share a feature layout".into()));
    }
    let selections = bundles
        .iter()
        .map(|(train, _)| head2toe_bundle(train, cfg).map(|r| r.selection))
        .collect::<Result<Vec<_>>>()?;
    let n = tasks.len();
    let mut accuracy = vec![vec![0.0; n]; n];
    for (i, sel) in selections.iter().enumerate() {
        let cols = sel.indices();
        for (j, (train, test)) in bundles.iter().enumerate() {
            let xtr = tensor::gather_cols(&train.matrix, &cols)?;
            let xte = tensor::gather_cols(&test.matrix, &cols)?;
            let head = train_head(&xtr, &train.labels, train.num_classes, &RegSpec::none(), &cfg.head_train)?;
            accuracy[i][j] = head.accuracy(&xte, &test.labels)?;
        }
    }
    let delta = (0..n)
        .map(|i| (0..n).map(|j| accuracy[i][j] - accuracy[j][j]).collect())
        .collect();
    Ok(TransferMatrix {
        tasks: tasks.iter().map(|(id, _)| id.clone()).collect(),
        accuracy,
        delta,
        selections,
    })
}

/// Pairwise shared fraction of kept features.
pub fn overlap_matrix(selections: &[SelectionResult]) -> Vec<Vec<f64>> {
    selections
        .iter()
        .map(|a| selections.iter().map(|b| a.overlap(b)).collect())
        .collect()
}

/// Shots per class for a data fraction: `max(1, ⌊budget·f_d / C⌋)`.
pub fn shots_per_class(budget: usize, fraction: f64, classes: usize) -> usize {
    ((budget as f64 * fraction / classes.max(1) as f64).floor() as usize).max(1)
}

/// Keeps a seeded per-class sample of the training split; the test split is
/// untouched. `fraction == 1` returns the task unchanged.
pub fn subsample_task(task: &Task, fraction: f64, budget: usize, seed: u64) -> Result<Task> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("data fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(task.clone());
    }
    let c = task.num_classes();
    let shots = shots_per_class(budget, fraction, c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for class in 0..c as u32 {
        let mut idx: Vec<usize> = (0..task.train.len()).filter(|&i| task.train.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        keep.extend(idx.into_iter().take(shots));
    }
    keep.sort_unstable();
    Ok(Task {
        id: task.id.clone(),
        train: task.train.subset(&keep)?,
        test: task.test.clone(),
    })
}

fn selected_accuracy(
    train: &FeatureBundle,
    test: &FeatureBundle,
    sel: &SelectionResult,
    cfg: &TrainConfig,
) -> Result<f64> {
    let cols = sel.indices();
    let xtr = tensor::gather_cols(&train.matrix, &cols)?;
    let xte = tensor::gather_cols(&test.matrix, &cols)?;
    let head = train_head(&xtr, &train.labels, train.num_classes, &RegSpec::none(), cfg)?;
    head.accuracy(&xte, &test.labels)
}

/// Test accuracy of heads trained on consecutive relevance-rank windows.
pub fn offset_window_sweep(
    train: &FeatureBundle,
    test: &FeatureBundle,
    scores: &RelevanceScores,
    window: usize,
    offsets: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<(usize, f64)>> {
    offsets
        .iter()
        .map(|&o| {
            let sel = select_offset_window(scores, window, o)?;
            Ok((o, selected_accuracy(train, test, &sel, cfg)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetComparison {
    pub budget: usize,
    pub feature_wise: f64,
    pub layer_mean: f64,
    pub layer_group: f64,
    /// Features actually kept by each layer-wise variant.
    pub layer_mean_kept: usize,
    pub layer_group_kept: usize,
}

/// Feature-wise top-`budget` selection against whole-layer selection under
/// the same feature budget, by mean score and by group norm.
pub fn featurewise_vs_layerwise(
    train: &FeatureBundle,
    test: &FeatureBundle,
    scores: &RelevanceScores,
    budget: usize,
    cfg: &TrainConfig,
) -> Result<BudgetComparison> {
    let feat = select_offset_window(scores, budget, 0)?;
    let mean = select_layerwise(&layerwise_scores(scores, &train.spans)?, &train.spans, budget, Strategy::LayerMean)?;
    let group = select_layerwise(
        &layer_group_norms(scores, &train.spans)?,
        &train.spans,
        budget,
        Strategy::LayerGroupNorm,
    )?;
    Ok(BudgetComparison {
        budget,
        feature_wise: selected_accuracy(train, test, &feat, cfg)?,
        layer_mean: selected_accuracy(train, test, &mean, cfg)?,
        layer_group: selected_accuracy(train, test, &group, cfg)?,
        layer_mean_kept: mean.kept,
        layer_group_kept: group.kept,
    })
}

/// Selection accuracy as the per-layer target size grows.
pub fn target_size_sweep(stores: &SplitStores, sizes: &[usize], cfg: &Head2ToeConfig) -> Result<Vec<(usize, usize, f64)>> {
    sizes
        .iter()
        .map(|&t| {
            let mut c = cfg.clone();
            c.aggregation.target_size = t;
            let (train, test) = stores.bundles(&c.aggregation, &c.layers)?;
            let r = head2toe_bundle(&train, &c)?;
            Ok((t, train.dim(), r.evaluate(&test)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionPoint {
    pub data_fraction: f64,
    pub shots: usize,
    pub linear: f64,
    pub head2toe: f64,
}

/// Linear probe and selection accuracy on subsampled training data.
pub fn data_fraction_sweep(
    backbone: &TrainedBackbone,
    task: &Task,
    fractions: &[f64],
    budget: usize,
    cfg: &Head2ToeConfig,
    seed: u64,
) -> Result<Vec<FractionPoint>> {
    let test = extract_to_store(backbone, &task.test, "test")?;
    fractions
        .iter()
        .map(|&f| {
            let sub = subsample_task(task, f, budget, seed)?;
            let stores = SplitStores {
                train: extract_to_store(backbone, &sub.train, "train")?,
                test: test.clone(),
            };
            let (lp_tr, lp_te) = stores.bundles(&cfg.aggregation, std::slice::from_ref(&backbone.spec.embedding))?;
            let (tr, te) = stores.bundles(&cfg.aggregation, &cfg.layers)?;
            Ok(FractionPoint {
                data_fraction: f,
                shots: shots_per_class(budget, f, task.num_classes()),
                linear: probe_accuracy(&lp_tr, &lp_te, &cfg.head_train)?,
                head2toe: head2toe_bundle(&tr, cfg)?.evaluate(&te)?,
            })
        })
        .collect()
}

/// Relevance scores of a bundle plus the selection and test accuracy for
/// one fraction; convenience for sweeps that reuse the scores.
pub fn score_and_fit(
    train: &FeatureBundle,
    test: &FeatureBundle,
    cfg: &Head2ToeConfig,
) -> Result<(RelevanceScores, f64)> {
    let (scores, _) = score_features(train, cfg.reg_coefficient, &cfg.score_train)?;
    let r = fit_selected(train, &scores, cfg.fraction, cfg.aggregation, &cfg.head_train)?;
    Ok((scores, r.evaluate(test)?))
}

/// Random-label copy of a dataset (chance-level reference).
pub fn shuffled_labels(data: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    let mut labels = data.labels.clone();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    data.with_labels(labels, data.num_classes)
}

/// Column-stacked copy of a matrix, used to build duplicated-feature probes.
pub fn duplicate_columns(m: &Tensor) -> Result<Tensor> {
    tensor::concat_cols(&[m, m])
}
