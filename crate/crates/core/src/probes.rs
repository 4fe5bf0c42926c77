//! Head training and adaptation procedures: regularized linear heads, the
//! two-phase select-then-probe procedure, fine-tuning variants, the
//! validation gate, and the first-order Taylor check of fine-tuning.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::backbone::{build_forward, pretrain, BackboneSpec, LayerSpec, TrainedBackbone, INFERENCE_CHUNK};
use crate::data::{accuracy, BatchPolicy, LabeledDataset};
use crate::error::{Error, Result};
use crate::features::{aggregate_node, build_h_all, AggregationConfig, FeatureBundle, LayerSpan};
use crate::selector::{relevance_scores, select_fraction, RelevanceScores, ScoreProvenance, SelectionResult};
use crate::store::ActivationStore;
use crate::tensor::{self, Tensor};
use crate::train::{sgd_loop, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    #[default]
    None,
    L1,
    L2,
    L21,
}

/// Penalty on the head weights (never the bias). A zero coefficient is
/// stored as [`RegKind::None`], so the two spellings cannot diverge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRegSpec", into = "RawRegSpec")]
pub struct RegSpec {
    kind: RegKind,
    coefficient: f64,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
struct RawRegSpec {
    kind: RegKind,
    #[serde(default)]
    coefficient: f64,
}

impl TryFrom<RawRegSpec> for RegSpec {
    type Error = Error;
    fn try_from(raw: RawRegSpec) -> Result<Self> {
        RegSpec::new(raw.kind, raw.coefficient)
    }
}

impl From<RegSpec> for RawRegSpec {
    fn from(r: RegSpec) -> Self {
        RawRegSpec {
            kind: r.kind,
            coefficient: r.coefficient,
        }
    }
}

impl RegSpec {
    pub fn new(kind: RegKind, coefficient: f64) -> Result<Self> {
        if !(coefficient.is_finite() && coefficient >= 0.0) {
            return Err(Error::config(format!("regularization coefficient {coefficient} must be finite and >= 0")));
        }
        if kind == RegKind::None && coefficient != 0.0 {
            return Err(Error::config("kind \"none\" takes no coefficient"));
        }
        if coefficient == 0.0 {
            return Ok(Self::none());
        }
        Ok(Self { kind, coefficient })
    }

    pub fn none() -> Self {
        Self {
            kind: RegKind::None,
            coefficient: 0.0,
        }
    }

    pub fn l21(coefficient: f64) -> Result<Self> {
        Self::new(RegKind::L21, coefficient)
    }

    pub fn kind(&self) -> RegKind {
        self.kind
    }

    pub fn coefficient(&self) -> f64 {
        self.coefficient
    }

    /// Adds `coefficient · penalty(w)` to `loss`.
    fn apply(&self, g: &mut Graph<f32>, loss: NodeId, w: NodeId) -> Result<NodeId> {
        let penalty = match self.kind {
            RegKind::None => return Ok(loss),
            RegKind::L1 => g.l1(w)?,
            RegKind::L2 => g.sum_squares(w)?,
            RegKind::L21 => g.l21(w)?,
        };
        let scaled = g.scale(penalty, self.coefficient)?;
        g.add(loss, scaled)
    }
}

impl std::fmt::Display for RegSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            RegKind::None => write!(f, "none"),
            RegKind::L1 => write!(f, "l1:{}", self.coefficient),
            RegKind::L2 => write!(f, "l2:{}", self.coefficient),
            RegKind::L21 => write!(f, "l21:{}", self.coefficient),
        }
    }
}

/// A trained linear head `logits = x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadResult {
    /// `[D × C]`.
    pub weights: Tensor,
    /// `[C]`.
    pub bias: Tensor,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub reg: RegSpec,
}

impl HeadResult {
    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        tensor::add_bias(&tensor::matmul(features, &self.weights)?, &self.bias)
    }

    pub fn accuracy(&self, features: &Tensor, labels: &[u32]) -> Result<f64> {
        Ok(accuracy(&self.logits(features)?, labels))
    }
}

fn check_labels(labels: &[u32], num_classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= num_classes) {
        return Err(Error::Contract(format!("label {bad} outside [0, {num_classes})")));
    }
    Ok(())
}

/// Rows `idx` of `t`, without copying when `idx` is the identity.
fn batch_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    if idx.len() == t.rows() && idx.iter().enumerate().all(|(i, &j)| i == j) {
        Ok(t.clone())
    } else {
        t.select_rows(idx)
    }
}

fn batch_labels(labels: &[u32], idx: &[usize]) -> Arc<Vec<u32>> {
    Arc::new(idx.iter().map(|&i| labels[i]).collect())
}

fn train_head_from(
    features: &Tensor,
    labels: &[u32],
    init: (Tensor, Tensor),
    reg: &RegSpec,
    cfg: &TrainConfig,
) -> Result<HeadResult> {
    cfg.check()?;
    let mut groups = vec![vec![init.0, init.1]];
    sgd_loop(&mut groups, &[cfg.lr], cfg, features.rows(), |g, nodes, idx| {
        let x = g.input(batch_rows(features, idx)?)?;
        let (w, b) = (nodes[0][0], nodes[0][1]);
        let z = g.matmul(x, w)?;
        let logits = g.add_bias(z, b)?;
        let loss = g.softmax_cross_entropy(logits, batch_labels(labels, idx))?;
        reg.apply(g, loss, w)
    })?;
    let mut group = groups.pop().expect("one group");
    let bias = group.pop().expect("bias");
    let weights = group.pop().expect("weights");
    let mut head = HeadResult {
        weights,
        bias,
        train_acc: 0.0,
        val_acc: None,
        test_acc: None,
        steps: cfg.steps,
        lr: cfg.lr,
        seed: cfg.seed,
        reg: *reg,
    };
    head.train_acc = head.accuracy(features, labels)?;
    Ok(head)
}

/// Trains a zero-initialized linear head with softmax cross-entropy plus
/// the given penalty on `W` by plain SGD.
pub fn train_head(
    features: &Tensor,
    labels: &[u32],
    num_classes: usize,
    reg: &RegSpec,
    cfg: &TrainConfig,
) -> Result<HeadResult> {
    if features.rank() != 2 || features.rows() != labels.len() {
        return Err(Error::dim(format!(
            "features {:?} vs {} labels",
            features.shape(),
            labels.len()
        )));
    }
    if num_classes == 0 || labels.len() < num_classes {
        return Err(Error::Contract(format!(
            "{} examples cannot train a {num_classes}-class head",
            labels.len()
        )));
    }
    check_labels(labels, num_classes)?;
    let d = features.row_len();
    let init = (Tensor::zeros(&[d, num_classes]), Tensor::zeros(&[num_classes]));
    train_head_from(features, labels, init, reg, cfg)
}

/// [`train_head`] on a feature bundle.
pub fn train_head_on(bundle: &FeatureBundle, reg: &RegSpec, cfg: &TrainConfig) -> Result<HeadResult> {
    train_head(&bundle.matrix, &bundle.labels, bundle.num_classes, reg, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head2ToeConfig {
    pub aggregation: AggregationConfig,
    /// Store layers to draw features from; empty means all of them.
    #[serde(default)]
    pub layers: Vec<String>,
    /// Scoring phase: group-lasso coefficient and schedule.
    pub reg_coefficient: f64,
    pub score_train: TrainConfig,
    pub fraction: f64,
    /// Final unregularized head on the kept columns.
    pub head_train: TrainConfig,
}

impl Head2ToeConfig {
    pub fn new(target_size: usize, reg_coefficient: f64, fraction: f64, train: TrainConfig) -> Self {
        Self {
            aggregation: AggregationConfig::new(target_size),
            layers: Vec::new(),
            reg_coefficient,
            score_train: train.clone(),
            fraction,
            head_train: train,
        }
    }

    /// Builds the configured feature bundle from a store.
    pub fn bundle(&self, store: &ActivationStore) -> Result<FeatureBundle> {
        let names: Vec<&str> = if self.layers.is_empty() {
            store.layer_names()
        } else {
            self.layers.iter().map(String::as_str).collect()
        };
        build_h_all(store, &self.aggregation, &names)
    }
}

/// Everything the selection procedure produces.
#[derive(Clone, Debug, PartialEq)]
pub struct Head2ToeResult {
    pub spans: Vec<LayerSpan>,
    pub aggregation: AggregationConfig,
    pub scores: RelevanceScores,
    pub selection: SelectionResult,
    pub head: HeadResult,
}

impl Head2ToeResult {
    /// Kept columns of a bundle built with the same layers and aggregation.
    pub fn transform(&self, bundle: &FeatureBundle) -> Result<Tensor> {
        if bundle.spans != self.spans {
            return Err(Error::dim("bundle layout differs from the one selection ran on"));
        }
        tensor::gather_cols(&bundle.matrix, &self.selection.indices())
    }

    pub fn evaluate(&self, bundle: &FeatureBundle) -> Result<f64> {
        self.head.accuracy(&self.transform(bundle)?, &bundle.labels)
    }

    pub fn artifact(&self) -> AdaptationArtifact {
        AdaptationArtifact {
            selection: self.selection.clone(),
            head: self.head.clone(),
        }
    }
}

/// Phase one: fits a group-lasso head on every column and scores the rows
/// of its weight matrix.
pub fn score_features(bundle: &FeatureBundle, reg_coefficient: f64, cfg: &TrainConfig) -> Result<(RelevanceScores, HeadResult)> {
    let reg = RegSpec::new(
        if reg_coefficient > 0.0 { RegKind::L21 } else { RegKind::None },
        reg_coefficient,
    )?;
    let head = train_head_on(bundle, &reg, cfg)?;
    let mut scores = relevance_scores(&head.weights)?;
    scores.provenance = Some(ScoreProvenance {
        reg_coefficient,
        steps: cfg.steps,
        seed: cfg.seed,
    });
    Ok((scores, head))
}

/// Phase two: an unregularized head on the top fraction of columns.
pub fn fit_selected(
    bundle: &FeatureBundle,
    scores: &RelevanceScores,
    fraction: f64,
    aggregation: AggregationConfig,
    cfg: &TrainConfig,
) -> Result<Head2ToeResult> {
    if scores.len() != bundle.dim() {
        return Err(Error::dim(format!("{} scores for {} features", scores.len(), bundle.dim())));
    }
    let selection = select_fraction(scores, fraction)?;
    let x = tensor::gather_cols(&bundle.matrix, &selection.indices())?;
    let head = train_head(&x, &bundle.labels, bundle.num_classes, &RegSpec::none(), cfg)?;
    Ok(Head2ToeResult {
        spans: bundle.spans.clone(),
        aggregation,
        scores: scores.clone(),
        selection,
        head,
    })
}

pub fn head2toe_bundle(bundle: &FeatureBundle, cfg: &Head2ToeConfig) -> Result<Head2ToeResult> {
    let (scores, _) = score_features(bundle, cfg.reg_coefficient, &cfg.score_train)?;
    fit_selected(bundle, &scores, cfg.fraction, cfg.aggregation, &cfg.head_train)
}

pub fn head2toe(store: &ActivationStore, cfg: &Head2ToeConfig) -> Result<Head2ToeResult> {
    head2toe_bundle(&cfg.bundle(store)?, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub backbone_lr: f64,
    pub head_lr: f64,
    pub steps: usize,
    #[serde(default)]
    pub batch: BatchPolicy,
    #[serde(default)]
    pub seed: u64,
    /// Applied to the tapped activations before the head, as in probing.
    pub aggregation: AggregationConfig,
}

impl FineTuneConfig {
    pub fn new(lr: f64, steps: usize, seed: u64) -> Self {
        Self {
            backbone_lr: lr,
            head_lr: lr,
            steps,
            batch: BatchPolicy::Auto,
            seed,
            aggregation: AggregationConfig::new(1),
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig::new(self.head_lr, self.steps, self.seed).with_batch(self.batch)
    }

    fn check(&self) -> Result<()> {
        for lr in [self.backbone_lr, self.head_lr] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::config(format!("learning rate must be finite and >= 0, got {lr}")));
            }
        }
        Ok(())
    }
}

/// A backbone with a linear head on (a column subset of) aggregated taps.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedModel {
    pub backbone: TrainedBackbone,
    pub layers: Vec<String>,
    pub columns: Option<Arc<Vec<usize>>>,
    pub aggregation: AggregationConfig,
    pub head: HeadResult,
}

/// Adds taps → aggregation → concatenation → column gather → head.
#[allow(clippy::too_many_arguments)]
fn adapted_logits(
    spec: &BackboneSpec,
    g: &mut Graph<f32>,
    x: NodeId,
    params: &[NodeId],
    layers: &[String],
    columns: Option<&Arc<Vec<usize>>>,
    aggregation: &AggregationConfig,
    head: (NodeId, NodeId),
) -> Result<NodeId> {
    let outs = build_forward(spec, g, x, params)?;
    let mut parts = Vec::with_capacity(layers.len());
    for name in layers {
        let tap = spec
            .tap(name)
            .ok_or_else(|| Error::config(format!("backbone has no tap named {name:?}")))?;
        parts.push(aggregate_node(g, outs[spec.tap_source(tap)], aggregation)?);
    }
    let mut h = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? };
    if let Some(cols) = columns {
        h = g.gather_cols(h, cols.clone())?;
    }
    let z = g.matmul(h, head.0)?;
    g.add_bias(z, head.1)
}

impl AdaptedModel {
    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        let n = inputs.rows();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + INFERENCE_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut g = Graph::new();
            let x = g.input(inputs.select_rows(&idx)?)?;
            let params = self
                .backbone
                .params
                .iter()
                .map(|p| g.input(p.clone()))
                .collect::<Result<Vec<_>>>()?;
            let w = g.input(self.head.weights.clone())?;
            let b = g.input(self.head.bias.clone())?;
            let out = adapted_logits(
                &self.backbone.spec,
                &mut g,
                x,
                &params,
                &self.layers,
                self.columns.as_ref(),
                &self.aggregation,
                (w, b),
            )?;
            parts.push(g.value(out).clone());
            start = end;
        }
        Tensor::concat_rows(&parts)
    }

    pub fn evaluate(&self, data: &LabeledDataset) -> Result<f64> {
        Ok(accuracy(&self.logits(&data.inputs)?, &data.labels))
    }
}

fn train_adapted(
    backbone: &TrainedBackbone,
    layers: Vec<String>,
    columns: Option<Arc<Vec<usize>>>,
    head_init: (Tensor, Tensor),
    data: &LabeledDataset,
    cfg: &FineTuneConfig,
) -> Result<AdaptedModel> {
    cfg.check()?;
    data.check()?;
    if data.is_empty() {
        return Err(Error::Contract("fine-tuning needs a non-empty dataset".into()));
    }
    check_labels(&data.labels, head_init.1.len())?;
    let spec = &backbone.spec;
    let mut groups = vec![backbone.params.clone(), vec![head_init.0, head_init.1]];
    let tc = cfg.train_config();
    sgd_loop(
        &mut groups,
        &[cfg.backbone_lr, cfg.head_lr],
        &tc,
        data.len(),
        |g, nodes, idx| {
            let x = g.input(batch_rows(&data.inputs, idx)?)?;
            let logits = adapted_logits(
                spec,
                g,
                x,
                &nodes[0],
                &layers,
                columns.as_ref(),
                &cfg.aggregation,
                (nodes[1][0], nodes[1][1]),
            )?;
            g.softmax_cross_entropy(logits, batch_labels(&data.labels, idx))
        },
    )?;
    let mut head_group = groups.pop().expect("head group");
    let params = groups.pop().expect("backbone group");
    let bias = head_group.pop().expect("bias");
    let weights = head_group.pop().expect("weights");
    let mut adapted = AdaptedModel {
        backbone: TrainedBackbone::new(spec.clone(), params, backbone.source.clone())?,
        layers,
        columns,
        aggregation: cfg.aggregation,
        head: HeadResult {
            weights,
            bias,
            train_acc: 0.0,
            val_acc: None,
            test_acc: None,
            steps: cfg.steps,
            lr: cfg.head_lr,
            seed: cfg.seed,
            reg: RegSpec::none(),
        },
    };
    adapted.head.train_acc = adapted.evaluate(data)?;
    Ok(adapted)
}

/// Updates every backbone weight jointly with a new zero-initialized head on
/// the (aggregated) embedding.
pub fn fine_tune(backbone: &TrainedBackbone, data: &LabeledDataset, cfg: &FineTuneConfig) -> Result<AdaptedModel> {
    let emb = backbone
        .spec
        .tap_shapes()?
        .into_iter()
        .find(|(name, _)| *name == backbone.spec.embedding)
        .ok_or_else(|| Error::config("embedding tap missing"))?;
    let d = emb.1.iter().product::<usize>();
    if emb.1.len() != 1 {
        return Err(Error::config("fine-tuning expects a flat embedding tap"));
    }
    let c = data.num_classes;
    train_adapted(
        backbone,
        vec![backbone.spec.embedding.clone()],
        None,
        (Tensor::zeros(&[d, c]), Tensor::zeros(&[c])),
        data,
        cfg,
    )
}

/// Fine-tunes the backbone through the aggregation of the selected
/// features, starting from the selection run's head.
pub fn head2toe_ft(
    backbone: &TrainedBackbone,
    selection: &Head2ToeResult,
    data: &LabeledDataset,
    cfg: &FineTuneConfig,
) -> Result<AdaptedModel> {
    let mut cfg = cfg.clone();
    cfg.aggregation = selection.aggregation;
    let layers = selection.spans.iter().map(|s| s.name.clone()).collect();
    train_adapted(
        backbone,
        layers,
        Some(Arc::new(selection.selection.indices())),
        (selection.head.weights.clone(), selection.head.bias.clone()),
        data,
        &cfg,
    )
}

/// The same architecture trained from a random initialization on the
/// target task, with the logit layer resized to its classes.
pub fn scratch_train(spec: &BackboneSpec, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainedBackbone> {
    let spec = spec.with_classes(data.num_classes);
    if cfg.steps == 0 {
        let mut b = TrainedBackbone::initialized(spec, cfg.seed)?;
        b.source.dataset = data.id.clone();
        b.source.accuracy = b.evaluate(data)?;
        return Ok(b);
    }
    pretrain(&spec, data, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateChoice {
    Head2Toe,
    Head2ToeFt,
}

/// Keeps the frozen-backbone result unless fine-tuning is strictly better
/// on validation data.
pub fn ft_plus_gate(h2t_val: Option<f64>, h2tft_val: Option<f64>) -> Result<GateChoice> {
    match (h2t_val, h2tft_val) {
        (Some(a), Some(b)) if b > a => Ok(GateChoice::Head2ToeFt),
        (Some(_), Some(_)) => Ok(GateChoice::Head2Toe),
        _ => Err(Error::Contract("the gate needs validation accuracy for both runs".into())),
    }
}

/// First-order Taylor check of a weight perturbation `w → w + εΔ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearizationReport {
    pub epsilon: f64,
    /// `F(x; w)`.
    pub output: f64,
    /// `F(x; w + εΔ)`, computed exactly.
    pub perturbed: f64,
    /// `F(x; w) + Σ_i h_i c_{i,x}` summed over all layers.
    pub approximation: f64,
    /// For each dense layer, `c_{i,x} = Σ_j (∂F/∂z_j)·εΔ_ij` per input unit.
    pub coefficients: Vec<Vec<f64>>,
    pub error: f64,
}

/// A unit-norm Gaussian direction over every backbone parameter.
pub fn random_direction(spec: &BackboneSpec, seed: u64) -> Result<Vec<Tensor<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir: Vec<Tensor<f64>> = spec
        .param_shapes()?
        .iter()
        .map(|shape| Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng)))
        .collect();
    unit_norm(dir)
}

fn unit_norm(mut dir: Vec<Tensor<f64>>) -> Result<Vec<Tensor<f64>>> {
    let norm = dir.iter().flat_map(|t| t.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::config("direction is zero"));
    }
    for t in &mut dir {
        *t = t.map(|v| v / norm);
    }
    Ok(dir)
}

/// Keeps only the parameters of the listed layer indices in a direction and
/// rescales it to unit norm.
pub fn restrict_direction(spec: &BackboneSpec, dir: &[Tensor<f64>], layers: &[usize]) -> Result<Vec<Tensor<f64>>> {
    let mut owner = Vec::new();
    for (l, layer) in spec.layers.iter().enumerate() {
        if layer.has_params() {
            owner.extend([l, l]);
        }
    }
    if owner.len() != dir.len() {
        return Err(Error::dim("direction does not match the backbone parameters"));
    }
    unit_norm(
        dir.iter()
            .zip(&owner)
            .map(|(t, l)| if layers.contains(l) { t.clone() } else { Tensor::zeros(t.shape()) })
            .collect(),
    )
}

fn logit_value(spec: &BackboneSpec, params: &[Tensor<f64>], x: &Tensor<f64>, logit: usize, grads: bool)
    -> Result<(f64, Option<(Graph<f64>, Vec<NodeId>, Vec<NodeId>, crate::autodiff::Gradients<f64>)>)>
{
    let mut g = Graph::<f64>::new();
    let xi = g.input(x.clone())?;
    let ps = params
        .iter()
        .map(|p| if grads { g.param(p.clone()) } else { g.input(p.clone()) })
        .collect::<Result<Vec<_>>>()?;
    let outs = build_forward(spec, &mut g, xi, &ps)?;
    let last = *outs.last().expect("layers");
    let c = g.value(last).row_len();
    if logit >= c {
        return Err(Error::Contract(format!("logit {logit} outside [0, {c})")));
    }
    let pick = g.input(Tensor::from_fn(&[1, c], |j| if j == logit { 1.0 } else { 0.0 }))?;
    let masked = g.mul(last, pick)?;
    let f = g.sum(masked)?;
    let value = g.value(f).item()?;
    if !grads {
        return Ok((value, None));
    }
    let gr = g.backward(f)?;
    Ok((value, Some((g, ps, outs, gr))))
}

/// Compares the exact perturbed output of one logit for a single example
/// with its first-order expansion. Runs in double precision.
pub fn linearization_check(
    backbone: &TrainedBackbone,
    x: &Tensor,
    logit: usize,
    epsilon: f64,
    direction: &[Tensor<f64>],
) -> Result<LinearizationReport> {
    let spec = &backbone.spec;
    if x.rows() != 1 {
        return Err(Error::Contract("linearization is checked on a single example".into()));
    }
    if direction.len() != backbone.params.len()
        || direction.iter().zip(&backbone.params).any(|(d, p)| d.shape() != p.shape())
    {
        return Err(Error::dim("direction does not match the backbone parameters"));
    }
    let norm = direction.iter().flat_map(|t| t.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("direction must have unit norm, got {norm}")));
    }
    let x = x.cast::<f64>();
    let w: Vec<Tensor<f64>> = backbone.params.iter().map(Tensor::cast).collect();
    let (output, rest) = logit_value(spec, &w, &x, logit, true)?;
    let (g, ps, outs, grads) = rest.expect("gradients requested");

    let mut coefficients = Vec::new();
    let mut first_order = 0.0;
    let mut pi = 0;
    for (l, layer) in spec.layers.iter().enumerate() {
        if !layer.has_params() {
            continue;
        }
        let (dw, db) = (&direction[pi], &direction[pi + 1]);
        match layer {
            LayerSpec::Dense { .. } => {
                let zero = Tensor::zeros(g.value(outs[l]).shape());
                let gz = grads.get(outs[l]).unwrap_or(&zero);
                let h = if l == 0 { &x } else { g.value(outs[l - 1]) };
                let units = dw.row_len();
                let c: Vec<f64> = (0..dw.rows())
                    .map(|i| (0..units).map(|j| gz.data()[j] * epsilon * dw.row(i)[j]).sum())
                    .collect();
                first_order += h.data().iter().zip(&c).map(|(hi, ci)| hi * ci).sum::<f64>();
                first_order += (0..units).map(|j| gz.data()[j] * epsilon * db.data()[j]).sum::<f64>();
                coefficients.push(c);
            }
            _ => {
                for k in [pi, pi + 1] {
                    if let Some(gp) = grads.get(ps[k]) {
                        first_order += gp
                            .data()
                            .iter()
                            .zip(direction[k].data())
                            .map(|(a, d)| a * epsilon * d)
                            .sum::<f64>();
                    }
                }
            }
        }
        pi += 2;
    }

    let moved: Vec<Tensor<f64>> = w
        .iter()
        .zip(direction)
        .map(|(p, d)| p.zip_map(d, |a, b| a + epsilon * b))
        .collect::<Result<_>>()?;
    let (perturbed, _) = logit_value(spec, &moved, &x, logit, false)?;
    let approximation = output + first_order;
    Ok(LinearizationReport {
        epsilon,
        output,
        perturbed,
        approximation,
        coefficients,
        error: (perturbed - approximation).abs(),
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Contract("slope fit needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::NonFinite("log-log fit of non-positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    Ok(sxy / sxx)
}

const ARTIFACT_MAGIC: &[u8; 4] = b"H2TH";
const ARTIFACT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct HeadMeta {
    train_acc: f64,
    val_acc: Option<f64>,
    test_acc: Option<f64>,
    steps: usize,
    lr: f64,
    seed: u64,
    reg: RegSpec,
}

/// The complete stored adaptation: kept-feature mask plus the final head.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationArtifact {
    pub selection: SelectionResult,
    pub head: HeadResult,
}

impl AdaptationArtifact {
    /// Stored size in f32-equivalents: head weights and bias plus the
    /// one-bit-per-feature mask.
    pub fn storage_floats(&self) -> f64 {
        (self.head.weights.len() + self.head.bias.len()) as f64 + self.selection.dim() as f64 / 32.0
    }

    /// `"H2TH" | u32 version | selection record | u64 meta length | meta JSON
    /// | u64 D | u64 C | W (f32 LE) | b (f32 LE)`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(ARTIFACT_MAGIC);
        out.extend_from_slice(&ARTIFACT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.selection.to_bytes());
        let h = &self.head;
        let meta = serde_json::to_vec(&HeadMeta {
            train_acc: h.train_acc,
            val_acc: h.val_acc,
            test_acc: h.test_acc,
            steps: h.steps,
            lr: h.lr,
            seed: h.seed,
            reg: h.reg,
        })?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(h.dim() as u64).to_le_bytes());
        out.extend_from_slice(&(h.num_classes() as u64).to_le_bytes());
        for v in h.weights.data().iter().chain(h.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        use crate::backbone::{read_exact, read_u32, read_u64};
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != ARTIFACT_MAGIC {
            return Err(Error::format("not an adaptation artifact"));
        }
        let version = read_u32(&mut r)?;
        if version != ARTIFACT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: ARTIFACT_VERSION,
            });
        }
        let (selection, used) = SelectionResult::from_bytes(r)?;
        r = &r[used..];
        let len = read_u64(&mut r)? as usize;
        if r.len() < len {
            return Err(Error::format("truncated head metadata"));
        }
        let meta: HeadMeta = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let d = read_u64(&mut r)? as usize;
        let c = read_u64(&mut r)? as usize;
        if d != selection.kept {
            return Err(Error::format(format!("head has {d} rows but the mask keeps {}", selection.kept)));
        }
        let mut floats = |n: usize| -> Result<Vec<f32>> {
            let need = n.checked_mul(4).ok_or_else(|| Error::format("head size overflow"))?;
            if r.len() < need {
                return Err(Error::format("truncated head weights"));
            }
            let v = r[..need]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            r = &r[need..];
            Ok(v)
        };
        let weights = Tensor::new(vec![d, c], floats(d * c)?)?;
        let bias = Tensor::new(vec![c], floats(c)?)?;
        if !r.is_empty() {
            return Err(Error::format("trailing bytes after adaptation artifact"));
        }
        Ok(Self {
            selection,
            head: HeadResult {
                weights,
                bias,
                train_acc: meta.train_acc,
                val_acc: meta.val_acc,
                test_acc: meta.test_acc,
                steps: meta.steps,
                lr: meta.lr,
                seed: meta.seed,
                reg: meta.reg,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::TapSpec;

    fn blobs() -> (Tensor, Vec<u32>) {
        let x = Tensor::from_rows(&[vec![-2.0], vec![-1.0], vec![-0.5], vec![0.5], vec![1.0], vec![2.0]]).unwrap();
        (x, vec![0, 0, 0, 1, 1, 1])
    }

    #[test]
    fn separable_head() {
        let (x, y) = blobs();
        let h = train_head(&x, &y, 2, &RegSpec::none(), &TrainConfig::new(0.5, 200, 0)).unwrap();
        assert_eq!(h.train_acc, 1.0);
    }

    #[test]
    fn reg_spec_zero_is_none() {
        assert_eq!(RegSpec::new(RegKind::L2, 0.0).unwrap(), RegSpec::none());
        assert!(RegSpec::new(RegKind::None, 0.1).is_err());
        assert!(RegSpec::new(RegKind::L1, -1.0).is_err());
        let json = serde_json::to_string(&RegSpec::l21(0.5).unwrap()).unwrap();
        assert_eq!(serde_json::from_str::<RegSpec>(&json).unwrap(), RegSpec::l21(0.5).unwrap());
        assert!(serde_json::from_str::<RegSpec>(r#"{"kind":"l1","coefficient":-2}"#).is_err());
    }

    #[test]
    fn huge_group_lasso_shrinks_rows() {
        let x = Tensor::from_fn(&[40, 6], |i| ((i * 7919) % 13) as f32 / 13.0 - 0.5);
        let y: Vec<u32> = (0..40).map(|i| (i % 2) as u32).collect();
        // Subgradient steps chatter at a scale of lr·coefficient around zero.
        let h = train_head(&x, &y, 2, &RegSpec::l21(1e3).unwrap(), &TrainConfig::new(1e-6, 300, 0)).unwrap();
        let s = relevance_scores(&h.weights).unwrap();
        assert!(s.scores.iter().all(|&v| v < 1e-2), "{:?}", s.scores);
    }

    #[test]
    fn gate_rules() {
        assert_eq!(ft_plus_gate(Some(0.8), Some(0.7)).unwrap(), GateChoice::Head2Toe);
        assert_eq!(ft_plus_gate(Some(0.7), Some(0.8)).unwrap(), GateChoice::Head2ToeFt);
        assert_eq!(ft_plus_gate(Some(0.7), Some(0.7)).unwrap(), GateChoice::Head2Toe);
        assert!(ft_plus_gate(None, Some(0.7)).is_err());
    }

    #[test]
    fn loglog_slope_of_square() {
        let xs = [0.1, 0.01, 0.001];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() - 2.0).abs() < 1e-12);
    }

    fn linear_spec() -> BackboneSpec {
        BackboneSpec {
            input_shape: vec![3],
            layers: vec![LayerSpec::Dense { units: 4 }, LayerSpec::Dense { units: 2 }],
            taps: vec![
                TapSpec { name: "embedding".into(), layer: 0 },
                TapSpec { name: "logits".into(), layer: 1 },
            ],
            embedding: "embedding".into(),
            capture: Default::default(),
        }
    }

    #[test]
    fn zero_epsilon_is_exact() {
        let b = TrainedBackbone::initialized(BackboneSpec::mlp4(5, 3), 1).unwrap();
        let x = Tensor::from_fn(&[1, 5], |i| i as f32 * 0.3 - 0.4);
        let dir = random_direction(&b.spec, 2).unwrap();
        let r = linearization_check(&b, &x, 1, 0.0, &dir).unwrap();
        assert_eq!(r.error, 0.0);
    }

    #[test]
    fn last_layer_perturbation_of_linear_net() {
        let b = TrainedBackbone::initialized(linear_spec(), 3).unwrap();
        let x = Tensor::from_fn(&[1, 3], |i| i as f32 - 0.7);
        let dir = restrict_direction(&b.spec, &random_direction(&b.spec, 4).unwrap(), &[1]).unwrap();
        let r = linearization_check(&b, &x, 0, 0.1, &dir).unwrap();
        assert!(r.error < 1e-14, "{}", r.error);
        // First-layer-only perturbations of a linear net are also linear.
        let dir = restrict_direction(&b.spec, &random_direction(&b.spec, 4).unwrap(), &[0]).unwrap();
        assert!(linearization_check(&b, &x, 0, 0.1, &dir).unwrap().error < 1e-14);
    }

    #[test]
    fn artifact_round_trip() {
        let (x, y) = blobs();
        let bundle = FeatureBundle::from_matrix("e", x, y, 2).unwrap();
        let cfg = Head2ToeConfig::new(4, 1e-3, 1.0, TrainConfig::new(0.5, 50, 0));
        let r = head2toe_bundle(&bundle, &cfg).unwrap();
        let art = r.artifact();
        let bytes = art.to_bytes().unwrap();
        assert_eq!(AdaptationArtifact::from_bytes(&bytes).unwrap(), art);
        assert!(AdaptationArtifact::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(art.storage_floats(), 4.0 + 1.0 / 32.0);
    }
}
