//! Experiment configuration: one JSON document, with dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{BackboneSpec, CaptureMode};
use crate::data::BatchPolicy;
use crate::error::{Error, Result};
use crate::features::{AggregationConfig, Normalization, PoolingMode};
use crate::harness::cost::FRACTION_GRID;
use crate::harness::experiments::AffinityConfig;
use crate::harness::Method;
use crate::probes::{FineTuneConfig, Head2ToeConfig};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

/// Hyperparameter sets searched by cross-validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperGrid {
    pub lr: Vec<f64>,
    pub steps: Vec<usize>,
    /// Group-lasso coefficients for the scoring phase.
    pub reg_coefficients: Vec<f64>,
    /// Coefficients for the regularized all-features baselines.
    pub baseline_reg_coefficients: Vec<f64>,
    pub target_sizes: Vec<usize>,
    pub fractions: Vec<f64>,
}

impl HyperGrid {
    /// The full-scale grid.
    pub fn full() -> Self {
        Self {
            lr: vec![0.1, 0.01],
            steps: vec![500, 5000],
            reg_coefficients: vec![1e-3, 1e-5],
            baseline_reg_coefficients: vec![1e-5, 1e-4, 1e-3],
            target_sizes: vec![1024, 16384, 40000],
            fractions: FRACTION_GRID.to_vec(),
        }
    }

    /// Same shape, sized for the bundled backbones.
    pub fn desk() -> Self {
        Self {
            lr: vec![0.1, 0.01],
            steps: vec![200, 1000],
            reg_coefficients: vec![1e-3, 1e-5],
            baseline_reg_coefficients: vec![1e-5, 1e-4, 1e-3],
            target_sizes: vec![16, 64, 256],
            fractions: FRACTION_GRID.to_vec(),
        }
    }

    pub fn check(&self) -> Result<()> {
        let empty = [
            ("lr", self.lr.is_empty()),
            ("steps", self.steps.is_empty()),
            ("reg_coefficients", self.reg_coefficients.is_empty()),
            ("baseline_reg_coefficients", self.baseline_reg_coefficients.is_empty()),
            ("target_sizes", self.target_sizes.is_empty()),
            ("fractions", self.fractions.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::config(format!("grid.{name} must not be empty")));
        }
        if self.lr.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::config("grid.lr values must be positive"));
        }
        if self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::config("grid.fractions must lie in (0, 1]"));
        }
        if self.target_sizes.contains(&0) {
            return Err(Error::config("grid.target_sizes must be positive"));
        }
        if self
            .reg_coefficients
            .iter()
            .chain(&self.baseline_reg_coefficients)
            .any(|&c| !(c.is_finite() && c >= 0.0))
        {
            return Err(Error::config("regularization coefficients must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Mlp4,
    SmallConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub kind: BackboneKind,
    pub capture: CaptureMode,
    /// Pretraining schedule.
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    /// Load a saved backbone instead of pretraining one.
    pub path: Option<String>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Mlp4,
            capture: CaptureMode::Post,
            lr: 0.05,
            steps: 3000,
            seed: 0,
            path: None,
        }
    }
}

impl BackboneSection {
    /// Stock architecture for `input_shape` examples and `classes` outputs.
    pub fn spec(&self, input_shape: &[usize], classes: usize) -> Result<BackboneSpec> {
        let spec = match (self.kind, input_shape) {
            (BackboneKind::Mlp4, [d]) => BackboneSpec::mlp4(*d, classes),
            (BackboneKind::SmallConv, [h, w, c]) => BackboneSpec::small_conv(*h, *w, *c, classes),
            (kind, shape) => {
                return Err(Error::config(format!("backbone {kind:?} cannot take inputs of shape {shape:?}")))
            }
        };
        Ok(spec.with_capture(self.capture))
    }
}

/// Dataset files (activation-store format with a single "input" layer).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFiles {
    pub id: String,
    pub train: String,
    pub test: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Source dataset for pretraining; the synthetic source when absent.
    pub source: Option<String>,
    /// Target tasks; the synthetic suite when empty.
    pub tasks: Vec<TaskFiles>,
}

/// Fixed hyperparameters used by the single-run subcommands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedSection {
    pub lr: f64,
    pub steps: usize,
    pub reg_coefficient: f64,
    pub target_size: usize,
    pub fraction: f64,
    /// Fine-tuning learning rate for the backbone weights.
    pub backbone_lr: f64,
}

impl Default for FixedSection {
    fn default() -> Self {
        Self {
            lr: 0.1,
            steps: 1000,
            reg_coefficient: 1e-3,
            target_size: 64,
            fraction: 0.1,
            backbone_lr: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationSection {
    pub pooling: PoolingMode,
    pub normalization: Normalization,
}

impl Default for AggregationSection {
    fn default() -> Self {
        Self {
            pooling: PoolingMode::Auto,
            normalization: Normalization::PerLayerUnitNorm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub folds: usize,
    pub methods: Vec<Method>,
    pub grid: HyperGrid,
    pub backbone: BackboneSection,
    pub synth: SynthConfig,
    /// Names from the synthetic suite to run; all of them when empty.
    pub tasks: Vec<String>,
    pub data: DataSection,
    pub batch: BatchPolicy,
    pub aggregation: AggregationSection,
    pub fixed: FixedSection,
    /// Training-set size the data-fraction formula refers to.
    pub data_budget: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            seeds: vec![0, 1, 2],
            folds: 5,
            methods: vec![Method::Linear, Method::Head2Toe, Method::Scratch],
            grid: HyperGrid::desk(),
            backbone: BackboneSection::default(),
            synth: SynthConfig::default(),
            tasks: Vec::new(),
            data: DataSection::default(),
            batch: BatchPolicy::Auto,
            aggregation: AggregationSection::default(),
            fixed: FixedSection::default(),
            data_budget: 1000,
        }
    }
}

impl ExperimentConfig {
    pub fn full() -> Self {
        Self {
            name: "full".into(),
            methods: Method::ALL.to_vec(),
            grid: HyperGrid::full(),
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        self.grid.check()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.folds < 2 {
            return Err(Error::config("folds must be at least 2"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods must not be empty"));
        }
        if !(self.backbone.lr.is_finite() && self.backbone.lr > 0.0) {
            return Err(Error::config("backbone.lr must be positive"));
        }
        if !(self.fixed.fraction > 0.0 && self.fixed.fraction <= 1.0) {
            return Err(Error::config("fixed.fraction must lie in (0, 1]"));
        }
        if self.fixed.target_size == 0 {
            return Err(Error::config("fixed.target_size must be positive"));
        }
        self.synth.check()?;
        let known: Vec<&str> = crate::synth::standard_suite().iter().map(|(n, _)| *n).collect();
        if let Some(bad) = self.tasks.iter().find(|t| !known.contains(&t.as_str())) {
            return Err(Error::config(format!("unknown synthetic task {bad:?}; known: {}", known.join(", "))));
        }
        Ok(())
    }

    pub fn aggregation(&self, target_size: usize) -> AggregationConfig {
        AggregationConfig {
            target_size,
            pooling: self.aggregation.pooling,
            normalization: self.aggregation.normalization,
        }
    }

    /// Schedule of the single-run subcommands.
    pub fn fixed_train(&self, seed: u64) -> TrainConfig {
        TrainConfig::new(self.fixed.lr, self.fixed.steps, seed).with_batch(self.batch)
    }

    pub fn fixed_head2toe(&self, seed: u64) -> Head2ToeConfig {
        let mut c = Head2ToeConfig::new(
            self.fixed.target_size,
            self.fixed.reg_coefficient,
            self.fixed.fraction,
            self.fixed_train(seed),
        );
        c.aggregation = self.aggregation(self.fixed.target_size);
        c
    }

    pub fn fixed_finetune(&self, seed: u64) -> FineTuneConfig {
        let mut c = FineTuneConfig::new(self.fixed.lr, self.fixed.steps, seed);
        c.backbone_lr = self.fixed.backbone_lr;
        c.batch = self.batch;
        c.aggregation = self.aggregation(self.fixed.target_size);
        c
    }

    pub fn fixed_affinity(&self, seed: u64) -> AffinityConfig {
        AffinityConfig {
            aggregation: self.aggregation(self.fixed.target_size),
            probe: self.fixed_train(seed),
            scratch: self.fixed_train(seed),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `key=value` overrides; keys are dotted paths that must already
    /// exist. Values are parsed as JSON, falling back to a plain string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let slot = key
                .split('.')
                .try_fold(&mut doc, |v, part| match v {
                    Value::Object(m) => m.get_mut(part),
                    Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
                    _ => None,
                })
                .ok_or_else(|| Error::config(format!("unknown config key {key:?}")))?;
            *slot = value;
        }
        let cfg: Self =
            serde_json::from_value(doc).map_err(|e| Error::config(format!("invalid override: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Every leaf key with its default value, in document order.
    pub fn documented_keys() -> Vec<(String, String)> {
        let doc = serde_json::to_value(Self::default()).expect("default config serializes");
        let mut out = Vec::new();
        flatten("", &doc, &mut out);
        out
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
