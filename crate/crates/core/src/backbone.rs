//! Small trainable backbones with named activation taps.
//!
//! A [`BackboneSpec`] is a flat list of layers whose last entry is the
//! source-task logit layer. Taps name layer outputs; in pre-activation mode a
//! tap placed on a ReLU captures the ReLU's input instead.

use std::io::{Read, Write};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::{accuracy, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::train::{sgd_loop, TrainConfig};

pub const BACKBONE_MAGIC: &[u8; 4] = b"H2TB";
pub const BACKBONE_VERSION: u32 = 1;

/// Rows per forward chunk when running a backbone over a whole dataset.
pub(crate) const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { units: usize },
    /// Stride-1, zero-padded convolution over NHWC activations.
    Conv2d { filters: usize, kernel: usize },
    Relu,
    /// Non-overlapping spatial average pooling.
    AvgPool { window: usize },
    Flatten,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSpec {
    pub name: String,
    /// Index into [`BackboneSpec::layers`] whose output is captured.
    pub layer: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureMode {
    #[default]
    Post,
    Pre,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    /// Per-example input shape: `[d]` for dense nets, `[h, w, c]` for conv nets.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub taps: Vec<TapSpec>,
    /// Name of the tap holding the penultimate embedding.
    pub embedding: String,
    #[serde(default)]
    pub capture: CaptureMode,
}

impl BackboneSpec {
    /// Dense 64-64-64 trunk with a 32-wide embedding.
    pub fn mlp4(input_dim: usize, classes: usize) -> Self {
        let mut layers = Vec::new();
        for units in [64, 64, 64, 32] {
            layers.push(LayerSpec::Dense { units });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense { units: classes });
        let taps = [("h1", 1), ("h2", 3), ("h3", 5), ("embedding", 7), ("logits", 8)]
            .into_iter()
            .map(|(name, layer)| TapSpec {
                name: name.into(),
                layer,
            })
            .collect();
        Self {
            input_shape: vec![input_dim],
            layers,
            taps,
            embedding: "embedding".into(),
            capture: CaptureMode::Post,
        }
    }

    /// Three conv blocks (8/16/32 channels) and a 64-wide embedding.
    pub fn small_conv(height: usize, width: usize, channels: usize, classes: usize) -> Self {
        let mut layers = Vec::new();
        for filters in [8, 16, 32] {
            layers.push(LayerSpec::Conv2d { filters, kernel: 3 });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::AvgPool { window: 2 });
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense { units: 64 });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dense { units: classes });
        let taps = [
            ("block1", 1),
            ("block2", 4),
            ("block3", 7),
            ("embedding", 11),
            ("logits", 12),
        ]
        .into_iter()
        .map(|(name, layer)| TapSpec {
            name: name.into(),
            layer,
        })
        .collect();
        Self {
            input_shape: vec![height, width, channels],
            layers,
            taps,
            embedding: "embedding".into(),
            capture: CaptureMode::Post,
        }
    }

    pub fn with_capture(mut self, capture: CaptureMode) -> Self {
        self.capture = capture;
        self
    }

    /// Same network with the logit layer resized to `classes`.
    pub fn with_classes(&self, classes: usize) -> Self {
        let mut spec = self.clone();
        if let Some(LayerSpec::Dense { units }) = spec.layers.last_mut() {
            *units = classes;
        }
        spec
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { units }) => *units,
            _ => 0,
        }
    }

    /// Checks the structural invariants and returns every layer's
    /// per-example output shape.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::config(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match layer {
                LayerSpec::Dense { units } => {
                    if shape.len() != 1 {
                        return Err(Error::config(format!(
                            "layer {i}: dense needs flat input, got {shape:?}"
                        )));
                    }
                    if *units == 0 {
                        return Err(Error::config(format!("layer {i}: zero units")));
                    }
                    vec![*units]
                }
                LayerSpec::Conv2d { filters, kernel } => {
                    if shape.len() != 3 || kernel % 2 == 0 || *filters == 0 {
                        return Err(Error::config(format!(
                            "layer {i}: conv2d needs [h,w,c] input and an odd kernel"
                        )));
                    }
                    vec![shape[0], shape[1], *filters]
                }
                LayerSpec::Relu => shape,
                LayerSpec::AvgPool { window } => {
                    if shape.len() != 3 || *window == 0 || *window > shape[0] || *window > shape[1] {
                        return Err(Error::config(format!(
                            "layer {i}: avg_pool window {window} does not fit {shape:?}"
                        )));
                    }
                    vec![
                        shape[0].div_ceil(*window),
                        shape[1].div_ceil(*window),
                        shape[2],
                    ]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.layer_shapes()?;
        if !matches!(self.layers.last(), Some(LayerSpec::Dense { .. })) {
            return Err(Error::config("the final layer must be the dense logit layer"));
        }
        let mut seen = std::collections::HashSet::new();
        for tap in &self.taps {
            if !seen.insert(tap.name.as_str()) {
                return Err(Error::config(format!("duplicate tap name {:?}", tap.name)));
            }
            if tap.layer >= self.layers.len() {
                return Err(Error::config(format!(
                    "tap {:?} references missing layer {}",
                    tap.name, tap.layer
                )));
            }
        }
        if !seen.contains(self.embedding.as_str()) {
            return Err(Error::config(format!(
                "embedding tap {:?} is not among the taps",
                self.embedding
            )));
        }
        Ok(shapes)
    }

    /// Shapes of every weight tensor, in the order they are stored.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.layer_shapes()?;
        let mut prev = self.input_shape.clone();
        let mut out = Vec::new();
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            match layer {
                LayerSpec::Dense { units } => {
                    out.push(vec![prev[0], *units]);
                    out.push(vec![*units]);
                }
                LayerSpec::Conv2d { filters, kernel } => {
                    out.push(vec![*kernel, *kernel, prev[2], *filters]);
                    out.push(vec![*filters]);
                }
                _ => {}
            }
            prev = shape.clone();
        }
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum())
    }

    /// Multiply-add FLOPs (2 per MAC) plus elementwise ops for one example.
    pub fn forward_flops(&self) -> Result<u64> {
        let shapes = self.layer_shapes()?;
        let mut prev = self.input_shape.clone();
        let mut flops = 0u64;
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            let out_elems: u64 = shape.iter().product::<usize>() as u64;
            flops += match layer {
                LayerSpec::Dense { units } => 2 * (prev[0] * units) as u64 + out_elems,
                LayerSpec::Conv2d { kernel, .. } => {
                    2 * out_elems * (kernel * kernel * prev[2]) as u64 + out_elems
                }
                LayerSpec::Relu => out_elems,
                LayerSpec::AvgPool { .. } => prev.iter().product::<usize>() as u64,
                LayerSpec::Flatten => 0,
            };
            prev = shape.clone();
        }
        Ok(flops)
    }

    pub fn tap(&self, name: &str) -> Option<&TapSpec> {
        self.taps.iter().find(|t| t.name == name)
    }

    /// Layer whose output a tap reads under the current capture mode.
    pub(crate) fn tap_source(&self, tap: &TapSpec) -> usize {
        match (self.capture, &self.layers[tap.layer]) {
            (CaptureMode::Pre, LayerSpec::Relu) if tap.layer > 0 => tap.layer - 1,
            _ => tap.layer,
        }
    }

    /// Per-example shape captured by each tap, in tap order.
    pub fn tap_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let shapes = self.validate()?;
        Ok(self
            .taps
            .iter()
            .map(|t| (t.name.clone(), shapes[self.tap_source(t)].clone()))
            .collect())
    }
}

/// Adds one forward pass to `g`; returns every layer's output node.
/// `params` must follow [`BackboneSpec::param_shapes`] order.
pub fn build_forward<T: Scalar>(
    spec: &BackboneSpec,
    g: &mut Graph<T>,
    input: NodeId,
    params: &[NodeId],
) -> Result<Vec<NodeId>> {
    let mut x = input;
    let mut p = params.iter();
    let mut next_param = || {
        p.next()
            .copied()
            .ok_or_else(|| Error::Contract("backbone is missing parameters".into()))
    };
    let mut outs = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        x = match layer {
            LayerSpec::Dense { .. } => {
                let (w, b) = (next_param()?, next_param()?);
                let z = g.matmul(x, w)?;
                g.add_bias(z, b)?
            }
            LayerSpec::Conv2d { .. } => {
                let (k, b) = (next_param()?, next_param()?);
                let z = g.conv2d(x, k)?;
                g.add_bias(z, b)?
            }
            LayerSpec::Relu => g.relu(x)?,
            LayerSpec::AvgPool { window } => g.avg_pool(x, &[*window, *window], &[1, 2])?,
            LayerSpec::Flatten => {
                let v = g.value(x);
                let n = v.rows();
                let w = v.row_len();
                g.reshape(x, &[n, w])?
            }
        };
        outs.push(x);
    }
    Ok(outs)
}

/// Node captured by each tap, in tap order.
pub fn tap_nodes(spec: &BackboneSpec, layer_outputs: &[NodeId]) -> Vec<(String, NodeId)> {
    spec.taps
        .iter()
        .map(|t| (t.name.clone(), layer_outputs[spec.tap_source(t)]))
        .collect()
}

/// He-style uniform fan-in initialization; biases start at zero.
pub fn init_params(spec: &BackboneSpec, seed: u64) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.param_shapes()?
        .into_iter()
        .map(|shape| {
            if shape.len() == 1 {
                return Ok(Tensor::zeros(&shape));
            }
            let fan_in: usize = shape[..shape.len() - 1].iter().product();
            let limit = (6.0 / fan_in as f64).sqrt() as f32;
            Ok(Tensor::from_fn(&shape, |_| rng.random_range(-limit..limit)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub dataset: String,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedBackbone {
    pub spec: BackboneSpec,
    pub params: Vec<Tensor>,
    pub source: SourceMeta,
}

/// Tap name → activation, in tap order.
pub type Taps<T = f32> = IndexMap<String, Tensor<T>>;

fn check_batch(spec: &BackboneSpec, batch: &Tensor) -> Result<()> {
    if batch.rank() < 1 || batch.shape()[1..] != spec.input_shape[..] {
        return Err(Error::dim(format!(
            "batch shape {:?} does not match backbone input {:?}",
            batch.shape(),
            spec.input_shape
        )));
    }
    Ok(())
}

impl TrainedBackbone {
    pub fn new(spec: BackboneSpec, params: Vec<Tensor>, source: SourceMeta) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes()?;
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::config("weights do not match the backbone spec"));
        }
        Ok(Self {
            spec,
            params,
            source,
        })
    }

    /// Randomly initialized, untrained backbone.
    pub fn initialized(spec: BackboneSpec, seed: u64) -> Result<Self> {
        let params = init_params(&spec, seed)?;
        Self::new(
            spec,
            params,
            SourceMeta {
                dataset: "none".into(),
                seed,
                accuracy: 0.0,
            },
        )
    }

    fn run<R>(
        &self,
        batch: &Tensor,
        read: impl Fn(&Graph<f32>, &[NodeId]) -> R,
    ) -> Result<R> {
        check_batch(&self.spec, batch)?;
        let mut g = Graph::new();
        let x = g.input(batch.clone())?;
        let params = self
            .params
            .iter()
            .map(|p| g.input(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let outs = build_forward(&self.spec, &mut g, x, &params)?;
        Ok(read(&g, &outs))
    }

    /// Every layer's output for one batch, without any tap bookkeeping.
    pub fn forward_layers(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        self.run(batch, |g, outs| outs.iter().map(|&o| g.value(o).clone()).collect())
    }

    /// Source-task logits.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.run(batch, |g, outs| g.value(*outs.last().expect("non-empty")).clone())
    }

    pub fn forward_with_taps(&self, batch: &Tensor) -> Result<Taps> {
        self.run(batch, |g, outs| {
            tap_nodes(&self.spec, outs)
                .into_iter()
                .map(|(name, id)| (name, g.value(id).clone()))
                .collect()
        })
    }

    /// Runs [`Self::forward_with_taps`] over `inputs` in chunks of `chunk` rows.
    pub fn taps_over(&self, inputs: &Tensor, chunk: usize) -> Result<Taps> {
        let n = inputs.rows();
        let chunk = chunk.max(1);
        let mut parts: IndexMap<String, Vec<Tensor>> = IndexMap::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let idx: Vec<usize> = (start..end).collect();
            for (name, t) in self.forward_with_taps(&inputs.select_rows(&idx)?)? {
                parts.entry(name).or_default().push(t);
            }
            start = end;
        }
        parts
            .into_iter()
            .map(|(name, ts)| Ok((name, Tensor::concat_rows(&ts)?)))
            .collect()
    }

    /// Activation of the embedding tap for every input row.
    pub fn embed(&self, inputs: &Tensor) -> Result<Tensor> {
        let taps = self.taps_over(inputs, INFERENCE_CHUNK)?;
        taps.get(&self.spec.embedding)
            .cloned()
            .ok_or_else(|| Error::config("embedding tap missing"))
    }

    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        let n = inputs.rows();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + INFERENCE_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            parts.push(self.forward(&inputs.select_rows(&idx)?)?);
            start = end;
        }
        Tensor::concat_rows(&parts)
    }

    pub fn evaluate(&self, data: &LabeledDataset) -> Result<f64> {
        Ok(accuracy(&self.predict(&data.inputs)?, &data.labels))
    }

    pub fn save(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&BackboneHeader {
            spec: self.spec.clone(),
            source: self.source.clone(),
            param_shapes: self.params.iter().map(|p| p.shape().to_vec()).collect(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(BACKBONE_MAGIC);
        out.extend_from_slice(&BACKBONE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != BACKBONE_MAGIC {
            return Err(Error::format(format!("bad backbone magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != BACKBONE_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: BACKBONE_VERSION,
            });
        }
        let len = read_u64(&mut r)? as usize;
        if len > r.len() {
            return Err(Error::format("truncated backbone header"));
        }
        let (head, mut rest) = r.split_at(len);
        let header: BackboneHeader = serde_json::from_slice(head)
            .map_err(|e| Error::format(format!("backbone header: {e}")))?;
        let mut params = Vec::with_capacity(header.param_shapes.len());
        for shape in header.param_shapes {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            read_exact(&mut rest, &mut buf, "weights")?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push(Tensor::new(shape, data)?);
        }
        if !rest.is_empty() {
            return Err(Error::format(format!("{} trailing bytes after weights", rest.len())));
        }
        Self::new(header.spec, params, header.source)
    }

    pub fn save_to(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.save()?)?;
        Ok(())
    }

    pub fn load_from(path: &std::path::Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::load(&buf)
    }
}

#[derive(Serialize, Deserialize)]
struct BackboneHeader {
    spec: BackboneSpec,
    source: SourceMeta,
    param_shapes: Vec<Vec<usize>>,
}

pub(crate) fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::format(format!("truncated file while reading {what}")));
    }
    let (head, tail) = r.split_at(buf.len());
    buf.copy_from_slice(head);
    *r = tail;
    Ok(())
}

pub(crate) fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "u32")?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, "u64")?;
    Ok(u64::from_le_bytes(b))
}

/// Trains a freshly initialized backbone on the source task.
pub fn pretrain(spec: &BackboneSpec, source: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainedBackbone> {
    spec.validate()?;
    if source.is_empty() {
        return Err(Error::Contract("pretraining needs a non-empty dataset".into()));
    }
    if source.example_shape() != spec.input_shape.as_slice() {
        return Err(Error::dim(format!(
            "dataset examples {:?} vs backbone input {:?}",
            source.example_shape(),
            spec.input_shape
        )));
    }
    if source.num_classes > spec.num_classes() {
        return Err(Error::config(format!(
            "{} source classes but the logit layer has {}",
            source.num_classes,
            spec.num_classes()
        )));
    }
    cfg.check()?;
    if cfg.lr <= 0.0 {
        return Err(Error::config("pretraining needs a positive learning rate"));
    }
    let mut params = vec![init_params(spec, cfg.seed)?];
    let labels = &source.labels;
    sgd_loop(
        &mut params,
        &[cfg.lr],
        cfg,
        source.len(),
        |g, nodes, idx| {
            let x = g.input(source.inputs.select_rows(idx)?)?;
            let outs = build_forward(spec, g, x, &nodes[0])?;
            let y: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
            g.softmax_cross_entropy(*outs.last().expect("layers"), std::sync::Arc::new(y))
        },
    )?;
    let mut backbone = TrainedBackbone::new(
        spec.clone(),
        params.pop().expect("one group"),
        SourceMeta {
            dataset: source.id.clone(),
            seed: cfg.seed,
            accuracy: 0.0,
        },
    )?;
    backbone.source.accuracy = backbone.evaluate(source)?;
    Ok(backbone)
}
