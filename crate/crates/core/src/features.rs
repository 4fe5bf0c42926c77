//! Per-layer aggregation (pooling, flattening, normalization) and assembly
//! of the concatenated feature matrix fed to the linear heads.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::store::{ActivationStore, LayerBlock};
use crate::tensor::{self, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// Pick by per-example rank: `[h,w,c]` → 2-D, `[t,c]` → 1-D, flat → none.
    #[default]
    Auto,
    Spatial2d,
    Token1d,
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Each example's per-layer vector scaled to unit ℓ2 norm.
    #[default]
    PerLayerUnitNorm,
    /// Each column standardized to zero mean, unit variance over the examples.
    PerFeature,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub target_size: usize,
    #[serde(default)]
    pub pooling: PoolingMode,
    #[serde(default)]
    pub normalization: Normalization,
}

impl AggregationConfig {
    pub fn new(target_size: usize) -> Self {
        Self {
            target_size,
            pooling: PoolingMode::Auto,
            normalization: Normalization::PerLayerUnitNorm,
        }
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn check(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::config("target_size must be at least 1"));
        }
        Ok(())
    }
}

/// Pooling window per pooled axis and the resulting feature count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolWindow {
    pub window: Vec<usize>,
    pub features: usize,
}

/// Chooses the pooling window for a `[h, w, c]` or `[t, c]` activation.
///
/// Square (or scalar) windows are scanned from the full extent downwards and
/// the largest one whose output count reaches `target_size` wins. Windows are
/// clipped to each axis; a partial trailing window still yields one output.
/// When even a 1-wide window falls short, every position is kept.
pub fn compute_pool_window(shape: &[usize], target_size: usize) -> Result<PoolWindow> {
    if shape.contains(&0) {
        return Err(Error::dim(format!("zero-sized axis in {shape:?}")));
    }
    let (spatial, channels) = match shape {
        [h, w, c] => (vec![*h, *w], *c),
        [t, c] => (vec![*t], *c),
        [d] => {
            return Ok(PoolWindow {
                window: vec![],
                features: *d,
            })
        }
        _ => return Err(Error::dim(format!("cannot pool an activation of shape {shape:?}"))),
    };
    let count = |w: usize| -> (Vec<usize>, usize) {
        let win: Vec<usize> = spatial.iter().map(|&len| w.min(len)).collect();
        let n = spatial
            .iter()
            .zip(&win)
            .map(|(&len, &k)| tensor::pooled_len(len, k))
            .product::<usize>()
            * channels;
        (win, n)
    };
    let largest = spatial.iter().copied().max().unwrap_or(1);
    for w in (1..=largest).rev() {
        let (window, features) = count(w);
        if features >= target_size {
            return Ok(PoolWindow { window, features });
        }
    }
    let (window, features) = count(1);
    Ok(PoolWindow { window, features })
}

fn resolve_mode(mode: PoolingMode, example_shape: &[usize]) -> Result<PoolingMode> {
    let by_rank = match example_shape.len() {
        3 => PoolingMode::Spatial2d,
        2 => PoolingMode::Token1d,
        1 => PoolingMode::None,
        _ => return Err(Error::dim(format!("unsupported activation shape {example_shape:?}"))),
    };
    match mode {
        PoolingMode::Auto => Ok(by_rank),
        m if m == by_rank => Ok(m),
        m => Err(Error::dim(format!(
            "pooling mode {m:?} does not fit activation shape {example_shape:?}"
        ))),
    }
}

/// Pooling axes (of the batched tensor) and windows for one layer.
fn pooling_plan(example_shape: &[usize], cfg: &AggregationConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let mode = resolve_mode(cfg.pooling, example_shape)?;
    let pw = compute_pool_window(example_shape, cfg.target_size)?;
    Ok(match mode {
        PoolingMode::Spatial2d => (pw.window, vec![1, 2]),
        PoolingMode::Token1d => (pw.window, vec![1]),
        _ => (vec![], vec![]),
    })
}

/// Pools and flattens one layer to an `[examples × d]` matrix.
pub fn aggregate_layer(block: &LayerBlock, cfg: &AggregationConfig) -> Result<Tensor> {
    cfg.check()?;
    let (window, dims) = pooling_plan(block.example_shape(), cfg)?;
    let pooled = if dims.is_empty() {
        block.data.clone()
    } else {
        tensor::avg_pool(&block.data, &window, &dims)?
    };
    let n = pooled.rows();
    let d = pooled.row_len();
    pooled.reshape(&[n, d])
}

/// Unit ℓ2 norm per row; zero rows stay zero.
pub fn normalize_layer(m: &Tensor) -> Result<Tensor> {
    tensor::normalize_rows(m)
}

fn standardize_columns(m: &Tensor) -> Tensor {
    let n = m.rows();
    let d = m.row_len();
    if n == 0 || d == 0 {
        return m.clone();
    }
    let mut mean = vec![0f64; d];
    let mut sq = vec![0f64; d];
    for row in m.data().chunks(d) {
        for (j, &v) in row.iter().enumerate() {
            mean[j] += v as f64;
            sq[j] += (v as f64) * (v as f64);
        }
    }
    let stats: Vec<(f64, f64)> = mean
        .iter()
        .zip(&sq)
        .map(|(&s, &q)| {
            let mu = s / n as f64;
            let var = (q / n as f64 - mu * mu).max(0.0);
            (mu, var.sqrt())
        })
        .collect();
    Tensor::from_fn(m.shape(), |i| {
        let (mu, sd) = stats[i % d];
        if sd > 0.0 {
            ((m.data()[i] as f64 - mu) / sd) as f32
        } else {
            0.0
        }
    })
}

fn normalize_with(m: Tensor, norm: Normalization) -> Result<Tensor> {
    match norm {
        Normalization::PerLayerUnitNorm => normalize_layer(&m),
        Normalization::PerFeature => Ok(standardize_columns(&m)),
        Normalization::None => Ok(m),
    }
}

/// Column range contributed by one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpan {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl LayerSpan {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Concatenated per-layer features plus the column → layer map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub matrix: Tensor,
    pub spans: Vec<LayerSpan>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl FeatureBundle {
    pub fn from_matrix(name: &str, matrix: Tensor, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        if matrix.rank() != 2 || matrix.rows() != labels.len() {
            return Err(Error::dim(format!(
                "feature matrix {:?} vs {} labels",
                matrix.shape(),
                labels.len()
            )));
        }
        let len = matrix.row_len();
        Ok(Self {
            matrix,
            spans: vec![LayerSpan {
                name: name.into(),
                start: 0,
                len,
            }],
            labels,
            num_classes,
        })
    }

    pub fn examples(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.row_len()
    }

    /// `(span index, index within the span)` for every column.
    pub fn layer_map(&self) -> Vec<(usize, usize)> {
        self.spans
            .iter()
            .enumerate()
            .flat_map(|(s, span)| (0..span.len).map(move |j| (s, j)))
            .collect()
    }

    pub fn span(&self, name: &str) -> Option<&LayerSpan> {
        self.spans.iter().find(|s| s.name == name)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            matrix: self.matrix.select_rows(idx)?,
            spans: self.spans.clone(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    /// Keeps the given columns (ascending); spans shrink accordingly.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let matrix = tensor::gather_cols(&self.matrix, cols)?;
        let spans = self
            .spans
            .iter()
            .scan(0, |start, span| {
                let len = cols.iter().filter(|&&c| span.range().contains(&c)).count();
                let s = LayerSpan {
                    name: span.name.clone(),
                    start: *start,
                    len,
                };
                *start += len;
                Some(s)
            })
            .collect();
        Ok(Self {
            matrix,
            spans,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        })
    }

    /// Side-by-side concatenation; both bundles must describe the same examples.
    pub fn concat(&self, other: &FeatureBundle) -> Result<Self> {
        if self.labels != other.labels {
            return Err(Error::dim("bundles describe different examples"));
        }
        let matrix = tensor::concat_cols(&[&self.matrix, &other.matrix])?;
        let offset = self.dim();
        let mut spans = self.spans.clone();
        spans.extend(other.spans.iter().map(|s| LayerSpan {
            name: s.name.clone(),
            start: s.start + offset,
            len: s.len,
        }));
        Ok(Self {
            matrix,
            spans,
            labels: self.labels.clone(),
            num_classes: self.num_classes.max(other.num_classes),
        })
    }
}

/// Aggregates and normalizes the requested layers, concatenated in
/// manifest order regardless of the order of `subset`.
pub fn build_h_all(store: &ActivationStore, cfg: &AggregationConfig, subset: &[&str]) -> Result<FeatureBundle> {
    cfg.check()?;
    if subset.is_empty() {
        return Err(Error::config("layer subset is empty"));
    }
    for name in subset {
        if store.block(name).is_none() {
            return Err(Error::config(format!(
                "layer {name:?} not in store (available: {:?})",
                store.layer_names()
            )));
        }
    }
    let mut parts = Vec::new();
    let mut spans = Vec::new();
    let mut start = 0;
    for block in store.blocks.iter().filter(|b| subset.contains(&b.name.as_str())) {
        let m = normalize_with(aggregate_layer(block, cfg)?, cfg.normalization)?;
        let len = m.row_len();
        spans.push(LayerSpan {
            name: block.name.clone(),
            start,
            len,
        });
        start += len;
        parts.push(m);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(FeatureBundle {
        matrix: tensor::concat_cols(&refs)?,
        spans,
        labels: store.labels().to_vec(),
        num_classes: store.num_classes(),
    })
}

/// [`build_h_all`] over every layer in the store.
pub fn build_h_all_layers(store: &ActivationStore, cfg: &AggregationConfig) -> Result<FeatureBundle> {
    let names = store.layer_names();
    build_h_all(store, cfg, &names)
}

/// Differentiable counterpart of aggregation + unit normalization, used when
/// gradients must flow back into the backbone. Per-feature standardization
/// is not supported here.
pub fn aggregate_node<T: Scalar>(
    g: &mut Graph<T>,
    activation: NodeId,
    cfg: &AggregationConfig,
) -> Result<NodeId> {
    cfg.check()?;
    let shape = g.value(activation).shape().to_vec();
    let (window, dims) = pooling_plan(&shape[1..], cfg)?;
    let pooled = if dims.is_empty() {
        activation
    } else {
        g.avg_pool(activation, &window, &dims)?
    };
    let v = g.value(pooled);
    let (n, d) = (v.rows(), v.row_len());
    let flat = g.reshape(pooled, &[n, d])?;
    match cfg.normalization {
        Normalization::PerLayerUnitNorm => g.normalize_rows(flat),
        Normalization::None => Ok(flat),
        Normalization::PerFeature => Err(Error::config(
            "per-feature normalization cannot be recomputed inside a fine-tuning graph",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(name: &str, shape: &[usize], f: impl FnMut(usize) -> f32) -> LayerBlock {
        LayerBlock {
            name: name.into(),
            data: Tensor::from_fn(shape, f),
        }
    }

    #[test]
    fn global_pool_when_target_is_small() {
        let pw = compute_pool_window(&[4, 4, 8], 8).unwrap();
        assert_eq!(pw.window, vec![4, 4]);
        assert_eq!(pw.features, 8);
    }

    #[test]
    fn one_d_window() {
        let pw = compute_pool_window(&[10, 3], 12).unwrap();
        // w=3 → ceil(10/3)=4 positions × 3 channels.
        assert_eq!(pw.window, vec![3]);
        assert_eq!(pw.features, 12);
    }

    #[test]
    fn tiny_target_keeps_everything() {
        let pw = compute_pool_window(&[2, 2, 1], 100).unwrap();
        assert_eq!(pw.window, vec![1, 1]);
        assert_eq!(pw.features, 4);
    }

    #[test]
    fn flat_mode_is_identity() {
        let b = block("e", &[3, 5], |i| i as f32);
        let cfg = AggregationConfig::new(2).with_normalization(Normalization::None);
        assert_eq!(aggregate_layer(&b, &cfg).unwrap(), b.data);
    }

    #[test]
    fn explicit_mode_mismatch() {
        let b = block("e", &[3, 5], |i| i as f32);
        let mut cfg = AggregationConfig::new(2);
        cfg.pooling = PoolingMode::Spatial2d;
        assert!(matches!(aggregate_layer(&b, &cfg), Err(Error::Dimension(_))));
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let b = block("c", &[2, 6, 6, 3], |_| 2.5);
        let out = aggregate_layer(&b, &AggregationConfig::new(12)).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn two_layer_spans() {
        let store = ActivationStore::new(
            "t",
            "train",
            vec![0, 1],
            2,
            vec![block("a", &[2, 10], |i| i as f32 + 1.0), block("b", &[2, 6], |i| i as f32 - 3.0)],
        )
        .unwrap();
        let bundle = build_h_all(&store, &AggregationConfig::new(4), &["b", "a"]).unwrap();
        assert_eq!(bundle.dim(), 16);
        assert_eq!(bundle.spans[0], LayerSpan { name: "a".into(), start: 0, len: 10 });
        assert_eq!(bundle.spans[1], LayerSpan { name: "b".into(), start: 10, len: 6 });
        assert_eq!(bundle.layer_map()[12], (1, 2));
        assert!(matches!(
            build_h_all(&store, &AggregationConfig::new(4), &["zzz"]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn per_feature_standardizes_columns() {
        let m = Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        let s = standardize_columns(&m);
        assert_eq!(s.data(), &[-1.0, 0.0, 1.0, 0.0]);
    }
}
