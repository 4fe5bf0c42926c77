//! Group-lasso relevance scores and the feature/layer selection strategies.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::LayerSpan;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreProvenance {
    pub reg_coefficient: f64,
    pub steps: usize,
    pub seed: u64,
}

/// `s_i = ‖W_all[i, :]‖₂` for every feature row.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceScores {
    pub scores: Vec<f32>,
    pub provenance: Option<ScoreProvenance>,
}

impl RelevanceScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn sum(&self) -> f32 {
        let mut acc = 0f32;
        for &s in &self.scores {
            acc += s;
        }
        acc
    }
}

pub fn relevance_scores(w_all: &Tensor) -> Result<RelevanceScores> {
    if !w_all.is_finite() {
        return Err(Error::NonFinite("relevance scores input".into()));
    }
    Ok(RelevanceScores {
        scores: tensor::row_l2_norms(w_all)?,
        provenance: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fraction = 0,
    LayerMean = 1,
    LayerGroupNorm = 2,
    OffsetWindow = 3,
}

impl Strategy {
    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Strategy::Fraction,
            1 => Strategy::LayerMean,
            2 => Strategy::LayerGroupNorm,
            3 => Strategy::OffsetWindow,
            t => return Err(Error::format(format!("unknown selection strategy tag {t}"))),
        })
    }
}

/// A kept-feature bitmap over the `D_all` columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub bitmap: Vec<bool>,
    pub fraction: f64,
    pub kept: usize,
    pub strategy: Strategy,
}

impl SelectionResult {
    fn from_indices(dim: usize, idx: impl IntoIterator<Item = usize>, fraction: f64, strategy: Strategy) -> Self {
        let mut bitmap = vec![false; dim];
        for i in idx {
            bitmap[i] = true;
        }
        let kept = bitmap.iter().filter(|&&b| b).count();
        Self {
            bitmap,
            fraction,
            kept,
            strategy,
        }
    }

    /// Keeps every column.
    pub fn all(dim: usize) -> Self {
        Self::from_indices(dim, 0..dim, 1.0, Strategy::Fraction)
    }

    pub fn dim(&self) -> usize {
        self.bitmap.len()
    }

    /// Kept column indices, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.bitmap
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// `u64 D | bitmap (LSB-first, ⌈D/8⌉ bytes) | f64 F | u8 strategy`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.dim().div_ceil(8));
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        let mut bytes = vec![0u8; self.dim().div_ceil(8)];
        for (i, _) in self.bitmap.iter().enumerate().filter(|(_, &b)| b) {
            bytes[i / 8] |= 1 << (i % 8);
        }
        out.extend_from_slice(&bytes);
        out.extend_from_slice(&self.fraction.to_le_bytes());
        out.push(self.strategy as u8);
        out
    }

    /// Parses [`Self::to_bytes`] output; returns the selection and the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let short = || Error::format("truncated selection record");
        let dim = u64::from_le_bytes(bytes.get(..8).ok_or_else(short)?.try_into().expect("8 bytes")) as usize;
        let nb = dim.div_ceil(8);
        let map = bytes.get(8..8 + nb).ok_or_else(short)?;
        let f = f64::from_le_bytes(
            bytes
                .get(8 + nb..16 + nb)
                .ok_or_else(short)?
                .try_into()
                .expect("8 bytes"),
        );
        let tag = *bytes.get(16 + nb).ok_or_else(short)?;
        let idx = (0..dim).filter(|&i| map[i / 8] & (1 << (i % 8)) != 0);
        Ok((Self::from_indices(dim, idx, f, Strategy::from_tag(tag)?), 17 + nb))
    }

    /// Fraction of `self`'s kept features also kept by `other`.
    pub fn overlap(&self, other: &SelectionResult) -> f64 {
        let shared = self
            .bitmap
            .iter()
            .zip(&other.bitmap)
            .filter(|(&a, &b)| a && b)
            .count();
        let denom = self.kept.min(other.kept);
        if denom == 0 {
            0.0
        } else {
            shared as f64 / denom as f64
        }
    }
}

/// Feature indices by descending score; equal scores keep the lower index first.
pub fn rank_features(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// `k = max(1, round(F·D))`, halves rounding up.
pub fn kept_count(fraction: f64, dim: usize) -> usize {
    ((fraction * dim as f64).round() as usize).clamp(1, dim.max(1))
}

/// Keeps the top `max(1, round(F·D))` features by relevance.
pub fn select_fraction(scores: &RelevanceScores, fraction: f64) -> Result<SelectionResult> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Selection(format!("fraction {fraction} outside (0, 1]")));
    }
    let dim = scores.len();
    if dim == 0 {
        return Err(Error::Selection("no features to select from".into()));
    }
    let k = kept_count(fraction, dim);
    let order = rank_features(&scores.scores);
    Ok(SelectionResult::from_indices(dim, order.into_iter().take(k), fraction, Strategy::Fraction))
}

fn check_spans(spans: &[LayerSpan], dim: usize) -> Result<()> {
    let mut next = 0;
    for s in spans {
        if s.start != next {
            return Err(Error::Selection(format!("layer span {:?} is not contiguous", s.name)));
        }
        next += s.len;
    }
    if next != dim {
        return Err(Error::Selection(format!("spans cover {next} of {dim} features")));
    }
    Ok(())
}

/// Mean relevance of each layer's features.
pub fn layerwise_scores(scores: &RelevanceScores, spans: &[LayerSpan]) -> Result<Vec<f64>> {
    check_spans(spans, scores.len())?;
    Ok(spans
        .iter()
        .map(|s| {
            if s.len == 0 {
                return 0.0;
            }
            scores.scores[s.range()].iter().map(|&v| v as f64).sum::<f64>() / s.len as f64
        })
        .collect())
}

/// ℓ2 norm of each layer's whole weight group, `sqrt(Σ_{i∈ℓ} s_i²)`.
pub fn layer_group_norms(scores: &RelevanceScores, spans: &[LayerSpan]) -> Result<Vec<f64>> {
    check_spans(spans, scores.len())?;
    Ok(spans
        .iter()
        .map(|s| {
            scores.scores[s.range()]
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Adds whole layers by descending score, skipping any layer that would
/// overflow the feature budget.
pub fn select_layerwise(
    layer_scores: &[f64],
    spans: &[LayerSpan],
    budget: usize,
    strategy: Strategy,
) -> Result<SelectionResult> {
    if layer_scores.len() != spans.len() || spans.is_empty() {
        return Err(Error::Selection("one score per layer span is required".into()));
    }
    let dim: usize = spans.iter().map(|s| s.len).sum();
    check_spans(spans, dim)?;
    let smallest = spans.iter().map(|s| s.len).min().unwrap_or(0);
    if budget < smallest {
        return Err(Error::Selection(format!(
            "budget {budget} is below the smallest layer ({smallest} features)"
        )));
    }
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by(|&a, &b| {
        layer_scores[b]
            .partial_cmp(&layer_scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut used = 0;
    let mut kept = Vec::new();
    for l in order {
        if used + spans[l].len <= budget {
            used += spans[l].len;
            kept.extend(spans[l].range());
        }
    }
    let fraction = used as f64 / dim as f64;
    Ok(SelectionResult::from_indices(dim, kept, fraction, strategy))
}

/// Keeps the features ranked `[offset, offset + window)` by relevance.
pub fn select_offset_window(scores: &RelevanceScores, window: usize, offset: usize) -> Result<SelectionResult> {
    let dim = scores.len();
    if window == 0 || offset + window > dim {
        return Err(Error::Selection(format!(
            "window {window} at offset {offset} does not fit {dim} features"
        )));
    }
    let order = rank_features(&scores.scores);
    Ok(SelectionResult::from_indices(
        dim,
        order[offset..offset + window].iter().copied(),
        window as f64 / dim as f64,
        Strategy::OffsetWindow,
    ))
}
