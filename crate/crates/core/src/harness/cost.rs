//! Training-FLOP and stored-size accounting for the adaptation methods.
//!
//! A forward pass of the backbone costs `C_I` FLOPs per example and a
//! backward pass twice that. A linear-head step on `B` examples with `D`
//! inputs and `C` classes costs `2BDC` forward plus `4BDC` backward.
//! Storage is counted in f32-equivalents; a one-bit mask over `D` features
//! counts as `D/32`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::Method;

/// Fraction grid validated during selection.
pub const FRACTION_GRID: [f64; 8] = [0.0005, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    /// Backbone forward FLOPs per example (`C_I`).
    pub backbone_flops: f64,
    pub backbone_params: f64,
    /// Training examples (`N`).
    pub examples: usize,
    /// Training steps (`t`).
    pub steps: usize,
    /// Examples per step.
    pub batch: usize,
    pub embedding_dim: usize,
    /// Width of the concatenated multi-layer features (`D_all`).
    pub all_dim: usize,
    /// Kept features after selection (`k`).
    pub kept: usize,
    pub classes: usize,
    /// Fractions evaluated while choosing `F`.
    pub validated_fractions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub h2t_flops: f64,
    pub ft_flops: f64,
    pub lp_flops: f64,
    /// Extra selection work relative to one full-width head training, `Σ f`.
    pub search_overhead: f64,
    pub search_overhead_pct: f64,
    pub h2t_storage: f64,
    pub ft_storage: f64,
    pub lp_storage: f64,
    pub h2t_flops_rel_ft: f64,
    pub h2t_storage_rel_ft: f64,
    pub h2t_storage_rel_lp: f64,
}

/// `6·B·D·C`: forward and backward of one linear-head step.
pub fn head_step_flops(batch: usize, dim: usize, classes: usize) -> f64 {
    6.0 * batch as f64 * dim as f64 * classes as f64
}

impl CostInputs {
    fn check(&self) -> Result<()> {
        if self.kept == 0 {
            return Err(Error::config("a selection must keep at least one feature"));
        }
        if self.kept > self.all_dim || self.classes == 0 || self.batch == 0 {
            return Err(Error::config("inconsistent cost inputs"));
        }
        Ok(())
    }

    fn extraction(&self) -> f64 {
        self.backbone_flops * self.examples as f64
    }

    /// Training FLOPs and stored size of one method.
    pub fn method_cost(&self, method: Method) -> Result<(f64, f64)> {
        self.check()?;
        let (c, t, b) = (self.classes, self.steps as f64, self.batch);
        let ft = 3.0 * self.backbone_flops * t * b as f64;
        let sigma: f64 = self.validated_fractions.iter().sum();
        let mask = self.all_dim as f64 / 32.0;
        let h2t_flops = self.extraction() + head_step_flops(b, self.all_dim, c) * t * (1.0 + sigma);
        let h2t_size = ((self.kept + 1) * c) as f64 + mask;
        Ok(match method {
            Method::Linear => (
                self.extraction() + head_step_flops(b, self.embedding_dim, c) * t,
                ((self.embedding_dim + 1) * c) as f64,
            ),
            Method::AllL1 | Method::AllL2 | Method::AllL21 => (
                self.extraction() + head_step_flops(b, self.all_dim, c) * t,
                ((self.all_dim + 1) * c) as f64,
            ),
            Method::Head2Toe => (h2t_flops, h2t_size),
            Method::Scratch | Method::FineTune => (ft, self.backbone_params),
            Method::Head2ToeFt | Method::Head2ToeFtPlus => (h2t_flops + ft, self.backbone_params + h2t_size),
        })
    }
}

pub fn cost_report(inputs: &CostInputs) -> Result<CostReport> {
    let (h2t_flops, h2t_storage) = inputs.method_cost(Method::Head2Toe)?;
    let (ft_flops, ft_storage) = inputs.method_cost(Method::FineTune)?;
    let (lp_flops, lp_storage) = inputs.method_cost(Method::Linear)?;
    let search_overhead: f64 = inputs.validated_fractions.iter().sum();
    Ok(CostReport {
        h2t_flops,
        ft_flops,
        lp_flops,
        search_overhead,
        search_overhead_pct: 100.0 * search_overhead,
        h2t_storage,
        ft_storage,
        lp_storage,
        h2t_flops_rel_ft: h2t_flops / ft_flops,
        h2t_storage_rel_ft: h2t_storage / ft_storage,
        h2t_storage_rel_lp: h2t_storage / lp_storage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs() -> CostInputs {
        CostInputs {
            backbone_flops: 1000.0,
            backbone_params: 5000.0,
            examples: 100,
            steps: 10,
            batch: 100,
            embedding_dim: 8,
            all_dim: 64,
            kept: 64,
            classes: 2,
            validated_fractions: FRACTION_GRID.to_vec(),
        }
    }

    #[test]
    fn grid_overhead() {
        let r = cost_report(&inputs()).unwrap();
        assert!((r.search_overhead - 0.1885).abs() < 1e-12);
        assert!((r.search_overhead_pct - 18.85).abs() < 1e-9);
    }

    #[test]
    fn full_mask_costs_more_than_lp_on_same_features() {
        let mut i = inputs();
        i.embedding_dim = 64;
        let r = cost_report(&i).unwrap();
        assert_eq!(r.h2t_storage - r.lp_storage, 64.0 / 32.0);
        i.kept = 0;
        assert!(cost_report(&i).is_err());
    }

    #[test]
    fn formulas() {
        let r = cost_report(&inputs()).unwrap();
        assert_eq!(r.ft_flops, 3.0 * 1000.0 * 10.0 * 100.0);
        let expected = 1000.0 * 100.0 + 6.0 * 100.0 * 64.0 * 2.0 * 10.0 * 1.1885;
        assert!((r.h2t_flops / expected - 1.0).abs() < 1e-12);
        assert_eq!(r.lp_storage, 18.0);
    }
}
