//! K-fold splits and exhaustive grid search over fold-averaged validation
//! accuracy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Partitions a seeded permutation of `0..n` into `k` validation folds whose
/// sizes differ by at most one. Indices inside each fold are ascending.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || n < k {
        return Err(Error::Harness(format!("cannot split {n} examples into {k} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        let mut val = perm[start..start + len].to_vec();
        val.sort_unstable();
        let mut train: Vec<usize> = perm[..start].iter().chain(&perm[start + len..]).copied().collect();
        train.sort_unstable();
        folds.push(Fold { train, val });
        start += len;
    }
    Ok(folds)
}

/// Result of a grid search.
#[derive(Clone, Debug, PartialEq)]
pub struct GridOutcome<P> {
    pub best: P,
    pub best_index: usize,
    /// Mean validation accuracy of the winner.
    pub cv_score: f64,
    /// The winner's per-fold validation accuracies.
    pub fold_scores: Vec<f64>,
    /// Mean validation accuracy of every point; `None` where training failed.
    pub table: Vec<Option<f64>>,
    pub failures: Vec<(usize, String)>,
}

/// Picks the point with the highest mean fold score; the earliest point wins
/// ties. Failed points are recorded and skipped.
pub fn pick_best<P: Clone>(points: &[P], results: Vec<Result<Vec<f64>>>) -> Result<GridOutcome<P>> {
    if points.is_empty() {
        return Err(Error::Harness("empty hyperparameter grid".into()));
    }
    debug_assert_eq!(points.len(), results.len());
    let mut table = Vec::with_capacity(points.len());
    let mut failures = Vec::new();
    let mut best: Option<(usize, f64, Vec<f64>)> = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(scores) if !scores.is_empty() => {
                let m = scores.iter().sum::<f64>() / scores.len() as f64;
                table.push(Some(m));
                if best.as_ref().is_none_or(|(_, b, _)| m > *b) {
                    best = Some((i, m, scores));
                }
            }
            Ok(_) => {
                table.push(None);
                failures.push((i, "no folds evaluated".into()));
            }
            Err(e) => {
                log::debug!("grid point {i} failed: {e}");
                table.push(None);
                failures.push((i, e.to_string()));
            }
        }
    }
    let (best_index, cv_score, fold_scores) = best.ok_or_else(|| {
        Error::Harness(format!(
            "all {} grid points failed; first failure: {}",
            points.len(),
            failures.first().map(|f| f.1.as_str()).unwrap_or("unknown")
        ))
    })?;
    Ok(GridOutcome {
        best: points[best_index].clone(),
        best_index,
        cv_score,
        fold_scores,
        table,
        failures,
    })
}

/// Evaluates every `(point, fold)` pair, in parallel on the current rayon
/// pool, and returns the best point by mean validation score.
pub fn grid_search<P, F>(points: &[P], folds: usize, eval: F) -> Result<GridOutcome<P>>
where
    P: Clone + Sync,
    F: Fn(&P, usize) -> Result<f64> + Sync,
{
    let results: Vec<Result<Vec<f64>>> = points
        .par_iter()
        .map(|p| (0..folds).map(|f| eval(p, f)).collect())
        .collect();
    pick_best(points, results)
}
