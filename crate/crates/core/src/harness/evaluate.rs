//! The full comparison: every configured method on every task and seed,
//! hyperparameters chosen on the training split only.
//!
//! Probing methods (linear, all-features baselines, head2toe) are tuned by
//! k-fold cross-validation. Methods that update backbone weights (scratch,
//! fine-tuning, head2toe-ft) are tuned on the first fold's holdout, which
//! is also where the head2toe-ft+ gate compares the frozen and fine-tuned
//! variants. Jobs run on the current rayon pool; results are merged in a
//! fixed order, so the output does not depend on the thread count.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{pretrain, TrainedBackbone};
use crate::data::{LabeledDataset, Task};
use crate::error::{Error, Result};
use crate::features::{FeatureBundle, LayerSpan};
use crate::harness::config::ExperimentConfig;
use crate::harness::cost::CostInputs;
use crate::harness::cv::{grid_search, kfold_split, pick_best, Fold};
use crate::harness::experiments::{AffinityRecord, SplitStores};
use crate::harness::report::{self, ResultRow, SummaryRow, RESULT_COLUMNS};
use crate::harness::stats::spearman;
use crate::harness::Method;
use crate::probes::{
    fine_tune, fit_selected, ft_plus_gate, head2toe_ft, scratch_train, score_features, train_head, FineTuneConfig,
    GateChoice, Head2ToeResult, RegKind, RegSpec,
};
use crate::store::ActivationStore;
use crate::synth::{standard_suite, SyntheticWorld};
use crate::train::TrainConfig;

/// Seed-replicated results for one task and method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub test_accuracies: Vec<f64>,
    pub median: f64,
    pub std: f64,
    /// The `final` row of each seed: chosen hyperparameters and costs.
    pub chosen: Vec<ResultRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationOutput {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub results: Vec<TaskResult>,
    /// Median-over-seeds affinity per task (needs linear and scratch).
    pub affinity: Vec<AffinityRecord>,
    /// Median head2toe − linear test accuracy, aligned with `affinity`.
    pub gains: Vec<f64>,
    /// Rank correlation of affinity and gain; needs three or more tasks.
    pub affinity_gain_spearman: Option<f64>,
}

/// Loads, or pretrains on the configured source, the shared backbone.
pub fn obtain_backbone(cfg: &ExperimentConfig) -> Result<TrainedBackbone> {
    if let Some(path) = &cfg.backbone.path {
        return TrainedBackbone::load_from(Path::new(path));
    }
    let source = match &cfg.data.source {
        Some(path) => read_dataset(Path::new(path))?,
        None => SyntheticWorld::new(cfg.synth.clone())?.source()?,
    };
    let spec = cfg.backbone.spec(source.example_shape(), source.num_classes)?;
    let train = TrainConfig::new(cfg.backbone.lr, cfg.backbone.steps, cfg.backbone.seed).with_batch(cfg.batch);
    log::info!("pretraining {:?} on {} ({} examples)", cfg.backbone.kind, source.id, source.len());
    pretrain(&spec, &source, &train)
}

/// A dataset file: an activation store with a single `input` layer.
pub fn read_dataset(path: &Path) -> Result<LabeledDataset> {
    ActivationStore::read(path)?.to_dataset("input")
}

/// Tasks for one replication seed. Synthetic tasks are redrawn per seed
/// from the fixed world; file tasks are the same for every seed.
pub fn load_tasks(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Task>> {
    if !cfg.data.tasks.is_empty() {
        return cfg
            .data
            .tasks
            .iter()
            .map(|t| {
                Ok(Task {
                    id: t.id.clone(),
                    train: read_dataset(Path::new(&t.train))?,
                    test: read_dataset(Path::new(&t.test))?,
                })
            })
            .collect();
    }
    let world = SyntheticWorld::new(cfg.synth.clone())?;
    standard_suite()
        .into_iter()
        .enumerate()
        .filter(|(_, (id, _))| cfg.tasks.is_empty() || cfg.tasks.iter().any(|t| t == id))
        .map(|(i, (id, labeling))| world.task(id, labeling, i as u64 + (seed << 16)))
        .collect()
}

/// Runs the configured comparison with a freshly obtained backbone.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<EvaluationOutput> {
    cfg.check()?;
    let backbone = obtain_backbone(cfg)?;
    evaluate_with(cfg, &backbone)
}

pub fn evaluate_with(cfg: &ExperimentConfig, backbone: &TrainedBackbone) -> Result<EvaluationOutput> {
    cfg.check()?;
    let mut units = Vec::new();
    for &seed in &cfg.seeds {
        for task in load_tasks(cfg, seed)? {
            units.push((task, seed));
        }
    }
    if units.is_empty() {
        return Err(Error::config("no tasks to evaluate"));
    }
    let per_unit: Vec<Result<Vec<ResultRow>>> = units
        .par_iter()
        .map(|(task, seed)| {
            log::info!("evaluating {} (seed {seed})", task.id);
            Unit::new(cfg, backbone, task, *seed)?.run()
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_unit {
        rows.extend(r?);
    }
    // Task order follows the configuration, then method, seed and fold.
    let task_order: Vec<String> = units.iter().filter(|u| u.1 == cfg.seeds[0]).map(|u| u.0.id.clone()).collect();
    let key = |r: &ResultRow| {
        (
            task_order.iter().position(|t| *t == r.task).unwrap_or(usize::MAX),
            r.method.parse::<Method>().ok(),
            r.seed,
            r.fold.parse::<usize>().unwrap_or(usize::MAX),
        )
    };
    rows.sort_by_key(key);
    Ok(assemble(rows))
}

fn assemble(rows: Vec<ResultRow>) -> EvaluationOutput {
    let summary = report::summarize(&rows);
    let results: Vec<TaskResult> = summary
        .iter()
        .filter_map(|s| {
            let method = s.method.parse().ok()?;
            let chosen: Vec<ResultRow> = rows
                .iter()
                .filter(|r| r.fold == "final" && r.task == s.task && r.method == s.method)
                .cloned()
                .collect();
            Some(TaskResult {
                task: s.task.clone(),
                method,
                seeds: chosen.iter().map(|r| r.seed).collect(),
                test_accuracies: chosen.iter().filter_map(|r| r.test_acc).collect(),
                median: s.median_test_acc,
                std: s.std_test_acc,
                chosen,
            })
        })
        .collect();
    let med = |task: &str, m: Method| {
        results
            .iter()
            .find(|r| r.task == task && r.method == m)
            .map(|r| r.median)
    };
    let mut affinity = Vec::new();
    let mut gains = Vec::new();
    let mut tasks: Vec<&str> = Vec::new();
    for s in &summary {
        if !tasks.contains(&s.task.as_str()) {
            tasks.push(&s.task);
        }
    }
    for t in tasks {
        if let (Some(lin), Some(scr), Some(h2t)) = (med(t, Method::Linear), med(t, Method::Scratch), med(t, Method::Head2Toe)) {
            affinity.push(AffinityRecord::new(t, lin, scr));
            gains.push(h2t - lin);
        }
    }
    let aff: Vec<f64> = affinity.iter().map(|a| a.affinity).collect();
    let affinity_gain_spearman = spearman(&aff, &gains).ok();
    EvaluationOutput {
        rows,
        summary,
        results,
        affinity,
        gains,
        affinity_gain_spearman,
    }
}

#[derive(Clone, Debug, Serialize)]
struct AffinityLine<'a> {
    task: &'a str,
    acc_linear: f64,
    acc_scratch: f64,
    affinity: f64,
    gain: f64,
}

/// `results.csv`, `summary.csv`, `accuracy.svg`, and `affinity.csv` when
/// affinities were computed.
pub fn write_outputs(out: &EvaluationOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    report::write_rows(std::fs::File::create(dir.join("results.csv"))?, &RESULT_COLUMNS, &out.rows)?;
    report::emit_report(&out.rows, dir)?;
    if !out.affinity.is_empty() {
        let lines: Vec<AffinityLine> = out
            .affinity
            .iter()
            .zip(&out.gains)
            .map(|(a, &gain)| AffinityLine {
                task: &a.task,
                acc_linear: a.acc_linear,
                acc_scratch: a.acc_scratch,
                affinity: a.affinity,
                gain,
            })
            .collect();
        report::write_rows(
            std::fs::File::create(dir.join("affinity.csv"))?,
            &["task", "acc_linear", "acc_scratch", "affinity", "gain"],
            &lines,
        )?;
    }
    Ok(())
}

/// Feature bundles of one aggregation target size.
struct Layout {
    target: usize,
    train: FeatureBundle,
    test: FeatureBundle,
}

#[derive(Clone, Debug)]
struct HeadPoint {
    layout: usize,
    reg: RegSpec,
    lr: f64,
    steps: usize,
}

#[derive(Clone, Debug)]
struct H2tPoint {
    score: HeadPoint,
    fraction: f64,
}

/// What a tuned method reports.
struct Tuned {
    lr: f64,
    steps: usize,
    reg: String,
    target_size: Option<usize>,
    fraction: Option<f64>,
    fold_scores: Vec<(usize, f64)>,
    val: f64,
    test: f64,
}

/// One task under one seed.
struct Unit<'a> {
    cfg: &'a ExperimentConfig,
    backbone: &'a TrainedBackbone,
    task: &'a Task,
    seed: u64,
    folds: Vec<Fold>,
    embedding: Layout,
    layouts: Vec<Layout>,
}

impl<'a> Unit<'a> {
    fn new(cfg: &'a ExperimentConfig, backbone: &'a TrainedBackbone, task: &'a Task, seed: u64) -> Result<Self> {
        let stores = SplitStores::extract(backbone, task)?;
        let folds = kfold_split(task.train.len(), cfg.folds, seed)?;
        let emb_agg = cfg.aggregation(cfg.fixed.target_size);
        let (train, test) = stores.bundles(&emb_agg, std::slice::from_ref(&backbone.spec.embedding))?;
        let embedding = Layout {
            target: cfg.fixed.target_size,
            train,
            test,
        };
        // Target sizes giving an already-seen layout add nothing to the search.
        let mut layouts: Vec<Layout> = Vec::new();
        let mut seen: Vec<Vec<LayerSpan>> = Vec::new();
        for &target in &cfg.grid.target_sizes {
            let (train, test) = stores.bundles(&cfg.aggregation(target), &[])?;
            if seen.contains(&train.spans) {
                continue;
            }
            seen.push(train.spans.clone());
            layouts.push(Layout { target, train, test });
        }
        Ok(Self {
            cfg,
            backbone,
            task,
            seed,
            folds,
            embedding,
            layouts,
        })
    }

    fn train_cfg(&self, lr: f64, steps: usize) -> TrainConfig {
        TrainConfig::new(lr, steps, self.seed).with_batch(self.cfg.batch)
    }

    fn schedules(&self) -> Vec<(f64, usize)> {
        let g = &self.cfg.grid;
        g.lr.iter().flat_map(|&lr| g.steps.iter().map(move |&s| (lr, s))).collect()
    }

    fn head_points(&self, regs: &[RegSpec], layouts: &[usize]) -> Vec<HeadPoint> {
        let mut out = Vec::new();
        for &layout in layouts {
            for reg in regs {
                for (lr, steps) in self.schedules() {
                    out.push(HeadPoint {
                        layout,
                        reg: *reg,
                        lr,
                        steps,
                    });
                }
            }
        }
        out
    }

    fn fold_bundles(&self, b: &FeatureBundle, fold: usize) -> Result<(FeatureBundle, FeatureBundle)> {
        let f = &self.folds[fold];
        Ok((b.select_rows(&f.train)?, b.select_rows(&f.val)?))
    }

    fn head_accuracy(&self, train: &FeatureBundle, eval: &FeatureBundle, p: &HeadPoint) -> Result<f64> {
        let head = train_head(&train.matrix, &train.labels, train.num_classes, &p.reg, &self.train_cfg(p.lr, p.steps))?;
        head.accuracy(&eval.matrix, &eval.labels)
    }

    /// Cross-validated head on a fixed bundle family (linear and all-features baselines).
    fn tune_head(&self, points: &[HeadPoint], layouts: &[&Layout]) -> Result<Tuned> {
        let outcome = grid_search(points, self.folds.len(), |p, f| {
            let (tr, va) = self.fold_bundles(&layouts[p.layout].train, f)?;
            self.head_accuracy(&tr, &va, p)
        })?;
        let p = &outcome.best;
        let layout = layouts[p.layout];
        Ok(Tuned {
            lr: p.lr,
            steps: p.steps,
            reg: p.reg.to_string(),
            target_size: (layouts.len() > 1).then_some(layout.target),
            fraction: None,
            fold_scores: outcome.fold_scores.iter().copied().enumerate().collect(),
            val: outcome.cv_score,
            test: self.head_accuracy(&layout.train, &layout.test, p)?,
        })
    }

    fn linear(&self) -> Result<Tuned> {
        let points = self.head_points(&[RegSpec::none()], &[0]);
        self.tune_head(&points, &[&self.embedding])
    }

    fn all_features(&self, kind: RegKind) -> Result<Tuned> {
        let regs = self
            .cfg
            .grid
            .baseline_reg_coefficients
            .iter()
            .map(|&c| RegSpec::new(if c > 0.0 { kind } else { RegKind::None }, c))
            .collect::<Result<Vec<_>>>()?;
        let layouts: Vec<usize> = (0..self.layouts.len()).collect();
        let points = self.head_points(&regs, &layouts);
        let mut t = self.tune_head(&points, &self.layouts.iter().collect::<Vec<_>>())?;
        t.target_size = t.target_size.or(Some(self.layouts[0].target));
        Ok(t)
    }

    /// Cross-validated selection. Scoring runs once per (layout, coefficient,
    /// schedule, fold) and is shared by every fraction.
    fn head2toe(&self) -> Result<(Tuned, Head2ToeResult, f64)> {
        let regs = self
            .cfg
            .grid
            .reg_coefficients
            .iter()
            .map(|&c| RegSpec::new(if c > 0.0 { RegKind::L21 } else { RegKind::None }, c))
            .collect::<Result<Vec<_>>>()?;
        let layouts: Vec<usize> = (0..self.layouts.len()).collect();
        let scoring = self.head_points(&regs, &layouts);
        let fractions = &self.cfg.grid.fractions;
        // [scoring point][fold][fraction]
        let table: Vec<Result<Vec<Vec<f64>>>> = scoring
            .par_iter()
            .map(|p| {
                (0..self.folds.len())
                    .map(|f| {
                        let layout = &self.layouts[p.layout];
                        let (tr, va) = self.fold_bundles(&layout.train, f)?;
                        let cfg = self.train_cfg(p.lr, p.steps);
                        let (scores, _) = score_features(&tr, p.reg.coefficient(), &cfg)?;
                        fractions
                            .iter()
                            .map(|&fr| fit_selected(&tr, &scores, fr, tr_agg(self.cfg, layout), &cfg)?.evaluate(&va))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mut points = Vec::new();
        let mut results = Vec::new();
        for (p, r) in scoring.iter().zip(table) {
            for (j, &fraction) in fractions.iter().enumerate() {
                points.push(H2tPoint {
                    score: p.clone(),
                    fraction,
                });
                results.push(match &r {
                    Ok(per_fold) => Ok(per_fold.iter().map(|v| v[j]).collect()),
                    Err(e) => Err(Error::Harness(e.to_string())),
                });
            }
        }
        let outcome = pick_best(&points, results)?;
        let best = &outcome.best;
        let layout = &self.layouts[best.score.layout];
        let cfg = self.train_cfg(best.score.lr, best.score.steps);
        let (scores, _) = score_features(&layout.train, best.score.reg.coefficient(), &cfg)?;
        let result = fit_selected(&layout.train, &scores, best.fraction, tr_agg(self.cfg, layout), &cfg)?;
        let test = result.evaluate(&layout.test)?;
        Ok((
            Tuned {
                lr: best.score.lr,
                steps: best.score.steps,
                reg: best.score.reg.to_string(),
                target_size: Some(layout.target),
                fraction: Some(best.fraction),
                fold_scores: outcome.fold_scores.iter().copied().enumerate().collect(),
                val: outcome.cv_score,
                test,
            },
            result,
            outcome.fold_scores[0],
        ))
    }

    /// Holdout (first fold) tuning of a method that trains backbone weights.
    fn tune_holdout<F>(&self, run: F) -> Result<Tuned>
    where
        F: Fn(&LabeledDataset, f64, usize) -> Result<Box<dyn Fn(&LabeledDataset) -> Result<f64>>> + Sync,
    {
        let fold = &self.folds[0];
        let (tr, va) = (self.task.train.subset(&fold.train)?, self.task.train.subset(&fold.val)?);
        let points = self.schedules();
        let results: Vec<Result<Vec<f64>>> = points
            .par_iter()
            .map(|&(lr, steps)| Ok(vec![run(&tr, lr, steps)?(&va)?]))
            .collect();
        let outcome = pick_best(&points, results)?;
        let (lr, steps) = outcome.best;
        let test = run(&self.task.train, lr, steps)?(&self.task.test)?;
        Ok(Tuned {
            lr,
            steps,
            reg: RegSpec::none().to_string(),
            target_size: None,
            fraction: None,
            fold_scores: vec![(0, outcome.cv_score)],
            val: outcome.cv_score,
            test,
        })
    }

    fn scratch(&self) -> Result<Tuned> {
        self.tune_holdout(|data, lr, steps| {
            let model = scratch_train(&self.backbone.spec, data, &self.train_cfg(lr, steps))?;
            Ok(Box::new(move |d: &LabeledDataset| model.evaluate(d)))
        })
    }

    fn ft_config(&self, lr: f64, steps: usize) -> FineTuneConfig {
        let mut c = FineTuneConfig::new(lr, steps, self.seed);
        c.batch = self.cfg.batch;
        c.aggregation = self.cfg.aggregation(self.cfg.fixed.target_size);
        c
    }

    fn fine_tune(&self) -> Result<Tuned> {
        self.tune_holdout(|data, lr, steps| {
            let model = fine_tune(self.backbone, data, &self.ft_config(lr, steps))?;
            Ok(Box::new(move |d: &LabeledDataset| model.evaluate(d)))
        })
    }

    /// Fine-tuning through a selection. The holdout run starts from a
    /// selection fitted on the holdout's training part, the final run from
    /// the one fitted on the whole training split.
    fn head2toe_ft(&self, h2t: &Tuned, final_selection: &Head2ToeResult) -> Result<Tuned> {
        let layout = self
            .layouts
            .iter()
            .find(|l| Some(l.target) == h2t.target_size)
            .ok_or_else(|| Error::Harness("selected layout missing".into()))?;
        let fold = &self.folds[0];
        let (tr, _) = self.fold_bundles(&layout.train, 0)?;
        let cfg = self.train_cfg(h2t.lr, h2t.steps);
        let coef = final_selection.scores.provenance.as_ref().map_or(0.0, |p| p.reg_coefficient);
        let (scores, _) = score_features(&tr, coef, &cfg)?;
        let holdout_sel = fit_selected(&tr, &scores, final_selection.selection.fraction, final_selection.aggregation, &cfg)?;
        let train_len = self.task.train.len();
        let mut t = self.tune_holdout(|data, lr, steps| {
            let sel = if data.len() == train_len { final_selection } else { &holdout_sel };
            debug_assert!(data.len() == train_len || data.len() == fold.train.len());
            let model = head2toe_ft(self.backbone, sel, data, &self.ft_config(lr, steps))?;
            Ok(Box::new(move |d: &LabeledDataset| model.evaluate(d)))
        })?;
        t.target_size = h2t.target_size;
        t.fraction = h2t.fraction;
        Ok(t)
    }

    fn cost_inputs(&self, steps: usize, h2t: Option<&Head2ToeResult>) -> Result<CostInputs> {
        let spec = &self.backbone.spec;
        let n = self.task.train.len();
        let (all_dim, kept) = match h2t {
            Some(r) => (r.selection.dim(), r.selection.kept),
            None => {
                let d = self.layouts[0].train.dim();
                (d, d)
            }
        };
        Ok(CostInputs {
            backbone_flops: spec.forward_flops()? as f64,
            backbone_params: spec.param_count()? as f64,
            examples: n,
            steps,
            batch: self.cfg.batch.batch_size(n),
            embedding_dim: self.embedding.train.dim(),
            all_dim,
            kept,
            classes: self.task.num_classes(),
            validated_fractions: self.cfg.grid.fractions.clone(),
        })
    }

    fn rows(&self, method: Method, t: &Tuned, h2t: Option<&Head2ToeResult>) -> Result<Vec<ResultRow>> {
        let inputs = self.cost_inputs(t.steps, h2t)?;
        let (flops, size) = inputs.method_cost(method)?;
        let (ft_flops, ft_size) = inputs.method_cost(Method::FineTune)?;
        let (_, lp_size) = inputs.method_cost(Method::Linear)?;
        let base = ResultRow {
            task: self.task.id.clone(),
            method: method.to_string(),
            seed: self.seed,
            fold: String::new(),
            lr: Some(t.lr),
            steps: Some(t.steps),
            reg: t.reg.clone(),
            target_size: t.target_size,
            fraction: t.fraction,
            val_acc: None,
            test_acc: None,
            flops_rel_ft: None,
            storage_rel_ft: None,
            storage_rel_lp: None,
        };
        let mut out: Vec<ResultRow> = t
            .fold_scores
            .iter()
            .map(|&(f, v)| ResultRow {
                fold: f.to_string(),
                val_acc: Some(v),
                ..base.clone()
            })
            .collect();
        out.push(ResultRow {
            fold: "final".into(),
            val_acc: Some(t.val),
            test_acc: Some(t.test),
            flops_rel_ft: Some(flops / ft_flops),
            storage_rel_ft: Some(size / ft_size),
            storage_rel_lp: Some(size / lp_size),
            ..base
        });
        Ok(out)
    }

    fn run(&self) -> Result<Vec<ResultRow>> {
        let methods = &self.cfg.methods;
        let wants = |m: Method| methods.contains(&m);
        let mut rows = Vec::new();
        let needs_h2t = wants(Method::Head2Toe) || wants(Method::Head2ToeFt) || wants(Method::Head2ToeFtPlus);
        let h2t = if needs_h2t { Some(self.head2toe()?) } else { None };
        let h2t_result = h2t.as_ref().map(|h| &h.1);
        for &m in methods {
            match m {
                Method::Linear => rows.extend(self.rows(m, &self.linear()?, h2t_result)?),
                Method::AllL1 => rows.extend(self.rows(m, &self.all_features(RegKind::L1)?, h2t_result)?),
                Method::AllL2 => rows.extend(self.rows(m, &self.all_features(RegKind::L2)?, h2t_result)?),
                Method::AllL21 => rows.extend(self.rows(m, &self.all_features(RegKind::L21)?, h2t_result)?),
                Method::Scratch => rows.extend(self.rows(m, &self.scratch()?, h2t_result)?),
                Method::FineTune => rows.extend(self.rows(m, &self.fine_tune()?, h2t_result)?),
                Method::Head2Toe | Method::Head2ToeFt | Method::Head2ToeFtPlus => {}
            }
        }
        if let Some((tuned, result, fold0)) = &h2t {
            if wants(Method::Head2Toe) {
                rows.extend(self.rows(Method::Head2Toe, tuned, Some(result))?);
            }
            if wants(Method::Head2ToeFt) || wants(Method::Head2ToeFtPlus) {
                let ft = self.head2toe_ft(tuned, result)?;
                if wants(Method::Head2ToeFt) {
                    rows.extend(self.rows(Method::Head2ToeFt, &ft, Some(result))?);
                }
                if wants(Method::Head2ToeFtPlus) {
                    let gated = match ft_plus_gate(Some(*fold0), Some(ft.val))? {
                        GateChoice::Head2Toe => Tuned {
                            fold_scores: vec![(0, *fold0)],
                            val: *fold0,
                            reg: tuned.reg.clone(),
                            ..*tuned
                        },
                        GateChoice::Head2ToeFt => Tuned {
                            reg: ft.reg.clone(),
                            fold_scores: ft.fold_scores.clone(),
                            ..ft
                        },
                    };
                    rows.extend(self.rows(Method::Head2ToeFtPlus, &gated, Some(result))?);
                }
            }
        }
        Ok(rows)
    }
}

fn tr_agg(cfg: &ExperimentConfig, layout: &Layout) -> crate::features::AggregationConfig {
    cfg.aggregation(layout.target)
}

