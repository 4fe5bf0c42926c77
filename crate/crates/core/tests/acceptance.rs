//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Exits non-zero when any
//! criterion fails other than those listed in [`UNATTAINABLE`], which are
//! still executed and reported as FAIL.

mod support;

use std::time::{Duration, Instant};

use h2t_core::autodiff::l21_value;
use h2t_core::backbone::{BackboneSpec, TrainedBackbone};
use h2t_core::data::BatchPolicy;
use h2t_core::features::compute_pool_window;
use h2t_core::harness::cost::{cost_report, CostInputs, FRACTION_GRID};
use h2t_core::harness::evaluate::{load_tasks, obtain_backbone};
use h2t_core::harness::experiments::{featurewise_vs_layerwise, offset_window_sweep, SplitStores};
use h2t_core::harness::{evaluate_with, median, spearman, write_outputs, EvaluationOutput, ExperimentConfig, HyperGrid, Method};
use h2t_core::probes::{linearization_check, loglog_slope, random_direction, score_features};
use h2t_core::selector::relevance_scores;
use h2t_core::train::TrainConfig;
use h2t_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that cannot hold under the implemented rules; see the README.
const UNATTAINABLE: &[&str] = &["pooling_arithmetic"];

type Outcome = Result<String, String>;

struct Suite {
    failed: Vec<&'static str>,
}

impl Suite {
    fn run(&mut self, name: &'static str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let outcome = f();
        let elapsed = t.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; took {elapsed:.1?} (budget {budget:?})")),
            o => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{elapsed:.1?}]"),
            Err(detail) => {
                println!("FAIL {name}: {detail} [{elapsed:.1?}]");
                self.failed.push(name);
            }
        }
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Outcome {
    let mut worst = (0.0f64, "");
    for op in support::OPS {
        let e = support::op_error(op, 50).map_err(|e| e.to_string())?;
        if e > worst.0 {
            worst = (e, op);
        }
    }
    check(
        worst.0 < 1e-4,
        format!("{} ops x 50 instances, max relative error {:.2e} ({})", support::OPS.len(), worst.0, worst.1),
    )
}

fn pooling() -> Outcome {
    let pw = compute_pool_window(&[20, 20, 128], 512).map_err(|e| e.to_string())?;
    check(
        pw.window == [5, 5] && pw.features == 1024,
        format!("20x20x128 at target 512 -> window {:?}, {} features (want [5, 5], 1024)", pw.window, pw.features),
    )
}

fn group_lasso() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (r, c) = (rng.random_range(1..40), rng.random_range(1..20));
        let w = Tensor::from_fn(&[r, c], |_| rng.random_range(-3.0f32..3.0));
        let s = relevance_scores(&w).map_err(|e| e.to_string())?;
        for i in 0..r {
            let oracle = w.row(i).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            worst = worst.max((s.scores[i] as f64 - oracle).abs() / oracle.max(1.0));
        }
        let l21 = l21_value(&w).map_err(|e| e.to_string())?;
        if l21 != s.sum() {
            return Err(format!("l21 term {l21} differs from score sum {}", s.sum()));
        }
    }
    check(worst <= 1e-6, format!("100 matrices, max deviation {worst:.2e}, l21 == sum of scores"))
}

fn mlp4_cost_inputs(t: usize) -> CostInputs {
    let spec = BackboneSpec::mlp4(64, 8);
    let n = 500;
    CostInputs {
        backbone_flops: spec.forward_flops().unwrap() as f64,
        backbone_params: spec.param_count().unwrap() as f64,
        examples: n,
        steps: t,
        batch: BatchPolicy::Auto.batch_size(n),
        embedding_dim: 32,
        all_dim: 64 * 3 + 32 + 8,
        kept: 23,
        classes: 2,
        validated_fractions: FRACTION_GRID.to_vec(),
    }
}

fn fraction_grid() -> Outcome {
    let sum: f64 = FRACTION_GRID.iter().sum();
    let report = cost_report(&mlp4_cost_inputs(500)).map_err(|e| e.to_string())?;
    check(
        (sum - 0.1885).abs() < 1e-12 && (report.search_overhead_pct - 18.85).abs() < 1e-9,
        format!("grid sum {sum:.4}, reported overhead {:.2}%", report.search_overhead_pct),
    )
}

fn taylor(backbone: &TrainedBackbone, input_dim: usize) -> Outcome {
    let x = Tensor::from_fn(&[1, input_dim], |i| ((i * 37 % 19) as f32 - 9.0) / 9.0);
    let dir = random_direction(&backbone.spec, 3).map_err(|e| e.to_string())?;
    let eps = [1e-1, 1e-2, 1e-3];
    let errors = eps
        .iter()
        .map(|&e| linearization_check(backbone, &x, 0, e, &dir).map(|r| r.error))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let slope = loglog_slope(&eps, &errors).map_err(|e| e.to_string())?;
    check(
        (1.8..=2.2).contains(&slope),
        format!(
            "errors [{}] at eps {eps:?}, log-log slope {slope:.3}",
            errors.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn final_median(out: &EvaluationOutput, task: &str, method: Method) -> Result<f64, String> {
    out.results
        .iter()
        .find(|r| r.task == task && r.method == method)
        .map(|r| r.median)
        .ok_or_else(|| format!("no {method} result for {task}"))
}

fn ood_gain(out: &EvaluationOutput) -> Outcome {
    let far = final_median(out, "far_sign", Method::Head2Toe)? - final_median(out, "far_sign", Method::Linear)?;
    let near = final_median(out, "near_merge", Method::Head2Toe)? - final_median(out, "near_merge", Method::Linear)?;
    check(
        far >= 0.10 && near.abs() <= 0.03,
        format!("far: H2T - LP = {:+.1} points; near: {:+.1} points (3 seeds, medians)", 100.0 * far, 100.0 * near),
    )
}

fn affinity(out: &EvaluationOutput) -> Outcome {
    let rho = out.affinity_gain_spearman.ok_or("no affinity correlation computed")?;
    let table: Vec<String> = out
        .affinity
        .iter()
        .zip(&out.gains)
        .map(|(a, g)| format!("{} {:+.1}/{:+.1}", a.task, 100.0 * a.affinity, 100.0 * g))
        .collect();
    check(
        out.affinity.len() >= 6 && rho < 0.0,
        format!("spearman(affinity, gain) = {rho:.3} over {} tasks [{}]", out.affinity.len(), table.join(", ")),
    )
}

/// Train/test bundles and relevance scores for the far task, one seed.
fn far_bundles(
    cfg: &ExperimentConfig,
    backbone: &TrainedBackbone,
    seed: u64,
) -> Result<(h2t_core::features::FeatureBundle, h2t_core::features::FeatureBundle, h2t_core::selector::RelevanceScores), String> {
    let mut c = cfg.clone();
    c.tasks = vec!["far_sign".into()];
    let task = load_tasks(&c, seed).map_err(|e| e.to_string())?.remove(0);
    let (train, test) = SplitStores::extract(backbone, &task)
        .and_then(|s| s.bundles(&cfg.aggregation(16), &[]))
        .map_err(|e| e.to_string())?;
    let (scores, _) = score_features(&train, 1e-3, &TrainConfig::new(0.1, 1000, seed)).map_err(|e| e.to_string())?;
    Ok((train, test, scores))
}

fn featurewise(cfg: &ExperimentConfig, backbone: &TrainedBackbone) -> Outcome {
    let (mut fw, mut lm, mut lg) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..3 {
        let (train, test, scores) = far_bundles(cfg, backbone, seed)?;
        for budget in [32, 64, 96, 128] {
            let c = featurewise_vs_layerwise(&train, &test, &scores, budget, &TrainConfig::new(0.1, 1000, seed))
                .map_err(|e| e.to_string())?;
            fw.push(c.feature_wise);
            lm.push(c.layer_mean);
            lg.push(c.layer_group);
        }
    }
    let (f, m, g) = (median(&fw).unwrap(), median(&lm).unwrap(), median(&lg).unwrap());
    check(
        f >= m && f >= g,
        format!("median accuracy feature-wise {f:.3}, layer mean {m:.3}, layer group norm {g:.3} (budgets 32-128, 3 seeds)"),
    )
}

fn offsets(cfg: &ExperimentConfig, backbone: &TrainedBackbone) -> Outcome {
    let (train, test, scores) = far_bundles(cfg, backbone, 0)?;
    let offs: Vec<usize> = (0..8).map(|i| i * 24).collect();
    let sweep = offset_window_sweep(&train, &test, &scores, 24, &offs, &TrainConfig::new(0.1, 1000, 0))
        .map_err(|e| e.to_string())?;
    let x: Vec<f64> = sweep.iter().map(|p| p.0 as f64).collect();
    let y: Vec<f64> = sweep.iter().map(|p| p.1).collect();
    let rho = spearman(&x, &y).map_err(|e| e.to_string())?;
    check(
        rho <= 0.0 && sweep.len() >= 5,
        format!("window 24, accuracy by offset {y:.3?}, spearman {rho:.3}"),
    )
}

fn cost() -> Outcome {
    let inputs = mlp4_cost_inputs(500);
    let r = cost_report(&inputs).map_err(|e| e.to_string())?;
    let storage = r.h2t_storage / inputs.backbone_params;
    check(
        r.h2t_flops_rel_ft < 0.05 && storage < 0.05,
        format!("MLP-4, t=500: H2T FLOPs {:.2}% of FT, stored adaptation {:.2}% of backbone parameters", 100.0 * r.h2t_flops_rel_ft, 100.0 * storage),
    )
}

fn determinism(cfg: &ExperimentConfig, backbone: &TrainedBackbone) -> Outcome {
    let mut c = cfg.clone();
    c.seeds = vec![0];
    c.folds = 2;
    c.tasks = vec!["near_merge".into(), "far_sign".into()];
    c.methods = Method::ALL.to_vec();
    c.grid = HyperGrid {
        lr: vec![0.1],
        steps: vec![100],
        reg_coefficients: vec![1e-3],
        baseline_reg_coefficients: vec![1e-4],
        target_sizes: vec![16],
        fractions: vec![0.05, 0.1],
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for run in 0..2 {
        let out = evaluate_with(&c, backbone).map_err(|e| e.to_string())?;
        let d = dir.path().join(format!("run{run}"));
        write_outputs(&out, &d).map_err(|e| e.to_string())?;
        files.push(std::fs::read(d.join("results.csv")).map_err(|e| e.to_string())?);
    }
    check(
        files[0] == files[1],
        format!("two runs over {} methods: results.csv {} bytes, identical = {}", c.methods.len(), files[0].len(), files[0] == files[1]),
    )
}

fn main() {
    let mut suite = Suite { failed: Vec::new() };
    let instant = Duration::from_secs(1);
    suite.run("gradient_correctness", Duration::from_secs(30), gradients);
    suite.run("pooling_arithmetic", instant, pooling);
    suite.run("group_lasso_identity", instant, group_lasso);
    suite.run("fraction_grid_overhead", instant, fraction_grid);
    suite.run("cost_dominance", instant, cost);

    let mut cfg = ExperimentConfig::default();
    let t = Instant::now();
    let backbone = obtain_backbone(&cfg).expect("pretraining the desk backbone");
    println!("# pretrained MLP-4 in {:.1?} (source accuracy {:.3})", t.elapsed(), backbone.source.accuracy);
    let input_dim = cfg.synth.input_dim();
    suite.run("taylor_linearization", Duration::from_secs(60), || taylor(&backbone, input_dim));

    cfg.folds = 3;
    cfg.grid.target_sizes = vec![16];
    suite.run("ood_gain", Duration::from_secs(600), || {
        let mut c = cfg.clone();
        c.tasks = vec!["near_merge".into(), "far_sign".into()];
        c.methods = vec![Method::Linear, Method::Head2Toe];
        ood_gain(&evaluate_with(&c, &backbone).map_err(|e| e.to_string())?)
    });
    suite.run("affinity_correlation", Duration::from_secs(1200), || {
        let mut c = cfg.clone();
        c.seeds = vec![0];
        c.methods = vec![Method::Linear, Method::Head2Toe, Method::Scratch];
        affinity(&evaluate_with(&c, &backbone).map_err(|e| e.to_string())?)
    });
    suite.run("featurewise_beats_layerwise", Duration::from_secs(600), || featurewise(&cfg, &backbone));
    suite.run("relevance_monotonicity", Duration::from_secs(600), || offsets(&cfg, &backbone));
    suite.run("determinism", Duration::from_secs(600), || determinism(&cfg, &backbone));

    let unexpected: Vec<_> = suite.failed.iter().filter(|n| !UNATTAINABLE.contains(n)).collect();
    println!(
        "# {} failed ({} expected: {})",
        suite.failed.len(),
        suite.failed.len() - unexpected.len(),
        UNATTAINABLE.join(", ")
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
