mod common;

use std::sync::OnceLock;

use h2t_core::backbone::TrainedBackbone;
use h2t_core::data::Task;
use h2t_core::features::{AggregationConfig, FeatureBundle};
use h2t_core::harness::experiments::{control_ensemble, domain_affinity, oracle_single_layer, shuffled_labels, transfer_matrix, AffinityConfig, SplitStores};
use h2t_core::harness::report::{read_csv, RESULT_COLUMNS};
use h2t_core::harness::{evaluate_with, grid_search, kfold_split, spearman, write_outputs, ExperimentConfig, HyperGrid, Method};
use h2t_core::probes::{fit_selected, score_features, Head2ToeConfig};
use h2t_core::synth::{Labeling, SyntheticWorld};
use h2t_core::train::TrainConfig;
use h2t_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn world_and_backbone() -> &'static (SyntheticWorld, TrainedBackbone) {
    static CELL: OnceLock<(SyntheticWorld, TrainedBackbone)> = OnceLock::new();
    CELL.get_or_init(|| {
        let w = common::small_world();
        let b = common::mlp4_backbone(&w, 1500, 0);
        (w, b)
    })
}

fn emb() -> Vec<String> {
    vec!["embedding".to_string()]
}

fn train_cfg(seed: u64) -> TrainConfig {
    TrainConfig::new(0.1, 500, seed)
}

#[test]
fn single_point_grid_returns_it() {
    let out = grid_search(&[0.25f64], 4, |&p, f| Ok(p + f as f64)).unwrap();
    assert_eq!(out.best, 0.25);
    assert_eq!(out.fold_scores, vec![0.25, 1.25, 2.25, 3.25]);
}

#[test]
fn sparse_planted_task_prefers_a_small_fraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, d, j) = (400, 512, 77);
    let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let m = Tensor::from_fn(&[n, d], |i| {
        let z: f32 = rng.random_range(-1.0..1.0);
        if i % d == j {
            labels[i / d] as f32 * 2.0 - 1.0 + 0.5 * z
        } else {
            z
        }
    });
    let bundle = FeatureBundle::from_matrix("planted", m, labels, 2).unwrap();
    let folds = kfold_split(n, 3, 0).unwrap();
    let cfg = train_cfg(0);
    let scored: Vec<_> = folds
        .iter()
        .map(|f| {
            let tr = bundle.select_rows(&f.train).unwrap();
            (tr.clone(), score_features(&tr, 1e-3, &cfg).unwrap().0, bundle.select_rows(&f.val).unwrap())
        })
        .collect();
    let grid = [0.002, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0];
    let out = grid_search(&grid, folds.len(), |&f, k| {
        let (tr, s, val) = &scored[k];
        fit_selected(tr, s, f, AggregationConfig::new(1), &cfg)?.evaluate(val)
    })
    .unwrap();
    assert!(out.best <= 0.1, "chose F = {}", out.best);
}

#[test]
fn affinity_on_the_source_task_is_positive() {
    let (w, b) = world_and_backbone();
    let task = w.task("src", Labeling::Source, 40).unwrap();
    let cfg = AffinityConfig { aggregation: AggregationConfig::new(1), probe: train_cfg(0), scratch: train_cfg(0) };
    let r = domain_affinity(&task, b, &cfg).unwrap();
    assert!(r.affinity > 0.0, "{r:?}");
    assert_eq!(r.affinity, r.acc_linear - r.acc_scratch);
}

#[test]
fn affinity_with_random_labels_is_near_zero() {
    let (w, b) = world_and_backbone();
    let base = w.task("rand", Labeling::MergeHalves, 41).unwrap();
    let test = w.dataset("rand", Labeling::MergeHalves, 2000, 4242).unwrap();
    let task = Task {
        id: "rand".into(),
        train: shuffled_labels(&base.train, 1).unwrap(),
        test: shuffled_labels(&test, 2).unwrap(),
    };
    let cfg = AffinityConfig { aggregation: AggregationConfig::new(1), probe: train_cfg(0), scratch: train_cfg(0) };
    let r = domain_affinity(&task, b, &cfg).unwrap();
    assert!(r.affinity.abs() < 0.05, "{r:?}");
    assert!((r.acc_linear - 0.5).abs() < 0.05 && (r.acc_scratch - 0.5).abs() < 0.05, "{r:?}");
}

#[test]
fn oracle_layer_sweep() {
    let (w, b) = world_and_backbone();
    let task = w.task("far", Labeling::NuisanceSign { dim: 0 }, 42).unwrap();
    let stores = SplitStores::extract(b, &task).unwrap();
    let r = oracle_single_layer(&stores, "embedding", &AggregationConfig::new(16), &train_cfg(0)).unwrap();
    assert_eq!(r.table.len(), stores.train.layer_names().len());
    assert!(["h1", "h2"].contains(&r.best.as_str()), "best layer {} in {:?}", r.best, r.table);
    assert!(r.best_accuracy > r.linear + 0.05);
    let dup = r.table.iter().find(|(n, _)| n == "embedding").unwrap().1;
    assert!((dup - r.linear).abs() <= 0.02, "duplicated embedding {dup} vs {}", r.linear);
}

#[test]
fn control_ensemble_cases() {
    let (w, b) = world_and_backbone();
    let task = w.task("near", Labeling::MergeHalves, 43).unwrap();
    let agg = AggregationConfig::new(1);
    let a = SplitStores::extract(b, &task).unwrap();
    let (tr, te) = a.bundles(&agg, &emb()).unwrap();
    // With a zero-initialized head, duplicated columns keep equal weights,
    // so x⊕x at learning rate η trains exactly like x at 2η.
    let lp = h2t_core::harness::experiments::probe_accuracy(&tr, &te, &TrainConfig::new(0.2, 500, 0)).unwrap();
    let same = control_ensemble(&a, &a, "embedding", &agg, &train_cfg(0)).unwrap();
    assert!((same - lp).abs() <= 1.0 / te.examples() as f64, "ensemble of identical stores {same} vs lp {lp}");

    let other = common::mlp4_backbone(w, 300, 1);
    let s2 = SplitStores::extract(&other, &task).unwrap();
    let (tr2, _) = s2.bundles(&agg, &emb()).unwrap();
    assert_eq!(tr.concat(&tr2).unwrap().dim(), 2 * tr.dim());
    // Same width as the oracle's embedding ⊕ embedding condition.
    let oracle_dim = tr.concat(&tr).unwrap().dim();
    assert_eq!(oracle_dim, tr.concat(&tr2).unwrap().dim());
    control_ensemble(&a, &s2, "embedding", &agg, &train_cfg(0)).unwrap();
}

#[test]
fn transfer_between_disjoint_supports_hurts() {
    let (w, b) = world_and_backbone();
    let tasks: Vec<(String, SplitStores)> = [(0usize, 50u64), (3, 51)]
        .iter()
        .map(|&(dim, salt)| {
            let t = w.task(&format!("sign{dim}"), Labeling::NuisanceSign { dim }, salt).unwrap();
            (t.id.clone(), SplitStores::extract(b, &t).unwrap())
        })
        .collect();
    let cfg = Head2ToeConfig::new(16, 1e-3, 0.02, train_cfg(0));
    let m = transfer_matrix(&tasks, &cfg).unwrap();
    for i in 0..2 {
        assert_eq!(m.delta[i][i], 0.0);
        for j in 0..2 {
            if i != j {
                assert!(m.delta[i][j] < 0.0, "delta[{i}][{j}] = {}", m.delta[i][j]);
            }
        }
    }
    // The diagonal is each task evaluated on its own selection.
    let (tr, te) = tasks[0].1.bundles(&cfg.aggregation, &cfg.layers).unwrap();
    let own = h2t_core::probes::head2toe_bundle(&tr, &cfg).unwrap();
    assert_eq!(own.selection, m.selections[0]);
    assert!((own.evaluate(&te).unwrap() - m.accuracy[0][0]).abs() < 1e-12);
}

#[test]
fn spearman_hand_computed() {
    // Rank differences (−1, 1, −1, 1, 0): 1 − 6·4 / (5·24) = 0.8.
    let r = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
    assert!((r - 0.8).abs() < 1e-12);
    // Tied x ranks (1, 2.5, 2.5, 4, 5): 9.5 / √(9.5·10).
    let r = spearman(&[10.0, 20.0, 20.0, 30.0, 40.0], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    assert!((r - 9.5 / (95.0f64).sqrt()).abs() < 1e-12);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
}

#[test]
fn small_evaluate_has_the_result_schema() {
    let (_, b) = world_and_backbone();
    let mut cfg = ExperimentConfig::default();
    cfg.synth = common::small_world().config;
    cfg.seeds = vec![0];
    cfg.folds = 2;
    cfg.tasks = vec!["near_merge".into(), "far_sign".into()];
    cfg.methods = vec![Method::Linear, Method::Head2Toe];
    cfg.grid = HyperGrid {
        lr: vec![0.1],
        steps: vec![200],
        reg_coefficients: vec![1e-3],
        baseline_reg_coefficients: vec![1e-4],
        target_sizes: vec![16],
        fractions: vec![0.05, 0.1],
    };
    let out = evaluate_with(&cfg, b).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&out, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), RESULT_COLUMNS.join(","));
    let rows = read_csv(&dir.path().join("results.csv")).unwrap();
    assert_eq!(rows, out.rows);
    let finals: Vec<_> = rows.iter().filter(|r| r.fold == "final").collect();
    assert_eq!(finals.len(), 4);
    for r in &finals {
        assert!(r.test_acc.is_some() && r.flops_rel_ft.is_some() && r.storage_rel_ft.is_some());
    }
    let h2t = finals.iter().find(|r| r.method == "head2toe").unwrap();
    assert!(h2t.fraction.is_some() && h2t.target_size == Some(16));
    assert_eq!(out.summary.len(), 4);
    assert!(dir.path().join("summary.csv").exists() && dir.path().join("accuracy.svg").exists());
}
