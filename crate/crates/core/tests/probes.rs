mod common;

use std::sync::OnceLock;

use h2t_core::backbone::TrainedBackbone;
use h2t_core::features::{AggregationConfig, FeatureBundle};
use h2t_core::harness::experiments::SplitStores;
use h2t_core::harness::median;
use h2t_core::probes::{fine_tune, head2toe_bundle, head2toe_ft, scratch_train, train_head, FineTuneConfig, Head2ToeConfig, RegKind, RegSpec};
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

/// 300 examples × 200 noise columns; column `j` alone carries the label.
fn planted(j: usize, seed: u64) -> FeatureBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 300;
    let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let m = Tensor::from_fn(&[n, 200], |i| {
        let (r, c) = (i / 200, i % 200);
        let noise: f32 = rng.random_range(-1.0..1.0);
        if c == j {
            (labels[r] as f32 * 2.0 - 1.0) + 0.3 * noise
        } else {
            noise
        }
    });
    FeatureBundle::from_matrix("planted", m, labels, 2).unwrap()
}

/// Empirical mutual information (nats) between a column's sign and the label.
fn sign_mutual_information(b: &FeatureBundle, col: usize) -> f64 {
    let mut joint = [[0.0f64; 2]; 2];
    let n = b.examples() as f64;
    for r in 0..b.examples() {
        let s = (b.matrix.row(r)[col] > 0.0) as usize;
        joint[s][b.labels[r] as usize] += 1.0 / n;
    }
    let ps = [joint[0][0] + joint[0][1], joint[1][0] + joint[1][1]];
    let py = [joint[0][0] + joint[1][0], joint[0][1] + joint[1][1]];
    let mut mi = 0.0;
    for s in 0..2 {
        for y in 0..2 {
            if joint[s][y] > 0.0 {
                mi += joint[s][y] * (joint[s][y] / (ps[s] * py[y])).ln();
            }
        }
    }
    mi
}

#[test]
fn no_penalty_equals_zero_l2() {
    let b = planted(3, 0);
    let cfg = TrainConfig::new(0.1, 50, 1);
    let a = train_head(&b.matrix, &b.labels, 2, &RegSpec::none(), &cfg).unwrap();
    let z = train_head(&b.matrix, &b.labels, 2, &RegSpec::new(RegKind::L2, 0.0).unwrap(), &cfg).unwrap();
    assert_eq!(a, z);
}

#[test]
fn full_fraction_keeps_every_column() {
    let b = planted(5, 1);
    let r = head2toe_bundle(&b, &Head2ToeConfig::new(1, 1e-3, 1.0, TrainConfig::new(0.1, 50, 0))).unwrap();
    assert_eq!(r.selection.kept, b.dim());
    assert_eq!(r.transform(&b).unwrap(), b.matrix);
}

#[test]
fn planted_column_is_kept() {
    for (j, seed) in [(17, 2), (140, 3)] {
        let b = planted(j, seed);
        let best = (0..b.dim())
            .max_by(|&x, &y| sign_mutual_information(&b, x).total_cmp(&sign_mutual_information(&b, y)))
            .unwrap();
        assert_eq!(best, j, "oracle disagrees with the construction");
        let cfg = Head2ToeConfig::new(1, 1e-3, 0.02, TrainConfig::new(0.1, 300, 0));
        let r = head2toe_bundle(&b, &cfg).unwrap();
        assert_eq!(r.selection.kept, 4);
        assert!(r.selection.bitmap[j], "column {j} not among {:?}", r.selection.indices());
    }
}

#[test]
fn selection_is_deterministic() {
    let b = planted(9, 4);
    let cfg = Head2ToeConfig::new(1, 1e-3, 0.05, TrainConfig::new(0.1, 100, 7));
    let x = head2toe_bundle(&b, &cfg).unwrap();
    let y = head2toe_bundle(&b, &cfg).unwrap();
    assert_eq!(x, y);
}

#[test]
fn frozen_fine_tune_equals_linear_probe() {
    let (w, bb) = world_and_backbone();
    let task = w.task("far", Labeling::NuisanceSign { dim: 0 }, 0).unwrap();
    let mut ft = FineTuneConfig::new(0.1, 100, 3);
    ft.backbone_lr = 0.0;
    let m = fine_tune(bb, &task.train, &ft).unwrap();
    assert_eq!(m.backbone.params, bb.params);
    let (train, test) = SplitStores::extract(bb, &task)
        .unwrap()
        .bundles(&AggregationConfig::new(1), &["embedding".to_string()])
        .unwrap();
    let lp = train_head(&train.matrix, &train.labels, 2, &RegSpec::none(), &TrainConfig::new(0.1, 100, 3)).unwrap();
    let ft_acc = m.evaluate(&task.test).unwrap();
    let lp_acc = lp.accuracy(&test.matrix, &test.labels).unwrap();
    assert!((ft_acc - lp_acc).abs() <= 1.0 / task.test.len() as f64, "ft {ft_acc} lp {lp_acc}");
    for (a, b) in m.head.weights.data().iter().zip(lp.weights.data()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn fine_tuning_on_the_source_keeps_accuracy() {
    let (w, bb) = world_and_backbone();
    let mut ft_acc = Vec::new();
    let mut frozen_acc = Vec::new();
    for seed in 0..3 {
        let train = w.dataset("src", Labeling::Source, 600, 100 + seed).unwrap();
        let test = w.dataset("src", Labeling::Source, 600, 200 + seed).unwrap();
        let task = h2t_core::data::Task { id: "src".into(), train: train.clone(), test: test.clone() };
        let (tr, te) = SplitStores::extract(bb, &task)
            .unwrap()
            .bundles(&AggregationConfig::new(1), &["embedding".to_string()])
            .unwrap();
        let c = train.num_classes;
        let lp = train_head(&tr.matrix, &tr.labels, c, &RegSpec::none(), &TrainConfig::new(0.1, 500, seed)).unwrap();
        frozen_acc.push(lp.accuracy(&te.matrix, &te.labels).unwrap());
        let mut ft = FineTuneConfig::new(0.1, 500, seed);
        ft.backbone_lr = 0.01;
        ft_acc.push(fine_tune(bb, &train, &ft).unwrap().evaluate(&test).unwrap());
    }
    let (f, l) = (median(&ft_acc).unwrap(), median(&frozen_acc).unwrap());
    assert!(f >= l - 0.01, "fine-tuned {f} vs frozen {l}");
}

#[test]
fn scratch_training_cases() {
    let (_, bb) = world_and_backbone();
    let task = common::blob_task(400, 64, 5);
    let untrained = scratch_train(&bb.spec, &task.train, &TrainConfig::new(0.1, 0, 0)).unwrap();
    let chance = untrained.evaluate(&task.test).unwrap();
    assert!((0.3..=0.7).contains(&chance), "untrained accuracy {chance}");
    let cfg = TrainConfig::new(0.1, 300, 0);
    let trained = scratch_train(&bb.spec, &task.train, &cfg).unwrap();
    assert!(common::perceptron_separates(&task.train, 100));
    assert!(trained.evaluate(&task.test).unwrap() >= 0.9);
    assert_eq!(trained, scratch_train(&bb.spec, &task.train, &cfg).unwrap());
}

fn far_h2t(seed: u64) -> (h2t_core::data::Task, Head2ToeConfig, h2t_core::probes::Head2ToeResult, FeatureBundle) {
    let (w, bb) = world_and_backbone();
    let task = w.task("far", Labeling::NuisanceSign { dim: 0 }, 10 + seed).unwrap();
    let cfg = Head2ToeConfig::new(16, 1e-3, 0.1, TrainConfig::new(0.1, 500, seed));
    let (train, test) = SplitStores::extract(bb, &task).unwrap().bundles(&cfg.aggregation, &cfg.layers).unwrap();
    let r = head2toe_bundle(&train, &cfg).unwrap();
    (task, cfg, r, test)
}

#[test]
fn degenerate_selection_fine_tuning_is_a_no_op() {
    let (_, bb) = world_and_backbone();
    let (task, _, r, test) = far_h2t(0);
    let h2t = r.evaluate(&test).unwrap();
    let tol = 1.0 / task.test.len() as f64;
    let zero_steps = head2toe_ft(bb, &r, &task.train, &FineTuneConfig::new(0.1, 0, 0)).unwrap();
    assert_eq!(zero_steps.head.weights, r.head.weights);
    assert!((zero_steps.evaluate(&task.test).unwrap() - h2t).abs() <= tol);
    let zero_lr = head2toe_ft(bb, &r, &task.train, &FineTuneConfig::new(0.0, 100, 0)).unwrap();
    assert_eq!(zero_lr.backbone.params, bb.params);
    assert!((zero_lr.evaluate(&task.test).unwrap() - h2t).abs() <= tol);
}

#[test]
fn selection_fine_tuning_does_not_hurt_on_planted_task() {
    let (_, bb) = world_and_backbone();
    let mut ft = Vec::new();
    let mut frozen = Vec::new();
    for seed in 0..3 {
        let (task, _, r, test) = far_h2t(seed);
        frozen.push(r.evaluate(&test).unwrap());
        let mut c = FineTuneConfig::new(0.1, 300, seed);
        c.backbone_lr = 0.01;
        ft.push(head2toe_ft(bb, &r, &task.train, &c).unwrap().evaluate(&task.test).unwrap());
    }
    let (a, b) = (median(&ft).unwrap(), median(&frozen).unwrap());
    assert!(a >= b - 0.02, "fine-tuned {a} vs frozen {b}");
}
