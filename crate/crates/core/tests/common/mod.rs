//! Small synthetic worlds and backbones shared by the integration tests.
#![allow(dead_code)]

use h2t_core::backbone::{pretrain, BackboneSpec, TrainedBackbone};
use h2t_core::data::{LabeledDataset, Task};
use h2t_core::synth::{SynthConfig, SyntheticWorld};
use h2t_core::train::TrainConfig;
use h2t_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A reduced world: fewer examples than the defaults, same geometry.
pub fn small_world() -> SyntheticWorld {
    SyntheticWorld::new(SynthConfig {
        source_examples: 2000,
        train_examples: 300,
        test_examples: 500,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub fn mlp4_backbone(world: &SyntheticWorld, steps: usize, seed: u64) -> TrainedBackbone {
    let source = world.source().unwrap();
    let spec = BackboneSpec::mlp4(world.config.input_dim(), source.num_classes);
    pretrain(&spec, &source, &TrainConfig::new(0.05, steps, seed)).unwrap()
}

/// Two Gaussian blobs centred at ±`gap` on every axis.
pub fn blobs(n: usize, dim: usize, gap: f32, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u32> = (0..n as u32).map(|i| i % 2).collect();
    let x = Tensor::from_fn(&[n, dim], |i| {
        let sign = if labels[i / dim] == 0 { -1.0 } else { 1.0 };
        let z: f32 = StandardNormal.sample(&mut rng);
        sign * gap + 0.5 * z
    });
    LabeledDataset::new("blobs", x, labels, 2).unwrap()
}

pub fn blob_task(n: usize, dim: usize, seed: u64) -> Task {
    Task {
        id: "blobs".into(),
        train: blobs(n, dim, 1.0, seed),
        test: blobs(n, dim, 1.0, seed + 1),
    }
}

/// Classic perceptron; returns whether it reached zero training errors.
pub fn perceptron_separates(data: &LabeledDataset, epochs: usize) -> bool {
    let d = data.inputs.row_len();
    let mut w = vec![0.0f64; d + 1];
    for _ in 0..epochs {
        let mut mistakes = 0;
        for i in 0..data.len() {
            let x = data.inputs.row(i);
            let y = if data.labels[i] == 1 { 1.0 } else { -1.0 };
            let a = w[d] + x.iter().zip(&w).map(|(&xi, wi)| xi as f64 * wi).sum::<f64>();
            if y * a <= 0.0 {
                mistakes += 1;
                for (wi, &xi) in w.iter_mut().zip(x) {
                    *wi += y * xi as f64;
                }
                w[d] += y;
            }
        }
        if mistakes == 0 {
            return true;
        }
    }
    false
}
