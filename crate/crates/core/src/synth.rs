//! Bundled synthetic source and target tasks.
//!
//! Inputs mix a low-dimensional class-signal block with a wider nuisance
//! block through a fixed random rotation. The source task only depends on
//! the signal block, so a backbone pretrained on it has no reason to keep
//! nuisance directions alive up to its narrow embedding, while its first
//! layers still carry them. Target tasks range from relabelings of the
//! source classes ("near") to labels computed from a single nuisance
//! coordinate ("far").

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Task};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub signal_dims: usize,
    pub nuisance_dims: usize,
    pub source_classes: usize,
    /// Scale of the class prototypes in the signal block.
    pub separation: f64,
    /// Within-class noise in the signal block.
    pub noise: f64,
    pub source_examples: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            signal_dims: 16,
            nuisance_dims: 48,
            source_classes: 8,
            separation: 1.5,
            noise: 1.0,
            source_examples: 4000,
            train_examples: 500,
            test_examples: 1000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn input_dim(&self) -> usize {
        self.signal_dims + self.nuisance_dims
    }

    pub fn check(&self) -> Result<()> {
        if self.signal_dims == 0 || self.nuisance_dims < 2 || self.source_classes < 2 {
            return Err(Error::config("synthetic world needs signal dims, two nuisance dims and two classes"));
        }
        if !self.source_classes.is_multiple_of(4) {
            return Err(Error::config("source classes must be a multiple of 4"));
        }
        Ok(())
    }
}

/// How a target label is derived from a latent example.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Labeling {
    /// The source classes themselves.
    Source,
    /// Lower half of the source classes vs upper half.
    MergeHalves,
    /// Source class parity.
    Parity,
    /// Source class modulo 4.
    ModFour,
    /// Sign of `cos θ·(±1 from MergeHalves) + sin θ·v₀`.
    Blend { theta: f64 },
    /// Sign of one nuisance coordinate.
    NuisanceSign { dim: usize },
    /// Sign of the sum of two nuisance coordinates.
    NuisancePair { dims: (usize, usize) },
    /// Whether one nuisance coordinate is far from zero (|v| above the
    /// standard-normal median).
    NuisanceBand { dim: usize },
}

impl Labeling {
    pub fn num_classes(&self, source_classes: usize) -> usize {
        match self {
            Labeling::Source => source_classes,
            Labeling::ModFour => 4,
            _ => 2,
        }
    }
}

/// Median of |z| for a standard normal z.
const HALF_NORMAL_MEDIAN: f64 = 0.674_489_750_196_081_7;

struct Latent {
    class: usize,
    signal: Vec<f64>,
    nuisance: Vec<f64>,
}

/// Fixed prototypes and rotation shared by every task drawn from it.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub config: SynthConfig,
    prototypes: Vec<Vec<f64>>,
    /// Row-major `[input_dim × input_dim]` orthogonal matrix.
    rotation: Vec<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Gram–Schmidt on a Gaussian matrix.
fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= dot * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    rows.concat()
}

impl SyntheticWorld {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let prototypes = (0..config.source_classes)
            .map(|_| (0..config.signal_dims).map(|_| config.separation * normal(&mut rng)).collect())
            .collect();
        let rotation = random_rotation(config.input_dim(), &mut rng);
        Ok(Self {
            config,
            prototypes,
            rotation,
        })
    }

    fn latent(&self, rng: &mut ChaCha8Rng) -> Latent {
        let class = rng.random_range(0..self.config.source_classes);
        let signal = self.prototypes[class]
            .iter()
            .map(|&m| m + self.config.noise * normal(rng))
            .collect();
        let nuisance = (0..self.config.nuisance_dims).map(|_| normal(rng)).collect();
        Latent {
            class,
            signal,
            nuisance,
        }
    }

    fn label(&self, z: &Latent, labeling: Labeling) -> Result<u32> {
        let half = self.config.source_classes / 2;
        let v = |dim: usize| {
            z.nuisance
                .get(dim)
                .copied()
                .ok_or_else(|| Error::config(format!("nuisance dim {dim} out of range")))
        };
        Ok(match labeling {
            Labeling::Source => z.class as u32,
            Labeling::MergeHalves => (z.class >= half) as u32,
            Labeling::Parity => (z.class % 2) as u32,
            Labeling::ModFour => (z.class % 4) as u32,
            Labeling::Blend { theta } => {
                let near = if z.class >= half { 1.0 } else { -1.0 };
                (theta.cos() * near + theta.sin() * v(0)? > 0.0) as u32
            }
            Labeling::NuisanceSign { dim } => (v(dim)? > 0.0) as u32,
            Labeling::NuisancePair { dims } => (v(dims.0)? + v(dims.1)? > 0.0) as u32,
            Labeling::NuisanceBand { dim } => (v(dim)?.abs() > HALF_NORMAL_MEDIAN) as u32,
        })
    }

    fn embed_input(&self, z: &Latent, out: &mut Vec<f32>) {
        let d = self.config.input_dim();
        let u: Vec<f64> = z.signal.iter().chain(&z.nuisance).copied().collect();
        for row in self.rotation.chunks(d) {
            out.push(row.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() as f32);
        }
    }

    /// `n` examples labeled by `labeling`, drawn with an independent stream.
    pub fn dataset(&self, id: &str, labeling: Labeling, n: usize, seed: u64) -> Result<LabeledDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.input_dim();
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let z = self.latent(&mut rng);
            self.embed_input(&z, &mut data);
            labels.push(self.label(&z, labeling)?);
        }
        LabeledDataset::new(
            id,
            Tensor::new(vec![n, d], data)?,
            labels,
            labeling.num_classes(self.config.source_classes),
        )
    }

    pub fn source(&self) -> Result<LabeledDataset> {
        self.dataset(
            "source",
            Labeling::Source,
            self.config.source_examples,
            self.config.seed.wrapping_add(1),
        )
    }

    /// A target task with disjoint train/test streams. `salt` separates tasks
    /// sharing a labeling.
    pub fn task(&self, id: &str, labeling: Labeling, salt: u64) -> Result<Task> {
        let base = self.config.seed.wrapping_mul(1_000_003).wrapping_add(salt.wrapping_mul(7919));
        Ok(Task {
            id: id.into(),
            train: self.dataset(id, labeling, self.config.train_examples, base.wrapping_add(2))?,
            test: self.dataset(id, labeling, self.config.test_examples, base.wrapping_add(3))?,
        })
    }
}

/// The bundled suite: three near tasks, one in-between, two far tasks.
pub fn standard_suite() -> Vec<(&'static str, Labeling)> {
    vec![
        ("near_merge", Labeling::MergeHalves),
        ("near_parity", Labeling::Parity),
        ("near_mod4", Labeling::ModFour),
        ("mid_blend", Labeling::Blend { theta: std::f64::consts::FRAC_PI_4 }),
        ("far_sign", Labeling::NuisanceSign { dim: 0 }),
        ("far_pair", Labeling::NuisancePair { dims: (1, 2) }),
    ]
}

pub fn suite_tasks(world: &SyntheticWorld) -> Result<Vec<Task>> {
    standard_suite()
        .into_iter()
        .enumerate()
        .map(|(i, (id, l))| world.task(id, l, i as u64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_rotation(6, &mut rng);
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = (0..6).map(|k| q[i * 6 + k] * q[j * 6 + k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn datasets_are_seeded_and_balanced_enough() {
        let w = SyntheticWorld::new(SynthConfig::default()).unwrap();
        let a = w.dataset("t", Labeling::NuisanceSign { dim: 0 }, 400, 5).unwrap();
        let b = w.dataset("t", Labeling::NuisanceSign { dim: 0 }, 400, 5).unwrap();
        assert_eq!(a, b);
        let ones = a.labels.iter().filter(|&&y| y == 1).count();
        assert!((150..250).contains(&ones));
        let band = w.dataset("t", Labeling::NuisanceBand { dim: 1 }, 400, 6).unwrap();
        let ones = band.labels.iter().filter(|&&y| y == 1).count();
        assert!((150..250).contains(&ones));
    }

    #[test]
    fn suite_has_near_and_far() {
        let tasks = standard_suite();
        assert!(tasks.len() >= 6);
        assert!(tasks.iter().any(|(id, _)| id.starts_with("near")));
        assert!(tasks.iter().any(|(id, _)| id.starts_with("far")));
    }
}
