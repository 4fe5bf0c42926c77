//! Random instances of every differentiable graph op, shared by the
//! gradient tests and the acceptance suite.
#![allow(dead_code)]

use std::sync::Arc;

use h2t_core::autodiff::{gradient_check, Graph, NodeId};
use h2t_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OPS: [&str; 17] = [
    "matmul",
    "add_bias",
    "add",
    "mul",
    "scale",
    "relu",
    "avg_pool",
    "conv2d",
    "reshape",
    "sum",
    "softmax_cross_entropy",
    "l21",
    "l1",
    "sum_squares",
    "normalize_rows",
    "concat_cols",
    "gather_cols",
];

pub const EPS: f64 = 1e-4;
pub const FLOOR: f64 = 1e-6;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Entries bounded away from zero, so `eps` never crosses a kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ out ⊙ r` with a fixed random `r`, turning any output into a scalar.
fn project(g: &mut Graph<f64>, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = uniform(&mut rng, g.value(out).shape());
    let r = g.input(r)?;
    let m = g.mul(out, r)?;
    g.sum(m)
}

/// Worst relative gradient error of one op over `instances` random cases.
pub fn op_error(op: &str, instances: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        worst = worst.max(instance_error(op, seed)?);
    }
    Ok(worst)
}

pub fn instance_error(op: &str, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(op.len() as u64));
    let mut d = || rng.random_range(1..5usize);
    let (n, a, b) = (d(), d(), d());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1 << 20));
    let check = |params: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>| {
        gradient_check(&params, EPS, FLOOR, |g, p| f(g, p))
    };
    match op {
        "matmul" => check(vec![uniform(&mut rng, &[n, a]), uniform(&mut rng, &[a, b])], &|g, p| {
            let y = g.matmul(p[0], p[1])?;
            project(g, y, seed)
        }),
        "add_bias" => check(vec![uniform(&mut rng, &[n, a]), uniform(&mut rng, &[a])], &|g, p| {
            let y = g.add_bias(p[0], p[1])?;
            project(g, y, seed)
        }),
        "add" => check(vec![uniform(&mut rng, &[n, a]), uniform(&mut rng, &[n, a])], &|g, p| {
            let y = g.add(p[0], p[1])?;
            project(g, y, seed)
        }),
        "mul" => check(vec![uniform(&mut rng, &[n, a]), uniform(&mut rng, &[n, a])], &|g, p| {
            let y = g.mul(p[0], p[1])?;
            project(g, y, seed)
        }),
        "scale" => {
            let c = rng.random_range(-2.0..2.0);
            check(vec![uniform(&mut rng, &[n, a])], &move |g, p| {
                let y = g.scale(p[0], c)?;
                project(g, y, seed)
            })
        }
        "relu" => check(vec![off_zero(&mut rng, &[n, a, b])], &|g, p| {
            let y = g.relu(p[0])?;
            project(g, y, seed)
        }),
        "avg_pool" => {
            let (h, w, c) = (rng.random_range(2..7), rng.random_range(2..7), rng.random_range(1..4));
            let win = [rng.random_range(1..=h), rng.random_range(1..=w)];
            check(vec![uniform(&mut rng, &[n, h, w, c])], &move |g, p| {
                let y = g.avg_pool(p[0], &win, &[1, 2])?;
                project(g, y, seed)
            })
        }
        "conv2d" => {
            let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
            let k = if rng.random_bool(0.5) { 1 } else { 3 };
            check(
                vec![uniform(&mut rng, &[n, h, w, a]), uniform(&mut rng, &[k, k, a, b])],
                &|g, p| {
                    let y = g.conv2d(p[0], p[1])?;
                    project(g, y, seed)
                },
            )
        }
        "reshape" => check(vec![uniform(&mut rng, &[n, a, b])], &move |g, p| {
            let y = g.reshape(p[0], &[n, a * b])?;
            project(g, y, seed)
        }),
        "sum" => check(vec![uniform(&mut rng, &[n, a])], &|g, p| {
            let sq = g.mul(p[0], p[0])?;
            g.sum(sq)
        }),
        "softmax_cross_entropy" => {
            let c = a + 1;
            let labels: Arc<Vec<u32>> = Arc::new((0..n).map(|_| rng.random_range(0..c as u32)).collect());
            let scale = rng.random_range(0.5..4.0);
            check(vec![Tensor::from_fn(&[n, c], |_| scale * rng.random_range(-1.0..1.0))], &move |g, p| {
                g.softmax_cross_entropy(p[0], labels.clone())
            })
        }
        "l21" => check(vec![uniform(&mut rng, &[n, a])], &|g, p| g.l21(p[0])),
        "l1" => check(vec![off_zero(&mut rng, &[n, a])], &|g, p| g.l1(p[0])),
        "sum_squares" => check(vec![uniform(&mut rng, &[n, a])], &|g, p| g.sum_squares(p[0])),
        "normalize_rows" => check(vec![off_zero(&mut rng, &[n, a])], &|g, p| {
            let y = g.normalize_rows(p[0])?;
            project(g, y, seed)
        }),
        "concat_cols" => check(vec![uniform(&mut rng, &[n, a]), uniform(&mut rng, &[n, b])], &|g, p| {
            let y = g.concat_cols(&[p[0], p[1]])?;
            project(g, y, seed)
        }),
        "gather_cols" => {
            let cols: Arc<Vec<usize>> = Arc::new((0..b + 1).map(|_| rng.random_range(0..a)).collect());
            check(vec![uniform(&mut rng, &[n, a])], &move |g, p| {
                let y = g.gather_cols(p[0], cols.clone())?;
                project(g, y, seed)
            })
        }
        other => panic!("no instance generator for {other}"),
    }
}
