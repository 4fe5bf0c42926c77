//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every op in creation order, so node ids are already a
//! topological order and `backward` is a single reverse sweep. Every op
//! rejects non-finite outputs at construction time.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    AvgPool {
        input: NodeId,
        window: Vec<usize>,
        dims: Vec<usize>,
    },
    Conv2d(NodeId, NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    SoftmaxCe {
        logits: NodeId,
        labels: Arc<Vec<u32>>,
    },
    L21(NodeId),
    L1(NodeId),
    SumSquares(NodeId),
    NormalizeRows(NodeId),
    ConcatCols(Vec<NodeId>),
    GatherCols {
        input: NodeId,
        cols: Arc<Vec<usize>>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::AvgPool { .. } => "avg_pool",
            Op::Conv2d(..) => "conv2d",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::L21(..) => "l21_norm",
            Op::L1(..) => "l1_norm",
            Op::SumSquares(..) => "sum_squares",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherCols { .. } => "gather_cols",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::Conv2d(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::L21(a)
            | Op::L1(a)
            | Op::SumSquares(a)
            | Op::NormalizeRows(a) => vec![*a],
            Op::AvgPool { input, .. } | Op::GatherCols { input, .. } => vec![*input],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    op: Op,
    value: Tensor<T>,
    requires_grad: bool,
    /// Cached softmax probabilities for the fused cross-entropy op.
    aux: Option<Tensor<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but a missing gradient is a contract error.
    pub fn expect(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.get(id)
            .ok_or_else(|| Error::Contract(format!("node {} has no gradient", id.0)))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor<T>, aux: Option<Tensor<T>>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = matches!(op, Op::Param)
            || op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            aux,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A constant leaf; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Input, t, None)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Param, t, None)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        self.push(Op::MatMul(a, b), v, None)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = tensor::add_bias(self.value(x), self.value(bias))?;
        self.push(Op::AddBias(x, bias), v, None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), v, None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), v, None)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let s = T::from_f64(c);
        let v = self.value(x).map(|e| e * s);
        self.push(Op::Scale(x, c), v, None)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::relu(self.value(x));
        self.push(Op::Relu(x), v, None)
    }

    pub fn avg_pool(&mut self, x: NodeId, window: &[usize], dims: &[usize]) -> Result<NodeId> {
        let v = tensor::avg_pool(self.value(x), window, dims)?;
        self.push(
            Op::AvgPool {
                input: x,
                window: window.to_vec(),
                dims: dims.to_vec(),
            },
            v,
            None,
        )
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let v = tensor::conv2d(self.value(x), self.value(kernel))?;
        self.push(Op::Conv2d(x, kernel), v, None)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        self.push(Op::Reshape(x), v, None)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), None)
    }

    /// Fused, max-stabilized mean softmax cross-entropy.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Arc<Vec<u32>>) -> Result<NodeId> {
        let (loss, probs) = tensor::softmax_cross_entropy(self.value(logits), &labels)?;
        self.push(Op::SoftmaxCe { logits, labels }, Tensor::scalar(loss), Some(probs))
    }

    /// Group-lasso norm `Σ_i ‖row_i‖₂` of a matrix.
    pub fn l21(&mut self, w: NodeId) -> Result<NodeId> {
        let s = l21_value(self.value(w))?;
        self.push(Op::L21(w), Tensor::scalar(s), None)
    }

    pub fn l1(&mut self, w: NodeId) -> Result<NodeId> {
        let s: T = self.value(w).data().iter().map(|v| v.abs()).sum();
        self.push(Op::L1(w), Tensor::scalar(s), None)
    }

    pub fn sum_squares(&mut self, w: NodeId) -> Result<NodeId> {
        let s: T = self.value(w).data().iter().map(|&v| v * v).sum();
        self.push(Op::SumSquares(w), Tensor::scalar(s), None)
    }

    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::normalize_rows(self.value(x))?;
        self.push(Op::NormalizeRows(x), v, None)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_cols(&vals)?;
        self.push(Op::ConcatCols(parts.to_vec()), v, None)
    }

    pub fn gather_cols(&mut self, x: NodeId, cols: Arc<Vec<usize>>) -> Result<NodeId> {
        let v = tensor::gather_cols(self.value(x), &cols)?;
        self.push(Op::GatherCols { input: x, cols }, v, None)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contrib) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0].take() {
                    Some(acc) => acc.zip_map(&contrib, |a, b| a + b)?,
                    None => contrib,
                });
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let scalar_g = || g.data()[0];
        Ok(match &node.op {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if needs(*a) {
                    out.push((*a, tensor::matmul_nt(g, val(*b))?));
                }
                if needs(*b) {
                    out.push((*b, tensor::matmul_tn(val(*a), g)?));
                }
                out
            }
            Op::AddBias(x, b) => vec![(*x, g.clone()), (*b, tensor::sum_to_last_axis(g))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)?),
                (*b, g.zip_map(val(*a), |x, y| x * y)?),
            ],
            Op::Scale(x, c) => {
                let s = T::from_f64(*c);
                vec![(*x, g.map(|v| v * s))]
            }
            Op::Relu(x) => vec![(
                *x,
                g.zip_map(val(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })?,
            )],
            Op::AvgPool { input, window, dims } => vec![(
                *input,
                tensor::avg_pool_backward(val(*input).shape(), g, window, dims)?,
            )],
            Op::Conv2d(x, k) => {
                let (dx, dk) = tensor::conv2d_backward(val(*x), val(*k), g)?;
                vec![(*x, dx), (*k, dk)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), scalar_g()))],
            Op::SoftmaxCe { logits, labels } => {
                let probs = node
                    .aux
                    .as_ref()
                    .ok_or_else(|| Error::Contract("cross-entropy lost its probabilities".into()))?;
                let c = probs.shape()[1];
                let scale = scalar_g() / T::from_usize(labels.len());
                let mut d = probs.data().to_vec();
                for (row, &y) in d.chunks_mut(c).zip(labels.iter()) {
                    row[y as usize] = row[y as usize] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                vec![(*logits, Tensor::new(probs.shape().to_vec(), d)?)]
            }
            Op::L21(w) => {
                let wv = val(*w);
                let c = wv.row_len().max(1);
                let norms = tensor::row_l2_norms(wv)?;
                let gs = scalar_g();
                let mut d = Vec::with_capacity(wv.len());
                for (row, &n) in wv.data().chunks(c).zip(&norms) {
                    if n > T::zero() {
                        d.extend(row.iter().map(|&v| gs * v / n));
                    } else {
                        d.extend(row.iter().map(|_| T::zero()));
                    }
                }
                vec![(*w, Tensor::new(wv.shape().to_vec(), d)?)]
            }
            Op::L1(w) => {
                let gs = scalar_g();
                vec![(
                    *w,
                    val(*w).map(|v| {
                        if v > T::zero() {
                            gs
                        } else if v < T::zero() {
                            -gs
                        } else {
                            T::zero()
                        }
                    }),
                )]
            }
            Op::SumSquares(w) => {
                let two_g = scalar_g() + scalar_g();
                vec![(*w, val(*w).map(|v| two_g * v))]
            }
            Op::NormalizeRows(x) => {
                let xv = val(*x);
                let y = &node.value;
                let c = xv.row_len().max(1);
                let norms = tensor::row_l2_norms(xv)?;
                let mut d = Vec::with_capacity(xv.len());
                for ((grow, yrow), &n) in g.data().chunks(c).zip(y.data().chunks(c)).zip(&norms) {
                    if n > T::zero() {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        d.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| (gv - yv * dot) / n));
                    } else {
                        d.extend(grow.iter().map(|_| T::zero()));
                    }
                }
                vec![(*x, Tensor::new(xv.shape().to_vec(), d)?)]
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let total = g.row_len();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = val(p).row_len();
                    let mut d = Vec::with_capacity(n * w);
                    for i in 0..n {
                        d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    out.push((p, Tensor::new(vec![n, w], d)?));
                    offset += w;
                }
                out
            }
            Op::GatherCols { input, cols } => {
                let xv = val(*input);
                let c = xv.row_len();
                let k = cols.len();
                let mut d = vec![T::zero(); xv.len()];
                for (i, grow) in g.data().chunks(k.max(1)).enumerate().take(xv.rows()) {
                    for (&j, &gv) in cols.iter().zip(grow) {
                        d[i * c + j] += gv;
                    }
                }
                vec![(*input, Tensor::new(xv.shape().to_vec(), d)?)]
            }
        })
    }
}

/// `Σ_i ‖row_i‖₂`, accumulated in row order.
pub fn l21_value<T: Scalar>(w: &Tensor<T>) -> Result<T> {
    let mut acc = T::zero();
    for n in tensor::row_l2_norms(w)? {
        acc += n;
    }
    Ok(acc)
}

/// Plain gradient descent: `p ← p − lr·g`.
pub fn sgd_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[&Tensor<T>], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    let lr = T::from_f64(lr);
    for (p, g) in params.iter_mut().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv = *pv - lr * gv;
        }
    }
    Ok(())
}

/// Central-difference check of every parameter gradient of the scalar that
/// `build` computes from `params`. Returns the largest relative error; the
/// denominator `max(|analytic|, |numeric|)` is floored at `floor` so that
/// exactly-zero gradients are compared absolutely.
pub fn gradient_check<F>(params: &[Tensor<f64>], eps: f64, floor: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids = ps.iter().map(|p| g.param(p.clone())).collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &ids)?;
        Ok((g, ids, loss))
    };
    let (g, ids, loss) = eval(params)?;
    let grads = g.backward(loss)?;
    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(params[k].shape()));
        for i in 0..params[k].len() {
            let orig = params[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let (g1, _, l1) = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let (g2, _, l2) = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (g1.value(l1).item()? - g2.value(l2).item()?) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
