//! Dense row-major tensors and the pure numerical kernels the autodiff
//! graph is built from.
//!
//! Tensors are immutable once built: the payload sits behind an `Arc`, so
//! cloning is cheap and a tensor can be shared read-only across threads.
//! Kernels are generic over [`Scalar`]; the toolkit runs in `f32`, while
//! numerical checks instantiate the very same kernels in `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Floating-point element type.
pub trait Scalar:
    num_traits::Float + Default + Debug + Sum + Send + Sync + std::ops::AddAssign + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); n]),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new((0..n).map(&mut f).collect()),
        }
    }

    /// Builds a `rows × cols` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the payload first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows of a matrix (first axis).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all axes after the first.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        same_shape(self, other, "elementwise op")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    /// Selects whole rows (first-axis slices) in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let w = self.row_len();
        let n = self.rows();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= n {
                return Err(Error::dim(format!("row {i} out of range for {n} rows")));
            }
            out.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            return Err(Error::dim("cannot select rows of a scalar"));
        }
        shape[0] = idx.len();
        Self::new(shape, out)
    }

    /// Concatenates along the first axis; all trailing axes must agree.
    pub fn concat_rows(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("nothing to concatenate"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::dim(format!(
                    "row concat: trailing shape {:?} vs {:?}",
                    &p.shape[1..],
                    tail
                )));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Self::new(shape, data)
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn as_matrix<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(format!("{what}: expected a matrix, got {s:?}"))),
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(a, "matmul lhs")?;
    let (k2, n) = as_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dims differ: {m}x{k} · {k2}x{n}"
        )));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = as_matrix(a, "matmul_tn lhs")?;
    let (k2, n) = as_matrix(b, "matmul_tn rhs")?;
    if k != k2 {
        return Err(Error::dim(format!("matmul_tn: {k}x{m}ᵀ · {k2}x{n}")));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(a, "matmul_nt lhs")?;
    let (n, k2) = as_matrix(b, "matmul_nt rhs")?;
    if k != k2 {
        return Err(Error::dim(format!("matmul_nt: {m}x{k} · ({n}x{k2})ᵀ")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out.push(arow.iter().zip(brow).map(|(&x, &y)| x * y).sum());
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Adds `bias[c]` along the last axis of `x`.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("bias add on a scalar"))?;
    if bias.shape() != [c] {
        return Err(Error::dim(format!(
            "bias shape {:?} does not match last axis {c}",
            bias.shape()
        )));
    }
    let b = bias.data();
    let data = x
        .data()
        .chunks(c)
        .flat_map(|row| row.iter().zip(b).map(|(&v, &bv)| v + bv))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Sums `x` over every axis but the last; the gradient of a bias add.
pub fn sum_to_last_axis<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.shape().last().copied().unwrap_or(1);
    let mut out = vec![T::zero(); c];
    for row in x.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor {
        shape: vec![c],
        data: Arc::new(out),
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Output extent of a pooled axis: partial trailing windows are kept.
pub fn pooled_len(len: usize, window: usize) -> usize {
    len.div_ceil(window)
}

struct PoolPlan {
    out_shape: Vec<usize>,
    /// For every input element, the flat index of its output cell.
    target: Vec<usize>,
    /// Number of input elements that landed in each output cell.
    counts: Vec<usize>,
}

fn pool_plan(shape: &[usize], window: &[usize], dims: &[usize]) -> Result<PoolPlan> {
    if window.len() != dims.len() {
        return Err(Error::dim(format!(
            "avg_pool: {} windows for {} axes",
            window.len(),
            dims.len()
        )));
    }
    let rank = shape.len();
    let mut win = vec![1usize; rank];
    for (&d, &w) in dims.iter().zip(window) {
        if d >= rank {
            return Err(Error::dim(format!("avg_pool: axis {d} out of range for rank {rank}")));
        }
        if win[d] != 1 {
            return Err(Error::dim(format!("avg_pool: axis {d} listed twice")));
        }
        if w == 0 {
            return Err(Error::dim("avg_pool: window of size 0"));
        }
        if w > shape[d] {
            return Err(Error::dim(format!(
                "avg_pool: window {w} larger than axis {d} of length {}",
                shape[d]
            )));
        }
        win[d] = w;
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&win)
        .map(|(&len, &w)| pooled_len(len, w))
        .collect();
    let total: usize = shape.iter().product();
    let out_total: usize = out_shape.iter().product();
    let mut target = Vec::with_capacity(total);
    let mut counts = vec![0usize; out_total];
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let mut o = 0;
        for ax in 0..rank {
            o = o * out_shape[ax] + idx[ax] / win[ax];
        }
        target.push(o);
        counts[o] += 1;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(PoolPlan {
        out_shape,
        target,
        counts,
    })
}

/// Non-overlapping average pooling (stride == window) over the listed axes.
/// A trailing partial window is averaged over the elements it actually covers.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, window: &[usize], dims: &[usize]) -> Result<Tensor<T>> {
    let plan = pool_plan(x.shape(), window, dims)?;
    let mut sums = vec![T::zero(); plan.counts.len()];
    for (&v, &o) in x.data().iter().zip(&plan.target) {
        sums[o] += v;
    }
    for (s, &c) in sums.iter_mut().zip(&plan.counts) {
        *s = *s / T::from_usize(c);
    }
    Tensor::new(plan.out_shape, sums)
}

pub fn avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    window: &[usize],
    dims: &[usize],
) -> Result<Tensor<T>> {
    let plan = pool_plan(input_shape, window, dims)?;
    let g = grad_out.data();
    let data = plan
        .target
        .iter()
        .map(|&o| g[o] / T::from_usize(plan.counts[o]))
        .collect();
    Tensor::new(input_shape.to_vec(), data)
}

/// Geometry of a stride-1, zero-padded ("same") NHWC convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(x: &[usize], kernel: &Tensor<T>) -> Result<Self> {
        let [n, h, w, cin] = *x else {
            return Err(Error::dim(format!("conv2d input must be NHWC, got {x:?}")));
        };
        let [kh, kw, kc, cout] = *kernel.shape() else {
            return Err(Error::dim(format!(
                "conv2d kernel must be [k,k,cin,cout], got {:?}",
                kernel.shape()
            )));
        };
        if kh != kw || kh % 2 == 0 {
            return Err(Error::dim(format!("conv2d kernel must be square and odd, got {kh}x{kw}")));
        }
        if kc != cin {
            return Err(Error::dim(format!("conv2d kernel expects {kc} channels, input has {cin}")));
        }
        Ok(Self { n, h, w, cin, k: kh, cout })
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let pad = (self.k / 2) as isize;
        let patch = self.patch();
        let mut cols = vec![T::zero(); self.n * self.h * self.w * patch];
        for b in 0..self.n {
            for y in 0..self.h {
                for xx in 0..self.w {
                    let row = ((b * self.h + y) * self.w + xx) * patch;
                    for dy in 0..self.k {
                        let sy = y as isize + dy as isize - pad;
                        if sy < 0 || sy >= self.h as isize {
                            continue;
                        }
                        for dx in 0..self.k {
                            let sx = xx as isize + dx as isize - pad;
                            if sx < 0 || sx >= self.w as isize {
                                continue;
                            }
                            let src = ((b * self.h + sy as usize) * self.w + sx as usize) * self.cin;
                            let dst = row + (dy * self.k + dx) * self.cin;
                            cols[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let pad = (self.k / 2) as isize;
        let patch = self.patch();
        let mut x = vec![T::zero(); self.n * self.h * self.w * self.cin];
        for b in 0..self.n {
            for y in 0..self.h {
                for xx in 0..self.w {
                    let row = ((b * self.h + y) * self.w + xx) * patch;
                    for dy in 0..self.k {
                        let sy = y as isize + dy as isize - pad;
                        if sy < 0 || sy >= self.h as isize {
                            continue;
                        }
                        for dx in 0..self.k {
                            let sx = xx as isize + dx as isize - pad;
                            if sx < 0 || sx >= self.w as isize {
                                continue;
                            }
                            let dst = ((b * self.h + sy as usize) * self.w + sx as usize) * self.cin;
                            let src = row + (dy * self.k + dx) * self.cin;
                            for c in 0..self.cin {
                                x[dst + c] += cols[src + c];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Stride-1 "same" convolution, NHWC input and `[k, k, cin, cout]` kernel.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), kernel)?;
    let cols = Tensor::new(vec![g.n * g.h * g.w, g.patch()], g.im2col(x.data()))?;
    let km = kernel.reshape(&[g.patch(), g.cout])?;
    matmul(&cols, &km)?.reshape(&[g.n, g.h, g.w, g.cout])
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(x.shape(), kernel)?;
    let rows = g.n * g.h * g.w;
    let cols = Tensor::new(vec![rows, g.patch()], g.im2col(x.data()))?;
    let go = grad_out.reshape(&[rows, g.cout])?;
    let km = kernel.reshape(&[g.patch(), g.cout])?;
    let dk = matmul_tn(&cols, &go)?.reshape(kernel.shape())?;
    let dcols = matmul_nt(&go, &km)?;
    let dx = Tensor::new(x.shape().to_vec(), g.col2im(dcols.data()))?;
    Ok((dx, dk))
}

/// Row-wise softmax of a `[n × c]` matrix, stabilized by the row max.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = as_matrix(logits, "softmax")?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean softmax cross-entropy over the batch. Returns the loss together with
/// the softmax probabilities, which the backward pass reuses.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u32],
) -> Result<(T, Tensor<T>)> {
    let (n, c) = as_matrix(logits, "softmax cross-entropy")?;
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for {n} logit rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::dim("softmax cross-entropy over an empty batch"));
    }
    let mut loss = T::zero();
    let mut probs = Vec::with_capacity(n * c);
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        let y = y as usize;
        if y >= c {
            return Err(Error::dim(format!("label {y} out of range for {c} classes")));
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        loss += log_z - row[y];
        probs.extend(row.iter().map(|&v| (v - log_z).exp()));
    }
    let probs = Tensor::new(vec![n, c], probs)?;
    Ok((loss / T::from_usize(n), probs))
}

/// ℓ2 norm of every row of a `[rows × cols]` matrix.
pub fn row_l2_norms<T: Scalar>(m: &Tensor<T>) -> Result<Vec<T>> {
    let (_, c) = as_matrix(m, "row norms")?;
    if c == 0 {
        return Ok(vec![T::zero(); m.rows()]);
    }
    Ok(m.data()
        .chunks(c)
        .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect())
}

/// Scales every row to unit ℓ2 norm; all-zero rows stay zero.
pub fn normalize_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = as_matrix(m, "normalize rows")?;
    let norms = row_l2_norms(m)?;
    let mut out = Vec::with_capacity(m.len());
    for (row, &nrm) in m.data().chunks(c.max(1)).zip(&norms) {
        if nrm > T::zero() {
            out.extend(row.iter().map(|&v| v / nrm));
        } else {
            out.extend(row.iter().map(|_| T::zero()));
        }
    }
    Tensor::new(m.shape().to_vec(), out)
}

/// Concatenates matrices with equal row counts along the column axis.
pub fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("nothing to concatenate"))?;
    let (n, _) = as_matrix(first, "concat")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = as_matrix(p, "concat")?;
        if r != n {
            return Err(Error::dim(format!("concat: {r} rows vs {n}")));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * total);
    for i in 0..n {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
    }
    Tensor::new(vec![n, total], out)
}

/// Keeps the listed columns of a matrix, in the listed order.
pub fn gather_cols<T: Scalar>(m: &Tensor<T>, cols: &[usize]) -> Result<Tensor<T>> {
    let (n, c) = as_matrix(m, "gather")?;
    if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
        return Err(Error::dim(format!("column {bad} out of range for {c} columns")));
    }
    let mut out = Vec::with_capacity(n * cols.len());
    for row in m.data().chunks(c.max(1)).take(n) {
        out.extend(cols.iter().map(|&j| row[j]));
    }
    Tensor::new(vec![n, cols.len()], out)
}
