//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Every operation appends a node holding its forward value; `backward` walks
//! the tape in reverse. Parameters enter the tape through [`Graph::param`],
//! which records where each gradient must be delivered. A frozen
//! [`ParamGroup`] enters as a constant, so no gradient is ever produced for it.

use std::collections::HashMap;

use super::params::ParamGroup;
use super::tensor::{matmul_t, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ParamRef {
    pub group: String,
    pub index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamRef),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    BceLogits(Var, Tensor, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by parameter group and tensor index.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<ParamRef, Tensor>,
}

impl Gradients {
    pub fn get(&self, group: &str, index: usize) -> Option<&Tensor> {
        self.by_param.get(&ParamRef {
            group: group.to_string(),
            index,
        })
    }

    pub fn for_group<'a>(&'a self, group: &'a str) -> impl Iterator<Item = (usize, &'a Tensor)> + 'a {
        self.by_param
            .iter()
            .filter(move |(k, _)| k.group == group)
            .map(|(k, v)| (k.index, v))
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.by_param.keys().map(|k| k.group.clone()).collect();
        g.sort();
        g.dedup();
        g
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Places tensor `index` of `group` on the tape.
    pub fn param(&mut self, group: &ParamGroup, index: usize) -> Var {
        let value = group.tensors()[index].clone();
        if group.is_frozen() {
            self.constant(value)
        } else {
            let r = ParamRef {
                group: group.name().to_string(),
                index,
            };
            self.push(value, Op::Param(r), true)
        }
    }

    pub fn param_named(&mut self, group: &ParamGroup, name: &str) -> Result<Var> {
        let index = group
            .index_of(name)
            .ok_or_else(|| dim_err(format!("group `{}` has no tensor `{name}`", group.name())))?;
        Ok(self.param(group, index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_t(self.value(a), false, self.value(b), false)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err(format!("{what} on shapes {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Div(a, b), ng))
    }

    /// `a[r×c] + row[1×c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let (rr, rc) = self.value(row).dims2();
        if rr != 1 || rc != c {
            return Err(dim_err(format!("add_row of {rr}×{rc} onto {r}×{c}")));
        }
        let rv = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += rv[j];
            }
        }
        let value = Tensor::from_parts(vec![r, c], out);
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    /// `a[r×c] * col[r×1]`, each row scaled by its weight.
    pub fn scale_rows(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if self.value(col).numel() != r {
            return Err(dim_err(format!(
                "scale_rows with {} weights for {r} rows",
                self.value(col).numel()
            )));
        }
        let w = self.value(col).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..r {
            for v in &mut out[i * c..(i + 1) * c] {
                *v *= w[i];
            }
        }
        let value = Tensor::from_parts(vec![r, c], out);
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(value, Op::ScaleRows(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v + k);
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Divergence(format!("log of non-positive value {bad}")));
        }
        let value = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        Ok(self.push(value, Op::Log(a), ng))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Divergence(format!("sqrt of negative value {bad}")));
        }
        let value = self.value(a).map(f64::sqrt);
        let ng = self.ng(a);
        Ok(self.push(value, Op::Sqrt(a), ng))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(value, Op::Clamp(a, lo, hi), ng)
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against `truth`, with
    /// probabilities clamped to `[floor, 1 − floor]` before the logs.
    ///
    /// Same value and gradient as the sigmoid → clamp → log chain (`σ(z) − t`
    /// inside the clamp, zero outside) on one tape node.
    pub fn bce_logits(&mut self, logits: Var, truth: &Tensor, floor: f64) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != truth.shape() {
            return Err(dim_err(format!("logits {:?} vs labels {:?}", z.shape(), truth.shape())));
        }
        let total: f64 = z
            .data()
            .iter()
            .zip(truth.data())
            .map(|(&z, &t)| {
                let p = sigmoid(z);
                if p > floor && p < 1.0 - floor {
                    // −log σ(z) = softplus(−z) and −log(1 − σ(z)) = softplus(z), without
                    // the cancellation in 1 − σ(z) at large |z|.
                    t * softplus(-z) + (1.0 - t) * softplus(z)
                } else {
                    let p = p.clamp(floor, 1.0 - floor);
                    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                }
            })
            .sum();
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(total), Op::BceLogits(logits, truth.clone(), floor), ng))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, end)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceCols(a, start, end), ng))
    }

    /// Selects rows `[start, end)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if start >= end || end > r {
            return Err(dim_err(format!("row slice {start}..{end} of {r} rows")));
        }
        let data = self.value(a).data()[start * c..end * c].to_vec();
        let value = Tensor::from_parts(vec![end - start, c], data);
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceRows(a, start, end), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        if ar != br {
            return Err(dim_err(format!("concat_cols of {ar}×{ac} and {br}×{bc}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ar * (ac + bc));
        for i in 0..ar {
            out.extend_from_slice(&av[i * ac..(i + 1) * ac]);
            out.extend_from_slice(&bv[i * bc..(i + 1) * bc]);
        }
        let value = Tensor::from_parts(vec![ar, ac + bc], out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::ConcatCols(a, b), ng))
    }

    /// Stacks equally sized tensors, each flattened, as the rows of a matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(dim_err("stacking zero rows"));
        };
        let n = self.value(*first).numel();
        let mut data = Vec::with_capacity(n * parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.numel() != n {
                return Err(dim_err(format!("stacking {} values onto rows of {n}", v.numel())));
            }
            data.extend_from_slice(v.data());
        }
        let value = Tensor::from_parts(vec![parts.len(), n], data);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::StackRows(parts.to_vec()), ng))
    }

    /// Cosine similarity of two equally sized tensors viewed as flat vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.value(a).norm();
        let nb = self.value(b).norm();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateCosine("zero-norm vector".into()));
        }
        let ab = self.mul(a, b)?;
        let dot = self.sum(ab);
        let aa = self.mul(a, a)?;
        let saa = self.sum(aa);
        let bb = self.mul(b, b)?;
        let sbb = self.sum(bb);
        let prod = self.mul(saa, sbb)?;
        let den = self.sqrt(prod)?;
        self.div(dot, den)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(r) => {
                    match out.by_param.get_mut(r) {
                        Some(acc) => acc.add_assign(&g)?,
                        None => {
                            out.by_param.insert(r.clone(), g);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let ga = matmul_t(&g, false, self.value(*b), true)?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.ng(*b) {
                        let gb = matmul_t(self.value(*a), true, &g, false)?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0))?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.zip_map(bv, |x, y| x / y)?)?;
                    }
                    if self.ng(*b) {
                        // d(a/b)/db = -y / b
                        let gy = g.zip_map(y, |x, q| -x * q)?;
                        accumulate(&mut grads, *b, gy.zip_map(bv, |x, d| x / d)?)?;
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let (r, c) = g.dims2();
                        let mut col_sums = vec![0.0; c];
                        for i in 0..r {
                            for (s, v) in col_sums.iter_mut().zip(g.row(i)) {
                                *s += v;
                            }
                        }
                        let shape = self.value(*row).shape().to_vec();
                        accumulate(&mut grads, *row, Tensor::from_parts(shape, col_sums))?;
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g)?;
                    }
                }
                Op::ScaleRows(a, col) => {
                    let (r, c) = g.dims2();
                    let av = self.value(*a);
                    let w = self.value(*col).data();
                    if self.ng(*col) {
                        let gw: Vec<f64> = (0..r)
                            .map(|i| g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum())
                            .collect();
                        let shape = self.value(*col).shape().to_vec();
                        accumulate(&mut grads, *col, Tensor::from_parts(shape, gw))?;
                    }
                    if self.ng(*a) {
                        let mut ga = g.into_data();
                        for i in 0..r {
                            for v in &mut ga[i * c..(i + 1) * c] {
                                *v *= w[i];
                            }
                        }
                        let shape = av.shape().to_vec();
                        accumulate(&mut grads, *a, Tensor::from_parts(shape, ga))?;
                    }
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.scale(*k))?,
                Op::AddScalar(a) => accumulate(&mut grads, *a, g)?,
                Op::Relu(a) => {
                    let ga = g.zip_map(y, |x, o| if o > 0.0 { x } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(y, |x, s| x * s * (1.0 - s))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Log(a) => {
                    let ga = g.zip_map(self.value(*a), |x, v| x / v)?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Sqrt(a) => {
                    let ga = g.zip_map(y, |x, r| x / (2.0 * r))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = g.zip_map(self.value(*a), |x, v| if v > lo && v < hi { x } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::BceLogits(a, t, floor) => {
                    let gy = g.item();
                    let ga = self.value(*a).zip_map(t, |z, t| {
                        let p = sigmoid(z);
                        if p > *floor && p < 1.0 - *floor {
                            gy * (p - t)
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Sum(a) => {
                    let ga = Tensor::full(self.value(*a).shape(), g.item());
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Reshape(a) => {
                    let ga = g.reshape(self.value(*a).shape())?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Transpose(a) => {
                    let ga = g.transpose().reshape(self.value(*a).shape())?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::SliceCols(a, start, end) => {
                    let (r, c) = self.value(*a).dims2();
                    let w = end - start;
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        ga[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::from_parts(shape, ga))?;
                }
                Op::SliceRows(a, start, end) => {
                    let (r, c) = self.value(*a).dims2();
                    let mut ga = vec![0.0; r * c];
                    ga[start * c..end * c].copy_from_slice(g.data());
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::from_parts(shape, ga))?;
                }
                Op::StackRows(parts) => {
                    let n = g.cols();
                    for (i, &p) in parts.iter().enumerate() {
                        if self.ng(p) {
                            let row = g.data()[i * n..(i + 1) * n].to_vec();
                            let shape = self.value(p).shape().to_vec();
                            accumulate(&mut grads, p, Tensor::from_parts(shape, row))?;
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.value(*a).cols();
                    let (_, c) = g.dims2();
                    if self.ng(*a) {
                        let ga = g.slice_cols(0, ac)?.reshape(self.value(*a).shape())?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.ng(*b) {
                        let gb = g.slice_cols(ac, c)?.reshape(self.value(*b).shape())?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// `ln(1 + eˣ)`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
