//! Reverse-mode automatic differentiation over the tensor kernels.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Node indices are assigned in creation order, which is a valid topological
//! order, so [`Tape::backward`] walks them once in reverse.
//!
//! Subgradient conventions: `relu'(0) = 0`; max-pool routes to the lowest
//! index among tied maxima; `l2norm_rows` treats its `eps` as a constant.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::energy_mask::{neighbor_cosine_sum, neighbor_cosine_sum_backward, NeighborTable};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, Tensor, TokenGeometry};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernels: Var, bias: Var, stride: usize, pad: usize },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Unfold { input: Var, d: usize },
    Fold { input: Var, geometry: TokenGeometry },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, Var),
    MulRows(Var, Var),
    Matmul(Var, Var),
    MatVec(Var, Var),
    Dot(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    L2NormRows { input: Var, eps: f64 },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    NeighborCosineSum { input: Var, table: NeighborTable },
    GlobalAvgPool(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner recording of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    differentiated: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last [`backward`](Self::backward) root
    /// with respect to `v`. `None` for constants or before backward has run.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Drops accumulated gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.differentiated = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = tensor::conv2d(self.value(input), self.value(kernels), self.value(bias), stride, pad)?;
        Ok(self.derived(y, Op::Conv2d { input, kernels, bias, stride, pad }, &[input, kernels, bias]))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let (y, argmax) = tensor::maxpool2d(self.value(input), window)?;
        Ok(self.derived(y, Op::MaxPool2d { input, argmax }, &[input]))
    }

    pub fn unfold(&mut self, input: Var, d: usize) -> Result<Var> {
        let y = tensor::unfold(self.value(input), d)?;
        Ok(self.derived(y, Op::Unfold { input, d }, &[input]))
    }

    pub fn fold(&mut self, input: Var, geometry: TokenGeometry) -> Result<Var> {
        let y = tensor::fold(self.value(input), &geometry)?;
        Ok(self.derived(y, Op::Fold { input, geometry }, &[input]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::add(self.value(a), self.value(b))?;
        Ok(self.derived(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.derived(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.derived(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let y = tensor::scale(self.value(a), factor)?;
        Ok(self.derived(y, Op::Scale(a, factor), &[a]))
    }

    /// Adds a one-element tensor `s` to every element of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let x = self.value(a);
        let y =
            Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v + sv).collect()).checked("add_scalar")?;
        Ok(self.derived(y, Op::AddScalar(a, s), &[a, s]))
    }

    /// Scales row `i` of matrix `a` by element `i` of vector `s`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let y = tensor::mul_rows(self.value(a), self.value(s))?;
        Ok(self.derived(y, Op::MulRows(a, s), &[a, s]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(y, Op::Matmul(a, b), &[a, b]))
    }

    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let y = tensor::matvec(self.value(a), self.value(x))?;
        Ok(self.derived(y, Op::MatVec(a, x), &[a, x]))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::dot(self.value(a), self.value(b))?;
        Ok(self.derived(Tensor::scalar(y), Op::Dot(a, b), &[a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let y = tensor::relu(self.value(a))?;
        Ok(self.derived(y, Op::Relu(a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let y = tensor::sigmoid(self.value(a))?;
        Ok(self.derived(y, Op::Sigmoid(a), &[a]))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let y = tensor::softplus(self.value(a))?;
        Ok(self.derived(y, Op::Softplus(a), &[a]))
    }

    pub fn l2norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let y = tensor::l2norm_rows(self.value(a), eps)?;
        Ok(self.derived(y, Op::L2NormRows { input: a, eps }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let y = tensor::sum(self.value(a))?;
        Ok(self.derived(Tensor::scalar(y), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let y = tensor::mean(self.value(a))?;
        Ok(self.derived(Tensor::scalar(y), Op::Mean(a), &[a]))
    }

    pub fn cross_entropy_logits(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (loss, probs) = tensor::cross_entropy_logits(self.value(logits), label)?;
        Ok(self.derived(Tensor::scalar(loss), Op::CrossEntropy { logits, label, probs }, &[logits]))
    }

    pub fn neighbor_cosine_sum(&mut self, tokens: Var, table: &NeighborTable) -> Result<Var> {
        let y = neighbor_cosine_sum(self.value(tokens), table)?;
        Ok(self.derived(y, Op::NeighborCosineSum { input: tokens, table: table.clone() }, &[tokens]))
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let y = tensor::global_avg_pool(self.value(a))?;
        Ok(self.derived(y, Op::GlobalAvgPool(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).reshape(shape)?;
        Ok(self.derived(y, Op::Reshape(a), &[a]))
    }

    /// Accumulates `∂root/∂v` into every node that requires a gradient.
    ///
    /// Errors if `root` is not a one-element tensor, or if gradients from a
    /// previous call have not been cleared with [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::Tape("backward already ran on this tape; call zero_grad first".into()));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::Tape(format!("unknown node {}", root.0)));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.differentiated = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(Tensor::from_parts(self.nodes[root.0].value.shape().to_vec(), vec![1.0]));

        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let contributions = self.node_vjp(i, &g)?;
            self.grads[i] = Some(g);
            for (parent, contrib) in contributions {
                self.accumulate(parent, contrib)?;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                if acc.shape() != contrib.shape() {
                    return Err(shape_err(
                        "backward",
                        format!("gradient {:?} into {:?}", contrib.shape(), acc.shape()),
                    ));
                }
                acc.data_mut().iter_mut().zip(contrib.data()).for_each(|(a, &c)| *a += c);
            }
            slot @ None => *slot = Some(contrib),
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`,
    /// one entry per parent that needs it.
    fn node_vjp(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[i].value;
        let mut res = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernels, bias, stride, pad } => {
                let gr = tensor::conv2d_backward(val(*input), val(*kernels), g, *stride, *pad)?;
                res.push((*input, gr.input));
                res.push((*kernels, gr.kernels));
                res.push((*bias, gr.bias));
            }
            Op::MaxPool2d { input, argmax } => {
                res.push((*input, tensor::maxpool2d_backward(g, argmax, val(*input).feature_shape()?)?));
            }
            Op::Unfold { input, d } => {
                let geom = TokenGeometry::new(val(*input).feature_shape()?, *d)?;
                res.push((*input, tensor::fold(g, &geom)?));
            }
            Op::Fold { input, geometry } => {
                res.push((*input, tensor::unfold(g, geometry.patch)?));
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                if needs(*b) {
                    res.push((*b, tensor::scale(g, -1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    res.push((*a, tensor::mul(g, val(*b))?));
                }
                if needs(*b) {
                    res.push((*b, tensor::mul(g, val(*a))?));
                }
            }
            Op::Scale(a, f) => res.push((*a, tensor::scale(g, *f)?)),
            Op::AddScalar(a, s) => {
                res.push((*a, g.clone()));
                if needs(*s) {
                    let shape = val(*s).shape().to_vec();
                    res.push((*s, Tensor::from_parts(shape, vec![g.data().iter().sum()])));
                }
            }
            Op::MulRows(a, s) => {
                if needs(*a) {
                    res.push((*a, tensor::mul_rows(g, val(*s))?));
                }
                if needs(*s) {
                    let d = val(*a).shape()[1];
                    let gs = g.data().chunks_exact(d).zip(val(*a).data().chunks_exact(d));
                    let data = gs.map(|(gr, ar)| tensor::elementwise_dot(gr, ar)).collect();
                    res.push((*s, Tensor::from_parts(val(*s).shape().to_vec(), data)));
                }
            }
            Op::Matmul(a, b) => {
                if needs(*a) {
                    res.push((*a, tensor::matmul(g, &tensor::transpose(val(*b))?)?));
                }
                if needs(*b) {
                    res.push((*b, tensor::matmul(&tensor::transpose(val(*a))?, g)?));
                }
            }
            Op::MatVec(a, x) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    for (row, &gi) in ga.chunks_exact_mut(k).zip(g.data()) {
                        row.iter_mut().zip(val(*x).data()).for_each(|(o, &xv)| *o = gi * xv);
                    }
                    res.push((*a, Tensor::from_parts(vec![m, k], ga)));
                }
                if needs(*x) {
                    let gm = g.reshape(&[1, m])?;
                    let gx = tensor::matmul(&gm, val(*a))?;
                    res.push((*x, gx.reshape(&[k])?));
                }
            }
            Op::Dot(a, b) => {
                let s = g.item()?;
                if needs(*a) {
                    res.push((*a, tensor::scale(val(*b), s)?));
                }
                if needs(*b) {
                    res.push((*b, tensor::scale(val(*a), s)?));
                }
            }
            Op::Relu(a) => {
                let data =
                    val(*a).data().iter().zip(g.data()).map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 }).collect();
                res.push((*a, Tensor::from_parts(g.shape().to_vec(), data)));
            }
            Op::Sigmoid(a) => {
                let data = out.data().iter().zip(g.data()).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                res.push((*a, Tensor::from_parts(g.shape().to_vec(), data)));
            }
            Op::Softplus(a) => {
                let data =
                    val(*a).data().iter().zip(g.data()).map(|(&x, &gv)| gv * tensor::sigmoid_scalar(x)).collect();
                res.push((*a, Tensor::from_parts(g.shape().to_vec(), data)));
            }
            Op::L2NormRows { input, eps } => {
                res.push((*input, tensor::l2norm_rows_backward(val(*input), g, *eps)?));
            }
            Op::Sum(a) => {
                let s = g.item()?;
                res.push((*a, Tensor::full(val(*a).shape(), s)));
            }
            Op::Mean(a) => {
                let s = g.item()? / val(*a).len() as f64;
                res.push((*a, Tensor::full(val(*a).shape(), s)));
            }
            Op::CrossEntropy { logits, label, probs } => {
                let s = g.item()?;
                let data =
                    probs.iter().enumerate().map(|(k, &p)| s * (p - if k == *label { 1.0 } else { 0.0 })).collect();
                res.push((*logits, Tensor::from_parts(val(*logits).shape().to_vec(), data)));
            }
            Op::NeighborCosineSum { input, table } => {
                res.push((*input, neighbor_cosine_sum_backward(val(*input), g, table)?));
            }
            Op::GlobalAvgPool(a) => {
                let fs = val(*a).feature_shape()?;
                let area = fs.h * fs.w;
                let mut data = vec![0.0; fs.numel()];
                for (ch, &gv) in data.chunks_exact_mut(area).zip(g.data()) {
                    ch.fill(gv / area as f64);
                }
                res.push((*a, Tensor::from_parts(fs.dims().to_vec(), data)));
            }
            Op::Reshape(a) => res.push((*a, g.reshape(val(*a).shape())?)),
        }
        res.retain(|(v, _)| needs(*v));
        for (_, t) in &res {
            if !t.data().iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite("backward"));
            }
        }
        Ok(res)
    }
}

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error per parameter tensor.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|&e| e < self.tolerance)
    }
}

/// Relative discrepancy `|a − b| / (|a| + |b| + 1e-12)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-12)
}

/// Checks the gradients of a scalar function recorded by `f` against
/// central finite differences with step `h`.
///
/// `f` receives a fresh tape and one leaf per entry of `params`; it must be
/// deterministic.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> =
        vars.iter().map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))).collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let r = f(&mut t, &vs)?;
        t.value(r).item()
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel_error = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[k], fd));
        }
        max_rel_error.push(worst);
    }
    Ok(GradCheckReport { max_rel_error, tolerance: tol })
}
