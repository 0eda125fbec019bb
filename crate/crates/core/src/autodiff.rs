//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A [`Tape`] records tensor operations as they are evaluated. Parameters are
//! bound from a [`ParamStore`] once per tape; calling [`Tape::backward`] on a
//! scalar node walks the tape in reverse creation order and returns one
//! gradient per bound parameter. Nodes created with [`Tape::constant`] or
//! [`Tape::stop_gradient`] never receive or forward gradients.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, ConvKernel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    StopGradient,
    Conv2d { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulBroadcast { x: Var, w: Var },
    Affine { x: Var, scale: f64 },
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    SpaceToDepth { x: Var, factor: usize },
    DepthToSpace { x: Var, factor: usize },
    Clamp { x: Var, lo: f64, hi: f64 },
    SquaredDistance { a: Var, b: Var, scale: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients keyed by parameter, in parameter order.
pub type Gradients = BTreeMap<ParamId, Tensor>;

pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    /// Convolution column matrices keyed by (input node, kernel size); every
    /// gate convolving the same input shares one.
    columns: HashMap<(usize, usize), Rc<Vec<f64>>>,
}

/// Column-space input gradients waiting to be folded back onto their image.
type PendingColumns = HashMap<usize, Vec<(usize, Vec<f64>)>>;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            columns: HashMap::new(),
        }
    }

    /// A tape whose parameters are bound as constants; used for inference
    /// and for running frozen models.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Op::Leaf, store.get(id).clone(), self.grad_enabled);
        self.params.insert(id, v);
        v
    }

    /// Marks `x` as a constant for differentiation purposes.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(Op::StopGradient, value, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let kernel = ConvKernel::new(self.value(w).clone(), b.map(|b| self.value(b).clone()))?;
        let cols = self.columns(x, kernel.size())?;
        let value = tensor::conv2d_with_columns(self.value(x), &cols, &kernel)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Op::Conv2d { x, w, b }, value, rg))
    }

    fn columns(&mut self, x: Var, k: usize) -> Result<Rc<Vec<f64>>> {
        if let Some(c) = self.columns.get(&(x.0, k)) {
            return Ok(Rc::clone(c));
        }
        let c = Rc::new(tensor::conv_columns(self.value(x), k)?);
        self.columns.insert((x.0, k), Rc::clone(&c));
        Ok(c)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "hadamard", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    /// `x ⊙ w` with `w` broadcast over the leading batch axis of `x`.
    pub fn mul_broadcast(&mut self, x: Var, w: Var) -> Result<Var> {
        let value = tensor::mul_broadcast(self.value(x), self.value(w))?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(Op::MulBroadcast { x, w }, value, rg))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        let value = self.value(x).map(|v| v * scale);
        let rg = self.rg(&[x]);
        self.push(Op::Affine { x, scale }, value, rg)
    }

    /// `1 − x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 - v);
        let rg = self.rg(&[x]);
        self.push(Op::Affine { x, scale: -1.0 }, value, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(tensor::sigmoid);
        let rg = self.rg(&[x]);
        self.push(Op::Sigmoid(x), value, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(Op::Tanh(x), value, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, epsilon: f64) -> Result<Var> {
        let (value, cache) =
            tensor::layer_norm_cached(self.value(x), self.value(gain), self.value(shift), epsilon)?;
        let rg = self.rg(&[x, gain, shift]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized: cache.normalized,
                inv_std: cache.inv_std,
            },
            value,
            rg,
        ))
    }

    pub fn space_to_depth(&mut self, x: Var, factor: usize) -> Result<Var> {
        let value = tensor::space_to_depth(self.value(x), factor)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::SpaceToDepth { x, factor }, value, rg))
    }

    pub fn depth_to_space(&mut self, x: Var, factor: usize) -> Result<Var> {
        let value = tensor::depth_to_space(self.value(x), factor)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::DepthToSpace { x, factor }, value, rg))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(&[x]);
        self.push(Op::Clamp { x, lo, hi }, value, rg)
    }

    /// `scale · Σ (a − b)²` as a one-element tensor.
    pub fn squared_distance(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("squared_distance", ta.shape(), tb.shape()));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::SquaredDistance { a, b, scale }, Tensor::scalar(scale * s), rg))
    }

    /// Sum of one-element nodes, accumulated left to right.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter();
        let first = *it
            .next()
            .ok_or_else(|| Error::Usage("sum of zero terms".into()))?;
        it.try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse pass from a scalar node. Every parameter bound on this tape
    /// gets an entry; unreachable ones are zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        }
        let mut pending = PendingColumns::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            for (k, dcols) in pending.remove(&i).unwrap_or_default() {
                let gx = tensor::columns_to_image(&dcols, &node.value, k)?;
                self.accumulate(&mut grads, Var(i), gx)?;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut pending)?;
            grads[i] = Some(g);
        }
        let mut out = Gradients::new();
        for (&id, &v) in &self.params {
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            out.insert(id, g);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        pending: &mut PendingColumns,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Conv2d { x, w, b } => {
                let wv = self.value(*w);
                let (c_out, c_in, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let ckk = c_in * k * k;
                let dout = tensor::to_channel_major(g)?;
                let cols_n = dout.len() / c_out;
                if self.wants(*w) {
                    let cols = match self.columns.get(&(x.0, k)) {
                        Some(c) => Rc::clone(c),
                        None => Rc::new(tensor::conv_columns(self.value(*x), k)?),
                    };
                    let mut gw = vec![0.0; c_out * ckk];
                    // dW = dOut · colsᵀ
                    tensor::gemm(c_out, cols_n, ckk, &dout, false, &cols, true, 0.0, &mut gw);
                    self.accumulate(grads, *w, Tensor::new(wv.shape(), gw)?)?;
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let gb = (0..c_out).map(|co| dout[co * cols_n..(co + 1) * cols_n].iter().sum()).collect();
                    self.accumulate(grads, b, Tensor::new(&[c_out], gb)?)?;
                }
                if self.wants(*x) {
                    let list = pending.entry(x.0).or_default();
                    let pos = match list.iter().position(|(kk, _)| *kk == k) {
                        Some(p) => p,
                        None => {
                            list.push((k, vec![0.0; ckk * cols_n]));
                            list.len() - 1
                        }
                    };
                    // dCols += Wᵀ · dOut
                    tensor::gemm(ckk, c_out, cols_n, wv.data(), true, &dout, false, 1.0, &mut list[pos].1);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v))?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), "mul_grad", |x, y| x * y)?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), "mul_grad", |x, y| x * y)?)?;
                }
            }
            Op::MulBroadcast { x, w } => {
                let wt = self.value(*w);
                if self.wants(*x) {
                    self.accumulate(grads, *x, tensor::mul_broadcast(g, wt)?)?;
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; wt.numel()];
                    for (gc, xc) in g
                        .data()
                        .chunks_exact(wt.numel())
                        .zip(self.value(*x).data().chunks_exact(wt.numel()))
                    {
                        for ((acc, gv), xv) in gw.iter_mut().zip(gc).zip(xc) {
                            *acc += gv * xv;
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(wt.shape(), gw)?)?;
                }
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                self.accumulate(grads, *x, g.map(|v| v * s))?;
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, "sigmoid_grad", |gv, y| gv * y * (1.0 - y))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::Tanh(x) => {
                let d = g.zip_map(&node.value, "tanh_grad", |gv, y| gv * (1.0 - y * y))?;
                self.accumulate(grads, *x, d)?;
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
            } => {
                let (n, c, plane) = tensor::norm_dims(self.value(*x))?;
                let per = c * plane;
                let gn = self.value(*gain).data();
                let xh = normalized.data();
                let gd = g.data();
                if self.wants(*gain) || self.wants(*shift) {
                    let mut dg = vec![0.0; c];
                    let mut ds = vec![0.0; c];
                    for b in 0..n {
                        for ci in 0..c {
                            let base = b * per + ci * plane;
                            for p in 0..plane {
                                dg[ci] += gd[base + p] * xh[base + p];
                                ds[ci] += gd[base + p];
                            }
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::new(&[c], dg)?)?;
                    self.accumulate(grads, *shift, Tensor::new(&[c], ds)?)?;
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * per];
                    let mut dxh = vec![0.0; per];
                    for b in 0..n {
                        let base = b * per;
                        for ci in 0..c {
                            for p in 0..plane {
                                dxh[ci * plane + p] = gd[base + ci * plane + p] * gn[ci];
                            }
                        }
                        let sum_d: f64 = dxh.iter().sum();
                        let sum_dx: f64 = dxh.iter().zip(&xh[base..base + per]).map(|(a, b)| a * b).sum();
                        let k = inv_std[b] / per as f64;
                        for j in 0..per {
                            dx[base + j] = k * (per as f64 * dxh[j] - sum_d - xh[base + j] * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(self.value(*x).shape(), dx)?)?;
                }
            }
            Op::SpaceToDepth { x, factor } => {
                self.accumulate(grads, *x, tensor::depth_to_space(g, *factor)?)?;
            }
            Op::DepthToSpace { x, factor } => {
                self.accumulate(grads, *x, tensor::space_to_depth(g, *factor)?)?;
            }
            Op::Clamp { x, lo, hi } => {
                let d = g.zip_map(self.value(*x), "clamp_grad", |gv, xv| {
                    if xv > *lo && xv < *hi {
                        gv
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, *x, d)?;
            }
            Op::SquaredDistance { a, b, scale } => {
                let k = 2.0 * scale * g.data()[0];
                let diff = self.value(*a).zip_map(self.value(*b), "sqdist_grad", |x, y| k * (x - y))?;
                if self.wants(*b) {
                    self.accumulate(grads, *b, diff.map(|v| -v))?;
                }
                self.accumulate(grads, *a, diff)?;
            }
        }
        Ok(())
    }
}

/// Largest coordinate-wise relative disagreement between `analytic` and a
/// central-difference estimate of the gradient of `f` at `params`:
/// `|a − c| / max(|a|, |c|, 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], analytic: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "parameter/gradient length mismatch");
    let mut x = params.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        let central = (up - down) / (2.0 * step);
        let a = analytic[i];
        let err = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}
