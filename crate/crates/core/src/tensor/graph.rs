//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Node ids
//! are assigned in creation order, so the record is always topologically
//! sorted and [`Graph::backward`] walks it in reverse.
//!
//! [`Graph::checkpoint`] records a whole segment as one node: only the
//! segment output is retained, and the segment is replayed on a scratch graph
//! when its gradient is needed.

use std::rc::Rc;

use super::dense::{matmul_dims, numel, Tensor};
use super::scalar::{gemm, MatView, Scalar};
use crate::error::{dim_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A recomputable piece of forward computation. It receives the scratch graph
/// and one leaf per declared input, and must be deterministic.
pub type Segment<T> = Rc<dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>>;

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var),
    Mul(Var, Var, Broadcast),
    Scale(Var, T),
    MatMul(Var, Var),
    Gelu {
        x: Var,
        cdf: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Gather {
        src: Var,
        index: Rc<[usize]>,
    },
    Reshape(Var),
    Checkpoint {
        inputs: Vec<Var>,
        segment: Segment<T>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Gelu { .. } => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::Attention { .. } => "attention",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Gather { .. } => "gather",
            Op::Reshape(..) => "reshape",
            Op::Checkpoint { .. } => "checkpoint",
        }
    }

    fn saved_elements(&self) -> usize {
        match self {
            Op::LayerNorm { mean, rstd, .. } => mean.len() + rstd.len(),
            Op::Attention { probs, .. } => probs.len(),
            Op::Gelu { cdf, .. } => cdf.len(),
            _ => 0,
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// How the right operand of a binary op maps onto the left operand's shape.
#[derive(Clone)]
enum Broadcast {
    Same,
    /// Right operand matches the trailing dimensions of the output.
    Suffix(usize),
    General(Rc<[usize]>),
}

impl Broadcast {
    fn resolve(out: &[usize], rhs: &[usize]) -> Result<Self> {
        if out == rhs {
            return Ok(Broadcast::Same);
        }
        if rhs.len() > out.len() {
            return Err(dim_err(format!("cannot broadcast {rhs:?} onto {out:?}")));
        }
        let offset = out.len() - rhs.len();
        for (i, &d) in rhs.iter().enumerate() {
            if d != 1 && d != out[offset + i] {
                return Err(dim_err(format!("cannot broadcast {rhs:?} onto {out:?}")));
            }
        }
        let rhs_trimmed: Vec<usize> = {
            let first = rhs.iter().position(|&d| d != 1).unwrap_or(rhs.len());
            rhs[first..].to_vec()
        };
        if out.ends_with(&rhs_trimmed) {
            return Ok(Broadcast::Suffix(numel(&rhs_trimmed).max(1)));
        }
        // Strides of rhs aligned to the output, zero on broadcast axes.
        let mut strides = vec![0usize; out.len()];
        let mut acc = 1;
        for i in (0..rhs.len()).rev() {
            if rhs[i] != 1 {
                strides[offset + i] = acc;
            }
            acc *= rhs[i];
        }
        let total = numel(out);
        let mut index = Vec::with_capacity(total);
        let mut counter = vec![0usize; out.len()];
        for _ in 0..total {
            index.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
            for ax in (0..out.len()).rev() {
                counter[ax] += 1;
                if counter[ax] < out[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        Ok(Broadcast::General(index.into()))
    }

    /// `f(a[i], b[j(i)])` for every output position `i`.
    fn zip<T: Scalar>(&self, a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
        match self {
            Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Suffix(n) => {
                let mut out = Vec::with_capacity(a.len());
                for row in a.chunks_exact(*n) {
                    out.extend(row.iter().zip(b).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            Broadcast::General(idx) => a
                .iter()
                .zip(idx.iter())
                .map(|(&x, &j)| f(x, b[j]))
                .collect(),
        }
    }

    /// `acc[j(i)] += f(i)` summed over output positions `i`.
    fn reduce<T: Scalar>(&self, acc: &mut [T], len: usize, f: impl Fn(usize) -> T) {
        match self {
            Broadcast::Same => acc.iter_mut().enumerate().for_each(|(i, o)| *o += f(i)),
            Broadcast::Suffix(n) => {
                for start in (0..len).step_by(*n) {
                    for (j, o) in acc.iter_mut().enumerate() {
                        *o += f(start + j);
                    }
                }
            }
            Broadcast::General(idx) => idx.iter().enumerate().for_each(|(i, &j)| acc[j] += f(i)),
        }
    }
}

/// Records a forward computation and differentiates it in reverse.
///
/// A graph belongs to a single thread; create one per forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    /// Contributions of the op being differentiated, committed after it.
    pending: Vec<(usize, Tensor<T>)>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            pending: Vec::new(),
            check_finite: false,
        }
    }

    /// Makes every op fail with [`Error::NonFinite`] when it produces NaN/Inf.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward seed with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Number of activation values the graph holds for the backward pass:
    /// every non-leaf node value plus per-op saved buffers.
    pub fn retained_elements(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.value.numel() + n.op.saved_elements())
            .sum()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bc = Broadcast::resolve(av.shape(), bv.shape())?;
        let data = bc.zip(av.data(), bv.data(), |x, y| x + y);
        let value = Tensor::new(av.shape(), data)?;
        self.push(value, Op::Add(a, b, bc), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bc = Broadcast::resolve(av.shape(), bv.shape())?;
        let data = bc.zip(av.data(), bv.data(), |x, y| x * y);
        let value = Tensor::new(av.shape(), data)?;
        self.push(value, Op::Mul(a, b, bc), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// `a[..., K] x b[K, N] -> [..., N]`; leading dimensions of `a` act as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `x W + bias` with `bias` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, bias)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let inv = T::of(1.0 / SQRT_2);
        let half = T::of(0.5);
        let xv = self.value(a);
        let cdf: Vec<T> = xv
            .data()
            .iter()
            .map(|&x| half * (T::one() + (x * inv).erf()))
            .collect();
        let data = xv.data().iter().zip(&cdf).map(|(&x, &c)| x * c).collect();
        let value = Tensor::new(xv.shape(), data)?;
        self.push(value, Op::Gelu { x: a, cdf }, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.abs());
        self.push(value, Op::Abs(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / T::of(t.numel() as f64));
        self.push(value, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape(a), &[a])
    }

    /// `out[i] = src[index[i]]`, reshaped to `shape`. Covers permutations,
    /// slicing and table lookups.
    pub fn gather(&mut self, src: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        if numel(shape) != index.len() {
            return Err(dim_err(format!(
                "gather: {} indices for output shape {shape:?}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= sv.numel()) {
            return Err(dim_err(format!(
                "gather index {bad} out of range for {:?}",
                sv.shape()
            )));
        }
        let data = index.iter().map(|&i| sv.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Gather { src, index }, &[src])
    }

    /// Layer normalization over the last dimension with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(dim_err(format!(
                "layer_norm over {:?} with gamma {:?} and beta {:?}",
                xv.shape(),
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / d;
        let inv_d = T::of(1.0 / d as f64);
        let eps = T::of(eps);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(d) {
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            for j in 0..d {
                out.push((row[j] - mu) * r * g[j] + b[j]);
            }
            mean.push(mu);
            rstd.push(r);
        }
        let value = Tensor::new(xv.shape(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let n = av.last_dim();
        let mut out = av.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(av.shape(), out)?;
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Multi-head scaled dot-product attention over packed projections.
    ///
    /// `qkv` is `[B, N, 3D]` holding `(q, k, v)` slabs of width `D` along the
    /// last axis; heads slice each slab into `D / heads` wide pieces. The
    /// result is `[B, N, D]` with heads concatenated (no output projection).
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let qv = self.value(qkv);
        let s = qv.shape();
        if s.len() != 3 || s[2] % 3 != 0 || heads == 0 || (s[2] / 3) % heads != 0 {
            return Err(dim_err(format!("attention over {s:?} with {heads} heads")));
        }
        let (b, n, d) = (s[0], s[1], s[2] / 3);
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); b * heads * n * n];
        let mut out = vec![T::zero(); b * n * d];
        let data = qv.data();
        for bi in 0..b {
            for h in 0..heads {
                let base = bi * n * 3 * d + h * dh;
                let p_off = (bi * heads + h) * n * n;
                gemm(
                    n,
                    dh,
                    n,
                    scale,
                    data,
                    MatView::strided(base, 3 * d, 1),
                    data,
                    MatView::strided(base + d, 1, 3 * d),
                    T::zero(),
                    &mut probs,
                    MatView::row_major(p_off, n),
                );
                for row in probs[p_off..p_off + n * n].chunks_exact_mut(n) {
                    softmax_in_place(row);
                }
                gemm(
                    n,
                    n,
                    dh,
                    T::one(),
                    &probs,
                    MatView::row_major(p_off, n),
                    data,
                    MatView::strided(base + 2 * d, 3 * d, 1),
                    T::zero(),
                    &mut out,
                    MatView::strided(bi * n * d + h * dh, d, 1),
                );
            }
        }
        let value = Tensor::new(&[b, n, d], out)?;
        self.push(value, Op::Attention { qkv, heads, probs }, &[qkv])
    }

    /// Runs `segment` on a scratch graph and records only its output.
    ///
    /// Every graph value the segment reads must be passed through `inputs`;
    /// the segment sees them as leaves in the same order. During backward the
    /// segment is replayed and differentiated, so its activations never stay
    /// resident in this graph.
    pub fn checkpoint(&mut self, inputs: &[Var], segment: Segment<T>) -> Result<Var> {
        let (mut sub, leaves) = self.scratch(inputs);
        let out = segment(&mut sub, &leaves)?;
        let value = sub.nodes.swap_remove(out.0).value;
        drop(sub);
        self.push(
            value,
            Op::Checkpoint {
                inputs: inputs.to_vec(),
                segment,
            },
            inputs,
        )
    }

    fn scratch(&self, inputs: &[Var]) -> (Graph<T>, Vec<Var>) {
        let mut sub = Graph::new();
        sub.check_finite = self.check_finite;
        let leaves = inputs
            .iter()
            .map(|&v| sub.push_leaf(self.value(v).clone(), self.requires_grad(v)))
            .collect();
        (sub, leaves)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if numel(shape) != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {shape:?}"
            )));
        }
        self.backward_with(loss, Tensor::ones(&[1]).reshape(shape)?)
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `out`) back to
    /// every leaf that requires a gradient. Previous gradients are cleared.
    pub fn backward_with(&mut self, out: Var, seed: Tensor<T>) -> Result<()> {
        if seed.shape() != self.value(out).shape() {
            return Err(dim_err(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                self.value(out).shape()
            )));
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[out.0] = Some(seed);
        for id in (0..=out.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) || !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g)?;
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, owner: usize) -> Result<Option<&mut Tensor<T>>> {
        if v.0 >= owner {
            return Err(Error::Contract(format!(
                "graph order violated: node {owner} consumes later node {}",
                v.0
            )));
        }
        if !self.nodes[v.0].requires_grad {
            return Ok(None);
        }
        let zeros = Tensor::zeros(self.nodes[v.0].value.shape());
        self.pending.push((v.0, zeros));
        Ok(self.pending.last_mut().map(|(_, t)| t))
    }

    /// Adds each pending contribution to its gradient as one whole tensor, so
    /// a checkpointed segment sums contributions in the same order as the
    /// plain graph does.
    fn commit(&mut self) {
        for (i, t) in self.pending.drain(..) {
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        }
    }

    fn propagate(&mut self, id: usize, g: &Tensor<T>) -> Result<()> {
        // Ops hold `Rc`s and small vectors; temporarily move the op out so the
        // node values can be read while gradients are written.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        let res = self.propagate_op(id, &op, g);
        self.nodes[id].op = op;
        self.commit();
        res
    }

    fn propagate_op(&mut self, id: usize, op: &Op<T>, g: &Tensor<T>) -> Result<()> {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                if let Some(ga) = self.accum(*a, id)? {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.accum(*b, id)? {
                    bc.reduce(gb.data_mut(), gd.len(), |i| gd[i]);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.accum(*a, id)? {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.accum(*b, id)? {
                    for (o, &x) in gb.data_mut().iter_mut().zip(gd) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b, bc) => {
                if self.nodes[a.0].requires_grad {
                    let da = bc.zip(gd, self.nodes[b.0].value.data(), |x, y| x * y);
                    let ga = self.accum(*a, id)?.expect("requires grad");
                    for (o, x) in ga.data_mut().iter_mut().zip(da) {
                        *o += x;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let aval = self.nodes[a.0].value.data().to_vec();
                    let gb = self.accum(*b, id)?.expect("requires grad");
                    bc.reduce(gb.data_mut(), gd.len(), |i| gd[i] * aval[i]);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.accum(*a, id)? {
                    for (o, &x) in ga.data_mut().iter_mut().zip(gd) {
                        *o += x * *c;
                    }
                }
            }
            Op::MatMul(a, b) => self.matmul_backward(id, *a, *b, g)?,
            Op::Gelu { x: a, cdf } => {
                let xs = self.nodes[a.0].value.data().to_vec();
                let half = T::of(0.5);
                let k = T::of(INV_SQRT_2PI);
                if let Some(ga) = self.accum(*a, id)? {
                    for (((o, &x), &c), &gy) in ga.data_mut().iter_mut().zip(&xs).zip(cdf).zip(gd) {
                        let pdf = k * (-half * x * x).exp();
                        *o += gy * (c + x * pdf);
                    }
                }
            }
            Op::Abs(a) => {
                let xs = self.nodes[a.0].value.data().to_vec();
                if let Some(ga) = self.accum(*a, id)? {
                    for ((o, &x), &gy) in ga.data_mut().iter_mut().zip(&xs).zip(gd) {
                        if x > T::zero() {
                            *o += gy;
                        } else if x < T::zero() {
                            *o -= gy;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let gy = g.item();
                if let Some(ga) = self.accum(*a, id)? {
                    ga.data_mut().iter_mut().for_each(|o| *o += gy);
                }
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                let gy = g.item() / T::of(n as f64);
                if let Some(ga) = self.accum(*a, id)? {
                    ga.data_mut().iter_mut().for_each(|o| *o += gy);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.accum(*a, id)? {
                    for (o, &x) in ga.data_mut().iter_mut().zip(gd) {
                        *o += x;
                    }
                }
            }
            Op::Gather { src, index } => {
                if let Some(gs) = self.accum(*src, id)? {
                    let gsd = gs.data_mut();
                    for (&i, &x) in index.iter().zip(gd) {
                        gsd[i] += x;
                    }
                }
            }
            Op::Softmax(a) => {
                let y = self.nodes[id].value.data().to_vec();
                let n = self.nodes[id].value.last_dim();
                if let Some(ga) = self.accum(*a, id)? {
                    for ((o, yr), gr) in ga
                        .data_mut()
                        .chunks_exact_mut(n)
                        .zip(y.chunks_exact(n))
                        .zip(gd.chunks_exact(n))
                    {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..n {
                            o[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => self.layer_norm_backward(id, *x, *gamma, *beta, mean, rstd, g)?,
            Op::Attention { qkv, heads, probs } => {
                self.attention_backward(id, *qkv, *heads, probs, g)?
            }
            Op::Checkpoint { inputs, segment } => {
                let (mut sub, leaves) = self.scratch(inputs);
                let out = segment(&mut sub, &leaves)?;
                sub.backward_with(out, g.clone())?;
                for (leaf, input) in leaves.iter().zip(inputs) {
                    if let Some(gl) = sub.grad(*leaf) {
                        if let Some(gi) = self.accum(*input, id)? {
                            gi.add_assign(gl);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn matmul_backward(&mut self, id: usize, a: Var, b: Var, g: &Tensor<T>) -> Result<()> {
        let (m, k, n) = matmul_dims(self.value(a).shape(), self.value(b).shape())?;
        if self.nodes[a.0].requires_grad {
            let bval = self.nodes[b.0].value.data().to_vec();
            let ga = self.accum(a, id)?.expect("requires grad");
            gemm(
                m,
                n,
                k,
                T::one(),
                g.data(),
                MatView::row_major(0, n),
                &bval,
                MatView::transposed(0, n),
                T::one(),
                ga.data_mut(),
                MatView::row_major(0, k),
            );
        }
        if self.nodes[b.0].requires_grad {
            let aval = self.nodes[a.0].value.data().to_vec();
            let gb = self.accum(b, id)?.expect("requires grad");
            gemm(
                k,
                m,
                n,
                T::one(),
                &aval,
                MatView::transposed(0, k),
                g.data(),
                MatView::row_major(0, n),
                T::one(),
                gb.data_mut(),
                MatView::row_major(0, n),
            );
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_backward(
        &mut self,
        id: usize,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        rstd: &[T],
        g: &Tensor<T>,
    ) -> Result<()> {
        let xs = self.nodes[x.0].value.data().to_vec();
        let gam = self.nodes[gamma.0].value.data().to_vec();
        let d = gam.len();
        let inv_d = T::of(1.0 / d as f64);
        let mut gx = vec![T::zero(); xs.len()];
        let mut ggamma = vec![T::zero(); d];
        let mut gbeta = vec![T::zero(); d];
        let mut xhat = vec![T::zero(); d];
        let mut dxhat = vec![T::zero(); d];
        for (r, ((xr, gr), gxr)) in xs
            .chunks_exact(d)
            .zip(g.data().chunks_exact(d))
            .zip(gx.chunks_exact_mut(d))
            .enumerate()
        {
            let (mu, rs) = (mean[r], rstd[r]);
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for j in 0..d {
                xhat[j] = (xr[j] - mu) * rs;
                dxhat[j] = gr[j] * gam[j];
                ggamma[j] += gr[j] * xhat[j];
                gbeta[j] += gr[j];
                m1 += dxhat[j];
                m2 += dxhat[j] * xhat[j];
            }
            m1 *= inv_d;
            m2 *= inv_d;
            for j in 0..d {
                gxr[j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
            }
        }
        if let Some(t) = self.accum(x, id)? {
            for (o, v) in t.data_mut().iter_mut().zip(gx) {
                *o += v;
            }
        }
        if let Some(t) = self.accum(gamma, id)? {
            for (o, v) in t.data_mut().iter_mut().zip(ggamma) {
                *o += v;
            }
        }
        if let Some(t) = self.accum(beta, id)? {
            for (o, v) in t.data_mut().iter_mut().zip(gbeta) {
                *o += v;
            }
        }
        Ok(())
    }

    fn attention_backward(
        &mut self,
        id: usize,
        qkv: Var,
        heads: usize,
        probs: &[T],
        g: &Tensor<T>,
    ) -> Result<()> {
        if !self.nodes[qkv.0].requires_grad {
            return Ok(());
        }
        let data = self.nodes[qkv.0].value.data().to_vec();
        let s = self.nodes[qkv.0].value.shape().to_vec();
        let (b, n, d) = (s[0], s[1], s[2] / 3);
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let gout = g.data();
        let mut dp = vec![T::zero(); n * n];
        let gq = self.accum(qkv, id)?.expect("requires grad").data_mut();
        for bi in 0..b {
            for h in 0..heads {
                let base = bi * n * 3 * d + h * dh;
                let p_off = (bi * heads + h) * n * n;
                let go = MatView::strided(bi * n * d + h * dh, d, 1);
                // dP = dO v^T
                gemm(
                    n,
                    dh,
                    n,
                    T::one(),
                    gout,
                    go,
                    &data,
                    MatView::strided(base + 2 * d, 1, 3 * d),
                    T::zero(),
                    &mut dp,
                    MatView::row_major(0, n),
                );
                // dV += P^T dO
                gemm(
                    n,
                    n,
                    dh,
                    T::one(),
                    probs,
                    MatView::transposed(p_off, n),
                    gout,
                    go,
                    T::one(),
                    gq,
                    MatView::strided(base + 2 * d, 3 * d, 1),
                );
                // dS = P * (dP - rowsum(dP * P))
                for (pr, dr) in probs[p_off..p_off + n * n]
                    .chunks_exact(n)
                    .zip(dp.chunks_exact_mut(n))
                {
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                }
                // dQ += scale dS K ; dK += scale dS^T Q
                gemm(
                    n,
                    n,
                    dh,
                    scale,
                    &dp,
                    MatView::row_major(0, n),
                    &data,
                    MatView::strided(base + d, 3 * d, 1),
                    T::one(),
                    gq,
                    MatView::strided(base, 3 * d, 1),
                );
                gemm(
                    n,
                    n,
                    dh,
                    scale,
                    &dp,
                    MatView::transposed(0, n),
                    &data,
                    MatView::strided(base, 3 * d, 1),
                    T::one(),
                    gq,
                    MatView::strided(base + d, 3 * d, 1),
                );
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}
