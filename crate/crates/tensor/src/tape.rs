//! Reverse-mode differentiation tape.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. `backward` walks the nodes in exact reverse order,
//! accumulating gradients additively, and consumes the tape.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, Padding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    LeakyRelu { x: Var, slope: f64 },
    Asinh(Var),
    NormalizeRows(Var),
    Conv2d { x: Var, w: Var, pad: Padding },
    Depthwise { x: Var, k: Var, pad: Padding },
    Pool { x: Var, h: usize, w: usize },
    Upsample { x: Var, h: usize, w: usize },
    MatMul(Var, Var),
    Transpose(Var),
    ToTokens(Var),
    FromTokens(Var),
    Attention { q: Var, k: Var, v: Var, probs: Tensor<T> },
    DensityScale { ratios: Var, base: Tensor<T>, kappa: Var },
    Sum(Var),
    Mean(Var),
    MeanAbs(Var),
    MeanSquare(Var),
    WeightedSum(Var, Tensor<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
    /// Differs from the replayed pass (always true outside replay).
    dirty: bool,
    kink: Option<u64>,
}

/// Node values and branch hashes of a finished forward pass. A tape built
/// with [`Tape::replaying`] copies a node from here instead of computing it
/// when none of its inputs changed. The graph must be rebuilt in the same
/// op order.
pub struct Replay<T> {
    values: Vec<Tensor<T>>,
    kinks: Vec<Option<u64>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    check_finite: bool,
    kinks: u64,
    replay: Option<Arc<Replay<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_PRIME: u64 = 0x100_0000_01b3;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

impl<T: Scalar> Tape<T> {
    /// Non-finite checks after every op are on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            check_finite: cfg!(debug_assertions),
            kinks: FNV_OFFSET,
            replay: None,
        }
    }

    /// A tape that reuses `replay` for every node whose inputs are clean.
    /// Constants count as clean; leaves are clean only when recorded with
    /// [`Tape::leaf_marked`]`(_, false)`. Replaying tapes cannot run
    /// `backward`.
    pub fn replaying(replay: Arc<Replay<T>>) -> Self {
        Self {
            replay: Some(replay),
            ..Self::new()
        }
    }

    /// Copies the recorded values for a later [`Tape::replaying`].
    pub fn snapshot(&self) -> Replay<T> {
        Replay {
            values: self.nodes.iter().map(|n| n.value.clone()).collect(),
            kinks: self.nodes.iter().map(|n| n.kink).collect(),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every branch taken by non-smooth ops (leaky-ReLU sides, signs
    /// inside absolute values). Two evaluations with equal signatures lie on
    /// the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push_node("constant", t, Op::Leaf, false, false, None)
    }

    /// Records a value whose gradient is reported by `backward`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("leaf", t, Op::Leaf, true)
    }

    /// [`Tape::leaf`] that states whether `t` differs from the replayed pass.
    pub fn leaf_marked(&mut self, t: Tensor<T>, dirty: bool) -> Result<Var> {
        self.push_node("leaf", t, Op::Leaf, true, dirty, None)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, tracked: bool) -> Result<Var> {
        self.push_node(name, value, op, tracked, true, None)
    }

    fn push_node(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        tracked: bool,
        dirty: bool,
        kink: Option<u64>,
    ) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.check_finite && dirty && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        if let Some(h) = kink {
            self.kinks = (self.kinks ^ h).wrapping_mul(FNV_PRIME);
        }
        self.nodes.push(Node {
            value,
            op,
            tracked,
            dirty,
            kink,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// In replay, the recorded node when all `inputs` are clean.
    fn reuse(&mut self, inputs: &[Var]) -> Result<Option<Var>> {
        let Some(r) = &self.replay else {
            return Ok(None);
        };
        let i = self.nodes.len();
        if i >= r.values.len() || inputs.iter().any(|v| self.nodes[v.0].dirty) {
            return Ok(None);
        }
        let (value, kink) = (r.values[i].clone(), r.kinks[i]);
        self.push_node("replay", value, Op::Leaf, false, false, kink).map(Some)
    }

    fn guard(&self) -> Result<()> {
        if self.consumed {
            Err(TensorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[a, b])? {
            return Ok(v);
        }
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        let tr = self.tracked(a) || self.tracked(b);
        self.push("add", out, Op::Add(a, b), tr)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[a, b])? {
            return Ok(v);
        }
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        let tr = self.tracked(a) || self.tracked(b);
        self.push("sub", out, Op::Sub(a, b), tr)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[a, b])? {
            return Ok(v);
        }
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        let tr = self.tracked(a) || self.tracked(b);
        self.push("mul", out, Op::Mul(a, b), tr)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[a])? {
            return Ok(v);
        }
        let out = self.value(a).map(|x| T::cast(x.widen() * s));
        let tr = self.tracked(a);
        self.push("scale", out, Op::Scale(a, s), tr)
    }

    /// Adds a per-channel bias: along dim 0 of a `C×H×W` tensor, or along
    /// the columns of an `N×C` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[x, bias])? {
            return Ok(v);
        }
        let xs = self.value(x);
        let b = self.value(bias);
        let mut out = xs.clone();
        match *xs.shape() {
            [c, h, w] if b.numel() == c => {
                for (ch, &bv) in b.data().iter().enumerate() {
                    out.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut().for_each(|v| *v += bv);
                }
            }
            [_, c] if b.numel() == c => {
                for row in out.data_mut().chunks_mut(c) {
                    row.iter_mut().zip(b.data()).for_each(|(v, &bv)| *v += bv);
                }
            }
            _ => {
                return Err(TensorError::shape(
                    "add_bias",
                    format!("bias of {} values for input {:?}", b.numel(), xs.shape()),
                ))
            }
        }
        let tr = self.tracked(x) || self.tracked(bias);
        self.push("add_bias", out, Op::AddBias { x, bias }, tr)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[x])? {
            return Ok(v);
        }
        let xs = self.value(x);
        let mut h = FNV_OFFSET;
        let mut data = Vec::with_capacity(xs.numel());
        for &v in xs.data() {
            let pos = v > T::zero();
            h = (h ^ pos as u64).wrapping_mul(FNV_PRIME);
            data.push(if pos { v } else { T::cast(v.widen() * slope) });
        }
        let out = Tensor::new(xs.shape().to_vec(), data)?;
        let tr = self.tracked(x);
        self.push_node("leaky_relu", out, Op::LeakyRelu { x, slope }, tr, true, Some(h))
    }

    /// Elementwise `asinh`, a signed log-like range compression.
    pub fn asinh(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[x])? {
            return Ok(v);
        }
        let out = self.value(x).map(|v| T::cast(v.widen().asinh()));
        let tr = self.tracked(x);
        self.push("asinh", out, Op::Asinh(x), tr)
    }

    /// Scales each row of an `N×F` matrix to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[x])? {
            return Ok(v);
        }
        let (n, f) = self.value(x).dims2("normalize_rows")?;
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(n * f);
        for row in xs.chunks(f.max(1)) {
            let inv = 1.0 / row_norm(row);
            data.extend(row.iter().map(|v| T::cast(v.widen() * inv)));
        }
        let out = Tensor::new(vec![n, f], data)?;
        let tr = self.tracked(x);
        self.push("normalize_rows", out, Op::NormalizeRows(x), tr)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, pad: Padding) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[x, w])? {
            return Ok(v);
        }
        let out = kernels::conv2d(self.value(x), self.value(w), pad)?;
        let tr = self.tracked(x) || self.tracked(w);
        self.push("conv2d", out, Op::Conv2d { x, w, pad }, tr)
    }

    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, pad: Padding) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[x, k])? {
            return Ok(v);
        }
        let out = kernels::depthwise_conv2d(self.value(x), self.value(k), pad)?;
        let tr = self.tracked(x) || self.tracked(k);
        self.push("depthwise_conv2d", out, Op::Depthwise { x, k, pad }, tr)
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[x])? {
            return Ok(v);
        }
        let (_, h, w) = self.value(x).dims3("adaptive_avg_pool")?;
        let out = kernels::adaptive_avg_pool(self.value(x), oh, ow)?;
        let tr = self.tracked(x);
        self.push("adaptive_avg_pool", out, Op::Pool { x, h, w }, tr)
    }

    pub fn upsample_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[x])? {
            return Ok(v);
        }
        let (_, h, w) = self.value(x).dims3("upsample_nearest")?;
        let out = kernels::upsample_nearest(self.value(x), oh, ow)?;
        let tr = self.tracked(x);
        self.push("upsample_nearest", out, Op::Upsample { x, h, w }, tr)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[a, b])? {
            return Ok(v);
        }
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let tr = self.tracked(a) || self.tracked(b);
        self.push("matmul", out, Op::MatMul(a, b), tr)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[a])? {
            return Ok(v);
        }
        let out = kernels::transpose(self.value(a))?;
        let tr = self.tracked(a);
        self.push("transpose", out, Op::Transpose(a), tr)
    }

    /// `C×H×W` → `(H·W)×C`, one token per pixel.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[x])? {
            return Ok(v);
        }
        let (c, h, w) = self.value(x).dims3("to_tokens")?;
        let flat = self.value(x).clone().reshape(&[c, h * w])?;
        let out = kernels::transpose(&flat)?;
        let tr = self.tracked(x);
        self.push("to_tokens", out, Op::ToTokens(x), tr)
    }

    /// `(H·W)×C` → `C×H×W`.
    pub fn from_tokens(&mut self, t: Var, h: usize, w: usize) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[t])? {
            return Ok(v);
        }
        let (n, c) = self.value(t).dims2("from_tokens")?;
        if n != h * w {
            return Err(TensorError::shape("from_tokens", format!("{n} tokens for {h}x{w}")));
        }
        let out = kernels::transpose(self.value(t))?.reshape(&[c, h, w])?;
        let tr = self.tracked(t);
        self.push("from_tokens", out, Op::FromTokens(t), tr)
    }

    /// `softmax(Q·Kᵀ/√d)·V` with `Q: N×d`, `K: M×d`, `V: M×d_v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[q, k, v])? {
            return Ok(v);
        }
        let (out, probs) = kernels::attention(self.value(q), self.value(k), self.value(v))?;
        let tr = self.tracked(q) || self.tracked(k) || self.tracked(v);
        self.push("attention", out, Op::Attention { q, k, v, probs }, tr)
    }

    /// `ratios[c, p] · base[p]^(1/k)` with `k = exp(kappa)`.
    ///
    /// `ratios: C×H×W`, `base: H×W` (strictly positive), `kappa` one element.
    pub fn density_scale(&mut self, ratios: Var, base: Tensor<T>, kappa: Var) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[ratios, kappa])? {
            return Ok(v);
        }
        let (c, h, w) = self.value(ratios).dims3("density_scale")?;
        if base.shape() != [h, w] || self.value(kappa).numel() != 1 {
            return Err(TensorError::shape(
                "density_scale",
                format!("base {:?}, kappa {:?}", base.shape(), self.shape(kappa)),
            ));
        }
        let inv_k = (-self.value(kappa).item().widen()).exp();
        let factor: Vec<f64> = base.data().iter().map(|b| b.widen().powf(inv_k)).collect();
        let r = self.value(ratios).data();
        let data = (0..c * h * w)
            .map(|i| T::cast(r[i].widen() * factor[i % (h * w)]))
            .collect();
        let out = Tensor::new(vec![c, h, w], data)?;
        let tr = self.tracked(ratios) || self.tracked(kappa);
        self.push("density_scale", out, Op::DensityScale { ratios, base, kappa }, tr)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[x])? {
            return Ok(v);
        }
        let out = Tensor::scalar(T::cast(self.value(x).sum_f64()));
        let tr = self.tracked(x);
        self.push("sum", out, Op::Sum(x), tr)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[x])? {
            return Ok(v);
        }
        let t = self.value(x);
        let out = Tensor::scalar(T::cast(t.sum_f64() / t.numel() as f64));
        let tr = self.tracked(x);
        self.push("mean", out, Op::Mean(x), tr)
    }

    /// `mean(|x|)`; the subgradient at zero is zero.
    pub fn mean_abs(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[x])? {
            return Ok(v);
        }
        let t = self.value(x);
        let mut h = FNV_OFFSET;
        let mut s = 0.0;
        for &v in t.data() {
            let v = v.widen();
            h = (h ^ ((v > 0.0) as u64 | ((v < 0.0) as u64) << 1)).wrapping_mul(FNV_PRIME);
            s += v.abs();
        }
        let out = Tensor::scalar(T::cast(s / t.numel() as f64));
        let tr = self.tracked(x);
        self.push_node("mean_abs", out, Op::MeanAbs(x), tr, true, Some(h))
    }

    pub fn mean_square(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[x])? {
            return Ok(v);
        }
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|v| v.widen() * v.widen()).sum();
        let out = Tensor::scalar(T::cast(s / t.numel() as f64));
        let tr = self.tracked(x);
        self.push("mean_square", out, Op::MeanSquare(x), tr)
    }

    /// `Σ x ⊙ weights` against a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        self.guard()?;
        if let Some(v) = self.reuse(&[x])? {
            return Ok(v);
        }
        if self.shape(x) != weights.shape() {
            return Err(TensorError::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", self.shape(x), weights.shape()),
            ));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a.widen() * b.widen())
            .sum();
        let tr = self.tracked(x);
        self.push("weighted_sum", Tensor::scalar(T::cast(s)), Op::WeightedSum(x, weights), tr)
    }

    /// Back-propagates from a one-element `loss`, consuming the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.guard()?;
        if self.replay.is_some() {
            return Err(TensorError::Invalid("backward on a replaying tape".into()));
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let nodes = std::mem::take(&mut self.nodes);
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shape, T::one()));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let tr = |v: Var| nodes[v.0].tracked;
            let mut acc = |v: Var, t: Tensor<T>| {
                if !nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if tr(*a) {
                        acc(*a, elementwise(&g, tb, |x, y| x * y));
                    }
                    if tr(*b) {
                        acc(*b, elementwise(&g, ta, |x, y| x * y));
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(*a, g.map(|v| T::cast(v.widen() * s)));
                }
                Op::AddBias { x, bias } => {
                    let nb = val(*bias).numel();
                    if tr(*bias) {
                        let mut gb = vec![0.0; nb];
                        match *g.shape() {
                            [_, h, w] => {
                                for (ch, s) in gb.iter_mut().enumerate() {
                                    *s = g.data()[ch * h * w..(ch + 1) * h * w].iter().map(|v| v.widen()).sum();
                                }
                            }
                            _ => {
                                for row in g.data().chunks(nb) {
                                    gb.iter_mut().zip(row).for_each(|(s, v)| *s += v.widen());
                                }
                            }
                        }
                        let gb = gb.into_iter().map(T::cast).collect();
                        acc(*bias, Tensor::new(val(*bias).shape().to_vec(), gb)?);
                    }
                    acc(*x, g);
                }
                Op::LeakyRelu { x, slope } => {
                    let s = *slope;
                    let gx = elementwise(&g, val(*x), |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else {
                            T::cast(gv.widen() * s)
                        }
                    });
                    acc(*x, gx);
                }
                Op::Asinh(x) => {
                    let gx = elementwise(&g, val(*x), |gv, xv| {
                        let v = xv.widen();
                        T::cast(gv.widen() / (1.0 + v * v).sqrt())
                    });
                    acc(*x, gx);
                }
                Op::NormalizeRows(x) => {
                    let xs = val(*x);
                    let f = xs.shape()[1].max(1);
                    let mut gx = Vec::with_capacity(xs.numel());
                    for (row, grow) in xs.data().chunks(f).zip(g.data().chunks(f)) {
                        let n = row_norm(row);
                        let dot: f64 = row.iter().zip(grow).map(|(a, b)| a.widen() * b.widen()).sum();
                        let c = dot / (n * n * n);
                        gx.extend(row.iter().zip(grow).map(|(a, b)| T::cast(b.widen() / n - a.widen() * c)));
                    }
                    acc(*x, Tensor::new(xs.shape().to_vec(), gx)?);
                }
                Op::Conv2d { x, w, pad } => {
                    let (gx, gw) = kernels::conv2d_backward(val(*x), val(*w), *pad, &g, tr(*x), tr(*w))?;
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                    if let Some(gw) = gw {
                        acc(*w, gw);
                    }
                }
                Op::Depthwise { x, k, pad } => {
                    let (gx, gk) =
                        kernels::depthwise_conv2d_backward(val(*x), val(*k), *pad, &g, tr(*x), tr(*k))?;
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                    if let Some(gk) = gk {
                        acc(*k, gk);
                    }
                }
                Op::Pool { x, h, w } => acc(*x, kernels::adaptive_avg_pool_backward(&g, *h, *w)?),
                Op::Upsample { x, h, w } => acc(*x, kernels::upsample_nearest_backward(&g, *h, *w)?),
                Op::MatMul(a, b) => {
                    let (ga, gb) = kernels::matmul_backward(val(*a), val(*b), &g, tr(*a), tr(*b))?;
                    if let Some(ga) = ga {
                        acc(*a, ga);
                    }
                    if let Some(gb) = gb {
                        acc(*b, gb);
                    }
                }
                Op::Transpose(a) => acc(*a, kernels::transpose(&g)?),
                Op::ToTokens(x) => {
                    let shape = val(*x).shape().to_vec();
                    acc(*x, kernels::transpose(&g)?.reshape(&shape)?);
                }
                Op::FromTokens(t) => {
                    let (c, h, w) = g.dims3("from_tokens")?;
                    acc(*t, kernels::transpose(&g.reshape(&[c, h * w])?)?);
                }
                Op::Attention { q, k, v, probs } => {
                    let (gq, gk, gv) = kernels::attention_backward(val(*q), val(*k), val(*v), probs, &g)?;
                    acc(*q, gq);
                    acc(*k, gk);
                    acc(*v, gv);
                }
                Op::DensityScale { ratios, base, kappa } => {
                    let r = val(*ratios);
                    let (c, h, w) = r.dims3("density_scale")?;
                    let hw = h * w;
                    let inv_k = (-val(*kappa).item().widen()).exp();
                    let factor: Vec<f64> = base.data().iter().map(|b| b.widen().powf(inv_k)).collect();
                    if tr(*ratios) {
                        let gr = (0..c * hw).map(|i| T::cast(g[i].widen() * factor[i % hw])).collect();
                        acc(*ratios, Tensor::new(vec![c, h, w], gr)?);
                    }
                    if tr(*kappa) {
                        // d/dκ b^(e^-κ) = -e^-κ · ln(b) · b^(e^-κ)
                        let mut s = 0.0;
                        for i in 0..c * hw {
                            let p = i % hw;
                            s += g[i].widen() * r[i].widen() * factor[p] * base[p].widen().ln();
                        }
                        acc(*kappa, Tensor::scalar(T::cast(-inv_k * s)));
                    }
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    acc(*x, Tensor::full(val(*x).shape(), gv));
                }
                Op::Mean(x) => {
                    let t = val(*x);
                    let gv = T::cast(g.item().widen() / t.numel() as f64);
                    acc(*x, Tensor::full(t.shape(), gv));
                }
                Op::MeanAbs(x) => {
                    let t = val(*x);
                    let gv = g.item().widen() / t.numel() as f64;
                    acc(*x, t.map(|v| T::cast(gv * sign(v.widen()))));
                }
                Op::MeanSquare(x) => {
                    let t = val(*x);
                    let gv = 2.0 * g.item().widen() / t.numel() as f64;
                    acc(*x, t.map(|v| T::cast(gv * v.widen())));
                }
                Op::WeightedSum(x, wts) => {
                    let gv = g.item().widen();
                    acc(*x, wts.map(|v| T::cast(gv * v.widen())));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Smoothed row norm; the floor keeps all-zero rows finite.
fn row_norm<T: Scalar>(row: &[T]) -> f64 {
    (row.iter().map(|v| v.widen() * v.widen()).sum::<f64>() + 1e-12).sqrt()
}
