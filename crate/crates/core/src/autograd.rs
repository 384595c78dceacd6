//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Values are owned
//! by the tape and addressed through copyable [`Var`] handles. Operations
//! whose inputs do not require gradients are evaluated but not recorded, so
//! an inference tape (see [`Tape::inference`]) never stores backward state.
//!
//! ```
//! use sardino::autograd::Tape;
//! use sardino::params::ParamStore;
//! use sardino::tensor::Tensor;
//!
//! let store = ParamStore::<f64>::new();
//! let tape = Tape::new(&store);
//! let x = tape.input(Tensor::from_f64([2], &[1.0, 2.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamKind, ParamStore, StoreId};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// Batch-norm evaluation mode.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, E> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics `(mean, var)`.
    Eval(&'a [E], &'a [E]),
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<E> {
    pub mean: Vec<E>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<E>,
}

/// A pending running-statistics update for a batch-norm layer.
#[derive(Clone, Debug)]
pub struct BufferUpdate<E> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<E>,
}

enum Op<E> {
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Expand0 { x: Var },
    Act(Var, Activation),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<E>, inv_std: Vec<E> },
    BatchNorm { x: Var, gain: Var, shift: Var, xhat: Vec<E>, inv_std: Vec<E>, train: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, out_ch: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Resize { x: Var, planes: usize, in_hw: (usize, usize), out_hw: (usize, usize) },
    CrossEntropy { logits: Var, probs: Vec<E>, targets: Vec<usize>, classes: usize, spatial: usize },
    BceOneHot { logits: Var, targets: Vec<usize>, classes: usize, spatial: usize },
    L2Normalize { x: Var, inv_norm: Vec<E> },
    MinMax { x: Var, argmin: Vec<usize>, argmax: Vec<usize>, range: Vec<E> },
}

impl<E> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MatMul { .. } => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Expand0 { .. } => "expand0",
            Op::Act(_, Activation::Relu) => "relu",
            Op::Act(_, Activation::Gelu) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm2d",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::Resize { .. } => "resize_bilinear",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceOneHot { .. } => "bce_onehot",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::MinMax { .. } => "minmax_normalize",
        }
    }
}

struct Node<E> {
    value: Rc<Tensor<E>>,
    requires_grad: bool,
    op: Option<Op<E>>,
}

pub struct Tape<'s, E: Element = f32> {
    store: &'s ParamStore<E>,
    grad_enabled: bool,
    nodes: RefCell<Vec<Node<E>>>,
    bound: RefCell<HashMap<ParamId, Var>>,
    updates: RefCell<Vec<BufferUpdate<E>>>,
    finished: Cell<bool>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<E> {
    store: StoreId,
    grads: Vec<Option<Tensor<E>>>,
    params: Vec<(ParamId, Var)>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a bound parameter, if it received one.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.get(*v))
    }

    /// All parameter gradients, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<E>)> {
        self.params.iter().filter_map(|(p, v)| self.get(*v).map(|g| (*p, g)))
    }

    /// The store whose parameters these gradients belong to.
    pub fn store_id(&self) -> StoreId {
        self.store
    }
}

impl<'s, E: Element> Tape<'s, E> {
    /// A tape that records operations for a backward pass.
    pub fn new(store: &'s ParamStore<E>) -> Self {
        Self::with_grad(store, true)
    }

    /// A tape that never records backward state; parameters are bound as
    /// constants.
    pub fn inference(store: &'s ParamStore<E>) -> Self {
        Self::with_grad(store, false)
    }

    fn with_grad(store: &'s ParamStore<E>, grad_enabled: bool) -> Self {
        Self {
            store,
            grad_enabled,
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            updates: RefCell::new(Vec::new()),
            finished: Cell::new(false),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn store(&self) -> &'s ParamStore<E> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of recorded (differentiable) operations.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.borrow().iter().filter(|n| n.op.is_some()).count()
    }

    /// Parameters bound so far, with whether each is differentiated.
    pub fn bound_params(&self) -> Vec<(ParamId, bool)> {
        let nodes = self.nodes.borrow();
        let mut out: Vec<_> = self
            .bound
            .borrow()
            .iter()
            .map(|(&p, &v)| (p, nodes[v.0].requires_grad))
            .collect();
        out.sort();
        out
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<E>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Leaf value that never receives a gradient.
    pub fn constant(&self, t: Tensor<E>) -> Var {
        self.leaf(t, false)
    }

    /// Leaf value that receives a gradient when `requires_grad` is set and the
    /// tape is recording.
    pub fn input(&self, t: Tensor<E>, requires_grad: bool) -> Var {
        self.leaf(t, requires_grad && self.grad_enabled)
    }

    /// Binds a stored parameter. Each parameter is bound once per tape, so
    /// repeated uses accumulate into one gradient.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id) {
            return v;
        }
        let entry = self.store.entry(id);
        let rg = self.grad_enabled && entry.trainable && entry.kind == ParamKind::Weight;
        let v = self.leaf(entry.value.clone(), rg);
        self.bound.borrow_mut().insert(id, v);
        v
    }

    pub fn push_update(&self, u: BufferUpdate<E>) {
        self.updates.borrow_mut().push(u);
    }

    pub fn take_updates(&self) -> Vec<BufferUpdate<E>> {
        std::mem::take(&mut self.updates.borrow_mut())
    }

    fn leaf(&self, t: Tensor<E>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(t), requires_grad, op: None });
        Var(nodes.len() - 1)
    }

    fn val(&self, v: Var) -> Ref<'_, Tensor<E>> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_ref())
    }

    fn push(&self, value: Tensor<E>, inputs: &[Var], op: Op<E>) -> Var {
        if cfg!(debug_assertions) && !value.is_finite() {
            let nodes = self.nodes.borrow();
            let finite_inputs = inputs.iter().all(|v| nodes[v.0].value.is_finite());
            assert!(!finite_inputs, "{} produced a non-finite value from finite inputs", op.name());
        }
        let mut nodes = self.nodes.borrow_mut();
        let rg = self.grad_enabled && inputs.iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node { value: Rc::new(value), requires_grad: rg, op: rg.then_some(op) });
        Var(nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Tensor<E> {
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.push(out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip(a, b, |x, y| x - y);
        Ok(self.push(out, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(Error::dim(format!("add_broadcast: {sb:?} is not a suffix of {sa:?}")));
        }
        let out = {
            let (ta, tb) = (self.val(a), self.val(b));
            let inner = tb.numel();
            let mut data = ta.data().to_vec();
            for chunk in data.chunks_mut(inner) {
                for (x, &y) in chunk.iter_mut().zip(tb.data()) {
                    *x += y;
                }
            }
            Tensor::from_parts(sa, data)
        };
        Ok(self.push(out, &[a, b], Op::AddBroadcast(a, b)))
    }

    pub fn scale(&self, a: Var, s: E) -> Var {
        let out = self.val(a).map(|x| x * s);
        self.push(out, &[a], Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: E) -> Var {
        let out = self.val(a).map(|x| x + s);
        self.push(out, &[a], Op::AddScalar(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.val(a).sum());
        self.push(out, &[a], Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let t = self.val(a);
        let out = Tensor::scalar(t.sum() / E::lit(t.numel() as f64));
        drop(t);
        self.push(out, &[a], Op::Mean(a))
    }

    pub fn activation(&self, a: Var, kind: Activation) -> Var {
        let out = match kind {
            Activation::Relu => self.val(a).map(|x| if x > E::zero() { x } else { E::zero() }),
            Activation::Gelu => self.val(a).map(gelu),
        };
        self.push(out, &[a], Op::Act(a, kind))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.activation(a, Activation::Gelu)
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, &[a], Op::Reshape(a)))
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::dim(format!("permute: {axes:?} is not a permutation of rank {}", shape.len())));
        }
        let (data, out_shape) = kernels::permute(self.val(a).data(), &shape, axes);
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push(out, &[a], Op::Permute { x: a, axes: axes.to_vec() }))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::dim("concat of nothing"))?);
        if axis >= first.len() {
            return Err(Error::dim(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!("concat: {s:?} incompatible with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        {
            let vals: Vec<_> = xs.iter().map(|&x| self.val(x)).collect();
            for o in 0..outer {
                for v in &vals {
                    let len = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
                }
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, data), xs, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(format!("narrow: [{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        {
            let v = self.val(a);
            for o in 0..outer {
                let base = (o * shape[axis] + start) * inner;
                data.extend_from_slice(&v.data()[base..base + len * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Tensor::from_parts(out_shape, data), &[a], Op::Narrow { x: a, axis, start }))
    }

    /// Repeats a tensor with leading dimension 1 `n` times along axis 0.
    pub fn expand0(&self, a: Var, n: usize) -> Result<Var> {
        let shape = self.shape(a);
        if shape[0] != 1 || n == 0 {
            return Err(Error::dim(format!("expand0: leading dim of {shape:?} must be 1")));
        }
        let data = self.val(a).data().repeat(n);
        let mut out_shape = shape;
        out_shape[0] = n;
        Ok(self.push(Tensor::from_parts(out_shape, data), &[a], Op::Expand0 { x: a }))
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product of rank-2 operands, or batched product of rank-3
    /// operands with equal batch size.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (batch, m, k, k2, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([ba, m, k], [bb, k2, n]) if ba == bb => (*ba, *m, *k, *k2, *n),
            _ => return Err(Error::dim(format!("matmul: incompatible shapes {sa:?} and {sb:?}"))),
        };
        if k != k2 {
            return Err(Error::dim(format!("matmul: inner dimensions differ in {sa:?} and {sb:?}")));
        }
        let mut out = vec![E::zero(); batch * m * n];
        {
            let (ta, tb) = (self.val(a), self.val(b));
            for bi in 0..batch {
                kernels::gemm_acc(
                    &ta.data()[bi * m * k..(bi + 1) * m * k],
                    &tb.data()[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(self.push(Tensor::from_parts(shape, out), &[a, b], Op::MatMul { a, b, batch, m, k, n }))
    }

    /// `x[..., in] · w[in, out] + bias[out]`.
    pub fn linear(&self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        let d_in = *sx.last().expect("non-empty shape");
        let rows = sx.iter().product::<usize>() / d_in;
        let flat = if sx.len() == 2 { x } else { self.reshape(x, &[rows, d_in])? };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = bias {
            y = self.add_broadcast(y, b)?;
        }
        if sx.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = sx;
        *out_shape.last_mut().expect("non-empty") = sw[1];
        self.reshape(y, &out_shape)
    }

    // ---------------------------------------------------------------- normalization

    pub fn softmax(&self, a: Var) -> Var {
        let t = self.val(a);
        let d = *t.shape().last().expect("non-empty");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_row(row);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        drop(t);
        self.push(out, &[a], Op::Softmax(a))
    }

    pub fn log_softmax(&self, a: Var) -> Var {
        let t = self.val(a);
        let d = *t.shape().last().expect("non-empty");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        drop(t);
        self.push(out, &[a], Op::LogSoftmax(a))
    }

    /// Normalizes each row over the last dimension, then applies
    /// `gain`/`shift`.
    pub fn layer_norm(&self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx.last().expect("non-empty");
        for (v, what) in [(gain, "gain"), (shift, "shift")] {
            if self.shape(v) != [d] {
                return Err(Error::dim(format!("layer_norm: {what} {:?} does not match D={d}", self.shape(v))));
            }
        }
        let (out, xhat, inv_std) = {
            let (tx, tg, tb) = (self.val(x), self.val(gain), self.val(shift));
            let rows = tx.numel() / d;
            let mut xhat = Vec::with_capacity(tx.numel());
            let mut inv_std = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(tx.numel());
            let dn = E::lit(d as f64);
            for row in tx.data().chunks(d) {
                let mean = row.iter().copied().sum::<E>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / dn;
                let inv = E::one() / (var + E::lit(eps)).sqrt();
                inv_std.push(inv);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * inv;
                    xhat.push(h);
                    out.push(h * tg.data()[j] + tb.data()[j]);
                }
            }
            (Tensor::from_parts(sx, out), xhat, inv_std)
        };
        Ok(self.push(out, &[x, gain, shift], Op::LayerNorm { x, gain, shift, xhat, inv_std }))
    }

    /// 2-D batch normalization over `N×C×H×W` with per-channel affine.
    /// In training mode the batch statistics are also returned.
    pub fn batch_norm2d(
        &self,
        x: Var,
        gain: Var,
        shift: Var,
        mode: NormMode<'_, E>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<E>>)> {
        let sx = self.shape(x);
        let [n, c, h, w] = sx[..] else {
            return Err(Error::dim(format!("batch_norm2d expects N×C×H×W, got {sx:?}")));
        };
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(Error::dim(format!("batch_norm2d: affine parameters must have shape [{c}]")));
        }
        let hw = h * w;
        let count = n * hw;
        let train = matches!(mode, NormMode::Train);
        if train && count < 2 {
            return Err(Error::Numeric(format!(
                "batch_norm2d: training statistics need at least 2 values per channel, got {count}"
            )));
        }
        let (out, xhat, inv_std, stats) = {
            let (tx, tg, tb) = (self.val(x), self.val(gain), self.val(shift));
            let xd = tx.data();
            let mut means = vec![E::zero(); c];
            let mut vars = vec![E::zero(); c];
            match mode {
                NormMode::Train => {
                    let cnt = E::lit(count as f64);
                    for ch in 0..c {
                        let mut s = E::zero();
                        for ni in 0..n {
                            s += xd[(ni * c + ch) * hw..][..hw].iter().copied().sum::<E>();
                        }
                        let mean = s / cnt;
                        let mut v = E::zero();
                        for ni in 0..n {
                            v += xd[(ni * c + ch) * hw..][..hw].iter().map(|&x| (x - mean) * (x - mean)).sum::<E>();
                        }
                        means[ch] = mean;
                        vars[ch] = v / cnt;
                    }
                }
                NormMode::Eval(m, v) => {
                    if m.len() != c || v.len() != c {
                        return Err(Error::dim("batch_norm2d: running statistics length mismatch"));
                    }
                    means.copy_from_slice(m);
                    vars.copy_from_slice(v);
                }
            }
            let inv_std: Vec<E> = vars.iter().map(|&v| E::one() / (v + E::lit(eps)).sqrt()).collect();
            let mut xhat = vec![E::zero(); xd.len()];
            let mut out = vec![E::zero(); xd.len()];
            for ni in 0..n {
                for ch in 0..c {
                    let base = (ni * c + ch) * hw;
                    for i in base..base + hw {
                        let hv = (xd[i] - means[ch]) * inv_std[ch];
                        xhat[i] = hv;
                        out[i] = hv * tg.data()[ch] + tb.data()[ch];
                    }
                }
            }
            let stats = train.then(|| {
                let corr = E::lit(count as f64 / (count as f64 - 1.0));
                BatchStats { mean: means.clone(), var: vars.iter().map(|&v| v * corr).collect() }
            });
            (Tensor::from_parts(sx, out), xhat, inv_std, stats)
        };
        let y = self.push(out, &[x, gain, shift], Op::BatchNorm { x, gain, shift, xhat, inv_std, train });
        Ok((y, stats))
    }

    /// Scales each row over the last dimension to unit L2 norm.
    pub fn l2_normalize(&self, a: Var) -> Var {
        let t = self.val(a);
        let d = *t.shape().last().expect("non-empty");
        let mut data = t.data().to_vec();
        let mut inv_norm = Vec::with_capacity(data.len() / d);
        for row in data.chunks_mut(d) {
            let norm = row.iter().map(|&v| v * v).sum::<E>().sqrt().max(E::lit(1e-12));
            let inv = E::one() / norm;
            inv_norm.push(inv);
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        drop(t);
        self.push(out, &[a], Op::L2Normalize { x: a, inv_norm })
    }

    /// Maps every trailing `H×W` plane affinely onto `[0, 1]`:
    /// `(x - min) / (max - min + 1e-12)`.
    pub fn minmax_normalize(&self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() < 2 {
            return Err(Error::dim("minmax_normalize needs at least 2 dimensions"));
        }
        let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
        let t = self.val(a);
        let mut data = t.data().to_vec();
        let planes = data.len() / plane;
        let (mut argmin, mut argmax, mut range) = (Vec::new(), Vec::new(), Vec::new());
        for p in 0..planes {
            let row = &mut data[p * plane..(p + 1) * plane];
            let (mut lo, mut hi) = (0, 0);
            for i in 1..plane {
                if row[i] < row[lo] {
                    lo = i;
                }
                if row[i] > row[hi] {
                    hi = i;
                }
            }
            let (mn, r) = (row[lo], row[hi] - row[lo] + E::lit(1e-12));
            for v in row.iter_mut() {
                *v = (*v - mn) / r;
            }
            argmin.push(p * plane + lo);
            argmax.push(p * plane + hi);
            range.push(r);
        }
        let out = Tensor::from_parts(shape, data);
        drop(t);
        Ok(self.push(out, &[a], Op::MinMax { x: a, argmin, argmax, range }))
    }

    // ---------------------------------------------------------------- convolution & resampling

    /// 2-D convolution, `N×C×H×W` input with `O×C×k×k` weights.
    pub fn conv2d(&self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (&[n, c, h, wd], &[o, c2, k, k2]) = (&sx[..], &sw[..]) else {
            return Err(Error::dim(format!("conv2d expects 4-D input and weight, got {sx:?} and {sw:?}")));
        };
        if c != c2 || k != k2 {
            return Err(Error::dim(format!("conv2d: weight {sw:?} incompatible with input {sx:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::dim(format!("conv2d: bias must have shape [{o}]")));
            }
        }
        let geom = ConvGeom { channels: c, height: h, width: wd, kernel: k, stride, padding };
        let (oh, ow) = geom
            .out_hw()
            .ok_or_else(|| Error::dim(format!("conv2d: kernel {k} stride {stride} padding {padding} on {h}×{wd} gives no output")))?;
        let ohw = oh * ow;
        let out = {
            let tx = self.val(x);
            let tw = self.val(w);
            let tb = bias.map(|b| self.val(b));
            let xd = tx.data();
            let wd_ = tw.data();
            let per_image = kernels::map_indexed(n, |ni| {
                let col = kernels::im2col(&xd[ni * c * h * wd..(ni + 1) * c * h * wd], &geom);
                let mut y = vec![E::zero(); o * ohw];
                kernels::gemm_acc(wd_, &col, &mut y, o, c * k * k, ohw);
                y
            });
            let mut data = Vec::with_capacity(n * o * ohw);
            for mut y in per_image {
                if let Some(tb) = &tb {
                    for (oc, chunk) in y.chunks_mut(ohw).enumerate() {
                        let bv = tb.data()[oc];
                        chunk.iter_mut().for_each(|v| *v += bv);
                    }
                }
                data.extend(y);
            }
            Tensor::from_parts(vec![n, o, oh, ow], data)
        };
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(out, &inputs, Op::Conv2d { x, w, b: bias, geom, out_ch: o }))
    }

    /// 2×2 max pooling with stride 2; the first row-major maximum of each
    /// window wins ties.
    pub fn max_pool2d(&self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        let [n, c, h, w] = sx[..] else {
            return Err(Error::dim(format!("max_pool2d expects N×C×H×W, got {sx:?}")));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("max_pool2d: spatial dims {h}×{w} must be even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let (out, argmax) = {
            let t = self.val(x);
            let xd = t.data();
            let mut out = Vec::with_capacity(n * c * oh * ow);
            let mut argmax = Vec::with_capacity(n * c * oh * ow);
            for p in 0..n * c {
                let base = p * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + 2 * oy * w + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                        out.push(xd[best]);
                        argmax.push(best);
                    }
                }
            }
            (Tensor::from_parts(vec![n, c, oh, ow], out), argmax)
        };
        Ok(self.push(out, &[x], Op::MaxPool { x, argmax }))
    }

    /// Bilinear resampling (align-corners=false) of the trailing two axes.
    pub fn resize_bilinear(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(Error::dim(format!("resize_bilinear: cannot resize {sx:?} to {out_h}×{out_w}")));
        }
        let (h, w) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let planes = sx.iter().product::<usize>() / (h * w);
        let data = kernels::resize_bilinear(self.val(x).data(), planes, (h, w), (out_h, out_w));
        let mut shape = sx;
        let r = shape.len();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            &[x],
            Op::Resize { x, planes, in_hw: (h, w), out_hw: (out_h, out_w) },
        ))
    }

    pub fn upsample2x(&self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let r = s.len();
        if r < 2 {
            return Err(Error::dim("upsample2x needs at least 2 dimensions"));
        }
        self.resize_bilinear(x, 2 * s[r - 2], 2 * s[r - 1])
    }

    // ---------------------------------------------------------------- losses

    fn class_layout(&self, logits: Var, targets: &[usize]) -> Result<(usize, usize, usize)> {
        let s = self.shape(logits);
        if s.len() < 2 {
            return Err(Error::dim(format!("loss expects N×K[×H×W] logits, got {s:?}")));
        }
        let (n, k) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        if targets.len() != n * spatial {
            return Err(Error::dim(format!(
                "loss: {} targets for logits {s:?} (expected {})",
                targets.len(),
                n * spatial
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!("target class {bad} out of range for {k} classes")));
        }
        Ok((n, k, spatial))
    }

    /// Mean categorical cross-entropy over all `N·H·W` positions; class
    /// axis is 1.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k, spatial) = self.class_layout(logits, targets)?;
        let (loss, probs) = {
            let t = self.val(logits);
            let ld = t.data();
            let mut probs = vec![E::zero(); ld.len()];
            let mut total = 0.0f64;
            let mut buf = vec![E::zero(); k];
            for ni in 0..n {
                for s in 0..spatial {
                    for (c, b) in buf.iter_mut().enumerate() {
                        *b = ld[(ni * k + c) * spatial + s];
                    }
                    let lse = log_sum_exp(&buf);
                    let tgt = targets[ni * spatial + s];
                    total += (lse - buf[tgt]).widen();
                    for (c, &b) in buf.iter().enumerate() {
                        probs[(ni * k + c) * spatial + s] = (b - lse).exp();
                    }
                }
            }
            (E::lit(total / (n * spatial) as f64), probs)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy { logits, probs, targets: targets.to_vec(), classes: k, spatial },
        ))
    }

    /// Mean per-class sigmoid binary cross-entropy against one-hot targets.
    pub fn bce_onehot(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k, spatial) = self.class_layout(logits, targets)?;
        let loss = {
            let t = self.val(logits);
            let ld = t.data();
            let mut total = 0.0f64;
            for ni in 0..n {
                for c in 0..k {
                    for s in 0..spatial {
                        let z = ld[(ni * k + c) * spatial + s].widen();
                        let y = if targets[ni * spatial + s] == c { 1.0 } else { 0.0 };
                        total += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
                    }
                }
            }
            E::lit(total / (n * k * spatial) as f64)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::BceOneHot { logits, targets: targets.to_vec(), classes: k, spatial },
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse-mode accumulation from a scalar `loss`. A tape supports one
    /// backward pass.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        if self.finished.replace(true) {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        let loss_node = nodes.get(loss.0).ok_or_else(|| Error::State("loss is not on this tape".into()))?;
        if loss_node.value.numel() != 1 {
            return Err(Error::dim(format!("backward needs a scalar loss, got {:?}", loss_node.value.shape())));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..nodes.len()).map(|_| None).collect();
        if loss_node.requires_grad {
            grads[loss.0] = Some(Tensor::full(loss_node.value.shape().to_vec(), E::one()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(op) = &nodes[idx].op else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let contributions = backward_op(op, &g, &nodes, idx);
            for (v, dg) in contributions {
                if !nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dg),
                    slot @ None => *slot = Some(dg),
                }
            }
            // keep gradients of recorded intermediates available to callers
            grads[idx] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.bound.borrow().iter().map(|(&p, &v)| (p, v)).collect();
        params.sort();
        Ok(Gradients { store: self.store.id(), grads, params })
    }
}

fn gelu<E: Element>(x: E) -> E {
    let c = E::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + E::lit(0.044715) * x * x * x);
    E::lit(0.5) * x * (E::one() + u.tanh())
}

fn gelu_grad<E: Element>(x: E) -> E {
    let c = E::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + E::lit(0.044715) * x * x * x);
    let t = u.tanh();
    let du = c * (E::one() + E::lit(3.0 * 0.044715) * x * x);
    E::lit(0.5) * (E::one() + t) + E::lit(0.5) * x * (E::one() - t * t) * du
}

pub(crate) fn log_sum_exp<E: Element>(row: &[E]) -> E {
    let m = row.iter().copied().fold(E::neg_infinity(), E::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<E>().ln()
}

pub(crate) fn softmax_row<E: Element>(row: &mut [E]) {
    let m = row.iter().copied().fold(E::neg_infinity(), E::max);
    let mut s = E::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn backward_op<E: Element>(op: &Op<E>, g: &Tensor<E>, nodes: &[Node<E>], idx: usize) -> Vec<(Var, Tensor<E>)> {
    let val = |v: Var| nodes[v.0].value.as_ref();
    let rg = |v: Var| nodes[v.0].requires_grad;
    let gd = g.data();
    let like = |v: Var, data: Vec<E>| Tensor::from_parts(val(v).shape().to_vec(), data);
    match op {
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let da = gd.iter().zip(tb.data()).map(|(&g, &y)| g * y).collect();
            let db = gd.iter().zip(ta.data()).map(|(&g, &x)| g * x).collect();
            vec![(*a, like(*a, da)), (*b, like(*b, db))]
        }
        Op::AddBroadcast(a, b) => {
            let inner = val(*b).numel();
            let mut db = vec![E::zero(); inner];
            for chunk in gd.chunks(inner) {
                for (acc, &v) in db.iter_mut().zip(chunk) {
                    *acc += v;
                }
            }
            vec![(*a, g.clone()), (*b, like(*b, db))]
        }
        Op::Scale(a, s) => vec![(*a, g.map(|v| v * *s))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), gd[0]))],
        Op::Mean(a) => {
            let n = E::lit(val(*a).numel() as f64);
            vec![(*a, Tensor::full(val(*a).shape().to_vec(), gd[0] / n))]
        }
        Op::MatMul { a, b, batch, m, k, n } => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (*m, *k, *n);
            let mut out = Vec::new();
            if rg(*a) {
                let mut da = vec![E::zero(); batch * m * k];
                for bi in 0..*batch {
                    let bt = kernels::transpose(&tb.data()[bi * k * n..(bi + 1) * k * n], k, n);
                    kernels::gemm_acc(&gd[bi * m * n..(bi + 1) * m * n], &bt, &mut da[bi * m * k..(bi + 1) * m * k], m, n, k);
                }
                out.push((*a, like(*a, da)));
            }
            if rg(*b) {
                let mut db = vec![E::zero(); batch * k * n];
                for bi in 0..*batch {
                    let at = kernels::transpose(&ta.data()[bi * m * k..(bi + 1) * m * k], m, k);
                    kernels::gemm_acc(&at, &gd[bi * m * n..(bi + 1) * m * n], &mut db[bi * k * n..(bi + 1) * k * n], k, m, n);
                }
                out.push((*b, like(*b, db)));
            }
            out
        }
        Op::Reshape(a) => vec![(*a, like(*a, gd.to_vec()))],
        Op::Permute { x, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            let (data, _) = kernels::permute(gd, g.shape(), &inverse);
            vec![(*x, like(*x, data))]
        }
        Op::Concat { xs, axis } => {
            let shape = g.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis];
            let mut offset = 0;
            let mut out = Vec::new();
            for &x in xs {
                let len = val(x).shape()[*axis];
                if rg(x) {
                    let mut dx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dx.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    out.push((x, like(x, dx)));
                }
                offset += len;
            }
            out
        }
        Op::Narrow { x, axis, start } => {
            let shape = val(*x).shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let len = g.shape()[*axis];
            let mut dx = vec![E::zero(); val(*x).numel()];
            for o in 0..outer {
                let dst = (o * shape[*axis] + start) * inner;
                dx[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*x, like(*x, dx))]
        }
        Op::Expand0 { x } => {
            let inner = val(*x).numel();
            let mut dx = vec![E::zero(); inner];
            for chunk in gd.chunks(inner) {
                for (acc, &v) in dx.iter_mut().zip(chunk) {
                    *acc += v;
                }
            }
            vec![(*x, like(*x, dx))]
        }
        Op::Act(a, kind) => {
            let x = val(*a).data();
            let dx = match kind {
                Activation::Relu => gd.iter().zip(x).map(|(&g, &x)| if x > E::zero() { g } else { E::zero() }).collect(),
                Activation::Gelu => gd.iter().zip(x).map(|(&g, &x)| g * gelu_grad(x)).collect(),
            };
            vec![(*a, like(*a, dx))]
        }
        Op::Softmax(a) => {
            let y = nodes[idx].value.data();
            let d = *g.shape().last().expect("non-empty");
            let mut dx = vec![E::zero(); y.len()];
            for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(gd.chunks(d)) {
                let dot: E = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                for ((o, &y), &g) in dxr.iter_mut().zip(yr).zip(gr) {
                    *o = y * (g - dot);
                }
            }
            vec![(*a, like(*a, dx))]
        }
        Op::LogSoftmax(a) => {
            let y = nodes[idx].value.data();
            let d = *g.shape().last().expect("non-empty");
            let mut dx = vec![E::zero(); y.len()];
            for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(gd.chunks(d)) {
                let total: E = gr.iter().copied().sum();
                for ((o, &y), &g) in dxr.iter_mut().zip(yr).zip(gr) {
                    *o = g - y.exp() * total;
                }
            }
            vec![(*a, like(*a, dx))]
        }
        Op::LayerNorm { x, gain, shift, xhat, inv_std } => {
            let d = val(*gain).numel();
            let gain_d = val(*gain).data();
            let dn = E::lit(d as f64);
            let mut dx = vec![E::zero(); xhat.len()];
            let mut dg = vec![E::zero(); d];
            let mut db = vec![E::zero(); d];
            for (r, ((dxr, hr), gr)) in dx.chunks_mut(d).zip(xhat.chunks(d)).zip(gd.chunks(d)).enumerate() {
                let mut sum_dh = E::zero();
                let mut sum_dh_h = E::zero();
                for j in 0..d {
                    let dh = gr[j] * gain_d[j];
                    sum_dh += dh;
                    sum_dh_h += dh * hr[j];
                    dg[j] += gr[j] * hr[j];
                    db[j] += gr[j];
                }
                let inv = inv_std[r];
                for j in 0..d {
                    let dh = gr[j] * gain_d[j];
                    dxr[j] = inv / dn * (dn * dh - sum_dh - hr[j] * sum_dh_h);
                }
            }
            vec![(*x, like(*x, dx)), (*gain, like(*gain, dg)), (*shift, like(*shift, db))]
        }
        Op::BatchNorm { x, gain, shift, xhat, inv_std, train } => {
            let s = val(*x).shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let gain_d = val(*gain).data();
            let cnt = E::lit((n * hw) as f64);
            let mut dg = vec![E::zero(); c];
            let mut db = vec![E::zero(); c];
            for ni in 0..n {
                for ch in 0..c {
                    let base = (ni * c + ch) * hw;
                    for i in base..base + hw {
                        dg[ch] += gd[i] * xhat[i];
                        db[ch] += gd[i];
                    }
                }
            }
            let mut dx = vec![E::zero(); gd.len()];
            for ni in 0..n {
                for ch in 0..c {
                    let base = (ni * c + ch) * hw;
                    let scale = gain_d[ch] * inv_std[ch];
                    for i in base..base + hw {
                        dx[i] = if *train {
                            scale / cnt * (cnt * gd[i] - db[ch] - xhat[i] * dg[ch])
                        } else {
                            scale * gd[i]
                        };
                    }
                }
            }
            vec![(*x, like(*x, dx)), (*gain, like(*gain, dg)), (*shift, like(*shift, db))]
        }
        Op::Conv2d { x, w, b, geom, out_ch } => {
            let (tx, tw) = (val(*x), val(*w));
            let n = tx.shape()[0];
            let o = *out_ch;
            let ckk = geom.channels * geom.kernel * geom.kernel;
            let (oh, ow) = geom.out_hw().expect("validated");
            let ohw = oh * ow;
            let img = geom.channels * geom.height * geom.width;
            let need_dx = rg(*x);
            let need_dw = rg(*w);
            let wt = kernels::transpose(tw.data(), o, ckk);
            let xd = tx.data();
            let per_image = kernels::map_indexed(n, |ni| {
                let go = &gd[ni * o * ohw..(ni + 1) * o * ohw];
                let dw = need_dw.then(|| {
                    let col = kernels::im2col(&xd[ni * img..(ni + 1) * img], geom);
                    let col_t = kernels::transpose(&col, ckk, ohw);
                    let mut dw = vec![E::zero(); o * ckk];
                    kernels::gemm_acc(go, &col_t, &mut dw, o, ohw, ckk);
                    dw
                });
                let dx = need_dx.then(|| {
                    let mut dcol = vec![E::zero(); ckk * ohw];
                    kernels::gemm_acc(&wt, go, &mut dcol, ckk, o, ohw);
                    let mut dx = vec![E::zero(); img];
                    kernels::col2im(&dcol, geom, &mut dx);
                    dx
                });
                (dw, dx)
            });
            let mut out = Vec::new();
            let mut dw_total = need_dw.then(|| vec![E::zero(); o * ckk]);
            let mut dx_total = need_dx.then(|| Vec::with_capacity(n * img));
            for (dw, dx) in per_image {
                if let (Some(acc), Some(dw)) = (dw_total.as_mut(), dw) {
                    acc.iter_mut().zip(dw).for_each(|(a, v)| *a += v);
                }
                if let (Some(acc), Some(dx)) = (dx_total.as_mut(), dx) {
                    acc.extend(dx);
                }
            }
            if let Some(dx) = dx_total {
                out.push((*x, like(*x, dx)));
            }
            if let Some(dw) = dw_total {
                out.push((*w, like(*w, dw)));
            }
            if let Some(b) = b {
                let mut dbias = vec![E::zero(); o];
                for ni in 0..n {
                    for (oc, acc) in dbias.iter_mut().enumerate() {
                        *acc += gd[(ni * o + oc) * ohw..][..ohw].iter().copied().sum::<E>();
                    }
                }
                out.push((*b, like(*b, dbias)));
            }
            out
        }
        Op::MaxPool { x, argmax } => {
            let mut dx = vec![E::zero(); val(*x).numel()];
            for (&src, &gv) in argmax.iter().zip(gd) {
                dx[src] += gv;
            }
            vec![(*x, like(*x, dx))]
        }
        Op::Resize { x, planes, in_hw, out_hw } => {
            let dx = kernels::resize_bilinear_adjoint(gd, *planes, *in_hw, *out_hw);
            vec![(*x, like(*x, dx))]
        }
        Op::CrossEntropy { logits, probs, targets, classes, spatial } => {
            let n = probs.len() / (classes * spatial);
            let scale = gd[0] / E::lit((n * spatial) as f64);
            let mut dl = probs.clone();
            for ni in 0..n {
                for s in 0..*spatial {
                    dl[(ni * classes + targets[ni * spatial + s]) * spatial + s] -= E::one();
                }
            }
            dl.iter_mut().for_each(|v| *v *= scale);
            vec![(*logits, like(*logits, dl))]
        }
        Op::BceOneHot { logits, targets, classes, spatial } => {
            let z = val(*logits).data();
            let n = z.len() / (classes * spatial);
            let scale = gd[0] / E::lit(z.len() as f64);
            let mut dl = vec![E::zero(); z.len()];
            for ni in 0..n {
                for c in 0..*classes {
                    for s in 0..*spatial {
                        let i = (ni * classes + c) * spatial + s;
                        let y = if targets[ni * spatial + s] == c { E::one() } else { E::zero() };
                        let sig = E::one() / (E::one() + (-z[i]).exp());
                        dl[i] = (sig - y) * scale;
                    }
                }
            }
            vec![(*logits, like(*logits, dl))]
        }
        Op::L2Normalize { x, inv_norm } => {
            let y = nodes[idx].value.data();
            let d = y.len() / inv_norm.len();
            let mut dx = vec![E::zero(); y.len()];
            for (r, ((dxr, yr), gr)) in dx.chunks_mut(d).zip(y.chunks(d)).zip(gd.chunks(d)).enumerate() {
                let dot: E = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                for ((o, &y), &g) in dxr.iter_mut().zip(yr).zip(gr) {
                    *o = (g - y * dot) * inv_norm[r];
                }
            }
            vec![(*x, like(*x, dx))]
        }
        Op::MinMax { x, argmin, argmax, range } => {
            let y = nodes[idx].value.data();
            let plane = y.len() / range.len();
            let mut dx = vec![E::zero(); y.len()];
            for p in 0..range.len() {
                let r = range[p];
                let mut d_min = E::zero();
                let mut d_max = E::zero();
                for i in p * plane..(p + 1) * plane {
                    dx[i] = gd[i] / r;
                    // y = (x - min) / r, r = max - min + eps
                    d_min += gd[i] * (y[i] - E::one()) / r;
                    d_max -= gd[i] * y[i] / r;
                }
                dx[argmin[p]] += d_min;
                dx[argmax[p]] += d_max;
            }
            vec![(*x, like(*x, dx))]
        }
    }
}
