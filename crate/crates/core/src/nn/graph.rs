//! Tape-based reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`Graph`] borrows the parameter store for the lifetime of one forward
//! pass. Every operation appends a node; [`Graph::backward`] walks the tape in
//! reverse and returns per-parameter [`Gradients`]. Batches of variable-size
//! samples are stacked row-wise and described by [`Segments`].

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::nn::params::{Gradients, ParamId, ParamStore};
use crate::nn::tensor::mm_acc;
use crate::nn::Tensor2;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row ranges of stacked samples: sample `b` owns rows `offsets[b]..offsets[b + 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        for &l in lengths {
            offsets.push(offsets.last().copied().unwrap_or(0) + l);
        }
        Self { offsets }
    }

    pub fn single(len: usize) -> Self {
        Self::from_lengths(&[len])
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn range(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    pub fn len_of(&self, b: usize) -> usize {
        self.offsets[b + 1] - self.offsets[b]
    }

    /// Index of the segment containing `row`.
    pub fn segment_of(&self, row: usize) -> usize {
        self.offsets.partition_point(|&o| o <= row) - 1
    }
}

enum Op<T> {
    Const,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MulScalar { x: Var, s: Var },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SegSum { x: Var, segs: Segments },
    Expand { x: Var, segs: Segments },
    SegLogSoftmax { x: Var, segs: Segments },
    GatherRows { x: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor2<T>, inv_std: Vec<T> },
    Attention(Box<AttentionCache<T>>),
}

struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    scale: T,
    q_segs: Segments,
    kv_segs: Segments,
    /// Softmax weights; block for sample `b` starts at `prob_offsets[b]` and is
    /// laid out `[head][query][key]`.
    probs: Vec<T>,
    prob_offsets: Vec<usize>,
}

enum Value<T> {
    Owned(Tensor2<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor2<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor2<T>) -> Var {
        self.push(t, Op::Const, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    /// `x · Wᵀ + b` with `W` stored `out × in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.cols() {
            return shape_err("linear", format!("input {:?} vs weight {:?}", xv.shape(), wv.shape()));
        }
        let mut out = Tensor2::zeros(xv.rows(), wv.rows());
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != (1, wv.rows()) {
                return shape_err("linear", format!("bias {:?} for {} outputs", bv.shape(), wv.rows()));
            }
            for r in 0..out.rows() {
                out.row_mut(r).copy_from_slice(bv.data());
            }
            mm_acc(xv, false, wv, true, &mut out, T::one(), T::one());
        } else {
            mm_acc(xv, false, wv, true, &mut out, T::one(), T::zero());
        }
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul { a, b }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return shape_err(op, format!("{sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Element-wise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("min", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| if y < x { y } else { x });
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Min(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        let ng = self.needs(x);
        self.push(out, Op::AddConst(x), ng)
    }

    /// Multiplies every entry of `x` by the 1×1 variable `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return shape_err("mul_scalar", format!("scalar has shape {:?}", self.value(s).shape()));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(out, Op::MulScalar { x, s }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        let ng = self.needs(x);
        self.push(out, Op::Exp(x), ng)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::ln);
        let ng = self.needs(x);
        self.push(out, Op::Log(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor2::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).data().len();
        if n == 0 {
            return Err(Error::Empty("mean"));
        }
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        Ok(self.push(Tensor2::scalar(s / T::from_usize(n).unwrap()), Op::Mean(x), ng))
    }

    /// Per-segment row sums: `n × c` → `B × c`.
    pub fn seg_sum(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != segs.total() {
            return shape_err("seg_sum", format!("{} rows for {} segmented rows", xv.rows(), segs.total()));
        }
        let mut out = Tensor2::zeros(segs.count(), xv.cols());
        for b in 0..segs.count() {
            for r in segs.range(b) {
                for c in 0..xv.cols() {
                    let v = out.get(b, c) + xv.get(r, c);
                    out.set(b, c, v);
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::SegSum { x, segs: segs.clone() }, ng))
    }

    /// Repeats row `b` of `x` over every row of segment `b`: `B × c` → `n × c`.
    pub fn expand(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != segs.count() {
            return shape_err("expand", format!("{} rows for {} segments", xv.rows(), segs.count()));
        }
        let mut out = Tensor2::zeros(segs.total(), xv.cols());
        for b in 0..segs.count() {
            for r in segs.range(b) {
                out.row_mut(r).copy_from_slice(xv.row(b));
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::Expand { x, segs: segs.clone() }, ng))
    }

    /// Log-softmax of a column vector within each segment.
    pub fn seg_log_softmax(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != 1 || xv.rows() != segs.total() {
            return shape_err("seg_log_softmax", format!("{:?} for {} rows", xv.shape(), segs.total()));
        }
        let mut out = Tensor2::zeros(xv.rows(), 1);
        for b in 0..segs.count() {
            let r = segs.range(b);
            if r.is_empty() {
                return Err(Error::Empty("seg_log_softmax"));
            }
            let lse = log_sum_exp(&xv.data()[r.clone()]);
            for i in r {
                out.data_mut()[i] = xv.data()[i] - lse;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::SegLogSoftmax { x, segs: segs.clone() }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return shape_err("gather_rows", format!("row {bad} of {}", xv.rows()));
        }
        let out = xv.select_rows(idx);
        let ng = self.needs(x);
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return shape_err("slice_cols", format!("{start}+{len} of {}", xv.cols()));
        }
        let mut out = Tensor2::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    /// Row-wise layer normalization with learned `1 × c` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gamma).shape() != (1, c) || self.value(beta).shape() != (1, c) {
            return shape_err("layer_norm", format!("affine params for width {c}"));
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let n = T::from_usize(c).unwrap();
        let mut xhat = Tensor2::zeros(xv.rows(), c);
        let mut out = Tensor2::zeros(xv.rows(), c);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat.set(r, j, h);
                out.set(r, j, g[j] * h + bt[j]);
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Multi-head attention core `softmax(scale · Q Kᵀ) V` evaluated independently per sample.
    ///
    /// `q` holds the projected queries of all samples stacked by `q_segs`; `k` and `v`
    /// the projected keys/values stacked by `kv_segs`. Heads split the columns evenly.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        q_segs: &Segments,
        kv_segs: &Segments,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 || kv.cols() != d || vv.cols() != d {
            return shape_err("attention", format!("widths q{} k{} v{} heads {heads}", d, kv.cols(), vv.cols()));
        }
        if qv.rows() != q_segs.total() || kv.rows() != kv_segs.total() || vv.rows() != kv.rows() {
            return shape_err("attention", "row counts disagree with segments".to_string());
        }
        if q_segs.count() != kv_segs.count() {
            return shape_err("attention", "query and key segment counts differ".to_string());
        }
        let dh = d / heads;
        let mut out = Tensor2::zeros(qv.rows(), d);
        let mut probs = Vec::new();
        let mut prob_offsets = Vec::with_capacity(q_segs.count());
        let mut scores = Vec::new();
        for b in 0..q_segs.count() {
            let (qr, kr) = (q_segs.range(b), kv_segs.range(b));
            if kr.is_empty() && !qr.is_empty() {
                return Err(Error::Empty("attention keys"));
            }
            prob_offsets.push(probs.len());
            let nk = kr.len();
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in qr.clone() {
                    let qrow = &qv.row(i)[cols.clone()];
                    scores.clear();
                    for r in kr.clone() {
                        let krow = &kv.row(r)[cols.clone()];
                        let s: T = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum();
                        scores.push(s * scale);
                    }
                    softmax_in_place(&mut scores);
                    let orow = &mut out.row_mut(i)[cols.clone()];
                    for (j, r) in kr.clone().enumerate() {
                        let p = scores[j];
                        let vrow = &vv.row(r)[cols.clone()];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                    probs.extend_from_slice(&scores[..nk]);
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            out,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                heads,
                scale,
                q_segs: q_segs.clone(),
                kv_segs: kv_segs.clone(),
                probs,
                prob_offsets,
            })),
            ng,
        ))
    }

    /// Attention weights of sample `b` for `head`, as `queries × keys` rows.
    pub fn attention_weights(&self, att: Var, b: usize, head: usize) -> Option<Tensor2<T>> {
        match &self.nodes[att.0].op {
            Op::Attention(c) => {
                let (nq, nk) = (c.q_segs.len_of(b), c.kv_segs.len_of(b));
                if head >= c.heads {
                    return None;
                }
                let start = c.prob_offsets[b] + head * nq * nk;
                Tensor2::from_vec(nq, nk, c.probs[start..start + nq * nk].to_vec()).ok()
            }
            _ => None,
        }
    }

    /// Per-key maximum attention weight over heads and queries for sample `b`.
    pub fn attention_key_max(&self, att: Var, b: usize) -> Option<Vec<T>> {
        let heads = match &self.nodes[att.0].op {
            Op::Attention(c) => c.heads,
            _ => return None,
        };
        let mut best: Option<Vec<T>> = None;
        for h in 0..heads {
            let w = self.attention_weights(att, b, h)?;
            let acc = best.get_or_insert_with(|| vec![T::zero(); w.cols()]);
            for r in 0..w.rows() {
                for (a, &x) in acc.iter_mut().zip(w.row(r)) {
                    *a = a.max(x);
                }
            }
        }
        best
    }

    /// Reverse pass from a scalar `loss`, returning gradients for every parameter reached.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).shape() != (1, 1) {
            return shape_err("backward", format!("loss has shape {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::scalar(T::one()));
        let mut out = Gradients {
            by_param: (0..self.store.len()).map(|_| None).collect(),
        };
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor2<T>>], v: Var, g: Tensor2<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: Tensor2<T>,
        grads: &mut [Option<Tensor2<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        let node_val = || self.value(Var(idx));
        match &self.nodes[idx].op {
            Op::Const => {}
            Op::Param(id) => match &mut out.by_param[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            },
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.needs(*x) {
                    let mut gx = Tensor2::zeros(xv.rows(), xv.cols());
                    mm_acc(&g, false, wv, false, &mut gx, T::one(), T::zero());
                    self.acc(grads, *x, gx);
                }
                if self.needs(*w) {
                    let mut gw = Tensor2::zeros(wv.rows(), wv.cols());
                    mm_acc(&g, true, xv, false, &mut gw, T::one(), T::zero());
                    self.acc(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.acc(grads, *b, col_sums(&g));
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut ga = Tensor2::zeros(av.rows(), av.cols());
                    mm_acc(&g, false, bv, true, &mut ga, T::one(), T::zero());
                    self.acc(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = Tensor2::zeros(bv.rows(), bv.cols());
                    mm_acc(av, true, &g, false, &mut gb, T::one(), T::zero());
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, g.map(|v| -v));
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.acc(grads, *a, g.zip_map(bv, |x, y| x * y));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.zip_map(av, |x, y| x * y));
                }
            }
            Op::Min(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = g.clone();
                let mut gb = g;
                for i in 0..ga.data().len() {
                    if bv.data()[i] < av.data()[i] {
                        ga.data_mut()[i] = T::zero();
                    } else {
                        gb.data_mut()[i] = T::zero();
                    }
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(grads, *x, g.map(|v| v * c));
            }
            Op::AddConst(x) => self.acc(grads, *x, g),
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).item();
                if self.needs(*s) {
                    let d: T = g.data().iter().zip(self.value(*x).data()).map(|(&a, &b)| a * b).sum();
                    self.acc(grads, *s, Tensor2::scalar(d));
                }
                self.acc(grads, *x, g.map(|v| v * sv));
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                self.acc(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = g.zip_map(node_val(), |gv, y| gv * y);
                self.acc(grads, *x, gx);
            }
            Op::Log(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| gv / xv);
                self.acc(grads, *x, gx);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, Tensor2::filled(xv.rows(), xv.cols(), g.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let n = T::from_usize(xv.data().len()).unwrap();
                self.acc(grads, *x, Tensor2::filled(xv.rows(), xv.cols(), g.item() / n));
            }
            Op::SegSum { x, segs } => {
                let xv = self.value(*x);
                let mut gx = Tensor2::zeros(xv.rows(), xv.cols());
                for b in 0..segs.count() {
                    for r in segs.range(b) {
                        gx.row_mut(r).copy_from_slice(g.row(b));
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Expand { x, segs } => {
                let xv = self.value(*x);
                let mut gx = Tensor2::zeros(xv.rows(), xv.cols());
                for b in 0..segs.count() {
                    for r in segs.range(b) {
                        for c in 0..xv.cols() {
                            let v = gx.get(b, c) + g.get(r, c);
                            gx.set(b, c, v);
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::SegLogSoftmax { x, segs } => {
                let y = node_val();
                let mut gx = g.clone();
                for b in 0..segs.count() {
                    let r = segs.range(b);
                    let gs: T = g.data()[r.clone()].iter().copied().sum();
                    for i in r {
                        gx.data_mut()[i] = g.data()[i] - y.data()[i].exp() * gs;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut gx = Tensor2::zeros(xv.rows(), xv.cols());
                for (o, &i) in idx.iter().enumerate() {
                    for c in 0..xv.cols() {
                        let v = gx.get(i, c) + g.get(o, c);
                        gx.set(i, c, v);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor2::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.acc(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let c = xhat.cols();
                let n = T::from_usize(c).unwrap();
                if self.needs(*gamma) {
                    let mut gg = Tensor2::zeros(1, c);
                    for r in 0..xhat.rows() {
                        for j in 0..c {
                            gg.data_mut()[j] += g.get(r, j) * xhat.get(r, j);
                        }
                    }
                    self.acc(grads, *gamma, gg);
                }
                if self.needs(*beta) {
                    self.acc(grads, *beta, col_sums(&g));
                }
                if self.needs(*x) {
                    let mut gx = Tensor2::zeros(xhat.rows(), c);
                    for r in 0..xhat.rows() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dxh = g.get(r, j) * gam[j];
                            m1 += dxh;
                            m2 += dxh * xhat.get(r, j);
                        }
                        m1 /= n;
                        m2 /= n;
                        for j in 0..c {
                            let dxh = g.get(r, j) * gam[j];
                            gx.set(r, j, inv_std[r] * (dxh - m1 - xhat.get(r, j) * m2));
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Attention(c) => self.backprop_attention(c, &g, grads),
        }
        Ok(())
    }

    fn backprop_attention(&self, c: &AttentionCache<T>, g: &Tensor2<T>, grads: &mut [Option<Tensor2<T>>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let d = qv.cols();
        let dh = d / c.heads;
        let mut gq = Tensor2::zeros(qv.rows(), d);
        let mut gk = Tensor2::zeros(kv.rows(), d);
        let mut gv = Tensor2::zeros(vv.rows(), d);
        let mut dp = Vec::new();
        for b in 0..c.q_segs.count() {
            let (qr, kr) = (c.q_segs.range(b), c.kv_segs.range(b));
            let (nq, nk) = (qr.len(), kr.len());
            for h in 0..c.heads {
                let cols = h * dh..(h + 1) * dh;
                for (qi, i) in qr.clone().enumerate() {
                    let p0 = c.prob_offsets[b] + (h * nq + qi) * nk;
                    let p = &c.probs[p0..p0 + nk];
                    let grow = &g.row(i)[cols.clone()];
                    dp.clear();
                    for (j, r) in kr.clone().enumerate() {
                        let vrow = &vv.row(r)[cols.clone()];
                        dp.push(grow.iter().zip(vrow).map(|(&a, &b)| a * b).sum::<T>());
                        let gvr = &mut gv.row_mut(r)[cols.clone()];
                        for (o, &x) in gvr.iter_mut().zip(grow) {
                            *o += p[j] * x;
                        }
                    }
                    let dot: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    for (j, r) in kr.clone().enumerate() {
                        let ds = p[j] * (dp[j] - dot) * c.scale;
                        if ds == T::zero() {
                            continue;
                        }
                        for col in cols.clone() {
                            let qx = qv.get(i, col);
                            let kx = kv.get(r, col);
                            let a = gq.get(i, col) + ds * kx;
                            gq.set(i, col, a);
                            let bb = gk.get(r, col) + ds * qx;
                            gk.set(r, col, bb);
                        }
                    }
                }
            }
        }
        self.acc(grads, c.q, gq);
        self.acc(grads, c.k, gk);
        self.acc(grads, c.v, gv);
    }
}

fn col_sums<T: Real>(g: &Tensor2<T>) -> Tensor2<T> {
    let mut out = Tensor2::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &x) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

pub(crate) fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax_in_place<T: Real>(xs: &mut [T]) {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}
