//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables in
//! construction order. Values are computed eagerly; [`Graph::backward`]
//! walks the tape in reverse, accumulating gradients into input variables
//! and into a [`ParamGrads`] buffer for trainable parameters.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, MatMut, MatRef};
use super::params::{ParamGrads, ParamId, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    Gelu(Var),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    AddRowsAt {
        x: Var,
        y: Var,
        offset: usize,
    },
    Rotary {
        x: Var,
        n_heads: usize,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of the graph's input variables after a backward pass.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of an input created with [`Graph::input_with_grad`].
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Recording of a differentiable computation over a borrowed parameter store.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.tensor(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input whose gradient is retained and readable via [`Grads::of`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Parameter leaf. Repeated calls with the same id return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: self.params.get(id).trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| *x * c).collect())
            .expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(
            T::one(),
            MatRef::dense(ta.data(), m, k),
            MatRef::dense(tb.data(), k, n),
            T::zero(),
            MatMut::dense(&mut out, m, n),
        );
        let out = Tensor::matrix(m, n, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `x[n, in] * w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.shape().len() != 2 || tw.shape().len() != 2 || tx.cols() != tw.rows() {
            return Err(shape_err("linear", tx.shape(), tw.shape()));
        }
        let (n, d_in, d_out) = (tx.rows(), tx.cols(), tw.cols());
        let bias = match b {
            Some(b) => {
                let tb = self.value(b);
                if tb.shape() != [d_out] {
                    return Err(shape_err("linear.bias", tb.shape(), &[d_out]));
                }
                Some(tb.data())
            }
            None => None,
        };
        let out = kernels::linear(tx.data(), n, tw.data(), d_in, d_out, bias);
        let out = Tensor::matrix(n, d_out, out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(Error::Parameter(alloc::format!(
                "layernorm eps must be positive, got {eps:?}"
            )));
        }
        let tx = self.value(x);
        let cols = tx.cols();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.shape() != [cols] || tb.shape() != [cols] {
            return Err(shape_err("layernorm", tx.shape(), tg.shape()));
        }
        let mut out = vec![T::zero(); tx.len()];
        let (means, rstds) = kernels::layernorm_forward(tx.data(), cols, tg.data(), tb.data(), eps, &mut out);
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| kernels::gelu(*v)).collect())
            .expect("same shape");
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Embedding lookup: gathers rows of `table[vocab, d]` by token id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let vocab = self.value(table).rows();
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::TokenRange { id, vocab });
        }
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.gather_rows(table, &rows)
    }

    /// New matrix whose `i`-th row is row `rows[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 || rows.iter().any(|&r| r >= tx.rows()) {
            return Err(shape_err("gather_rows", tx.shape(), &[rows.len()]));
        }
        let d = tx.cols();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(tx.row(r));
        }
        let out = Tensor::matrix(rows.len(), d, out)?;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::Gather {
                table: x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Stacks matrices along the sequence (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of zero tensors".into()))?;
        let cols = self.value(*first).cols();
        let mut views = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.value(*p);
            if t.shape().len() != 2 || t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first).shape(), t.shape()));
            }
            views.push(t);
        }
        let out = Tensor::concat_rows(&views, cols);
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 || start + len > tx.rows() {
            return Err(shape_err("slice_rows", tx.shape(), &[start, len]));
        }
        let out = tx.slice_rows(start, len);
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    /// `x` with `y` added onto rows `offset..offset + rows(y)`.
    pub fn add_rows_at(&mut self, x: Var, y: Var, offset: usize) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        if tx.shape().len() != 2
            || ty.shape().len() != 2
            || tx.cols() != ty.cols()
            || offset + ty.rows() > tx.rows()
        {
            return Err(shape_err("add_rows_at", tx.shape(), ty.shape()));
        }
        let cols = tx.cols();
        let mut out = tx.data().to_vec();
        for (o, v) in out[offset * cols..(offset + ty.rows()) * cols].iter_mut().zip(ty.data()) {
            *o = *o + *v;
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(y);
        Ok(self.push(out, Op::AddRowsAt { x, y, offset }, ng))
    }

    /// Rotary position embedding applied per head; row `i` of `x` sits at
    /// `positions[i]`.
    pub fn rotary(&mut self, x: Var, positions: &[usize], n_heads: usize, base: f64) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        if tx.shape().len() != 2 || positions.len() != tx.rows() || n_heads == 0 || !cols.is_multiple_of(2 * n_heads) {
            return Err(shape_err("rotary", tx.shape(), &[positions.len(), n_heads]));
        }
        let (cos, sin) = kernels::rotary_tables::<T>(positions, cols / n_heads, base);
        let mut out = tx.data().to_vec();
        kernels::rotary_apply(&mut out, cols, n_heads, &cos, &sin, false);
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Rotary { x, n_heads, cos, sin }, ng))
    }

    /// Multi-head scaled dot-product attention with an explicit additive
    /// bias matrix `[rows(q), rows(k)]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: &Tensor<T>, n_heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tk.shape() != tv.shape() || tk.cols() != d || n_heads == 0 || d % n_heads != 0 {
            return Err(shape_err("attention", tq.shape(), tk.shape()));
        }
        let (sq, sk) = (tq.rows(), tk.rows());
        if bias.shape() != [sq, sk] {
            return Err(shape_err("attention.bias", bias.shape(), &[sq, sk]));
        }
        let mut out = vec![T::zero(); sq * d];
        let probs = kernels::attention_forward(tq.data(), tk.data(), tv.data(), bias.data(), sq, sk, d, n_heads, &mut out);
        let out = Tensor::matrix(sq, d, out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                probs,
            },
            ng,
        ))
    }

    /// Mean over mask-selected rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[u8]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, vocab) = (tl.rows(), tl.cols());
        if tl.shape().len() != 2 || targets.len() != rows || mask.len() != rows {
            return Err(shape_err("softmax_cross_entropy", tl.shape(), &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m != 0).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let inv = T::one() / T::from_usize(count).unwrap();
        let mut probs = tl.data().to_vec();
        kernels::softmax_rows(&mut probs, vocab);
        let mut weights = vec![T::zero(); rows];
        let mut total = T::zero();
        for i in 0..rows {
            if mask[i] == 0 {
                continue;
            }
            let t = targets[i] as usize;
            if t >= vocab {
                return Err(Error::TokenRange { id: targets[i], vocab });
            }
            // log-sum-exp form for the value; probabilities serve the gradient.
            let row = tl.row(i);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + (lse - row[t]);
            weights[i] = inv;
        }
        let out = Tensor::scalar(total * inv);
        let ng = self.ng(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            ng,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Reverse pass from a scalar `loss`. Trainable parameter gradients are
    /// accumulated into `param_grads`; input gradients are returned.
    pub fn backward(&self, loss: Var, param_grads: &mut ParamGrads<T>) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err("backward", lv.shape(), &[]));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads, param_grads);
            if matches!(node.op, Op::Input) {
                grads[i] = Some(g);
            }
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>], pg: &mut ParamGrads<T>) {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                for (a, b) in pg.get_mut(*id).iter_mut().zip(g) {
                    *a = *a + *b;
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(buf) = self.acc(grads, v) {
                        add_into(buf, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(buf) = self.acc(grads, *a) {
                    for ((x, gi), bi) in buf.iter_mut().zip(g).zip(tb) {
                        *x = *x + *gi * *bi;
                    }
                }
                if let Some(buf) = self.acc(grads, *b) {
                    for ((x, gi), ai) in buf.iter_mut().zip(g).zip(ta) {
                        *x = *x + *gi * *ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(buf) = self.acc(grads, *a) {
                    for (x, gi) in buf.iter_mut().zip(g) {
                        *x = *x + *gi * *c;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(buf) = self.acc(grads, *a) {
                    kernels::gemm(
                        T::one(),
                        MatRef::dense(g, m, n),
                        MatRef::dense(tb.data(), k, n).t(),
                        T::one(),
                        MatMut::dense(buf, m, k),
                    );
                }
                if let Some(buf) = self.acc(grads, *b) {
                    kernels::gemm(
                        T::one(),
                        MatRef::dense(ta.data(), m, k).t(),
                        MatRef::dense(g, m, n),
                        T::one(),
                        MatMut::dense(buf, k, n),
                    );
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, d_in, d_out) = (tx.rows(), tx.cols(), tw.cols());
                if let Some(buf) = self.acc(grads, *x) {
                    kernels::gemm(
                        T::one(),
                        MatRef::dense(g, n, d_out),
                        MatRef::dense(tw.data(), d_in, d_out).t(),
                        T::one(),
                        MatMut::dense(buf, n, d_in),
                    );
                }
                if let Some(buf) = self.acc(grads, *w) {
                    kernels::gemm(
                        T::one(),
                        MatRef::dense(tx.data(), n, d_in).t(),
                        MatRef::dense(g, n, d_out),
                        T::one(),
                        MatMut::dense(buf, d_in, d_out),
                    );
                }
                if let Some(b) = b {
                    if let Some(buf) = self.acc(grads, *b) {
                        for row in g.chunks_exact(d_out) {
                            add_into(buf, row);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            } => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let gain_vals = self.value(*gain).data();
                let mut dx = self.temp(*x);
                let mut dg = self.temp(*gain);
                let mut db = self.temp(*bias);
                kernels::layernorm_backward(
                    tx.data(),
                    cols,
                    gain_vals,
                    means,
                    rstds,
                    g,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.merge(grads, *x, dx);
                self.merge(grads, *gain, dg);
                self.merge(grads, *bias, db);
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                if let Some(buf) = self.acc(grads, *x) {
                    for ((o, gi), xi) in buf.iter_mut().zip(g).zip(tx) {
                        *o = *o + *gi * kernels::gelu_grad(*xi);
                    }
                }
            }
            Op::Gather { table, rows } => {
                let d = self.value(*table).cols();
                if let Some(buf) = self.acc(grads, *table) {
                    for (row, &r) in g.chunks_exact(d).zip(rows) {
                        add_into(&mut buf[r * d..(r + 1) * d], row);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(buf) = self.acc(grads, *p) {
                        add_into(buf, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = self.value(*x).cols();
                if let Some(buf) = self.acc(grads, *x) {
                    add_into(&mut buf[start * cols..start * cols + g.len()], g);
                }
            }
            Op::AddRowsAt { x, y, offset } => {
                let cols = self.value(*x).cols();
                let ylen = self.value(*y).len();
                if let Some(buf) = self.acc(grads, *x) {
                    add_into(buf, g);
                }
                if let Some(buf) = self.acc(grads, *y) {
                    add_into(buf, &g[offset * cols..offset * cols + ylen]);
                }
            }
            Op::Rotary { x, n_heads, cos, sin } => {
                let cols = self.value(*x).cols();
                let mut rg = g.to_vec();
                kernels::rotary_apply(&mut rg, cols, *n_heads, cos, sin, true);
                if let Some(buf) = self.acc(grads, *x) {
                    add_into(buf, &rg);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (sq, sk, d) = (tq.rows(), tk.rows(), tq.cols());
                let mut dq = self.temp(*q);
                let mut dk = self.temp(*k);
                let mut dv = self.temp(*v);
                kernels::attention_backward(
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    probs,
                    g,
                    sq,
                    sk,
                    d,
                    *n_heads,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                self.merge(grads, *q, dq);
                self.merge(grads, *k, dk);
                self.merge(grads, *v, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let vocab = self.value(*logits).cols();
                let scale = g[0];
                if let Some(buf) = self.acc(grads, *logits) {
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let row = &mut buf[i * vocab..(i + 1) * vocab];
                        let p = &probs[i * vocab..(i + 1) * vocab];
                        for j in 0..vocab {
                            let onehot = if j == t as usize { T::one() } else { T::zero() };
                            row[j] = row[j] + scale * w * (p[j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(buf) = self.acc(grads, *x) {
                    for o in buf.iter_mut() {
                        *o = *o + g[0];
                    }
                }
            }
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }

    /// Zeroed scratch gradient for `v`, or `None` if it needs no gradient.
    fn temp(&self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0]
            .needs_grad
            .then(|| vec![T::zero(); self.value(v).len()])
    }

    fn merge(&self, grads: &mut [Option<Vec<T>>], v: Var, buf: Option<Vec<T>>) {
        if let Some(b) = buf {
            match grads[v.0].as_mut() {
                Some(existing) => add_into(existing, &b),
                None => grads[v.0] = Some(b),
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

/// Value of a scalar variable as `f64`.
pub fn scalar_value<T: Scalar>(g: &Graph<'_, T>, v: Var) -> f64 {
    g.value(v).data()[0].to_f64_lossy()
}
