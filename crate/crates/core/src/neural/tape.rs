//! Reverse-mode tape over the handful of tensor ops the transformer needs.
//!
//! Every op evaluates eagerly and records what its backward pass needs.
//! Matrices are row-major `[rows, cols]`; batched sequences are flattened to
//! `[batch * len, dim]`.

use std::collections::HashMap;

use rand::Rng;

use super::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape and masking of one attention call.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// `batch * k_len` flags; `true` marks a padded key.
    pub key_padding: Vec<bool>,
    pub causal: bool,
}

enum Op<T> {
    Leaf,
    Param,
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    AddBias { x: Var, b: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Sum { x: Var },
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Tanh approximation: `0.5 x (1 + tanh(√(2/π) (x + 0.044715 x³)))`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_C) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of(SQRT_2_OVER_PI);
    let inner = c * (x + T::of(GELU_C) * x * x * x);
    let t = inner.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0 * GELU_C) * x * x)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: HashMap::new(), grads: Vec::new(), backward_done: false }
    }

    /// Drops all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            1 => (1, s[0]),
            _ => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    /// Input that receives a gradient (readable with [`Tape::grad`]).
    pub fn leaf(&mut self, value: Vec<T>, shape: Vec<usize>) -> Var {
        self.push(value, shape, Op::Leaf, true)
    }

    /// Input without gradient.
    pub fn constant(&mut self, value: Vec<T>, shape: Vec<usize>) -> Var {
        self.push(value, shape, Op::Leaf, false)
    }

    /// Loads a parameter once per tape; repeated uses share one node, so tied
    /// uses accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.tensor.data.clone(), p.tensor.shape.clone(), Op::Param, p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let (vocab, d) = self.rows_cols(table);
        let t = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < vocab, "embedding id {i} out of range {vocab}");
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        self.push(out, vec![ids.len(), d], Op::Embedding { table, ids: ids.to_vec() }, ng)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (_, d) = self.rows_cols(x);
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&xv[r * d..(r + 1) * d]);
        }
        let ng = self.ng(x);
        self.push(out, vec![rows.len(), d], Op::GatherRows { x, rows: rows.to_vec() }, ng)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        assert_eq!(k, k2, "matmul inner dimensions");
        let mut out = vec![T::zero(); m * n];
        crate::scalar::matmul(m, k, n, &self.nodes[a.0].value, &self.nodes[b.0].value, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n, trans_b: false }, ng)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.rows_cols(a);
        let (n, k2) = self.rows_cols(b);
        assert_eq!(k, k2, "matmul_bt inner dimensions");
        let mut out = vec![T::zero(); m * n];
        crate::scalar::matmul_bt(m, k, n, &self.nodes[a.0].value, &self.nodes[b.0].value, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n, trans_b: true }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.len(), self.nodes[b.0].value.len(), "add shapes");
        let out = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(&x, &y)| x + y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, shape, Op::Add { a, b }, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.len(), self.nodes[b.0].value.len(), "mul shapes");
        let out = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(&x, &y)| x * y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, shape, Op::Mul { a, b }, ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| v * s).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(x);
        self.push(out, shape, Op::Scale { x, s }, ng)
    }

    /// Adds a `[n]` bias to every row of `x[m×n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (_, n) = self.rows_cols(x);
        assert_eq!(self.nodes[b.0].value.len(), n, "bias length");
        let bv = &self.nodes[b.0].value;
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(x) || self.ng(b);
        self.push(out, shape, Op::AddBias { x, b }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| gelu(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(x);
        self.push(out, shape, Op::Gelu { x }, ng)
    }

    /// Per-row normalization to zero mean and unit variance, then `* g + b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let (m, n) = self.rows_cols(x);
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[g.0].value;
        let bv = &self.nodes[b.0].value;
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        let nn = T::of(n as f64);
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let rs = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv[c] + bv[c];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(x) || self.ng(g) || self.ng(b);
        self.push(out, shape, Op::LayerNorm { x, g, b, xhat, rstd }, ng)
    }

    /// Inverted dropout; rate 0 returns `x` unchanged.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.nodes[x.0].value.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out = self.nodes[x.0].value.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(x);
        self.push(out, shape, Op::Dropout { x, mask }, ng)
    }

    /// Multi-head scaled dot-product attention. `q` is `[batch*q_len, d]`,
    /// `k` and `v` are `[batch*k_len, d]`; heads split `d` into equal slices.
    /// Masked keys get exactly zero weight; a query with no visible key
    /// outputs zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let AttentionSpec { batch, q_len, k_len, heads, .. } = spec;
        let (_, d) = self.rows_cols(q);
        assert_eq!(d % heads, 0, "model dim divisible by heads");
        assert_eq!(self.nodes[q.0].value.len(), batch * q_len * d);
        assert_eq!(self.nodes[k.0].value.len(), batch * k_len * d);
        assert_eq!(spec.key_padding.len(), batch * k_len);
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * q_len * k_len];
        let mut out = vec![T::zero(); batch * q_len * d];
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        if q_len > 0 && k_len > 0 {
            for b in 0..batch {
                for h in 0..heads {
                    let p = &mut probs[((b * heads + h) * q_len) * k_len..((b * heads + h + 1) * q_len) * k_len];
                    let qo = b * q_len * d + h * dh;
                    let ko = b * k_len * d + h * dh;
                    T::gemm(q_len, dh, k_len, scale, &qv[qo..], d, 1, &kv[ko..], 1, d, T::zero(), p, k_len, 1);
                    for i in 0..q_len {
                        let row = &mut p[i * k_len..(i + 1) * k_len];
                        let mut max = T::neg_infinity();
                        for (j, s) in row.iter_mut().enumerate() {
                            if spec.key_padding[b * k_len + j] || (spec.causal && j > i) {
                                *s = T::neg_infinity();
                            } else if *s > max {
                                max = *s;
                            }
                        }
                        if max == T::neg_infinity() {
                            row.iter_mut().for_each(|s| *s = T::zero());
                            continue;
                        }
                        let mut sum = T::zero();
                        for s in row.iter_mut() {
                            *s = if *s == T::neg_infinity() { T::zero() } else { (*s - max).exp() };
                            sum += *s;
                        }
                        row.iter_mut().for_each(|s| *s /= sum);
                    }
                    T::gemm(q_len, k_len, dh, T::one(), p, k_len, 1, &vv[ko..], d, 1, T::zero(), &mut out[qo..], d, 1);
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, vec![batch * q_len, d], Op::Attention { q, k, v, spec, probs }, ng)
    }

    /// Attention weights `[batch, heads, q_len, k_len]` of an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean token cross-entropy over rows whose target is not `None`.
    /// With no counted rows the loss is 0 and no gradient flows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let (m, n) = self.rows_cols(logits);
        assert_eq!(targets.len(), m, "one target per row");
        let lv = &self.nodes[logits.0].value;
        let mut probs = vec![T::zero(); m * n];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            assert!(t < n, "target {t} out of range {n}");
            let row = &lv[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[r * n..(r + 1) * n];
            let mut sum = T::zero();
            for (pp, &x) in p.iter_mut().zip(row) {
                *pp = (x - max).exp();
                sum += *pp;
            }
            p.iter_mut().for_each(|pp| *pp /= sum);
            total += (sum.ln() + max - row[t]).f64();
            count += 1;
        }
        let loss = if count == 0 { T::zero() } else { T::of(total / count as f64) };
        let ng = self.ng(logits);
        self.push(vec![loss], vec![1], Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![s], vec![1], Op::Sum { x }, ng)
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Back-propagates a scalar and adds parameter gradients into `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (&pid, &var) in &self.params {
            if let Some(g) = &grads[var.0] {
                let p = store.get_mut(pid);
                if !p.trainable {
                    continue;
                }
                let pg = p.tensor.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
                pg.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let len = nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let d = node.shape[1];
                acc(*x, &mut |gx| {
                    for (r, &src) in rows.iter().enumerate() {
                        let dst = &mut gx[src * d..(src + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
                    }
                });
            }
            Op::MatMul { a, b, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let one = T::one();
                if *trans_b {
                    // c = a bᵀ: da = g b, db = gᵀ a
                    acc(*a, &mut |ga| T::gemm(m, n, k, one, g, n, 1, bv, k, 1, one, ga, k, 1));
                    acc(*b, &mut |gb| T::gemm(n, m, k, one, g, 1, n, av, k, 1, one, gb, k, 1));
                } else {
                    // c = a b: da = g bᵀ, db = aᵀ g
                    acc(*a, &mut |ga| T::gemm(m, n, k, one, g, n, 1, bv, 1, n, one, ga, k, 1));
                    acc(*b, &mut |gb| T::gemm(k, m, n, one, av, 1, k, g, n, 1, one, gb, n, 1));
                }
            }
            Op::Add { a, b } => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(bv).for_each(|((x, &y), &z)| *x += y * z));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).zip(av).for_each(|((x, &y), &z)| *x += y * z));
            }
            Op::Scale { x, s } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *s));
            }
            Op::AddBias { x, b } => {
                let n = nodes[b.0].value.len();
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, &bb)| *a += bb));
                acc(*b, &mut |gb| {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, &bb)| *a += bb);
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |gx| gx.iter_mut().zip(g).zip(xv).for_each(|((a, &b), &v)| *a += b * gelu_grad(v)));
            }
            Op::LayerNorm { x, g: gain, b, xhat, rstd } => {
                let n = nodes[gain.0].value.len();
                let gv = &nodes[gain.0].value;
                acc(*gain, &mut |gg| {
                    for (row_g, row_h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += row_g[c] * row_h[c];
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for row_g in g.chunks(n) {
                        gb.iter_mut().zip(row_g).for_each(|(a, &bb)| *a += bb);
                    }
                });
                acc(*x, &mut |gx| {
                    let nn = T::of(n as f64);
                    for (r, ((row_gx, row_g), row_h)) in gx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dhh = T::zero();
                        for c in 0..n {
                            let dh = row_g[c] * gv[c];
                            mean_dh += dh;
                            mean_dhh += dh * row_h[c];
                        }
                        mean_dh /= nn;
                        mean_dhh /= nn;
                        for c in 0..n {
                            let dh = row_g[c] * gv[c];
                            row_gx[c] += rstd[r] * (dh - mean_dh - row_h[c] * mean_dhh);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).zip(mask).for_each(|((a, &b), &m)| *a += b * m));
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(g, *q, *k, *v, spec, probs, grads);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count == 0 {
                    return;
                }
                let n = nodes[logits.0].shape.last().copied().unwrap_or(1);
                let scale = g[0] / T::of(*count as f64);
                acc(*logits, &mut |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut gl[r * n..(r + 1) * n];
                        for (c, x) in row.iter_mut().enumerate() {
                            let p = probs[r * n + c];
                            *x += scale * if c == t { p - T::one() } else { p };
                        }
                    }
                });
            }
            Op::Sum { x } => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let AttentionSpec { batch, q_len, k_len, heads, .. } = *spec;
        if q_len == 0 || k_len == 0 {
            return;
        }
        let d = self.nodes[q.0].shape[1];
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let mut gq = vec![T::zero(); qv.len()];
        let mut gk = vec![T::zero(); kv.len()];
        let mut gv = vec![T::zero(); vv.len()];
        let mut dp = vec![T::zero(); q_len * k_len];
        let one = T::one();
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[((b * heads + h) * q_len) * k_len..((b * heads + h + 1) * q_len) * k_len];
                let qo = b * q_len * d + h * dh;
                let ko = b * k_len * d + h * dh;
                // dP = dO Vᵀ
                T::gemm(q_len, dh, k_len, one, &g[qo..], d, 1, &vv[ko..], 1, d, T::zero(), &mut dp, k_len, 1);
                // dV += Pᵀ dO
                T::gemm(k_len, q_len, dh, one, p, 1, k_len, &g[qo..], d, 1, one, &mut gv[ko..], d, 1);
                // dS = P ∘ (dP − rowsum(dP ∘ P))
                for i in 0..q_len {
                    let pr = &p[i * k_len..(i + 1) * k_len];
                    let dr = &mut dp[i * k_len..(i + 1) * k_len];
                    let s: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    dr.iter_mut().zip(pr).for_each(|(x, &pp)| *x = pp * (*x - s));
                }
                T::gemm(q_len, k_len, dh, scale, &dp, k_len, 1, &kv[ko..], d, 1, one, &mut gq[qo..], d, 1);
                T::gemm(k_len, q_len, dh, scale, &dp, 1, k_len, &qv[qo..], d, 1, one, &mut gk[ko..], d, 1);
            }
        }
        for (var, gx) in [(q, gq), (k, gk), (v, gv)] {
            if !self.nodes[var.0].needs_grad {
                continue;
            }
            match &mut grads[var.0] {
                Some(buf) => buf.iter_mut().zip(&gx).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(gx),
            }
        }
    }
}

#[cfg(test)]
mod tests;
