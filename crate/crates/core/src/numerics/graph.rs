//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. Nodes are appended in execution order, so walking
//! the tape backwards is a reverse topological traversal and each node is
//! visited exactly once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{config_err, data_err, Result};
use crate::scalar::Scalar;

/// Additive logit value used for masked attention entries.
pub const MASK_SENTINEL: f64 = -1e9;

/// Probabilities are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the loss.
pub const BCE_CLAMP: f64 = 1e-7;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
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
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Linear(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        alpha: T,
    },
    Transpose(Var),
    SplitHeads(Var),
    MergeHeads(Var, usize),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Dropout(Var, Vec<T>),
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Concat(Var, Var),
    AttentionBias(Var),
    HeadScaledBias {
        x: Var,
        rates: Var,
        basis: Tensor<T>,
    },
    Bce {
        p: Var,
        targets: Vec<T>,
        mask: Vec<T>,
    },
    SumAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    training: bool,
    rng: ChaCha8Rng,
    masked_rows: usize,
}

/// Gradients of a scalar output with respect to every node that needs one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_same(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(config_err!("{what}: shape mismatch {a:?} vs {b:?}"));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    /// Inference graph: dropout is the identity.
    pub fn eval() -> Self {
        Self::new(false, 0)
    }

    /// Training graph whose dropout masks are drawn from `seed`.
    pub fn train(seed: u64) -> Self {
        Self::new(true, seed)
    }

    pub fn new(training: bool, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            masked_rows: 0,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Softmax rows so far whose every entry was masked (returned as zeros).
    pub fn masked_rows(&self) -> usize {
        self.masked_rows
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.shape(a), self.shape(b), "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x[..., n] + b[n]`, broadcasting `b` over the leading dimensions.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(b).len() != n {
            return Err(config_err!(
                "add_bias: bias of {} values for last dim {n}",
                self.value(b).len()
            ));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.shape(a), self.shape(b), "mul")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `x[..., k] · w[k, n] -> [..., n]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(config_err!("matmul: inner dims differ, {xs:?} · {ws:?}"));
        }
        let (k, n) = (ws[0], ws[1]);
        let rows = self.value(x).rows();
        let mut out = vec![T::zero(); rows * n];
        T::gemm(
            rows,
            k,
            n,
            T::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            T::zero(),
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear(x, w), rg))
    }

    /// Plain 2-D product `a[m, k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(config_err!("matmul expects a matrix, got {:?}", self.shape(a)));
        }
        self.linear(a, b)
    }

    /// Batched product over leading dimensions: `alpha · a[.., m, k] · b[.., k, n]`,
    /// or `alpha · a · bᵀ` with `b` stored as `[.., n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool, alpha: T) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(config_err!("bmm: incompatible batch dims {sa:?} vs {sb:?}"));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(config_err!("bmm: inner dims differ, {sa:?} · {sb:?}"));
        }
        let groups: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); groups * m * n];
        let da = self.value(a).data();
        let db = self.value(b).data();
        for g in 0..groups {
            T::gemm(
                m,
                k,
                n,
                alpha,
                &da[g * m * k..(g + 1) * m * k],
                false,
                &db[g * k * n..(g + 1) * k * n],
                trans_b,
                T::zero(),
                &mut out[g * m * n..(g + 1) * m * n],
            );
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                alpha,
            },
            rg,
        ))
    }

    /// Swap the last two dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(config_err!("transpose needs rank >= 2, got {s:?}"));
        }
        let out = transpose_last2(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    /// `[B, L, h·dk] -> [B, h, L, dk]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(config_err!("split_heads: {s:?} into {heads} heads"));
        }
        let out = split_heads(self.value(x), heads);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SplitHeads(x), rg))
    }

    /// `[B, h, L, dk] -> [B, L, h·dk]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(config_err!("merge_heads: expected rank 4, got {s:?}"));
        }
        let out = merge_heads(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(out, Op::MergeHeads(x, s[1]), rg))
    }

    /// Numerically stable softmax over the last dimension.
    ///
    /// Entries at or below half the mask sentinel are treated as masked and
    /// get exactly zero weight. A row with every entry masked becomes all
    /// zeros and is counted in [`Graph::masked_rows`].
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let (out, flagged) = softmax_rows(self.value(x));
        self.masked_rows += flagged;
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last dimension followed by `gain`/`bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(config_err!("layernorm: affine params must have {n} values"));
        }
        let eps = T::of(LAYERNORM_EPS);
        let nf = T::of(n as f64);
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.rows();
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..n {
                let h = (row[i] - mean) * rs;
                xhat[r * n + i] = h;
                out[r * n + i] = h * g[i] + b[i];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Inverted dropout. Identity (no node recorded) outside training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(config_err!("dropout probability {p} outside [0, 1)"));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout(x, mask), rg))
    }

    /// Gather rows of `table[V, d]`; the result has shape `[index_shape.., d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(config_err!("embedding table must be 2-D, got {ts:?}"));
        }
        if index_shape.iter().product::<usize>() != indices.len() {
            return Err(config_err!("embedding: index shape {index_shape:?} vs {} indices", indices.len()));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(data_err!("embedding index {bad} outside table of {vocab} rows"));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_lastdim(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(config_err!("concat: leading dims differ, {sa:?} vs {sb:?}"));
        }
        let (na, nb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = self.value(a).rows();
        let mut out = Vec::with_capacity(rows * (na + nb));
        for r in 0..rows {
            out.extend_from_slice(&self.value(a).data()[r * na..(r + 1) * na]);
            out.extend_from_slice(&self.value(b).data()[r * nb..(r + 1) * nb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = na + nb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(a, b), rg))
    }

    /// `logits[B, h, L, L] + bias[B, L, L]`, the same bias for every head.
    pub fn add_attention_bias(&mut self, logits: Var, bias: &Tensor<T>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 4 || bias.shape() != [s[0], s[2], s[3]] {
            return Err(config_err!("attention bias {:?} does not fit logits {s:?}", bias.shape()));
        }
        let mut out = self.value(logits).clone();
        let plane = s[2] * s[3];
        let bd = bias.data();
        for (g, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let b = g / s[1];
            for (o, &v) in chunk.iter_mut().zip(&bd[b * plane..(b + 1) * plane]) {
                *o = *o + v;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(out, Op::AttentionBias(logits), rg))
    }

    /// `logits[B, h, L, L] + rates[h] · basis[B, L, L]`, differentiable in `rates`.
    pub fn add_head_scaled_bias(&mut self, logits: Var, rates: Var, basis: &Tensor<T>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 4 || basis.shape() != [s[0], s[2], s[3]] || self.value(rates).len() != s[1] {
            return Err(config_err!(
                "head-scaled bias: logits {s:?}, rates {:?}, basis {:?}",
                self.shape(rates),
                basis.shape()
            ));
        }
        let heads = s[1];
        let plane = s[2] * s[3];
        let mut out = self.value(logits).clone();
        let rv = self.value(rates).data().to_vec();
        let bd = basis.data();
        for (g, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let (b, h) = (g / heads, g % heads);
            for (o, &v) in chunk.iter_mut().zip(&bd[b * plane..(b + 1) * plane]) {
                *o = *o + rv[h] * v;
            }
        }
        let rg = self.rg(logits) || self.rg(rates);
        Ok(self.push(
            out,
            Op::HeadScaledBias {
                x: logits,
                rates,
                basis: basis.clone(),
            },
            rg,
        ))
    }

    /// Masked binary cross-entropy summed over valid entries.
    ///
    /// Returns the scalar sum node and the number of valid entries.
    pub fn bce(&mut self, p: Var, targets: &[T], mask: &[T]) -> Result<(Var, usize)> {
        let n = self.value(p).len();
        if targets.len() != n || mask.len() != n {
            return Err(config_err!("bce: {n} predictions, {} targets, {} mask", targets.len(), mask.len()));
        }
        let valid = mask.iter().filter(|&&m| m > T::zero()).count();
        if valid == 0 {
            return Err(data_err!("bce: mask selects no positions, nothing to supervise"));
        }
        let lo = T::of(BCE_CLAMP);
        let hi = T::one() - lo;
        let mut total = T::zero();
        for ((&pv, &a), &m) in self.value(p).data().iter().zip(targets).zip(mask) {
            if m > T::zero() {
                let q = pv.max(lo).min(hi);
                total = total - m * (a * q.ln() + (T::one() - a) * (T::one() - q).ln());
            }
        }
        let rg = self.rg(p);
        let v = self.push(
            Tensor::scalar(total),
            Op::Bce {
                p,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            rg,
        );
        Ok((v, valid))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Back-propagate from a single-element node.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(config_err!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::new(self.shape(output), vec![T::one()])?);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape must equal value shape");
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::AddBias(x, b) => {
                self.accum(grads, *x, g.clone());
                if self.rg(*b) {
                    let n = g.last_dim();
                    let mut gb = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    self.accum(grads, *b, Tensor::new(self.shape(*b), gb).unwrap());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *a, Tensor::new(va.shape(), d).unwrap());
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *b, Tensor::new(vb.shape(), d).unwrap());
                }
            }
            Op::Scale(x, c) => self.accum(grads, *x, g.map(|v| v * *c)),
            Op::Reshape(x) => {
                let shaped = g.clone().reshape(self.shape(*x)).unwrap();
                self.accum(grads, *x, shaped);
            }
            Op::Linear(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (k, n) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.rows();
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); rows * k];
                    T::gemm(rows, n, k, T::one(), g.data(), false, vw.data(), true, T::zero(), &mut dx);
                    self.accum(grads, *x, Tensor::new(vx.shape(), dx).unwrap());
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    T::gemm(k, rows, n, T::one(), vx.data(), true, g.data(), false, T::zero(), &mut dw);
                    self.accum(grads, *w, Tensor::new(vw.shape(), dw).unwrap());
                }
            }
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                alpha,
            } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let sa = va.shape();
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = g.shape()[r - 1];
                let groups = va.len() / (m * k);
                if self.rg(*a) {
                    let mut da = vec![T::zero(); va.len()];
                    for gi in 0..groups {
                        // da = alpha · dc · op(b)ᵀ
                        T::gemm(
                            m,
                            n,
                            k,
                            *alpha,
                            &g.data()[gi * m * n..(gi + 1) * m * n],
                            false,
                            &vb.data()[gi * k * n..(gi + 1) * k * n],
                            !*trans_b,
                            T::zero(),
                            &mut da[gi * m * k..(gi + 1) * m * k],
                        );
                    }
                    self.accum(grads, *a, Tensor::new(sa, da).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); vb.len()];
                    for gi in 0..groups {
                        let ga = &va.data()[gi * m * k..(gi + 1) * m * k];
                        let gc = &g.data()[gi * m * n..(gi + 1) * m * n];
                        let out = &mut db[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            // b stored [n, k]: db = alpha · dcᵀ · a
                            T::gemm(n, m, k, *alpha, gc, true, ga, false, T::zero(), out);
                        } else {
                            // db = alpha · aᵀ · dc
                            T::gemm(k, m, n, *alpha, ga, true, gc, false, T::zero(), out);
                        }
                    }
                    self.accum(grads, *b, Tensor::new(vb.shape(), db).unwrap());
                }
            }
            Op::Transpose(x) => self.accum(grads, *x, transpose_last2(g)),
            Op::SplitHeads(x) => self.accum(grads, *x, merge_heads(g)),
            Op::MergeHeads(x, heads) => self.accum(grads, *x, split_heads(g, *heads)),
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(dx.chunks_mut(n))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for i in 0..n {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                self.accum(grads, *x, Tensor::new(y.shape(), dx).unwrap());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = g.last_dim();
                let gv = self.value(*gain).data();
                let nf = T::of(n as f64);
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![T::zero(); n];
                    let mut db = vec![T::zero(); n];
                    for (gr, hr) in g.data().chunks(n).zip(xhat.chunks(n)) {
                        for i in 0..n {
                            dg[i] = dg[i] + gr[i] * hr[i];
                            db[i] = db[i] + gr[i];
                        }
                    }
                    self.accum(grads, *gain, Tensor::new(&[n], dg).unwrap());
                    self.accum(grads, *bias, Tensor::new(&[n], db).unwrap());
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, ((gr, hr), dr)) in g
                        .data()
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(dx.chunks_mut(n))
                        .enumerate()
                    {
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for i in 0..n {
                            let dh = gr[i] * gv[i];
                            sum_d = sum_d + dh;
                            sum_dh = sum_dh + dh * hr[i];
                        }
                        let scale = rstd[r] / nf;
                        for i in 0..n {
                            let dh = gr[i] * gv[i];
                            dr[i] = scale * (nf * dh - sum_d - hr[i] * sum_dh);
                        }
                    }
                    self.accum(grads, *x, Tensor::new(g.shape(), dx).unwrap());
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accum(grads, *x, Tensor::new(xv.shape(), d).unwrap());
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &s)| gv * s * (T::one() - s))
                    .collect();
                self.accum(grads, *x, Tensor::new(y.shape(), d).unwrap());
            }
            Op::Dropout(x, mask) => {
                let d = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accum(grads, *x, Tensor::new(g.shape(), d).unwrap());
            }
            Op::Embedding { table, indices } => {
                let ts = self.shape(*table);
                let d = ts[1];
                let mut dt = vec![T::zero(); ts[0] * d];
                for (row, &i) in g.data().chunks(d).zip(indices) {
                    for (acc, &v) in dt[i * d..(i + 1) * d].iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                self.accum(grads, *table, Tensor::new(ts, dt).unwrap());
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).last_dim();
                let nb = self.value(*b).last_dim();
                let rows = g.rows();
                let mut ga = Vec::with_capacity(rows * na);
                let mut gb = Vec::with_capacity(rows * nb);
                for row in g.data().chunks(na + nb) {
                    ga.extend_from_slice(&row[..na]);
                    gb.extend_from_slice(&row[na..]);
                }
                self.accum(grads, *a, Tensor::new(self.shape(*a), ga).unwrap());
                self.accum(grads, *b, Tensor::new(self.shape(*b), gb).unwrap());
            }
            Op::AttentionBias(x) => self.accum(grads, *x, g.clone()),
            Op::HeadScaledBias { x, rates, basis } => {
                self.accum(grads, *x, g.clone());
                if self.rg(*rates) {
                    let s = g.shape();
                    let heads = s[1];
                    let plane = s[2] * s[3];
                    let mut dr = vec![T::zero(); heads];
                    for (gi, chunk) in g.data().chunks(plane).enumerate() {
                        let (b, h) = (gi / heads, gi % heads);
                        let basis_b = &basis.data()[b * plane..(b + 1) * plane];
                        let s: T = chunk.iter().zip(basis_b).map(|(&a, &c)| a * c).sum();
                        dr[h] = dr[h] + s;
                    }
                    self.accum(grads, *rates, Tensor::new(self.shape(*rates), dr).unwrap());
                }
            }
            Op::Bce { p, targets, mask } => {
                let up = g.data()[0];
                let lo = T::of(BCE_CLAMP);
                let hi = T::one() - lo;
                let pv = self.value(*p);
                let d = pv
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(mask)
                    .map(|((&q, &a), &m)| {
                        if m <= T::zero() || q < lo || q > hi {
                            T::zero()
                        } else {
                            // d/dq of -(a ln q + (1-a) ln(1-q))
                            up * m * ((T::one() - a) / (T::one() - q) - a / q)
                        }
                    })
                    .collect();
                self.accum(grads, *p, Tensor::new(pv.shape(), d).unwrap());
            }
            Op::SumAll(x) => {
                let up = g.data()[0];
                self.accum(grads, *x, Tensor::full(self.shape(*x), up));
            }
        }
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, usize) {
    let n = x.last_dim();
    let cutoff = T::of(MASK_SENTINEL / 2.0);
    let mut out = vec![T::zero(); x.len()];
    let mut flagged = 0;
    for (xr, or) in x.data().chunks(n).zip(out.chunks_mut(n)) {
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        if max <= cutoff {
            flagged += 1;
            continue;
        }
        let mut total = T::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            if v > cutoff {
                *o = (v - max).exp();
                total = total + *o;
            }
        }
        for o in or.iter_mut() {
            *o = *o / total;
        }
    }
    (Tensor::new(x.shape(), out).unwrap(), flagged)
}

fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let r = s.len();
    let (m, n) = (s[r - 2], s[r - 1]);
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.data().chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(&shape, out).unwrap()
}

fn split_heads<T: Scalar>(x: &Tensor<T>, heads: usize) -> Tensor<T> {
    let s = x.shape();
    let (b, l, d) = (s[0], s[1], s[2]);
    let dk = d / heads;
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for bi in 0..b {
        for t in 0..l {
            for h in 0..heads {
                let from = (bi * l + t) * d + h * dk;
                let to = ((bi * heads + h) * l + t) * dk;
                out[to..to + dk].copy_from_slice(&src[from..from + dk]);
            }
        }
    }
    Tensor::new(&[b, heads, l, dk], out).unwrap()
}

fn merge_heads<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (b, heads, l, dk) = (s[0], s[1], s[2], s[3]);
    let d = heads * dk;
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for bi in 0..b {
        for h in 0..heads {
            for t in 0..l {
                let from = ((bi * heads + h) * l + t) * dk;
                let to = (bi * l + t) * d + h * dk;
                out[to..to + dk].copy_from_slice(&src[from..from + dk]);
            }
        }
    }
    Tensor::new(&[b, l, d], out).unwrap()
}
