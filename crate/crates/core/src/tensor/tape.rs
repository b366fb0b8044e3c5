use std::collections::HashMap;

use rand::Rng;

use super::{
    matmul_into, matmul_nt_into, matmul_tn_into, softmax_rows, ParamId, ParamStore, Tensor,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    VStack(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    BlockLeftMatMul {
        a: Var,
        x: Var,
    },
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        q_len: usize,
        m_len: usize,
        /// Softmax weights, one `q_len × m_len` block per sequence.
        weights: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of primitive operations.
///
/// Nodes are stored in creation order, so every operation's inputs precede
/// it and a reverse sweep is a valid topological traversal.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter on `tape`; zeros when it did not influence the loss.
    pub fn param_grad(&self, tape: &Tape<T>, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        let mut out = Tensor::zeros(store.get(id).value.shape());
        if let Some(&v) = tape.params.get(&id) {
            if let Some(g) = self.get(v) {
                out.add_assign(g);
            }
        }
        out
    }

    /// Adds every parameter gradient into `store`. Repeated backward passes
    /// without [`ParamStore::zero_grad`] accumulate.
    pub fn accumulate_into(&self, tape: &Tape<T>, store: &mut ParamStore<T>) {
        let mut ids: Vec<_> = tape.params.iter().collect();
        ids.sort_by_key(|(id, _)| **id);
        for (&id, &v) in ids {
            if let Some(g) = self.get(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable leaf that is not backed by a parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a parameter onto the tape. Repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).value.clone(),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Adds a `1×n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.rows_cols(x);
        let (br, bc) = self.rows_cols(bias);
        if br != 1 || bc != n {
            return Err(Error::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..m {
            for (o, bv) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&b) {
                *o += *bv;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = super::relu(self.value(x));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x), &[x])
    }

    /// Row-wise layer normalization with learned `1×n` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (m, n) = self.rows_cols(x);
        for p in [gamma, beta] {
            let (r, c) = self.rows_cols(p);
            if r != 1 || c != n {
                return Err(Error::dim("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let nf = T::from_count(n);
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout. With `rate == 0` the input is returned unchanged.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: T, rng: &mut R) -> Var {
        if rate <= T::zero() {
            return x;
        }
        let keep = T::one() - rate;
        let scale = T::one() / keep;
        let keep_f = keep.as_f64();
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep_f { scale } else { T::zero() })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let m = self.rows_cols(first).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.rows_cols(p).1).collect();
        for &p in parts {
            if self.rows_cols(p).0 != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::new(vec![m, total], out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rows_cols(x);
        if start + len > n {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], out)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rows_cols(x);
        if start + len > m {
            return Err(Error::dim("slice_rows", self.shape(x), &[start, len]));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], out)?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("vstack of nothing".into()))?;
        let n = self.rows_cols(first).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != n {
                return Err(Error::dim("vstack", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            m += r;
        }
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::VStack(parts.to_vec()), parts))
    }

    /// `out[r] = x[index[r]]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.rows_cols(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::dim("gather_rows", self.shape(x), &[bad]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(vec![index.len(), n], out)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Applies a square `a[N×N]` to each consecutive `N`-row block of `x`.
    pub fn block_left_matmul(&mut self, a: Var, x: Var) -> Result<Var> {
        let (n, n2) = self.rows_cols(a);
        let (m, f) = self.rows_cols(x);
        if n != n2 || n == 0 || m % n != 0 {
            return Err(Error::dim("block_left_matmul", self.shape(a), self.shape(x)));
        }
        let av = self.value(a).data();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); m * f];
        for b in 0..m / n {
            let span = b * n * f..(b + 1) * n * f;
            matmul_into(av, &xv[span.clone()], &mut out[span], n, n, f);
        }
        let out = Tensor::new(vec![m, f], out)?;
        Ok(self.push(out, Op::BlockLeftMatMul { a, x }, &[a, x]))
    }

    /// Scaled dot-product attention applied independently to each of the
    /// `B` sequences stacked in `q` (`B·q_len` rows) and `k`, `v`
    /// (`B·m_len` rows).
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, q_len: usize, m_len: usize) -> Result<Var> {
        let (qr, d) = self.rows_cols(q);
        let (kr, dk) = self.rows_cols(k);
        let (vr, dv) = self.rows_cols(v);
        if d == 0 || d != dk || kr != vr || q_len == 0 || m_len == 0 || qr % q_len != 0 || kr % m_len != 0 || qr / q_len != kr / m_len {
            return Err(Error::dim("block_attention", self.shape(q), self.shape(k)));
        }
        let batches = qr / q_len;
        let scale = T::one() / T::from_count(d).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut weights = vec![T::zero(); batches * q_len * m_len];
        let mut out = vec![T::zero(); qr * dv];
        for b in 0..batches {
            let w = &mut weights[b * q_len * m_len..(b + 1) * q_len * m_len];
            let kb = &kv[b * m_len * d..(b + 1) * m_len * d];
            matmul_nt_into(&qv[b * q_len * d..(b + 1) * q_len * d], kb, w, q_len, d, m_len);
            for row in w.chunks_mut(m_len) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for x in row.iter_mut() {
                    *x = ((*x - max) * scale).exp();
                    total += *x;
                }
                for x in row.iter_mut() {
                    *x /= total;
                }
            }
            let vb = &vv[b * m_len * dv..(b + 1) * m_len * dv];
            matmul_into(w, vb, &mut out[b * q_len * dv..(b + 1) * q_len * dv], q_len, m_len, dv);
        }
        let out = Tensor::new(vec![qr, dv], out)?;
        Ok(self.push(
            out,
            Op::BlockAttention {
                q,
                k,
                v,
                q_len,
                m_len,
                weights,
            },
            &[q, k, v],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_count(t.len());
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean squared error between two equally shaped values.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.rows_cols(*a);
                let n = self.rows_cols(*b).1;
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_nt_into(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_tn_into(self.value(*a).data(), gd, &mut db, k, m, n);
                    let shape = self.shape(*b).to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b);
                    let d = gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(bv.shape().to_vec(), d).unwrap());
                }
                if self.needs(*b) {
                    let av = self.value(*a);
                    let d = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(av.shape().to_vec(), d).unwrap());
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*bias) {
                    let (m, n) = (g.rows(), g.cols());
                    let mut db = vec![T::zero(); n];
                    for i in 0..m {
                        for (d, &v) in db.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                            *d += v;
                        }
                    }
                    let shape = self.shape(*bias).to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, db).unwrap());
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let yd = y.data();
                let mut d = vec![T::zero(); m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot: T = gd[r.clone()].iter().zip(&yd[r.clone()]).map(|(&a, &b)| a * b).sum();
                    for j in r {
                        d[j] = yd[j] * (gd[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::Transpose(x) => {
                let t = g.transpose();
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, t.reshape(shape).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = (g.rows(), g.cols());
                let gam = self.value(*gamma).data();
                let nf = T::from_count(n);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); m * n];
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in r.clone() {
                            let dh = gd[j] * gam[j - i * n];
                            mean_d += dh;
                            mean_dx += dh * xhat[j];
                        }
                        mean_d /= nf;
                        mean_dx /= nf;
                        for j in r {
                            let dh = gd[j] * gam[j - i * n];
                            dx[j] = inv_std[i] * (dh - mean_d - xhat[j] * mean_dx);
                        }
                    }
                    let shape = self.shape(*x).to_vec();
                    self.accumulate(grads, *x, Tensor::new(shape, dx).unwrap());
                }
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        dg[j] += gd[i * n + j] * xhat[i * n + j];
                        db[j] += gd[i * n + j];
                    }
                }
                let gs = self.shape(*gamma).to_vec();
                let bs = self.shape(*beta).to_vec();
                self.accumulate(grads, *gamma, Tensor::new(gs, dg).unwrap());
                self.accumulate(grads, *beta, Tensor::new(bs, db).unwrap());
            }
            Op::Dropout { x, mask } => {
                let d = gd.iter().zip(mask).map(|(&a, &b)| a * b).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (g.rows(), g.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = self.rows_cols(p).1;
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![m, w], d).unwrap());
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.rows_cols(*x);
                let len = g.cols();
                let mut d = vec![T::zero(); m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, d).unwrap());
            }
            Op::SliceRows { x, start } => {
                let (m, n) = self.rows_cols(*x);
                let mut d = vec![T::zero(); m * n];
                d[start * n..start * n + gd.len()].copy_from_slice(gd);
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, d).unwrap());
            }
            Op::VStack(parts) => {
                let n = g.cols();
                let mut row = 0;
                for &p in parts {
                    let r = self.rows_cols(p).0;
                    if self.needs(p) {
                        let d = gd[row * n..(row + r) * n].to_vec();
                        let shape = self.shape(p).to_vec();
                        self.accumulate(grads, p, Tensor::new(shape, d).unwrap());
                    }
                    row += r;
                }
            }
            Op::GatherRows { x, index } => {
                let (m, n) = self.rows_cols(*x);
                let mut d = vec![T::zero(); m * n];
                for (r, &src) in index.iter().enumerate() {
                    for j in 0..n {
                        d[src * n + j] += gd[r * n + j];
                    }
                }
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, d).unwrap());
            }
            Op::BlockLeftMatMul { a, x } => {
                let n = self.rows_cols(*a).0;
                let (m, f) = self.rows_cols(*x);
                let blocks = m / n;
                let av = self.value(*a).data();
                let xv = self.value(*x).data();
                if self.needs(*a) {
                    let mut da = vec![T::zero(); n * n];
                    for b in 0..blocks {
                        let span = b * n * f..(b + 1) * n * f;
                        matmul_nt_into(&gd[span.clone()], &xv[span], &mut da, n, f, n);
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![n, n], da).unwrap());
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); m * f];
                    for b in 0..blocks {
                        let span = b * n * f..(b + 1) * n * f;
                        matmul_tn_into(av, &gd[span.clone()], &mut dx[span], n, n, f);
                    }
                    let shape = self.shape(*x).to_vec();
                    self.accumulate(grads, *x, Tensor::new(shape, dx).unwrap());
                }
            }
            Op::BlockAttention {
                q,
                k,
                v,
                q_len,
                m_len,
                weights,
            } => {
                let (q_len, m_len) = (*q_len, *m_len);
                let (qr, d) = self.rows_cols(*q);
                let dv = self.rows_cols(*v).1;
                let scale = T::one() / T::from_count(d).sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let batches = qr / q_len;
                let mut dq = vec![T::zero(); qr * d];
                let mut dk = vec![T::zero(); batches * m_len * d];
                let mut dvv = vec![T::zero(); batches * m_len * dv];
                let mut ds = vec![T::zero(); q_len * m_len];
                for b in 0..batches {
                    let w = &weights[b * q_len * m_len..(b + 1) * q_len * m_len];
                    let go = &gd[b * q_len * dv..(b + 1) * q_len * dv];
                    let (qs, ms) = (b * q_len * d..(b + 1) * q_len * d, b * m_len * d..(b + 1) * m_len * d);
                    let vs = b * m_len * dv..(b + 1) * m_len * dv;
                    matmul_tn_into(w, go, &mut dvv[vs.clone()], m_len, q_len, dv);
                    ds.iter_mut().for_each(|x| *x = T::zero());
                    matmul_nt_into(go, &vv[vs], &mut ds, q_len, dv, m_len);
                    for (drow, wrow) in ds.chunks_mut(m_len).zip(w.chunks(m_len)) {
                        let dot: T = drow.iter().zip(wrow).map(|(&a, &p)| a * p).sum();
                        for (x, &p) in drow.iter_mut().zip(wrow) {
                            *x = p * (*x - dot) * scale;
                        }
                    }
                    matmul_into(&ds, &kv[ms.clone()], &mut dq[qs.clone()], q_len, m_len, d);
                    matmul_tn_into(&ds, &qv[qs], &mut dk[ms], m_len, q_len, d);
                }
                for (var, data) in [(*q, dq), (*k, dk), (*v, dvv)] {
                    if self.needs(var) {
                        let shape = self.shape(var).to_vec();
                        self.accumulate(grads, var, Tensor::new(shape, data).unwrap());
                    }
                }
            }
            Op::Sum(x) => {
                let s = g.item();
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::filled(&shape, s));
            }
            Op::Mean(x) => {
                let shape = self.shape(*x).to_vec();
                let s = g.item() / T::from_count(shape.iter().product());
                self.accumulate(grads, *x, Tensor::filled(&shape, s));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row_vector(&[1.0, -2.0])).unwrap();
        let unused = store.add("u", Tensor::row_vector(&[3.0])).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let _ = tape.param(&store, unused);
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        grads.accumulate_into(&tape, &mut store);
        assert_eq!(store.get(w).grad.data(), &[2.0, -4.0]);
        assert_eq!(store.get(unused).grad.data(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::row_vector(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        // loss = sum(w) + sum(w ⊙ w) uses w twice
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row_vector(&[0.5, 3.0])).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let s1 = tape.sum(wv);
        let sq = tape.mul(wv, wv).unwrap();
        let s2 = tape.sum(sq);
        let s = tape.vstack(&[s1, s2]).unwrap();
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.param_grad(&tape, &store, w).data(), &[2.0, 7.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&mut rng, 4, 3)).unwrap();
        let x = rand_tensor(&mut rng, 5, 4);
        let run = |store: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param(store, w);
            let h = tape.matmul(xv, wv).unwrap();
            let s = tape.softmax_rows(h);
            let loss = tape.sum(s);
            let l2 = tape.mul(loss, loss).unwrap();
            tape.backward(l2).unwrap().param_grad(&tape, store, w)
        };
        assert_eq!(run(&store).data(), run(&store).data());
    }

    /// Every primitive against central differences.
    #[test]
    fn primitives_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(&mut rng, 4, 3)).unwrap();
        let b = store.add("b", rand_tensor(&mut rng, 3, 4)).unwrap();
        let gamma = store.add("gamma", rand_tensor(&mut rng, 1, 4)).unwrap();
        let beta = store.add("beta", rand_tensor(&mut rng, 1, 4)).unwrap();
        let adj = store.add("adj", rand_tensor(&mut rng, 2, 2)).unwrap();
        let target = rand_tensor(&mut rng, 4, 4);

        let build = |tape: &mut Tape<f64>, store: &ParamStore<f64>| -> Result<Var> {
            let av = tape.param(store, a);
            let bv = tape.param(store, b);
            let ab = tape.matmul(av, bv)?;
            let t = tape.transpose(ab);
            let sm = tape.softmax_rows(t);
            let g = tape.param(store, gamma);
            let be = tape.param(store, beta);
            let ln = tape.layer_norm(sm, g, be, 1e-5)?;
            let r = tape.relu(ln);
            let ab2 = tape.add_row(r, be)?;
            let adjv = tape.param(store, adj);
            let bl = tape.block_left_matmul(adjv, ab2)?;
            let left = tape.slice_cols(bl, 0, 2)?;
            let right = tape.slice_cols(bl, 2, 2)?;
            let sw = tape.concat_cols(&[right, left])?;
            let top = tape.slice_rows(sw, 0, 2)?;
            let bot = tape.slice_rows(sw, 2, 2)?;
            let st = tape.vstack(&[bot, top])?;
            let gathered = tape.gather_rows(st, &[3, 0, 0, 1])?;
            let scaled = tape.scale(gathered, 0.7);
            let tv = tape.constant(target.clone());
            let prod = tape.mul(scaled, tv)?;
            let mixed = tape.add(prod, scaled)?;
            tape.mse(mixed, tv)
        };
        for id in [a, b, gamma, beta, adj] {
            let err = finite_difference_check(&mut store, id, 1e-5, build).unwrap();
            assert!(err < 1e-6, "{}: {err}", store.get(id).name);
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_scaling_is_inverted() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::filled(&[100, 10], 1.0));
        assert_eq!(tape.dropout(x, 0.0, &mut rng), x);
        let d = tape.dropout(x, 0.5, &mut rng);
        let v = tape.value(d);
        assert!(v.data().iter().all(|&e| e == 0.0 || e == 2.0));
        let kept = v.data().iter().filter(|&&e| e > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    proptest::proptest! {
        /// grad(f + g) = grad(f) + grad(g) for independent tapes.
        #[test]
        fn gradient_is_linear_in_the_loss(vals in proptest::collection::vec(-2.0f64..2.0, 6)) {
            let mut store = ParamStore::new();
            let w = store.add("w", Tensor::new(vec![2, 3], vals).unwrap()).unwrap();
            let f = |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
                let v = tape.param(store, w);
                let s = tape.softmax_rows(v);
                tape.sum(s)
            };
            let g = |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
                let v = tape.param(store, w);
                let r = tape.relu(v);
                let sq = tape.mul(r, v).unwrap();
                tape.sum(sq)
            };
            let grad_of = |which: u8| {
                let mut tape = Tape::new();
                let loss = match which {
                    0 => f(&mut tape, &store),
                    1 => g(&mut tape, &store),
                    _ => {
                        let a = f(&mut tape, &store);
                        let b = g(&mut tape, &store);
                        tape.add(a, b).unwrap()
                    }
                };
                tape.backward(loss).unwrap().param_grad(&tape, &store, w)
            };
            let (gf, gg, gfg) = (grad_of(0), grad_of(1), grad_of(2));
            for i in 0..6 {
                proptest::prop_assert!((gfg.data()[i] - gf.data()[i] - gg.data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_attention_matches_per_sequence_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (batches, q_len, m_len, d, dv) = (3, 2, 4, 3, 5);
        let mut store = ParamStore::new();
        let q = store.add("q", rand_tensor(&mut rng, batches * q_len, d)).unwrap();
        let k = store.add("k", rand_tensor(&mut rng, batches * m_len, d)).unwrap();
        let v = store.add("v", rand_tensor(&mut rng, batches * m_len, dv)).unwrap();
        let target = rand_tensor(&mut rng, batches * q_len, dv);

        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.param(&store, q), tape.param(&store, k), tape.param(&store, v));
        let fused = tape.block_attention(qv, kv, vv, q_len, m_len).unwrap();
        for b in 0..batches {
            let qs = tape.slice_rows(qv, b * q_len, q_len).unwrap();
            let ks = tape.slice_rows(kv, b * m_len, m_len).unwrap();
            let vs = tape.slice_rows(vv, b * m_len, m_len).unwrap();
            let kt = tape.transpose(ks);
            let logits = tape.matmul(qs, kt).unwrap();
            let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt());
            let w = tape.softmax_rows(scaled);
            let out = tape.matmul(w, vs).unwrap();
            let got = &tape.value(fused).data()[b * q_len * dv..(b + 1) * q_len * dv];
            for (a, e) in got.iter().zip(tape.value(out).data()) {
                assert!((a - e).abs() < 1e-14);
            }
        }

        let build = |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
            let (qv, kv, vv) = (tape.param(store, q), tape.param(store, k), tape.param(store, v));
            let out = tape.block_attention(qv, kv, vv, q_len, m_len)?;
            let t = tape.constant(target.clone());
            tape.mse(out, t)
        };
        for id in [q, k, v] {
            let err = finite_difference_check(&mut store, id, 1e-5, build).unwrap();
            assert!(err < 1e-6, "{}: {err}", store.get(id).name);
        }
        let mut tape = Tape::new();
        let (qv, kv) = (tape.param(&store, q), tape.param(&store, k));
        assert!(tape.block_attention(qv, kv, kv, 4, m_len).is_err());
    }
}
