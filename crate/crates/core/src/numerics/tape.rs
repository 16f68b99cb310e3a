//! Reverse-mode automatic differentiation over [`Tensor2`] values.
//!
//! A [`Tape`] records each operation with its forward value; [`Tape::backward`]
//! walks the records in reverse. Operations are coarse (a whole causal
//! attention block is one record) so that the tape stays small for the
//! transformer graph.

use super::{
    gelu, gelu_grad, layer_norm_row, log_sum_exp, matmul, matmul_nt, matmul_tn, rotary_rows,
    softmax_in_place, Scalar, Tensor2,
};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape of a batched causal attention block: `batch` sequences of `seq`
/// positions, `heads` query heads reading `groups` key/value heads.
#[derive(Clone, Copy, Debug)]
pub struct AttentionGeometry {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub groups: usize,
    pub head_dim: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(T, T)>,
    },
    Rotary {
        x: Var,
        head_dim: usize,
        positions: Vec<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttentionGeometry,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
}

struct Node<T> {
    name: String,
    value: Tensor2<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2<T> {
        &self.nodes[v.0].value
    }

    /// Short label for error messages: leaf names are kept, interior nodes
    /// are referenced by index.
    fn derived(&self, op: &str, input: Var) -> String {
        match self.nodes[input.0].op {
            Op::Leaf => format!("{op}({})", self.nodes[input.0].name),
            _ => format!("{op}(#{})", input.0),
        }
    }

    fn push(&mut self, name: impl Into<String>, value: Tensor2<T>, op: Op<T>) -> Result<Var> {
        let name = name.into();
        value.ensure_finite(&name)?;
        self.nodes.push(Node { name, value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor2<T>) -> Result<Var> {
        self.push(name, value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let name = self.derived("matmul", b);
        self.push(name, out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension {
                op: "tape add",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor2::from_vec(va.rows(), va.cols(), data)?;
        let name = self.derived("add", a);
        self.push(name, out, Op::Add(a, b))
    }

    /// `x + bias` with `bias` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.len() != vx.cols() {
            return Err(Error::Dimension {
                op: "tape add_bias",
                left: vx.shape(),
                right: vb.shape(),
            });
        }
        let mut out = vx.clone();
        super::add_row_bias(&mut out, vb.data());
        let name = self.derived("bias", bias);
        self.push(name, out, Op::AddBias(x, bias))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * s).collect();
        let out = Tensor2::from_vec(vx.rows(), vx.cols(), data)?;
        let name = self.derived("scale", x);
        self.push(name, out, Op::Scale(x, s))
    }

    /// Sum of all elements, as a 1×1 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum::<T>();
        let name = self.derived("sum", x);
        self.push(name, Tensor2::row(vec![total]), Op::Sum(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor2::from_vec(vx.rows(), vx.cols(), data)?;
        let name = self.derived("gelu", x);
        self.push(name, out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() != vx.cols() || b.len() != vx.cols() {
            return Err(Error::Length {
                op: "tape layer_norm",
                expected: vx.cols(),
                actual: g.len().min(b.len()),
            });
        }
        let mut out = Tensor2::zeros(vx.rows(), vx.cols());
        let mut stats = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            stats.push(layer_norm_row(
                vx.row_slice(r),
                g,
                b,
                eps,
                out.row_slice_mut(r),
            ));
        }
        let name = self.derived("norm", gamma);
        self.push(
            name,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
        )
    }

    /// Rotary on every `head_dim` block; row `r` is at `positions[r]`.
    pub fn rotary(&mut self, x: Var, head_dim: usize, positions: Vec<usize>) -> Result<Var> {
        let mut out = self.value(x).clone();
        if positions.len() != out.rows()
            || !out.cols().is_multiple_of(head_dim)
            || !head_dim.is_multiple_of(2)
        {
            return Err(Error::Length {
                op: "tape rotary",
                expected: out.rows(),
                actual: positions.len(),
            });
        }
        rotary_rows(&mut out, head_dim, &positions, false);
        let name = self.derived("rotary", x);
        self.push(
            name,
            out,
            Op::Rotary {
                x,
                head_dim,
                positions,
            },
        )
    }

    /// Gathers rows of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Tensor2::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(Error::Index {
                    what: "token id",
                    index: id,
                    bound: t.rows(),
                });
            }
            out.row_slice_mut(r).copy_from_slice(t.row_slice(id));
        }
        let name = self.derived("embedding", table);
        self.push(
            name,
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Causal scaled dot-product attention. `q` is `(batch·seq) × (heads·head_dim)`;
    /// `k` and `v` are `(batch·seq) × (groups·head_dim)`; query head `i` reads
    /// key/value head `i / (heads/groups)`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        geom: AttentionGeometry,
    ) -> Result<Var> {
        let AttentionGeometry {
            batch,
            seq,
            heads,
            groups,
            head_dim,
        } = geom;
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let rows = batch * seq;
        if vq.shape() != (rows, heads * head_dim)
            || vk.shape() != (rows, groups * head_dim)
            || vv.shape() != vk.shape()
            || heads % groups != 0
        {
            return Err(Error::Dimension {
                op: "causal_attention",
                left: vq.shape(),
                right: vk.shape(),
            });
        }
        let per_group = heads / groups;
        let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = Tensor2::zeros(rows, heads * head_dim);
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for i in 0..heads {
                let j = i / per_group;
                for t in 0..seq {
                    let qrow = &vq.row_slice(b * seq + t)[i * head_dim..(i + 1) * head_dim];
                    for (u, sc) in scores[..=t].iter_mut().enumerate() {
                        let krow = &vk.row_slice(b * seq + u)[j * head_dim..(j + 1) * head_dim];
                        *sc = super::dot(qrow, krow) * scale;
                    }
                    softmax_in_place(&mut scores[..=t]);
                    let base = ((b * heads + i) * seq + t) * seq;
                    probs[base..base + t + 1].copy_from_slice(&scores[..=t]);
                    let orow =
                        &mut out.row_slice_mut(b * seq + t)[i * head_dim..(i + 1) * head_dim];
                    for (u, &p) in scores[..=t].iter().enumerate() {
                        let vrow = &vv.row_slice(b * seq + u)[j * head_dim..(j + 1) * head_dim];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let name = self.derived("attention", q);
        self.push(
            name,
            out,
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            },
        )
    }

    /// Mean cross-entropy of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let loss = super::cross_entropy(self.value(logits), targets)?;
        self.push(
            "cross_entropy",
            Tensor2::row(vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    /// Entries for values that do not influence `loss` are `None`.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor2<T>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension {
                op: "backward (loss must be scalar)",
                left: self.value(loss).shape(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Tensor2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::row(vec![T::one()]));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            g.ensure_finite(&format!("grad of {}", self.nodes[idx].name))?;
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &Tensor2<T>,
        grads: &mut [Option<Tensor2<T>>],
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = matmul_nt(g, self.value(*b))?;
                let db = matmul_tn(self.value(*a), g)?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddBias(x, bias) => {
                let mut db = vec![T::zero(); g.cols()];
                for r in 0..g.rows() {
                    for (d, &v) in db.iter_mut().zip(g.row_slice(r)) {
                        *d += v;
                    }
                }
                let shape = self.value(*bias).shape();
                accumulate(grads, *x, g.clone());
                accumulate(grads, *bias, Tensor2::from_vec(shape.0, shape.1, db)?);
            }
            Op::Scale(x, s) => {
                let data = g.data().iter().map(|&v| v * *s).collect();
                accumulate(grads, *x, Tensor2::from_vec(g.rows(), g.cols(), data)?);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape();
                let gv = g.data()[0];
                accumulate(grads, *x, Tensor2::from_fn(shape.0, shape.1, |_, _| gv));
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let data = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * gelu_grad(xv))
                    .collect();
                accumulate(grads, *x, Tensor2::from_vec(g.rows(), g.cols(), data)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let vx = self.value(*x);
                let gam = self.value(*gamma).data();
                let cols = vx.cols();
                let n = T::from_usize(cols).unwrap();
                let mut dx = Tensor2::zeros(vx.rows(), cols);
                let mut dgamma = vec![T::zero(); cols];
                let mut dbeta = vec![T::zero(); cols];
                let mut xhat = vec![T::zero(); cols];
                let mut dxhat = vec![T::zero(); cols];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = vx.row_slice(r);
                    let gr = g.row_slice(r);
                    for c in 0..cols {
                        xhat[c] = (xr[c] - mean) * rstd;
                        dxhat[c] = gr[c] * gam[c];
                        dgamma[c] += gr[c] * xhat[c];
                        dbeta[c] += gr[c];
                    }
                    let mean_d = dxhat.iter().copied().sum::<T>() / n;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for (c, d) in dx.row_slice_mut(r).iter_mut().enumerate() {
                        *d = rstd * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, Tensor2::row(dgamma));
                accumulate(grads, *beta, Tensor2::row(dbeta));
            }
            Op::Rotary {
                x,
                head_dim,
                positions,
            } => {
                let mut dx = g.clone();
                rotary_rows(&mut dx, *head_dim, positions, true);
                accumulate(grads, *x, dx);
            }
            Op::Embedding { table, ids } => {
                let shape = self.value(*table).shape();
                let mut dt = Tensor2::zeros(shape.0, shape.1);
                for (r, &id) in ids.iter().enumerate() {
                    for (d, &v) in dt.row_slice_mut(id).iter_mut().zip(g.row_slice(r)) {
                        *d += v;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, geom, probs, g);
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
            Op::CrossEntropy { logits, targets } => {
                let vl = self.value(*logits);
                let scale = g.data()[0] / T::from_usize(targets.len().max(1)).unwrap();
                let mut dl = Tensor2::zeros(vl.rows(), vl.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let row = vl.row_slice(r);
                    let lse = log_sum_exp(row);
                    for (d, &z) in dl.row_slice_mut(r).iter_mut().zip(row) {
                        *d = (z - lse).exp() * scale;
                    }
                    dl.row_slice_mut(r)[t] -= scale;
                }
                accumulate(grads, *logits, dl);
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        geom: &AttentionGeometry,
        probs: &[T],
        g: &Tensor2<T>,
    ) -> (Tensor2<T>, Tensor2<T>, Tensor2<T>) {
        let AttentionGeometry {
            batch,
            seq,
            heads,
            groups,
            head_dim: dk,
        } = *geom;
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let per_group = heads / groups;
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        let mut dq = Tensor2::zeros(vq.rows(), vq.cols());
        let mut dkm = Tensor2::zeros(vk.rows(), vk.cols());
        let mut dvm = Tensor2::zeros(vv.rows(), vv.cols());
        let mut dp = vec![T::zero(); seq];
        for b in 0..batch {
            for i in 0..heads {
                let j = i / per_group;
                let (qs, ks) = (i * dk..(i + 1) * dk, j * dk..(j + 1) * dk);
                for t in 0..seq {
                    let base = ((b * heads + i) * seq + t) * seq;
                    let p = &probs[base..base + t + 1];
                    let go = &g.row_slice(b * seq + t)[qs.clone()];
                    // dV += pᵀ·dO, dP = dO·Vᵀ
                    for u in 0..=t {
                        let row = b * seq + u;
                        dp[u] = super::dot(go, &vv.row_slice(row)[ks.clone()]);
                        for (d, &gv) in dvm.row_slice_mut(row)[ks.clone()].iter_mut().zip(go) {
                            *d += p[u] * gv;
                        }
                    }
                    let inner = (0..=t).fold(T::zero(), |acc, u| acc + dp[u] * p[u]);
                    let qrow = &vq.row_slice(b * seq + t)[qs.clone()];
                    for u in 0..=t {
                        let ds = p[u] * (dp[u] - inner) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let row = b * seq + u;
                        let krow = &vk.row_slice(row)[ks.clone()];
                        for (d, &kv) in dq.row_slice_mut(b * seq + t)[qs.clone()]
                            .iter_mut()
                            .zip(krow)
                        {
                            *d += ds * kv;
                        }
                        for (d, &qv) in dkm.row_slice_mut(row)[ks.clone()].iter_mut().zip(qrow) {
                            *d += ds * qv;
                        }
                    }
                }
            }
        }
        (dq, dkm, dvm)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor2<T>>], v: Var, g: Tensor2<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Evaluates `loss_fn` on a fresh tape with `params` as leaves and returns
/// the loss together with one gradient per parameter (zeros for parameters
/// the loss does not reach).
pub fn gradient<T, F>(params: &[Tensor2<T>], loss_fn: F) -> Result<(T, Vec<Tensor2<T>>)>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.leaf(format!("param{i}"), p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = loss_fn(&mut tape, &vars)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let out = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor2::zeros(p.rows(), p.cols()))
        })
        .collect();
    Ok((value, out))
}
