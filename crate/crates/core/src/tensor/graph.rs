use super::kernels::{broadcast, gemm, gemm_view, reduce_periodic, swap_axes, AxisLayout, Broadcast, View};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Identifies a trainable parameter outside the graph (see `nn::ParamStore`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Statistics source for [`Graph::batch_norm`].
pub enum BnStats<'a, T> {
    /// Normalize with the statistics of the current batch.
    Batch { eps: T },
    /// Normalize with fixed (running) statistics.
    Fixed { mean: &'a [T], var: &'a [T], eps: T },
}

#[derive(Clone, Copy, Debug)]
enum MatMulKind {
    /// Both operands 2-D, or `b` 2-D and shared across `a`'s batch rows.
    Flat { rows: usize },
    /// `a` 2-D and shared across `b`'s batches.
    SharedLhs { batch: usize },
    Batched { batch: usize },
}

enum Op<T> {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, T),
    Relu(Var),
    SumAll(Var),
    MatMul {
        a: Var,
        b: Var,
        kind: MatMulKind,
        m: usize,
        p: usize,
        q: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax(Var, AxisLayout),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    },
    Mean(Var, AxisLayout),
    Max(Var, AxisLayout, Vec<usize>),
    Concat(Vec<Var>, Vec<usize>, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var, usize, usize),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A define-by-run tape of tensor operations.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid reverse topological order for backpropagation. A graph is rebuilt for
/// every forward pass and is confined to a single thread.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    params: Vec<(Var, ParamId)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            params: Vec::new(),
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every bound parameter, in binding order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<T>>)> {
        self.params.iter().map(|&(v, id)| (id, self.grad(v)))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            let inputs_finite = self.inputs(&op).iter().all(|v| self.value(*v).is_finite());
            assert!(!inputs_finite, "non-finite output from finite inputs");
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input: no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Differentiable leaf bound to an external parameter.
    pub fn param(&mut self, value: Tensor<T>, id: ParamId) -> Var {
        let v = self.leaf(value);
        self.params.push((v, id));
        v
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Broadcast)> {
        let (shape, bc) = broadcast(name, self.shape(a), self.shape(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<T> = match bc {
            Broadcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Rhs(p) => av.iter().enumerate().map(|(i, &x)| f(x, bv[i % p])).collect(),
            Broadcast::Lhs(p) => bv.iter().enumerate().map(|(i, &y)| f(av[i % p], y)).collect(),
        };
        Ok((Tensor { shape, data }, bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b, bc), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b, bc), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b, bc), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let src = self.value(a);
        let t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| x * s).collect(),
        };
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let t = Tensor {
            shape: src.shape.clone(),
            data: src
                .data
                .iter()
                .map(|&x| if x > T::zero() { x } else { T::zero() })
                .collect(),
        };
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data.iter().copied().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Matrix product over the last two axes with leading-batch broadcasting.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, p) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (p2, q) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if p != p2 {
            return Err(err());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let (kind, mut out_shape) = if batch_b.is_empty() {
            let rows = batch_a.iter().product::<usize>() * m;
            (MatMulKind::Flat { rows }, batch_a.to_vec())
        } else if batch_a.is_empty() {
            let batch = batch_b.iter().product();
            (MatMulKind::SharedLhs { batch }, batch_b.to_vec())
        } else if batch_a == batch_b {
            let batch = batch_a.iter().product();
            (MatMulKind::Batched { batch }, batch_a.to_vec())
        } else {
            return Err(err());
        };
        out_shape.extend([m, q]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); out_shape.iter().product()];
        match kind {
            MatMulKind::Flat { rows } => gemm(rows, p, q, av, false, bv, false, &mut out, false),
            MatMulKind::SharedLhs { batch } => {
                for i in 0..batch {
                    gemm(m, p, q, av, false, &bv[i * p * q..], false, &mut out[i * m * q..], false);
                }
            }
            MatMulKind::Batched { batch } => {
                for i in 0..batch {
                    gemm(
                        m,
                        p,
                        q,
                        &av[i * m * p..],
                        false,
                        &bv[i * p * q..],
                        false,
                        &mut out[i * m * q..],
                        false,
                    );
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::MatMul { a, b, kind, m, p, q },
            rg,
        ))
    }

    /// `x · wᵀ + bias` applied to every row of `x` (last axis is the feature axis).
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[1] {
            return Err(Error::Shape {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let (out_dim, in_dim) = (sw[0], sw[1]);
        if let Some(b) = bias {
            if self.shape(b) != [out_dim] {
                return Err(Error::Shape {
                    op: "linear bias",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = self.value(x).numel() / in_dim.max(1);
        let mut out = vec![T::zero(); rows * out_dim];
        gemm(
            rows,
            in_dim,
            out_dim,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(out_dim) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_dim;
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(Tensor { shape, data: out }, Op::Linear { x, w, b: bias }, rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let src = self.value(a);
        let lay = AxisLayout::new("softmax", src.shape(), axis)?;
        let mut out = src.data.clone();
        if lay.inner == 1 && lay.len > 0 {
            for row in out.chunks_mut(lay.len) {
                let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                row.iter_mut().for_each(|v| *v -= mx);
                T::exp_in_place(row);
                let inv = T::one() / row.iter().copied().sum::<T>();
                row.iter_mut().for_each(|v| *v *= inv);
            }
        } else {
            let mut buf = vec![T::zero(); lay.len];
            for o in 0..lay.outer {
                for i in 0..lay.inner {
                    let mut mx = T::neg_infinity();
                    for j in 0..lay.len {
                        mx = mx.max(out[lay.index(o, j, i)]);
                    }
                    for (j, b) in buf.iter_mut().enumerate() {
                        *b = out[lay.index(o, j, i)] - mx;
                    }
                    T::exp_in_place(&mut buf);
                    let inv = T::one() / buf.iter().copied().sum::<T>();
                    for (j, &b) in buf.iter().enumerate() {
                        out[lay.index(o, j, i)] = b * inv;
                    }
                }
            }
        }
        let t = Tensor {
            shape: src.shape.clone(),
            data: out,
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Softmax(a, lay), rg))
    }

    fn attention_dims(&self, q: Var, k: Var, v: Var, heads: usize) -> Result<[usize; 3]> {
        let sq = self.shape(q).to_vec();
        for other in [k, v] {
            if self.shape(other) != sq.as_slice() {
                return Err(Error::Shape {
                    op: "attention",
                    lhs: sq,
                    rhs: self.shape(other).to_vec(),
                });
            }
        }
        if sq.len() != 3 || heads == 0 || sq[2] % heads != 0 {
            return Err(Error::InvalidShape {
                op: "attention",
                shape: sq,
                reason: format!("expected [B, N, d] with d divisible by {heads} heads"),
            });
        }
        Ok([sq[0], sq[1], sq[2]])
    }

    /// Multi-head dot-product attention over `[B, N, d]` queries, keys and
    /// values. Head `h` uses feature slice `h·d/heads .. (h+1)·d/heads` and
    /// writes `softmax(Q Kᵀ) V` into the same slice of the output, so no
    /// scaling is applied here; scale the queries beforehand.
    ///
    /// The `N × N` weights are not stored; backward recomputes them one head
    /// at a time.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let [b, n, d] = self.attention_dims(q, k, v, heads)?;
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); b * n * d];
        let mut p = vec![T::zero(); n * n];
        for bi in 0..b {
            for hi in 0..heads {
                let blk = head_view(bi, hi, n, d, heads);
                attention_probs(qv, kv, blk, &mut p);
                gemm_view(&p, square(n), false, vv, blk, false, &mut out, blk, false);
            }
        }
        let t = Tensor {
            shape: vec![b, n, d],
            data: out,
        };
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(t, Op::Attention { q, k, v, heads }, rg))
    }

    /// The weights [`Graph::attention`] would use, as `[B, heads, N, N]`.
    pub fn attention_weights(&self, q: Var, k: Var, heads: usize) -> Result<Tensor<T>> {
        let [b, n, d] = self.attention_dims(q, k, k, heads)?;
        let (qv, kv) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![T::zero(); b * heads * n * n];
        for (i, p) in out.chunks_mut(n * n).enumerate() {
            attention_probs(qv, kv, head_view(i / heads, i % heads, n, d, heads), p);
        }
        Tensor::new([b, heads, n, n], out)
    }

    fn reduce_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        s
    }

    /// Mean along `axis`; the axis is removed from the result.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let src = self.value(a);
        let lay = AxisLayout::new("mean", src.shape(), axis)?;
        if lay.len == 0 {
            return Err(Error::InvalidShape {
                op: "mean",
                shape: src.shape.clone(),
                reason: format!("axis {axis} is empty"),
            });
        }
        let mut out = vec![T::zero(); lay.outer * lay.inner];
        for o in 0..lay.outer {
            let dst = &mut out[o * lay.inner..(o + 1) * lay.inner];
            for j in 0..lay.len {
                let row = &src.data[lay.index(o, j, 0)..lay.index(o, j, 0) + lay.inner];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
            let inv = T::one() / T::from_f64(lay.len as f64);
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let shape = Self::reduce_shape(src.shape(), axis);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor { shape, data: out }, Op::Mean(a, lay), rg))
    }

    /// Max along `axis`; gradient flows to the first maximal element.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let src = self.value(a);
        let lay = AxisLayout::new("max", src.shape(), axis)?;
        if lay.len == 0 {
            return Err(Error::InvalidShape {
                op: "max",
                shape: src.shape.clone(),
                reason: format!("axis {axis} is empty"),
            });
        }
        let mut out = vec![T::zero(); lay.outer * lay.inner];
        let mut arg = vec![0usize; lay.outer * lay.inner];
        for o in 0..lay.outer {
            for i in 0..lay.inner {
                let mut best = src.data[lay.index(o, 0, i)];
                let mut bj = 0;
                for j in 1..lay.len {
                    let v = src.data[lay.index(o, j, i)];
                    if v > best {
                        best = v;
                        bj = j;
                    }
                }
                out[o * lay.inner + i] = best;
                arg[o * lay.inner + i] = bj;
            }
        }
        let shape = Self::reduce_shape(src.shape(), axis);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor { shape, data: out }, Op::Max(a, lay, arg), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                let chunk = w * inner;
                out.extend_from_slice(&self.value(p).data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Concat(parts.to_vec(), widths, inner),
            rg,
        ))
    }

    /// Gather rows of a 2-D tensor: output shape is `index_shape ++ [D]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize], index_shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: sx,
                reason: "source must be 2-D".into(),
            });
        }
        if index_shape.iter().product::<usize>() != index.len() {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape: index_shape.to_vec(),
                reason: format!("index buffer holds {} entries", index.len()),
            });
        }
        let (rows, d) = (sx[0], sx[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                len: rows,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::Gather(x, index.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, a: Var, ax0: usize, ax1: usize) -> Result<Var> {
        let src = self.value(a);
        let rank = src.ndim();
        for ax in [ax0, ax1] {
            if ax >= rank {
                return Err(Error::Axis {
                    op: "transpose",
                    axis: ax,
                    rank,
                });
            }
        }
        let data = swap_axes(&src.data, &src.shape, ax0, ax1);
        let mut shape = src.shape.clone();
        shape.swap(ax0, ax1);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::Transpose(a, ax0, ax1), rg))
    }

    /// Per-channel normalization over every row of `x` (last axis = channels),
    /// followed by the affine map `gamma · x̂ + beta`.
    ///
    /// Returns the output and, for batch statistics, the per-channel batch
    /// mean and biased variance.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_, T>,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().ok_or_else(|| Error::InvalidShape {
            op: "batch_norm",
            shape: sx.clone(),
            reason: "needs a channel axis".into(),
        })?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::Shape {
                    op: "batch_norm",
                    lhs: sx.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = if c == 0 { 0 } else { self.value(x).numel() / c };
        let xv = self.value(x).data();
        let (mean, var, eps, batch_stats) = match stats {
            BnStats::Batch { eps } => {
                if rows < 2 {
                    return Err(Error::DegenerateBatch(rows));
                }
                let mut mean = vec![T::zero(); c];
                for row in xv.chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                let inv_n = T::one() / T::from_f64(rows as f64);
                mean.iter_mut().for_each(|m| *m *= inv_n);
                let mut var = vec![T::zero(); c];
                for row in xv.chunks(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *s += d * d;
                    }
                }
                var.iter_mut().for_each(|s| *s *= inv_n);
                (mean, var, eps, true)
            }
            BnStats::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape {
                        op: "batch_norm stats",
                        lhs: sx,
                        rhs: vec![mean.len(), var.len()],
                    });
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for ((row, hrow), orow) in xv.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.chunks_exact_mut(c)) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                hrow[ch] = h;
                orow[ch] = gv[ch] * h + bv[ch];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            Tensor {
                shape: sx,
                data: out,
            },
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, batch_stats.then_some((mean, var))))
    }

    /// Mean negative log-likelihood of `targets` (class indices) under
    /// softmax(`logits`), computed with log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        let c = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                len: c,
            });
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = 0.0f64;
        for (row, &t) in lv.chunks(c).zip(targets) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            total += (lse - row[t]).as_f64();
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = T::from_f64(total / targets.len() as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    #[cfg_attr(not(debug_assertions), allow(dead_code))]
    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::SumAll(a)
            | Op::Softmax(a, _)
            | Op::Mean(a, _)
            | Op::Max(a, _, _)
            | Op::Gather(a, _)
            | Op::Reshape(a)
            | Op::Transpose(a, _, _) => vec![*a],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Concat(parts, _, _) => parts.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Backpropagate from a scalar `loss`.
    ///
    /// Leaf gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node_shape = self.nodes[id].value.shape.clone();
                match &mut self.leaf_grads[id] {
                    Some(acc) => acc.data.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    slot => {
                        *slot = Some(Tensor {
                            shape: node_shape,
                            data: g,
                        })
                    }
                }
                continue;
            }
            for (input, contrib) in self.backward_op(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &v)| *a += v),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let neg = matches!(node.op, Op::Sub(..));
                let (ga, gb) = split_broadcast(g, *bc);
                if self.wants(*a) {
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let gb = if neg { gb.into_iter().map(|v| -v).collect() } else { gb };
                    out.push((*b, gb));
                }
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (val(*a), val(*b));
                let full_a: Vec<T>;
                let full_b: Vec<T>;
                // expand both operands to full size, then reduce
                match bc {
                    Broadcast::Same => {
                        full_a = av.to_vec();
                        full_b = bv.to_vec();
                    }
                    Broadcast::Rhs(p) => {
                        full_a = av.to_vec();
                        full_b = (0..g.len()).map(|i| bv[i % p]).collect();
                    }
                    Broadcast::Lhs(p) => {
                        full_a = (0..g.len()).map(|i| av[i % p]).collect();
                        full_b = bv.to_vec();
                    }
                }
                if self.wants(*a) {
                    let ga: Vec<T> = g.iter().zip(&full_b).map(|(&x, &y)| x * y).collect();
                    let ga = match bc {
                        Broadcast::Lhs(p) => reduce_periodic(&ga, *p),
                        _ => ga,
                    };
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let gb: Vec<T> = g.iter().zip(&full_a).map(|(&x, &y)| x * y).collect();
                    let gb = match bc {
                        Broadcast::Rhs(p) => reduce_periodic(&gb, *p),
                        _ => gb,
                    };
                    out.push((*b, gb));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|&v| v * *s).collect())),
            Op::Relu(a) => {
                let av = val(*a);
                let ga = g
                    .iter()
                    .zip(av)
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*a, ga));
            }
            Op::SumAll(a) => out.push((*a, vec![g[0]; val(*a).len()])),
            Op::MatMul { a, b, kind, m, p, q } => {
                let (m, p, q) = (*m, *p, *q);
                let (av, bv) = (val(*a), val(*b));
                let mut ga = self.wants(*a).then(|| vec![T::zero(); av.len()]);
                let mut gb = self.wants(*b).then(|| vec![T::zero(); bv.len()]);
                match *kind {
                    MatMulKind::Flat { rows } => {
                        if let Some(ga) = ga.as_mut() {
                            gemm(rows, q, p, g, false, bv, true, ga, false);
                        }
                        if let Some(gb) = gb.as_mut() {
                            gemm(p, rows, q, av, true, g, false, gb, false);
                        }
                    }
                    MatMulKind::SharedLhs { batch } => {
                        for i in 0..batch {
                            let gi = &g[i * m * q..];
                            if let Some(ga) = ga.as_mut() {
                                gemm(m, q, p, gi, false, &bv[i * p * q..], true, ga, true);
                            }
                            if let Some(gb) = gb.as_mut() {
                                gemm(p, m, q, av, true, gi, false, &mut gb[i * p * q..], false);
                            }
                        }
                    }
                    MatMulKind::Batched { batch } => {
                        for i in 0..batch {
                            let gi = &g[i * m * q..];
                            if let Some(ga) = ga.as_mut() {
                                gemm(m, q, p, gi, false, &bv[i * p * q..], true, &mut ga[i * m * p..], false);
                            }
                            if let Some(gb) = gb.as_mut() {
                                gemm(p, m, q, &av[i * m * p..], true, gi, false, &mut gb[i * p * q..], false);
                            }
                        }
                    }
                }
                out.extend(ga.map(|v| (*a, v)));
                out.extend(gb.map(|v| (*b, v)));
            }
            Op::Linear { x, w, b } => {
                let wt = &self.nodes[w.0].value;
                let (out_dim, in_dim) = (wt.shape[0], wt.shape[1]);
                let xv = val(*x);
                let rows = g.len() / out_dim.max(1);
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); rows * in_dim];
                    gemm(rows, out_dim, in_dim, g, false, wt.data(), false, &mut gx, false);
                    out.push((*x, gx));
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); out_dim * in_dim];
                    gemm(out_dim, rows, in_dim, g, true, xv, false, &mut gw, false);
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        out.push((*b, reduce_periodic(g, out_dim)));
                    }
                }
            }
            Op::Softmax(a, lay) => {
                let y = node.value.data();
                let mut ga = vec![T::zero(); y.len()];
                if lay.inner == 1 && lay.len > 0 {
                    for ((gr, yr), dst) in g.chunks(lay.len).zip(y.chunks(lay.len)).zip(ga.chunks_mut(lay.len)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    out.push((*a, ga));
                    return out;
                }
                for o in 0..lay.outer {
                    for i in 0..lay.inner {
                        let mut dot = T::zero();
                        for j in 0..lay.len {
                            let idx = lay.index(o, j, i);
                            dot += g[idx] * y[idx];
                        }
                        for j in 0..lay.len {
                            let idx = lay.index(o, j, i);
                            ga[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                out.push((*a, ga));
            }
            Op::Attention { q, k, v, heads } => {
                let sh = &self.nodes[q.0].value.shape;
                let (b, n, d, heads) = (sh[0], sh[1], sh[2], *heads);
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut gq = vec![T::zero(); qv.len()];
                let mut gk = vec![T::zero(); kv.len()];
                let mut gv = vec![T::zero(); vv.len()];
                let mut p = vec![T::zero(); n * n];
                let mut dp = vec![T::zero(); n * n];
                for bi in 0..b {
                    for hi in 0..heads {
                        let blk = head_view(bi, hi, n, d, heads);
                        attention_probs(qv, kv, blk, &mut p);
                        gemm_view(&p, square(n), true, g, blk, false, &mut gv, blk, false);
                        gemm_view(g, blk, false, vv, blk, true, &mut dp, square(n), false);
                        for (dr, pr) in dp.chunks_mut(n).zip(p.chunks(n)) {
                            let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                            for (x, &pv) in dr.iter_mut().zip(pr) {
                                *x = pv * (*x - dot);
                            }
                        }
                        gemm_view(&dp, square(n), false, kv, blk, false, &mut gq, blk, false);
                        gemm_view(&dp, square(n), true, qv, blk, false, &mut gk, blk, false);
                    }
                }
                for (var, grad) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if self.wants(var) {
                        out.push((var, grad));
                    }
                }
            }
            Op::Mean(a, lay) => {
                let inv = T::one() / T::from_f64(lay.len as f64);
                let mut ga = vec![T::zero(); lay.outer * lay.len * lay.inner];
                for o in 0..lay.outer {
                    for j in 0..lay.len {
                        for i in 0..lay.inner {
                            ga[lay.index(o, j, i)] = g[o * lay.inner + i] * inv;
                        }
                    }
                }
                out.push((*a, ga));
            }
            Op::Max(a, lay, arg) => {
                let mut ga = vec![T::zero(); lay.outer * lay.len * lay.inner];
                for o in 0..lay.outer {
                    for i in 0..lay.inner {
                        let k = o * lay.inner + i;
                        ga[lay.index(o, arg[k], i)] = g[k];
                    }
                }
                out.push((*a, ga));
            }
            Op::Concat(parts, widths, inner) => {
                let total: usize = widths.iter().sum();
                let outer = g.len() / (total * inner).max(1);
                let mut offsets = Vec::with_capacity(widths.len());
                let mut acc = 0;
                for &w in widths {
                    offsets.push(acc);
                    acc += w * inner;
                }
                for ((&p, &w), &off) in parts.iter().zip(widths).zip(&offsets) {
                    if !self.wants(p) {
                        continue;
                    }
                    let chunk = w * inner;
                    let mut gp = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let start = o * total * inner + off;
                        gp.extend_from_slice(&g[start..start + chunk]);
                    }
                    out.push((p, gp));
                }
            }
            Op::Gather(x, index) => {
                let sx = &self.nodes[x.0].value.shape;
                let d = sx[1];
                let mut gx = vec![T::zero(); sx[0] * d];
                for (k, &i) in index.iter().enumerate() {
                    let src = &g[k * d..(k + 1) * d];
                    for (dst, &v) in gx[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *dst += v;
                    }
                }
                out.push((*x, gx));
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Transpose(a, ax0, ax1) => {
                out.push((*a, swap_axes(g, &node.value.shape, *ax0, *ax1)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let rows = g.len() / c.max(1);
                let gv = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        dgamma[ch] += grow[ch] * hrow[ch];
                        dbeta[ch] += grow[ch];
                    }
                }
                if self.wants(*x) {
                    // dx = inv_std/R · (R·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)) with dx̂ = g·gamma,
                    // written per channel as a·g + b·x̂ + shift.
                    let n = T::from_f64(rows as f64);
                    let a: Vec<T> = (0..c).map(|ch| gv[ch] * inv_std[ch]).collect();
                    let (b, shift): (Vec<T>, Vec<T>) = if *batch_stats {
                        (0..c)
                            .map(|ch| {
                                let k = -inv_std[ch] * gv[ch] / n;
                                (k * dgamma[ch], k * dbeta[ch])
                            })
                            .unzip()
                    } else {
                        (vec![T::zero(); c], vec![T::zero(); c])
                    };
                    let mut gx = vec![T::zero(); g.len()];
                    for ((dst, grow), hrow) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            dst[ch] = a[ch] * grow[ch] + b[ch] * hrow[ch] + shift[ch];
                        }
                    }
                    out.push((*x, gx));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if self.wants(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = probs.len() / targets.len();
                let scale = g[0] / T::from_f64(targets.len() as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * c + t] -= scale;
                }
                out.push((*logits, gl));
            }
        }
        out
    }
}

fn split_broadcast<T: Scalar>(g: &[T], bc: Broadcast) -> (Vec<T>, Vec<T>) {
    match bc {
        Broadcast::Same => (g.to_vec(), g.to_vec()),
        Broadcast::Rhs(p) => (g.to_vec(), reduce_periodic(g, p)),
        Broadcast::Lhs(p) => (reduce_periodic(g, p), g.to_vec()),
    }
}

fn head_view(batch: usize, head: usize, n: usize, d: usize, heads: usize) -> View {
    let dk = d / heads;
    View {
        offset: batch * n * d + head * dk,
        rows: n,
        cols: dk,
        stride: d,
    }
}

fn square(n: usize) -> View {
    View {
        offset: 0,
        rows: n,
        cols: n,
        stride: n,
    }
}

/// Row-softmax of `Q Kᵀ` for one head into `p` (`n × n`).
fn attention_probs<T: Scalar>(q: &[T], k: &[T], blk: View, p: &mut [T]) {
    let n = blk.rows;
    gemm_view(q, blk, false, k, blk, true, p, square(n), false);
    for row in p.chunks_mut(n) {
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.iter_mut().for_each(|v| *v -= mx);
        T::exp_in_place(row);
        let inv = T::one() / row.iter().copied().sum::<T>();
        row.iter_mut().for_each(|v| *v *= inv);
    }
}
