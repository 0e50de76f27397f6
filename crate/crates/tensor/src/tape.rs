//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`]. Nodes
//! are stored in creation order, which is a valid topological order, so the
//! backward pass is a single reverse sweep. Parameters are borrowed from a
//! [`ParamStore`] rather than copied onto the tape.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
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

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Transpose(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    MaxReduce { x: Var, argmax: Vec<usize> },
    MeanReduce { x: Var, axis: usize },
    Sum(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    ConvTranspose1d { x: Var, w: Var, stride: usize },
    Sinusoidal { p: Var, channels: usize },
    Gather { x: Var, index: Vec<Option<usize>> },
    RowNorm(Var),
    RowSqNorm(Var),
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
pub struct Tape<'p, T> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn check_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected rank {rank}, got shape {shape:?}"),
        });
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// Tape without parameters (inputs and constants only).
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a registered parameter. Repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        assert!(self.params.is_some(), "tape has no parameter store");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("param tape").get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ----------------------------------------------------------------------
    // forward operations
    // ----------------------------------------------------------------------

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check_rank("matmul", sa, 2)?;
        check_rank("matmul", sb, 2)?;
        if sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check_rank("matmul_nt", sa, 2)?;
        check_rank("matmul_nt", sb, 2)?;
        if sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        node: Op<T>,
    ) -> Result<Var> {
        check_same(op, self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[.., C] + b[C]`, broadcasting `b` over every leading index.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let c = sx.last().copied().unwrap_or(1);
        if sb.len() != 1 || sb[0] != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bias = self.value(b).data();
        let tx = self.value(x);
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v + s);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        check_rank("transpose", s, 2)?;
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// Softmax along `axis`, computed with the per-slice maximum subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", &shape, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * n + a) * inner + i;
                let mut m = T::neg_infinity();
                for a in 0..n {
                    m = m.max(src[idx(a)]);
                }
                let mut sum = T::zero();
                for a in 0..n {
                    let e = (src[idx(a)] - m).exp();
                    out[idx(a)] = e;
                    sum += e;
                }
                for a in 0..n {
                    out[idx(a)] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, rg))
    }

    /// Maximum along `axis` (the axis is removed). Ties resolve to the first index.
    pub fn max_reduce(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("max_reduce", &shape, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "max_reduce",
                msg: "empty axis".into(),
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * n) * inner + i;
                for a in 1..n {
                    let j = (o * n + a) * inner + i;
                    if src[j] > src[best] {
                        best = j;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::MaxReduce { x, argmax }, rg))
    }

    /// Mean along `axis` (the axis is removed).
    pub fn mean_reduce(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("mean_reduce", &shape, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let scale = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let row = &src[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        for v in &mut out {
            *v *= scale;
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::MeanReduce { x, axis }, rg))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Pointwise linear layer `x[N,Cin] · w[Cin,Cout] + b[Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        check_rank("linear", sx, 2)?;
        check_rank("linear", sw, 2)?;
        if sx[1] != sw[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        if let Some(b) = b {
            let sb = self.shape(b);
            if sb != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    lhs: sw.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
        }
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        kernels::matmul(self.value(x).data(), self.value(w).data(), m, k, n, &mut out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Linear { x, w, b }, rg))
    }

    /// 1-D transposed convolution over a `[L, Cin]` sequence with kernel
    /// `w[Cin, Cout, K]`, producing `[(L-1)·stride + K, Cout]`.
    pub fn conv_transpose_1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        check_rank("conv_transpose_1d", sx, 2)?;
        check_rank("conv_transpose_1d", sw, 3)?;
        if sx[1] != sw[0] || stride == 0 || sx[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose_1d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (len, cin, cout, k) = (sx[0], sx[1], sw[1], sw[2]);
        let out_len = (len - 1) * stride + k;
        let mut out = vec![T::zero(); out_len * cout];
        kernels::conv_transpose_1d(
            self.value(x).data(),
            self.value(w).data(),
            (len, cin, cout, k, stride),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::from_parts(vec![out_len, cout], out),
            Op::ConvTranspose1d { x, w, stride },
            rg,
        ))
    }

    /// Sinusoidal encoding of a vector of positions `p[N]` into `[N, channels]`
    /// with interleaved `(sin, cos)` pairs at frequencies `10000^(-2k/channels)`.
    pub fn sinusoidal(&mut self, p: Var, channels: usize) -> Result<Var> {
        if channels == 0 || channels % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "sinusoidal",
                msg: format!("channel count must be even and positive, got {channels}"),
            });
        }
        let pos = self.value(p).data();
        let n = pos.len();
        let mut out = vec![T::zero(); n * channels];
        for (row, &pv) in out.chunks_mut(channels).zip(pos) {
            kernels::sinusoidal_row(pv, row);
        }
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::from_parts(vec![n, channels], out),
            Op::Sinusoidal { p, channels },
            rg,
        ))
    }

    /// Selects rows of `x` (first axis). `None` yields a zero row.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                msg: "cannot gather from a scalar".into(),
            });
        }
        let rows = shape[0];
        let width: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); index.len() * width];
        for (dst, idx) in out.chunks_mut(width.max(1)).zip(&index) {
            if let Some(i) = *idx {
                if i >= rows {
                    return Err(TensorError::InvalidArgument {
                        op: "gather",
                        msg: format!("index {i} out of range for {rows} rows"),
                    });
                }
                dst.copy_from_slice(&src[i * width..(i + 1) * width]);
            }
        }
        let mut oshape = shape;
        oshape[0] = index.len();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Gather { x, index }, rg))
    }

    /// Gathers rows by plain indices.
    pub fn select_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        self.gather(x, index.iter().map(|&i| Some(i)).collect())
    }

    /// Euclidean norm of each row of `x[N, C]`. The subgradient at a zero row is zero.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        check_rank("row_norm", s, 2)?;
        let (n, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let out = (0..n)
            .map(|i| kernels::sq_norm(&src[i * c..(i + 1) * c]).sqrt())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::RowNorm(x), rg))
    }

    /// Squared Euclidean norm of each row of `x[N, C]`.
    pub fn row_sq_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        check_rank("row_sq_norm", s, 2)?;
        let (n, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let out = (0..n).map(|i| kernels::sq_norm(&src[i * c..(i + 1) * c])).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::RowSqNorm(x), rg))
    }

    // ----------------------------------------------------------------------
    // backward
    // ----------------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Err(TensorError::NoGradPath);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let mut params = Vec::new();
        for (&id, &v) in &self.param_vars {
            if let Some(g) = &grads[v.0] {
                params.push((id, g.clone()));
            } else {
                params.push((id, vec![T::zero(); self.value(v).len()]));
            }
        }
        params.sort_by_key(|(id, _)| id.index());
        Ok(Gradients { grads, params })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store);
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC · Bᵀ
                    kernels::matmul_nt(g, bd, m, n, k, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = Aᵀ · dC
                    kernels::matmul_tn(ad, g, m, k, n, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC · B
                    kernels::matmul(g, bd, m, n, k, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = dCᵀ · A
                    kernels::matmul_tn(g, ad, m, n, k, gb);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::axpy(T::one(), g, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::axpy(T::one(), g, gb);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::axpy(T::one(), g, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::axpy(-T::one(), g, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, &gv), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::axpy(T::one(), g, gx);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        kernels::axpy(T::one(), row, gb);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::axpy(*s, g, gx);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::axpy(T::one(), g, gx);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for &p in parts {
                        let chunk = self.shape(p)[*axis] * inner;
                        if let Some(gp) = self.slot(grads, p) {
                            kernels::axpy(
                                T::one(),
                                &g[offset..offset + chunk],
                                &mut gp[o * chunk..(o + 1) * chunk],
                            );
                        }
                        offset += chunk;
                    }
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |a: usize| (o * n + a) * inner + i;
                            let mut dot = T::zero();
                            for a in 0..n {
                                dot += g[idx(a)] * y[idx(a)];
                            }
                            for a in 0..n {
                                gx[idx(a)] += y[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaxReduce { x, argmax } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        gx[src] += gv;
                    }
                }
            }
            Op::MeanReduce { x, axis } => {
                let xs = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&xs, *axis);
                let scale = T::one() / T::of(n as f64);
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let go = &g[o * inner..(o + 1) * inner];
                        for a in 0..n {
                            let dst = &mut gx[(o * n + a) * inner..(o * n + a + 1) * inner];
                            kernels::axpy(scale, go, dst);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (m, k, n) = (sx[0], sx[1], sw[1]);
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::matmul_nt(g, wd, m, n, k, gx);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    kernels::matmul_tn(xd, g, m, k, n, gw);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for row in g.chunks(n) {
                            kernels::axpy(T::one(), row, gb);
                        }
                    }
                }
            }
            Op::ConvTranspose1d { x, w, stride } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let dims = (sx[0], sx[1], sw[1], sw[2], *stride);
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::conv_transpose_1d_grad_input(g, wd, dims, gx);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    kernels::conv_transpose_1d_grad_weight(g, xd, dims, gw);
                }
            }
            Op::Sinusoidal { p, channels } => {
                let pd = self.value(*p).data();
                if let Some(gp) = self.slot(grads, *p) {
                    for ((d, &pv), gr) in gp.iter_mut().zip(pd).zip(g.chunks(*channels)) {
                        *d += kernels::sinusoidal_row_grad(pv, gr);
                    }
                }
            }
            Op::Gather { x, index } => {
                let width = out.shape()[1..].iter().product::<usize>();
                if let Some(gx) = self.slot(grads, *x) {
                    for (row, idx) in g.chunks(width.max(1)).zip(index) {
                        if let Some(src) = *idx {
                            kernels::axpy(T::one(), row, &mut gx[src * width..(src + 1) * width]);
                        }
                    }
                }
            }
            Op::RowNorm(x) => {
                let c = self.shape(*x)[1];
                let xd = self.value(*x).data();
                let norms = out.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, (&nv, &gv)) in norms.iter().zip(g).enumerate() {
                        if nv > T::zero() {
                            let f = gv / nv;
                            for j in 0..c {
                                gx[r * c + j] += f * xd[r * c + j];
                            }
                        }
                    }
                }
            }
            Op::RowSqNorm(x) => {
                let c = self.shape(*x)[1];
                let xd = self.value(*x).data();
                let two = T::of(2.0);
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &gv) in g.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += two * gv * xd[r * c + j];
                        }
                    }
                }
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` requires grad and is
    /// reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter referenced on the tape.
    pub fn params(&self) -> &[(ParamId, Vec<T>)] {
        &self.params
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g);
        }
    }
}
