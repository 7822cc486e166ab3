//! Tape of tensor operations with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles.
//! Calling [`Graph::backward`] on a scalar walks the tape in reverse and
//! returns [`Gradients`] for parameters and input leaves. Recording is
//! skipped for nodes that cannot reach a differentiable leaf, and entirely
//! in no-grad graphs, so acting and imagination pay only for the forward
//! pass.
//!
//! Shapes follow a "rows × last axis" convention: most ops treat a tensor
//! as a matrix whose columns are the last axis.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct Conv {
    stride: usize,
}

enum Op<T> {
    Const,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    AddChannel(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<T>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
    Embedding(Var, Vec<Option<usize>>),
    Pick(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    ClampMin(Var, T),
    StraightThrough(Var),
    Conv2d(Var, Var, Conv),
    ConvT2d(Var, Var, Conv),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
}

/// Recording of a computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    needs_grad: Vec<bool>,
    grad_enabled: bool,
    bound: HashMap<ParamId, Var>,
    store_uid: Option<u64>,
    /// First op that produced a non-finite value (tracked in debug builds).
    nonfinite: Option<String>,
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    inputs: HashMap<Var, Tensor<T>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to an input leaf, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v)
    }

    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(slot: &mut Option<String>, op: &str, t: &Tensor<T>) {
    if cfg!(debug_assertions) && slot.is_none() && !t.is_finite() {
        *slot = Some(format!("output of {op} (shape {:?})", t.shape()));
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            needs_grad: Vec::new(),
            grad_enabled: true,
            bound: HashMap::new(),
            store_uid: None,
            nonfinite: None,
        }
    }

    /// A graph that never records backward information.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// First non-finite forward value seen (debug builds only).
    pub fn first_nonfinite(&self) -> Option<&str> {
        self.nonfinite.as_deref()
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

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        check_finite(&mut self.nonfinite, name, &value);
        let needs = self.grad_enabled && parents.iter().any(|p| self.needs_grad[p.0]);
        let op = if needs { op } else { Op::Const };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        self.needs_grad.push(needs);
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push("constant", value, Op::Const, &[])
    }

    /// Differentiable leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        check_finite(&mut self.nonfinite, "input", &value);
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Input,
        });
        self.needs_grad.push(self.grad_enabled);
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    ///
    /// A graph binds parameters of one store only; mixing stores panics.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        match self.store_uid {
            Some(uid) => assert_eq!(uid, store.uid(), "graph mixes parameters of two stores"),
            None => self.store_uid = Some(store.uid()),
        }
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Param(id),
        });
        self.needs_grad.push(self.grad_enabled && store.trainable(id));
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Const,
        });
        self.needs_grad.push(false);
        Var(self.nodes.len() - 1)
    }

    // ---------------------------------------------------------------- linear

    /// `[.., k] × [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if bv.rank() != 2 || av.rank() == 0 || av.cols() != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            av.data(),
            k as isize,
            1,
            bv.data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        Ok(self.push("matmul", t, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip(a, b, |x, y| x + y);
        Ok(self.push("add", t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip(a, b, |x, y| x - y);
        Ok(self.push("sub", t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip(a, b, |x, y| x * y);
        Ok(self.push("mul", t, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(
        &self,
        op: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, rv) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let n = av.cols();
        if rv.len() != n {
            return Err(Error::shape(
                op,
                format!("{:?} with row {:?}", av.shape(), rv.shape()),
            ));
        }
        let r = rv.data();
        let data = av
            .data()
            .chunks(n.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// Adds a length-`n` vector to every row of `[.., n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let t = self.row_broadcast("add_row", a, bias, |x, y| x + y)?;
        Ok(self.push("add_row", t, Op::AddRow(a, bias), &[a, bias]))
    }

    /// Multiplies every row of `[.., n]` by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var> {
        let t = self.row_broadcast("mul_row", a, gain, |x, y| x * y)?;
        Ok(self.push("mul_row", t, Op::MulRow(a, gain), &[a, gain]))
    }

    /// Scales row `i` of `[m, n]` by `w[i]`.
    pub fn mul_col(&mut self, a: Var, w: Var) -> Result<Var> {
        let (av, wv) = (&self.nodes[a.0].value, &self.nodes[w.0].value);
        let (m, n) = (av.rows(), av.cols());
        if wv.len() != m {
            return Err(Error::shape(
                "mul_col",
                format!("{:?} with column {:?}", av.shape(), wv.shape()),
            ));
        }
        let mut data = av.data().to_vec();
        for (i, chunk) in data.chunks_mut(n.max(1)).enumerate() {
            let s = wv.data()[i];
            chunk.iter_mut().for_each(|x| *x = *x * s);
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push("mul_col", t, Op::MulCol(a, w), &[a, w]))
    }

    /// Adds a per-channel bias to `[B, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if xv.rank() != 4 || bv.len() != xv.shape()[1] {
            return Err(Error::shape(
                "add_channel",
                format!("{:?} with bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let plane = xv.shape()[2] * xv.shape()[3];
        let ch = xv.shape()[1];
        let mut data = xv.data().to_vec();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let b = bv.data()[i % ch];
            chunk.iter_mut().for_each(|v| *v = *v + b);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push("add_channel", t, Op::AddChannel(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.nodes[a.0].value.map(|x| x * s);
        self.push("scale", t, Op::Scale(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let t = self.nodes[a.0].value.map(|x| x + s);
        self.push("add_scalar", t, Op::Shift(a), &[a])
    }

    // ------------------------------------------------------------ pointwise

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|x| x.tanh());
        self.push("tanh", t, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|x| x * sigmoid(x));
        self.push("silu", t, Op::Silu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|x| x.exp());
        self.push("exp", t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|x| x.ln());
        self.push("log", t, Op::Log(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|x| x * x);
        self.push("square", t, Op::Square(a), &[a])
    }

    /// `max(min, x)` elementwise; gradient is zero where `x < min`.
    pub fn clamp_min(&mut self, a: Var, min: T) -> Var {
        let t = self.nodes[a.0].value.map(|x| if x < min { min } else { x });
        self.push("clamp_min", t, Op::ClampMin(a, min), &[a])
    }

    /// Forward value is `forward`; the backward pass treats the node as the
    /// identity on `surrogate` (straight-through estimator).
    pub fn straight_through(&mut self, surrogate: Var, forward: Tensor<T>) -> Result<Var> {
        if forward.shape() != self.shape(surrogate) {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", forward.shape(), self.shape(surrogate)),
            ));
        }
        Ok(self.push(
            "straight_through",
            forward,
            Op::StraightThrough(surrogate),
            &[surrogate],
        ))
    }

    // ----------------------------------------------------------- row-wise

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(av.cols().max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push("softmax", t, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(av.cols().max(1)) {
            let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().fold(T::zero(), |s, &x| s + (x - m).exp()).ln() + m;
            row.iter_mut().for_each(|x| *x = *x - lse);
        }
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push("log_softmax", t, Op::LogSoftmax(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let av = &self.nodes[a.0].value;
        let n = av.cols().max(1);
        let nf = T::from_usize(n).unwrap();
        let mut data = av.data().to_vec();
        let mut inv_std = Vec::with_capacity(av.rows());
        for row in data.chunks_mut(n) {
            let mean = row.iter().fold(T::zero(), |s, &x| s + x) / nf;
            let var = row
                .iter()
                .fold(T::zero(), |s, &x| s + (x - mean) * (x - mean))
                / nf;
            let inv = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push("layer_norm", t, Op::LayerNorm(a, inv_std), &[a])
    }

    /// Concatenates along the last axis; all parts must agree on row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut lead = self.shape(*first).to_vec();
        lead.pop();
        let mut total = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows || v.rank() == 0 {
                return Err(Error::shape(
                    "concat",
                    format!(
                        "{:?}",
                        parts.iter().map(|p| self.shape(*p).to_vec()).collect::<Vec<_>>()
                    ),
                ));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        lead.push(total);
        let t = Tensor::new(lead, data)?;
        Ok(self.push("concat", t, Op::Concat(parts.to_vec()), parts))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let n = av.cols();
        if start + len > n {
            return Err(Error::shape(
                "slice",
                format!("{start}..{} of {:?}", start + len, av.shape()),
            ));
        }
        let mut data = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push("slice", t, Op::Slice(a, start), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.nodes[a.0].value).clone().reshape(shape)?;
        Ok(self.push("reshape", t, Op::Reshape(a), &[a]))
    }

    /// Row lookup into `table[V, E]`; `None` yields a zero row.
    pub fn embedding(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        if tv.rank() != 2 {
            return Err(Error::shape("embedding", format!("table {:?}", tv.shape())));
        }
        let (vocab, e) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * e);
        for id in ids {
            match id {
                Some(i) if *i < vocab => data.extend_from_slice(tv.row(*i)),
                Some(i) => {
                    return Err(Error::Data(format!(
                        "embedding id {i} out of range for {vocab} rows"
                    )))
                }
                None => data.extend(std::iter::repeat(T::zero()).take(e)),
            }
        }
        let t = Tensor::new(vec![ids.len(), e], data)?;
        Ok(self.push("embedding", t, Op::Embedding(table, ids.to_vec()), &[table]))
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.rows() != idx.len() || idx.iter().any(|&j| j >= av.cols()) {
            return Err(Error::shape(
                "pick",
                format!("{:?} with {} indices", av.shape(), idx.len()),
            ));
        }
        let data = idx.iter().enumerate().map(|(i, &j)| av.row(i)[j]).collect();
        let t = Tensor::new(vec![idx.len()], data)?;
        Ok(self.push("pick", t, Op::Pick(a, idx.to_vec()), &[a]))
    }

    // ----------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().fold(T::zero(), |s, &x| s + x);
        self.push("sum", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let n = T::from_usize(v.len().max(1)).unwrap();
        let s = v.data().iter().fold(T::zero(), |s, &x| s + x) / n;
        self.push("mean", Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// Sum over the last axis: `[.., n] -> [..]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data: Vec<T> = (0..av.rows())
            .map(|r| av.row(r).iter().fold(T::zero(), |s, &x| s + x))
            .collect();
        let mut shape = av.shape().to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(shape, data).expect("row sums");
        self.push("sum_cols", t, Op::SumCols(a), &[a])
    }

    // -------------------------------------------------------- convolutions

    /// Valid (unpadded) strided convolution.
    /// `x: [B, C, H, W]`, `w: [O, C, k, k]` -> `[B, O, (H-k)/s+1, (W-k)/s+1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let geo = ConvGeo::forward(xv.shape(), wv.shape(), stride)?;
        let cols = im2col(xv.data(), &geo);
        let rows = geo.b * geo.ho * geo.wo;
        let kk = geo.c * geo.k * geo.k;
        let mut out_mat = vec![T::zero(); rows * geo.o];
        // out_mat[rows, O] = cols[rows, kk] · wᵀ[kk, O]
        T::gemm(
            rows,
            kk,
            geo.o,
            T::one(),
            &cols,
            kk as isize,
            1,
            wv.data(),
            1,
            kk as isize,
            T::zero(),
            &mut out_mat,
        );
        let out = rows_to_nchw(&out_mat, geo.b, geo.o, geo.ho, geo.wo);
        let t = Tensor::new(vec![geo.b, geo.o, geo.ho, geo.wo], out)?;
        Ok(self.push("conv2d", t, Op::Conv2d(x, w, Conv { stride }), &[x, w]))
    }

    /// Adjoint of [`Graph::conv2d`].
    /// `x: [B, C, H, W]`, `w: [C, O, k, k]` -> `[B, O, (H-1)s+k, (W-1)s+k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let geo = ConvGeo::transpose(xv.shape(), wv.shape(), stride)?;
        // geo describes the equivalent forward conv from output to input
        let rows = geo.b * geo.ho * geo.wo;
        let kk = geo.c * geo.k * geo.k;
        let x_mat = nchw_to_rows(xv.data(), geo.b, geo.o, geo.ho, geo.wo);
        let mut cols = vec![T::zero(); rows * kk];
        // cols[rows, kk] = x_mat[rows, O'] · w[O', kk]
        T::gemm(
            rows,
            geo.o,
            kk,
            T::one(),
            &x_mat,
            geo.o as isize,
            1,
            wv.data(),
            kk as isize,
            1,
            T::zero(),
            &mut cols,
        );
        let mut out = vec![T::zero(); geo.b * geo.c * geo.h * geo.w];
        col2im(&cols, &geo, &mut out);
        let t = Tensor::new(vec![geo.b, geo.c, geo.h, geo.w], out)?;
        Ok(self.push(
            "conv_transpose2d",
            t,
            Op::ConvT2d(x, w, Conv { stride }),
            &[x, w],
        ))
    }

    // ------------------------------------------------------------ backward

    /// Reverse pass from a scalar. Gradients are returned, not stored;
    /// use [`ParamStore::accumulate`] to add them to parameter gradients
    /// (repeated accumulation sums).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if let Some(op) = &self.nonfinite {
            return Err(Error::NonFinite(op.clone()));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            inputs: HashMap::new(),
            params: Vec::new(),
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.needs_grad[i] {
                continue;
            }
            self.backprop_node(i, g, &mut grads, &mut out)?;
        }
        out.params.sort_by_key(|(id, _)| *id);
        if cfg!(debug_assertions) {
            if let Some((id, _)) = out.params.iter().find(|(_, g)| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter #{}", id.0)));
            }
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Const => {}
            Op::Input => {
                out.inputs
                    .insert(Var(i), Tensor::new(y.shape().to_vec(), g)?);
            }
            Op::Param(id) => {
                out.params.push((*id, Tensor::new(y.shape().to_vec(), g)?));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                if self.needs_grad[a.0] {
                    let ga = slot(grads, *a, m * k);
                    // ga[m,k] += g[m,n] · bᵀ
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g,
                        n as isize,
                        1,
                        bv.data(),
                        1,
                        n as isize,
                        T::one(),
                        ga,
                    );
                }
                if self.needs_grad[b.0] {
                    let gb = slot(grads, *b, k * n);
                    // gb[k,n] += aᵀ · g
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        1,
                        k as isize,
                        &g,
                        n as isize,
                        1,
                        T::one(),
                        gb,
                    );
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |dst| add_into(dst, &g));
                self.acc(grads, *b, |dst| add_into(dst, &g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |dst| add_into(dst, &g));
                self.acc(grads, *b, |dst| {
                    dst.iter_mut().zip(&g).for_each(|(d, &x)| *d = *d - x)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |dst| {
                    for ((d, &x), &o) in dst.iter_mut().zip(&g).zip(bv) {
                        *d = *d + x * o;
                    }
                });
                self.acc(grads, *b, |dst| {
                    for ((d, &x), &o) in dst.iter_mut().zip(&g).zip(av) {
                        *d = *d + x * o;
                    }
                });
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, |dst| add_into(dst, &g));
                let n = y.cols().max(1);
                self.acc(grads, *r, |dst| {
                    for chunk in g.chunks(n) {
                        add_into(dst, chunk);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let n = y.cols().max(1);
                let (av, rv) = (self.value(*a).data(), self.value(*r).data());
                self.acc(grads, *a, |dst| {
                    for (j, (d, &x)) in dst.iter_mut().zip(&g).enumerate() {
                        *d = *d + x * rv[j % n];
                    }
                });
                self.acc(grads, *r, |dst| {
                    for (j, (&x, &o)) in g.iter().zip(av).enumerate() {
                        dst[j % n] = dst[j % n] + x * o;
                    }
                });
            }
            Op::MulCol(a, w) => {
                let n = y.cols().max(1);
                let (av, wv) = (self.value(*a).data(), self.value(*w).data());
                self.acc(grads, *a, |dst| {
                    for (j, (d, &x)) in dst.iter_mut().zip(&g).enumerate() {
                        *d = *d + x * wv[j / n];
                    }
                });
                self.acc(grads, *w, |dst| {
                    for (j, (&x, &o)) in g.iter().zip(av).enumerate() {
                        dst[j / n] = dst[j / n] + x * o;
                    }
                });
            }
            Op::AddChannel(x, b) => {
                self.acc(grads, *x, |dst| add_into(dst, &g));
                let plane = y.shape()[2] * y.shape()[3];
                let ch = y.shape()[1];
                self.acc(grads, *b, |dst| {
                    for (p, chunk) in g.chunks(plane).enumerate() {
                        let s = chunk.iter().fold(T::zero(), |s, &v| s + v);
                        dst[p % ch] = dst[p % ch] + s;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |dst| {
                    dst.iter_mut().zip(&g).for_each(|(d, &x)| *d = *d + x * *s)
                });
            }
            Op::Shift(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                self.acc(grads, *a, |dst| add_into(dst, &g));
            }
            Op::Tanh(a) => self.unary(grads, *a, &g, |_, yv| T::one() - yv * yv, y),
            Op::Sigmoid(a) => self.unary(grads, *a, &g, |_, yv| yv * (T::one() - yv), y),
            Op::Silu(a) => self.unary(
                grads,
                *a,
                &g,
                |x, _| {
                    let s = sigmoid(x);
                    s * (T::one() + x * (T::one() - s))
                },
                y,
            ),
            Op::Exp(a) => self.unary(grads, *a, &g, |_, yv| yv, y),
            Op::Log(a) => self.unary(grads, *a, &g, |x, _| T::one() / x, y),
            Op::Square(a) => self.unary(grads, *a, &g, |x, _| x + x, y),
            Op::ClampMin(a, min) => {
                let min = *min;
                self.unary(grads, *a, &g, |x, _| if x < min { T::zero() } else { T::one() }, y)
            }
            Op::Softmax(a) => {
                let n = y.cols().max(1);
                self.acc(grads, *a, |dst| {
                    for ((d, gr), yr) in dst.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n))
                    {
                        let dot = gr.iter().zip(yr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        for ((dd, &gg), &yy) in d.iter_mut().zip(gr).zip(yr) {
                            *dd = *dd + yy * (gg - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let n = y.cols().max(1);
                self.acc(grads, *a, |dst| {
                    for ((d, gr), yr) in dst.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n))
                    {
                        let total = gr.iter().fold(T::zero(), |s, &v| s + v);
                        for ((dd, &gg), &yy) in d.iter_mut().zip(gr).zip(yr) {
                            *dd = *dd + gg - yy.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm(a, inv_std) => {
                let n = y.cols().max(1);
                let nf = T::from_usize(n).unwrap();
                self.acc(grads, *a, |dst| {
                    for (r, ((d, gr), yr)) in dst
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(y.data().chunks(n))
                        .enumerate()
                    {
                        let mg = gr.iter().fold(T::zero(), |s, &v| s + v) / nf;
                        let mgy = gr.iter().zip(yr).fold(T::zero(), |s, (&a, &b)| s + a * b) / nf;
                        for ((dd, &gg), &yy) in d.iter_mut().zip(gr).zip(yr) {
                            *dd = *dd + inv_std[r] * (gg - mg - yy * mgy);
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total = y.cols();
                let rows = y.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.acc(grads, *p, |dst| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            add_into(&mut dst[r * w..(r + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice(a, start) => {
                let n = self.value(*a).cols();
                let w = y.cols();
                self.acc(grads, *a, |dst| {
                    for (r, gr) in g.chunks(w.max(1)).enumerate() {
                        add_into(&mut dst[r * n + start..r * n + start + w], gr);
                    }
                });
            }
            Op::Embedding(table, ids) => {
                let e = y.cols();
                self.acc(grads, *table, |dst| {
                    for (r, id) in ids.iter().enumerate() {
                        if let Some(id) = id {
                            add_into(&mut dst[id * e..(id + 1) * e], &g[r * e..(r + 1) * e]);
                        }
                    }
                });
            }
            Op::Pick(a, idx) => {
                let n = self.value(*a).cols();
                self.acc(grads, *a, |dst| {
                    for (r, &j) in idx.iter().enumerate() {
                        dst[r * n + j] = dst[r * n + j] + g[r];
                    }
                });
            }
            Op::SumAll(a) => {
                let g0 = g[0];
                self.acc(grads, *a, |dst| dst.iter_mut().for_each(|d| *d = *d + g0));
            }
            Op::MeanAll(a) => {
                let n = T::from_usize(self.value(*a).len().max(1)).unwrap();
                let g0 = g[0] / n;
                self.acc(grads, *a, |dst| dst.iter_mut().for_each(|d| *d = *d + g0));
            }
            Op::SumCols(a) => {
                let n = self.value(*a).cols().max(1);
                self.acc(grads, *a, |dst| {
                    for (r, chunk) in dst.chunks_mut(n).enumerate() {
                        chunk.iter_mut().for_each(|d| *d = *d + g[r]);
                    }
                });
            }
            Op::Conv2d(x, w, conv) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let geo = ConvGeo::forward(xv.shape(), wv.shape(), conv.stride)?;
                let rows = geo.b * geo.ho * geo.wo;
                let kk = geo.c * geo.k * geo.k;
                let g_mat = nchw_to_rows(&g, geo.b, geo.o, geo.ho, geo.wo);
                if self.needs_grad[w.0] {
                    let cols = im2col(xv.data(), &geo);
                    let gw = slot(grads, *w, geo.o * kk);
                    // gw[O, kk] += g_matᵀ[O, rows] · cols[rows, kk]
                    T::gemm(
                        geo.o,
                        rows,
                        kk,
                        T::one(),
                        &g_mat,
                        1,
                        geo.o as isize,
                        &cols,
                        kk as isize,
                        1,
                        T::one(),
                        gw,
                    );
                }
                if self.needs_grad[x.0] {
                    let mut gcols = vec![T::zero(); rows * kk];
                    T::gemm(
                        rows,
                        geo.o,
                        kk,
                        T::one(),
                        &g_mat,
                        geo.o as isize,
                        1,
                        wv.data(),
                        kk as isize,
                        1,
                        T::zero(),
                        &mut gcols,
                    );
                    let gx = slot(grads, *x, xv.len());
                    col2im(&gcols, &geo, gx);
                }
            }
            Op::ConvT2d(x, w, conv) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let geo = ConvGeo::transpose(xv.shape(), wv.shape(), conv.stride)?;
                let rows = geo.b * geo.ho * geo.wo;
                let kk = geo.c * geo.k * geo.k;
                let g_cols = im2col(&g, &geo);
                if self.needs_grad[w.0] {
                    let x_mat = nchw_to_rows(xv.data(), geo.b, geo.o, geo.ho, geo.wo);
                    let gw = slot(grads, *w, geo.o * kk);
                    // gw[O', kk] += x_matᵀ · g_cols
                    T::gemm(
                        geo.o,
                        rows,
                        kk,
                        T::one(),
                        &x_mat,
                        1,
                        geo.o as isize,
                        &g_cols,
                        kk as isize,
                        1,
                        T::one(),
                        gw,
                    );
                }
                if self.needs_grad[x.0] {
                    let mut gx_mat = vec![T::zero(); rows * geo.o];
                    // gx_mat[rows, O'] = g_cols · wᵀ
                    T::gemm(
                        rows,
                        kk,
                        geo.o,
                        T::one(),
                        &g_cols,
                        kk as isize,
                        1,
                        wv.data(),
                        1,
                        kk as isize,
                        T::zero(),
                        &mut gx_mat,
                    );
                    let gx = rows_to_nchw(&gx_mat, geo.b, geo.o, geo.ho, geo.wo);
                    let dst = slot(grads, *x, xv.len());
                    add_into(dst, &gx);
                }
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if self.needs_grad[v.0] {
            let n = self.value(v).len();
            f(slot(grads, v, n));
        }
    }

    fn unary(
        &self,
        grads: &mut [Option<Vec<T>>],
        a: Var,
        g: &[T],
        d: impl Fn(T, T) -> T,
        y: &Tensor<T>,
    ) {
        let xv = self.value(a).data();
        self.acc(grads, a, |dst| {
            for (((dd, &gg), &x), &yy) in dst.iter_mut().zip(g).zip(xv).zip(y.data()) {
                *dd = *dd + gg * d(x, yy);
            }
        });
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s = s + *x;
    }
    row.iter_mut().for_each(|x| *x = *x / s);
}

/// Geometry of a valid strided convolution from `[b, c, h, w]` to
/// `[b, o, ho, wo]` with a `k×k` kernel.
#[derive(Clone, Copy, Debug)]
struct ConvGeo {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    s: usize,
    ho: usize,
    wo: usize,
}

/// Output size of a valid strided convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

impl ConvGeo {
    fn forward(x: &[usize], w: &[usize], s: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || w[2] != w[3] || s == 0 || x[2] < w[2]
            || x[3] < w[3]
        {
            return Err(Error::shape("conv2d", format!("input {x:?} kernel {w:?} stride {s}")));
        }
        let k = w[2];
        Ok(Self {
            b: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            k,
            s,
            ho: conv_out_size(x[2], k, s),
            wo: conv_out_size(x[3], k, s),
        })
    }

    /// Transposed conv from `[b, ci, hi, wi]` with kernel `[ci, co, k, k]`,
    /// expressed as the forward conv it is the adjoint of.
    fn transpose(x: &[usize], w: &[usize], s: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[0] || w[2] != w[3] || s == 0 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input {x:?} kernel {w:?} stride {s}"),
            ));
        }
        let k = w[2];
        Ok(Self {
            b: x[0],
            c: w[1],
            h: (x[2] - 1) * s + k,
            w: (x[3] - 1) * s + k,
            o: w[0],
            k,
            s,
            ho: x[2],
            wo: x[3],
        })
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeo) -> Vec<T> {
    let kk = g.c * g.k * g.k;
    let mut cols = vec![T::zero(); g.b * g.ho * g.wo * kk];
    for b in 0..g.b {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * kk;
                let mut j = 0;
                for ch in 0..g.c {
                    let base = (b * g.c + ch) * g.h * g.w;
                    for ky in 0..g.k {
                        let iy = oy * g.s + ky;
                        let src = base + iy * g.w + ox * g.s;
                        cols[row + j..row + j + g.k].copy_from_slice(&x[src..src + g.k]);
                        j += g.k;
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeo, x: &mut [T]) {
    let kk = g.c * g.k * g.k;
    for b in 0..g.b {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * kk;
                let mut j = 0;
                for ch in 0..g.c {
                    let base = (b * g.c + ch) * g.h * g.w;
                    for ky in 0..g.k {
                        let iy = oy * g.s + ky;
                        let dst = base + iy * g.w + ox * g.s;
                        add_into(&mut x[dst..dst + g.k], &cols[row + j..row + j + g.k]);
                        j += g.k;
                    }
                }
            }
        }
    }
}

/// `[b, o, h, w]` -> `[(b, h, w), o]`.
fn nchw_to_rows<T: Scalar>(x: &[T], b: usize, o: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..o {
            for p in 0..h * w {
                out[(bi * h * w + p) * o + ch] = x[(bi * o + ch) * h * w + p];
            }
        }
    }
    out
}

/// `[(b, h, w), o]` -> `[b, o, h, w]`.
fn rows_to_nchw<T: Scalar>(m: &[T], b: usize, o: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for bi in 0..b {
        for ch in 0..o {
            for p in 0..h * w {
                out[(bi * o + ch) * h * w + p] = m[(bi * h * w + p) * o + ch];
            }
        }
    }
    out
}
