//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Nodes are
//! appended in evaluation order, so a single reverse sweep in
//! [`Graph::backward`] visits them topologically.

use std::collections::BTreeMap;

use crate::error::NnError;
use crate::params::{ParamGrads, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::{gemm, MatRef, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Which stored parameters become gradient-carrying leaves.
#[derive(Clone, Debug, Default)]
pub enum Tracking {
    /// Every parameter marked trainable.
    #[default]
    Trainable,
    /// Trainable parameters whose name starts with one of the prefixes.
    Prefixes(Vec<String>),
    /// Every parameter, ignoring the trainable marker. Used by gradient probes.
    Everything,
    /// No parameter; the graph is a pure forward pass.
    Nothing,
}

impl Tracking {
    pub fn prefixes<S: AsRef<str>>(prefixes: &[S]) -> Self {
        Tracking::Prefixes(prefixes.iter().map(|p| p.as_ref().to_string()).collect())
    }

    fn tracks(&self, name: &str, trainable: bool) -> bool {
        match self {
            Tracking::Trainable => trainable,
            Tracking::Prefixes(ps) => trainable && ps.iter().any(|p| name.starts_with(p.as_str())),
            Tracking::Everything => true,
            Tracking::Nothing => false,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    Square(Var),
    Abs(Var),
    Concat(Var, Var),
    SliceCols(Var, usize),
    SumCols(Var),
    MeanAll(Var),
    SumAll(Var),
    Reshape(Var),
    Conv2d(Box<ConvCache<T>>),
    LayerNorm(Box<NormCache<T>>),
}

struct ConvCache<T> {
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    out_h: usize,
    out_w: usize,
    /// Batch im2col matrix `[ckk, n * p]`, kept only when the kernel needs a gradient.
    cols: Option<Vec<T>>,
}

struct NormCache<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    rstd: Vec<T>,
}

/// Recorded computation over tensors of element type `T`.
pub struct Graph<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    grad_flags: Vec<bool>,
    params: BTreeMap<String, Var>,
    tracking: Tracking,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_tracking(Tracking::Trainable)
    }

    pub fn with_tracking(tracking: Tracking) -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            grad_flags: Vec::new(),
            params: BTreeMap::new(),
            tracking,
        }
    }

    /// A graph that never tracks parameters: forward evaluation only.
    pub fn inference() -> Self {
        Self::with_tracking(Tracking::Nothing)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.grad_flags.push(requires_grad);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.grad_flags[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input leaf that receives a gradient (e.g. pixels for saliency).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var, NnError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let tracked = self.tracking.tracks(name, p.trainable);
        let v = self.push(p.value.clone(), Op::Leaf, tracked);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Copy of `x` with the gradient path severed.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.values[x.0].clone();
        self.push(value, Op::Leaf, false)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.grad_flags[v.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(av.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be 2-D");
        let (n, k, m) = (av.dim(0), av.dim(1), bv.dim(1));
        assert_eq!(k, bv.dim(0), "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![T::zero(); n * m];
        gemm(
            T::one(),
            MatRef::row_major(av.data(), n, k),
            MatRef::row_major(bv.data(), k, m),
            T::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_vec(&[n, m], out).unwrap(), Op::MatMul(a, b), rg)
    }

    /// Adds a `[m]` row vector to every row of a `[n, m]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (&self.values[x.0], &self.values[bias.0]);
        let m = bv.len();
        assert_eq!(xv.shape().last().copied(), Some(m), "add_row width mismatch");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddRow(x, bias), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].zip_map(&self.values[b.0], |x, y| if x <= y { x } else { y });
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Min(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.values[x.0].map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.values[x.0].map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| v.tanh());
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| v.exp());
        let rg = self.rg(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(softplus);
        let rg = self.rg(&[x]);
        self.push(out, Op::Softplus(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push(out, Op::Square(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| v.abs());
        let rg = self.rg(&[x]);
        self.push(out, Op::Abs(x), rg)
    }

    /// Concatenates two `[n, p]` and `[n, q]` matrices into `[n, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(av.shape().len(), 2);
        assert_eq!(bv.shape().len(), 2);
        let n = av.dim(0);
        assert_eq!(n, bv.dim(0), "concat row mismatch");
        let (p, q) = (av.dim(1), bv.dim(1));
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&av.data()[i * p..(i + 1) * p]);
            out.extend_from_slice(&bv.data()[i * q..(i + 1) * q]);
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_vec(&[n, p + q], out).unwrap(), Op::Concat(a, b), rg)
    }

    /// Columns `start..start+len` of a `[n, m]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.values[x.0];
        let (n, m) = (xv.dim(0), xv.dim(1));
        assert!(start + len <= m, "slice_cols out of range");
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&xv.data()[i * m + start..i * m + start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(&[n, len], out).unwrap(), Op::SliceCols(x, start), rg)
    }

    /// Row sums of a `[n, m]` matrix, shape `[n, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let (n, m) = (xv.dim(0), xv.dim(1));
        let out: Vec<T> = xv.data().chunks(m).map(|r| r.iter().copied().sum()).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(&[n, 1], out).unwrap(), Op::SumCols(x), rg)
    }

    /// Mean over every element, shape `[1]`.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.values[x.0].mean());
        let rg = self.rg(&[x]);
        self.push(out, Op::MeanAll(x), rg)
    }

    /// Sum over every element, shape `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.values[x.0].sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::SumAll(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.values[x.0].clone().reshape(shape).expect("reshape element count");
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Flattens `[n, ...]` into `[n, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let shape = self.values[x.0].shape();
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Valid (unpadded) 2-D convolution.
    ///
    /// `x: [n, c, h, w]`, `w: [o, c, kh, kw]`, `b: [o]` → `[n, o, oh, ow]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let (xv, wv, bv) = (&self.values[x.0], &self.values[w.0], &self.values[b.0]);
        assert_eq!(xv.shape().len(), 4, "conv2d input must be [n,c,h,w]");
        assert_eq!(wv.shape().len(), 4, "conv2d kernel must be [o,c,kh,kw]");
        let (n, c, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (o, kc, kh, kw) = (wv.dim(0), wv.dim(1), wv.dim(2), wv.dim(3));
        assert_eq!(c, kc, "conv2d channel mismatch");
        assert_eq!(bv.len(), o, "conv2d bias length");
        assert!(stride >= 1 && h >= kh && wd >= kw, "conv2d geometry");
        let oh = (h - kh) / stride + 1;
        let ow = (wd - kw) / stride + 1;
        let p = oh * ow;
        let ckk = c * kh * kw;
        // Columns of all samples side by side: [ckk, n * p], so one gemm
        // covers the whole batch.
        let cols = im2col_batch(xv.data(), n, (c, h, wd), (kh, kw), stride, (oh, ow));
        let mut wide = vec![T::zero(); o * n * p];
        gemm(
            T::one(),
            MatRef::row_major(wv.data(), o, ckk),
            MatRef::row_major(&cols, ckk, n * p),
            T::zero(),
            &mut wide,
        );
        let mut out = Vec::with_capacity(n * o * p);
        for s in 0..n {
            for (oc, &bias) in bv.data().iter().enumerate() {
                let src = &wide[oc * n * p + s * p..oc * n * p + (s + 1) * p];
                out.extend(src.iter().map(|&v| v + bias));
            }
        }
        let keep_cols = self.grad_flags[w.0];
        let rg = self.rg(&[x, w, b]);
        let cache = ConvCache {
            x,
            w,
            b,
            stride,
            out_h: oh,
            out_w: ow,
            cols: keep_cols.then_some(cols),
        };
        self.push(
            Tensor::from_vec(&[n, o, oh, ow], out).unwrap(),
            Op::Conv2d(Box::new(cache)),
            rg,
        )
    }

    /// Normalizes each row of `[n, d]` to zero mean, unit variance, then
    /// applies the `[d]` affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let (xv, gv, bv) = (&self.values[x.0], &self.values[gamma.0], &self.values[beta.0]);
        let (n, d) = (xv.dim(0), xv.dim(1));
        assert_eq!(gv.len(), d);
        assert_eq!(bv.len(), d);
        let dn = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &xv.data()[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let xh = (row[j] - mean) * r;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let cache = NormCache {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push(
            Tensor::from_vec(&[n, d], out).unwrap(),
            Op::LayerNorm(Box::new(cache)),
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.values[loss.0].len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.values.len()).map(|_| None).collect();
        if !self.grad_flags[loss.0] {
            return Gradients {
                grads,
                params: self.params.clone(),
                shapes: self.values.iter().map(|v| v.shape().to_vec()).collect(),
                flags: self.grad_flags.clone(),
            };
        }
        grads[loss.0] = Some(Tensor::full(self.values[loss.0].shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.grad_flags[i] {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.values.iter().map(|v| v.shape().to_vec()).collect(),
            flags: self.grad_flags.clone(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.grad_flags[v.0] {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.values[i];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                let (n, k, m) = (av.dim(0), av.dim(1), bv.dim(1));
                if self.grad_flags[a.0] {
                    let mut da = vec![T::zero(); n * k];
                    gemm(
                        T::one(),
                        MatRef::row_major(g.data(), n, m),
                        MatRef::row_major(bv.data(), k, m).t(),
                        T::zero(),
                        &mut da,
                    );
                    self.accumulate(grads, *a, Tensor::from_vec(&[n, k], da).unwrap());
                }
                if self.grad_flags[b.0] {
                    let mut db = vec![T::zero(); k * m];
                    gemm(
                        T::one(),
                        MatRef::row_major(av.data(), n, k).t(),
                        MatRef::row_major(g.data(), n, m),
                        T::zero(),
                        &mut db,
                    );
                    self.accumulate(grads, *b, Tensor::from_vec(&[k, m], db).unwrap());
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.grad_flags[b.0] {
                    let m = self.values[b.0].len();
                    let mut db = vec![T::zero(); m];
                    for row in g.data().chunks(m) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.values[b.0].shape().to_vec();
                    self.accumulate(grads, *b, Tensor::from_vec(&shape, db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.grad_flags[b.0] {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                if self.grad_flags[a.0] {
                    self.accumulate(grads, *a, g.zip_map(bv, |gv, y| gv * y));
                }
                if self.grad_flags[b.0] {
                    self.accumulate(grads, *b, g.zip_map(av, |gv, x| gv * x));
                }
            }
            Op::Min(a, b) => {
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                let mut ga = g.clone();
                let mut gb = g.clone();
                for ((ga, gb), (&x, &y)) in ga
                    .data_mut()
                    .iter_mut()
                    .zip(gb.data_mut())
                    .zip(av.data().iter().zip(bv.data()))
                {
                    if x <= y {
                        *gb = T::zero();
                    } else {
                        *ga = T::zero();
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Relu(x) => {
                self.accumulate(
                    grads,
                    *x,
                    g.zip_map(out, |gv, y| if y > T::zero() { gv } else { T::zero() }),
                );
            }
            Op::Tanh(x) => {
                self.accumulate(grads, *x, g.zip_map(out, |gv, y| gv * (T::one() - y * y)));
            }
            Op::Exp(x) => self.accumulate(grads, *x, g.zip_map(out, |gv, y| gv * y)),
            Op::Softplus(x) => {
                let xv = &self.values[x.0];
                self.accumulate(grads, *x, g.zip_map(xv, |gv, v| gv * sigmoid(v)));
            }
            Op::Square(x) => {
                let xv = &self.values[x.0];
                let two = lit::<T>(2.0);
                self.accumulate(grads, *x, g.zip_map(xv, |gv, v| gv * two * v));
            }
            Op::Abs(x) => {
                let xv = &self.values[x.0];
                self.accumulate(
                    grads,
                    *x,
                    g.zip_map(xv, |gv, v| {
                        if v > T::zero() {
                            gv
                        } else if v < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::Concat(a, b) => {
                let (p, q) = (self.values[a.0].dim(1), self.values[b.0].dim(1));
                let n = g.dim(0);
                if self.grad_flags[a.0] {
                    let mut da = Vec::with_capacity(n * p);
                    for row in g.data().chunks(p + q) {
                        da.extend_from_slice(&row[..p]);
                    }
                    self.accumulate(grads, *a, Tensor::from_vec(&[n, p], da).unwrap());
                }
                if self.grad_flags[b.0] {
                    let mut db = Vec::with_capacity(n * q);
                    for row in g.data().chunks(p + q) {
                        db.extend_from_slice(&row[p..]);
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[n, q], db).unwrap());
                }
            }
            Op::SliceCols(x, start) => {
                let xv = &self.values[x.0];
                let (n, m) = (xv.dim(0), xv.dim(1));
                let len = g.dim(1);
                let mut dx = vec![T::zero(); n * m];
                for r in 0..n {
                    dx[r * m + start..r * m + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, m], dx).unwrap());
            }
            Op::SumCols(x) => {
                let xv = &self.values[x.0];
                let m = xv.dim(1);
                let mut dx = Vec::with_capacity(xv.len());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv, m));
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::MeanAll(x) => {
                let xv = &self.values[x.0];
                let scale = g.item() / T::from_usize(xv.len()).unwrap();
                self.accumulate(grads, *x, Tensor::full(xv.shape(), scale));
            }
            Op::SumAll(x) => {
                let xv = &self.values[x.0];
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g.item()));
            }
            Op::Reshape(x) => {
                let shape = self.values[x.0].shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape).unwrap());
            }
            Op::Conv2d(cache) => self.backprop_conv(cache, g, grads),
            Op::LayerNorm(cache) => self.backprop_norm(cache, g, grads),
        }
    }

    fn backprop_conv(&self, cache: &ConvCache<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let (xv, wv) = (&self.values[cache.x.0], &self.values[cache.w.0]);
        let (n, c, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (o, kh, kw) = (wv.dim(0), wv.dim(2), wv.dim(3));
        let p = cache.out_h * cache.out_w;
        let ckk = c * kh * kw;

        if self.grad_flags[cache.b.0] {
            let mut db = vec![T::zero(); o];
            for s in 0..n {
                for (oc, row) in g.data()[s * o * p..(s + 1) * o * p].chunks(p).enumerate() {
                    db[oc] += row.iter().copied().sum::<T>();
                }
            }
            self.accumulate(grads, cache.b, Tensor::from_vec(&[o], db).unwrap());
        }
        let need_w = self.grad_flags[cache.w.0];
        let need_x = self.grad_flags[cache.x.0];
        if !need_w && !need_x {
            return;
        }
        // Output gradient regrouped as [o, n * p] to match the column layout.
        let mut wide = Vec::with_capacity(o * n * p);
        for oc in 0..o {
            for s in 0..n {
                wide.extend_from_slice(&g.data()[(s * o + oc) * p..(s * o + oc + 1) * p]);
            }
        }
        if need_w {
            let cols = cache.cols.as_ref().expect("conv cols cached for kernel grad");
            let mut dw = vec![T::zero(); o * ckk];
            gemm(
                T::one(),
                MatRef::row_major(&wide, o, n * p),
                MatRef::row_major(cols, ckk, n * p).t(),
                T::zero(),
                &mut dw,
            );
            self.accumulate(grads, cache.w, Tensor::from_vec(wv.shape(), dw).unwrap());
        }
        if need_x {
            let mut dcols = vec![T::zero(); ckk * n * p];
            gemm(
                T::one(),
                MatRef::row_major(wv.data(), o, ckk).t(),
                MatRef::row_major(&wide, o, n * p),
                T::zero(),
                &mut dcols,
            );
            let mut dx = vec![T::zero(); n * c * h * wd];
            for s in 0..n {
                col2im_add(
                    &dcols,
                    (c, h, wd),
                    (kh, kw),
                    cache.stride,
                    (cache.out_h, cache.out_w),
                    (n * p, s * p),
                    &mut dx[s * c * h * wd..(s + 1) * c * h * wd],
                );
            }
            self.accumulate(grads, cache.x, Tensor::from_vec(xv.shape(), dx).unwrap());
        }
    }

    fn backprop_norm(&self, cache: &NormCache<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gv = &self.values[cache.gamma.0];
        let d = gv.len();
        let n = g.len() / d;
        let dn = T::from_usize(d).unwrap();
        if self.grad_flags[cache.gamma.0] || self.grad_flags[cache.beta.0] {
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            for i in 0..n {
                for j in 0..d {
                    let gij = g.data()[i * d + j];
                    dgamma[j] += gij * cache.xhat[i * d + j];
                    dbeta[j] += gij;
                }
            }
            self.accumulate(grads, cache.gamma, Tensor::from_vec(gv.shape(), dgamma).unwrap());
            let bshape = self.values[cache.beta.0].shape().to_vec();
            self.accumulate(grads, cache.beta, Tensor::from_vec(&bshape, dbeta).unwrap());
        }
        if self.grad_flags[cache.x.0] {
            let mut dx = vec![T::zero(); n * d];
            for i in 0..n {
                let mut mean_dxh = T::zero();
                let mut mean_dxh_xh = T::zero();
                for j in 0..d {
                    let dxh = g.data()[i * d + j] * gv.data()[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * cache.xhat[i * d + j];
                }
                mean_dxh /= dn;
                mean_dxh_xh /= dn;
                for j in 0..d {
                    let dxh = g.data()[i * d + j] * gv.data()[j];
                    dx[i * d + j] = cache.rstd[i] * (dxh - mean_dxh - cache.xhat[i * d + j] * mean_dxh_xh);
                }
            }
            self.accumulate(grads, cache.x, Tensor::from_vec(&[n, d], dx).unwrap());
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Patch matrix `[c * kh * kw, n * oh * ow]` of a batch, filled in
/// storage order.
fn im2col_batch<T: Scalar>(
    x: &[T],
    n: usize,
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut cols = vec![T::zero(); c * kh * kw * n * oh * ow];
    let mut rows = cols.chunks_exact_mut(ow);
    // Span of one output row in the input, so the gather needs a single bounds check.
    let span = ow.saturating_sub(1) * stride + 1;
    if ow == 0 {
        return cols;
    }
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                for s in 0..n {
                    let plane = &x[(s * c + ci) * h * w..(s * c + ci + 1) * h * w];
                    for oy in 0..oh {
                        let start = (oy * stride + ky) * w + kx;
                        let src = &plane[start..start + span];
                        let dst = rows.next().expect("cols sized for every row");
                        if stride == 1 {
                            dst.copy_from_slice(src);
                        } else {
                            for (d, v) in dst.iter_mut().zip(src.iter().step_by(stride)) {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    (oh, ow): (usize, usize),
    (row_len, offset): (usize, usize),
    dx: &mut [T],
) {
    let p = oh * ow;
    if p == 0 {
        return;
    }
    let span = (ow - 1) * stride + 1;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let src = &cols[r * row_len + offset..r * row_len + offset + p];
                for (oy, g) in src.chunks_exact(ow).enumerate() {
                    let base = (ci * h + oy * stride + ky) * w + kx;
                    let dst = &mut dx[base..base + span];
                    for (d, v) in dst.iter_mut().step_by(stride).zip(g) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
    shapes: Vec<Vec<usize>>,
    flags: Vec<bool>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` was not reached.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradients of every gradient-carrying parameter bound in the graph.
    /// Parameters the loss does not reach get explicit zeros.
    pub fn params(&self) -> ParamGrads<T> {
        self.params
            .iter()
            .filter(|(_, v)| self.flags[v.0])
            .map(|(name, &v)| (name.clone(), self.wrt(v)))
            .collect()
    }

    /// Gradient of one bound parameter, `None` if it was never bound.
    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        self.params.get(name).map(|&v| self.wrt(v))
    }
}
