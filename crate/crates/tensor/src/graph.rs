//! Reverse-mode tape.
//!
//! A [`Graph`] records every primitive applied during one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and produces exact gradients for
//! the forward definitions below. Parameters enter the tape through
//! [`Graph::param`]; their gradients are pushed back into the [`ParamStore`] with
//! [`Gradients::accumulate_into`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{self, Conv1dGeom, Conv2dGeom};
use crate::error::{arg_err, shape_err, Result};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Exp(Var),
    Log(Var),
    SumAll(Var),
    MeanAll(Var),
    LogSumExp(Var, Axis),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    SqDist(Var, Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv1dGeom,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    AvgPool1d {
        x: Var,
        kernel: usize,
    },
    GlobalAvgPool(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Forward tape for one pass. `training` selects batch statistics in
/// batch-norm and enables dropout.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    training: bool,
    rng: ChaCha8Rng,
    norm: NormConfig,
    buffer_updates: Vec<(BufferId, Tensor<T>)>,
}

/// Gradients produced by [`Graph::backward`] for leaves and parameters.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds parameter gradients into the store's `grad` slots.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.param_mut(pid).grad.add_assign(g);
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, a.shape(), b.shape());
    }
    Ok(())
}

fn dims2(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => shape_err(op, s, &[0, 0]),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            norm: NormConfig::default(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self::new(false, 0)
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input whose gradient is reported by [`Gradients::get`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.param(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    /// Running-statistic updates produced by batch-norm in training mode.
    pub fn take_buffer_updates(&mut self) -> Vec<(BufferId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Writes pending running-statistic updates into `store`.
    pub fn commit_buffers(&mut self, store: &mut ParamStore<T>) {
        for (id, t) in self.take_buffer_updates() {
            *store.buffer_mut(id) = t;
        }
    }

    // ---- element-wise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(bv) {
            *o -= v;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(bv) {
            *o *= v;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v + c);
        let ng = self.needs(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// `a[m, n] + v[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (_, n) = dims2("add_row", self.value(a))?;
        if self.shape(v) != [n] {
            return shape_err("add_row", self.shape(a), self.shape(v));
        }
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &x) in row.iter_mut().zip(&vv) {
                *o += x;
            }
        }
        let ng = self.needs(a) || self.needs(v);
        Ok(self.push(out, Op::AddRow(a, v), ng))
    }

    /// `a[m, n] + u[m]` broadcast over columns.
    pub fn add_col(&mut self, a: Var, u: Var) -> Result<Var> {
        let (m, n) = dims2("add_col", self.value(a))?;
        if self.shape(u) != [m] {
            return shape_err("add_col", self.shape(a), self.shape(u));
        }
        let uv = self.value(u).data().to_vec();
        let mut out = self.value(a).clone();
        for (row, &x) in out.data_mut().chunks_mut(n).zip(&uv) {
            for o in row {
                *o += x;
            }
        }
        let ng = self.needs(a) || self.needs(u);
        Ok(self.push(out, Op::AddCol(a, u), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.exp());
        let ng = self.needs(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.ln());
        let ng = self.needs(a);
        self.push(out, Op::Log(a), ng)
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum::<T>() / T::from_usize_lossy(t.len().max(1));
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    /// Log-sum-exp of a rank-2 tensor. `Axis::Cols` reduces each row to one value
    /// (`[m, n] -> [m]`); `Axis::Rows` reduces each column (`[m, n] -> [n]`).
    pub fn logsumexp(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let (m, n) = dims2("logsumexp", self.value(a))?;
        let x = self.value(a).data();
        let lse = |get: &dyn Fn(usize) -> T, len: usize| -> T {
            let mut mx = T::neg_infinity();
            for i in 0..len {
                mx = mx.max(get(i));
            }
            if mx == T::neg_infinity() {
                return mx;
            }
            let s: T = (0..len).map(|i| (get(i) - mx).exp()).sum();
            mx + s.ln()
        };
        let out = match axis {
            Axis::Cols => (0..m)
                .map(|i| lse(&|j| x[i * n + j], n))
                .collect::<Vec<_>>(),
            Axis::Rows => (0..n)
                .map(|j| lse(&|i| x[i * n + j], m))
                .collect::<Vec<_>>(),
        };
        let len = out.len();
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(&[len], out)?, Op::LogSumExp(a, axis), ng))
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2("transpose", self.value(a))?;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), ng))
    }

    /// Fully connected layer: `x[N, in] @ w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (nb, fin) = dims2("linear", self.value(x))?;
        let (fout, fin2) = dims2("linear", self.value(w))?;
        if fin != fin2 {
            return shape_err("linear", self.shape(x), self.shape(w));
        }
        let mut out = vec![T::zero(); nb * fout];
        let mut beta = T::zero();
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return shape_err("linear bias", self.shape(w), self.shape(b));
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv);
            }
            beta = T::one();
        }
        T::gemm(
            nb,
            fin,
            fout,
            T::one(),
            self.value(x).data(),
            fin as isize,
            1,
            self.value(w).data(),
            1,
            fin as isize,
            beta,
            &mut out,
            fout as isize,
            1,
        );
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(&[nb, fout], out)?, Op::Linear { x, w, b }, ng))
    }

    /// Row-wise L2 normalization `x / max(||x||, 1e-12)`.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2("l2_normalize_rows", self.value(a))?;
        let eps = T::lit(1e-12);
        let x = self.value(a).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let r = &x[i * n..(i + 1) * n];
            let nrm = r.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            for j in 0..n {
                out[i * n + j] = r[j] / nrm;
            }
            norms.push(nrm);
        }
        let ng = self.needs(a);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::L2NormalizeRows { x: a, norms },
            ng,
        ))
    }

    /// Pairwise squared Euclidean distances `a[m, d], b[n, d] -> [m, n]`.
    pub fn sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = dims2("sqdist", self.value(a))?;
        let (n, d2) = dims2("sqdist", self.value(b))?;
        if d != d2 {
            return shape_err("sqdist", self.shape(a), self.shape(b));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = T::zero();
                for k in 0..d {
                    let t = av[i * d + k] - bv[j * d + k];
                    s += t * t;
                }
                out[i * n + j] = s;
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::SqDist(a, b), ng))
    }

    /// `y[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = dims2("pick", self.value(a))?;
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return arg_err("pick", format!("{} indices into [{m}, {n}]", idx.len()));
        }
        let x = self.value(a).data();
        let out: Vec<T> = idx.iter().enumerate().map(|(i, &j)| x[i * n + j]).collect();
        let ng = self.needs(a);
        Ok(self.push(
            Tensor::new(&[m], out)?,
            Op::Pick {
                x: a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Gathers rows along the leading axis.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || idx.iter().any(|&i| i >= shape[0]) {
            return arg_err("select_rows", format!("indices out of range for {shape:?}"));
        }
        let w: usize = shape[1..].iter().product();
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&x[i * w..(i + 1) * w]);
        }
        let mut s = shape.clone();
        s[0] = idx.len();
        let ng = self.needs(a);
        Ok(self.push(
            Tensor::new(&s, out)?,
            Op::SelectRows {
                x: a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return arg_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return arg_err("concat", format!("axis {axis} for rank {}", base.len()));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return shape_err("concat", &base, s);
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let k = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * k * inner..(o + 1) * k * inner]);
            }
        }
        let mut s = base;
        s[axis] = total;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(&s, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    // ---- network primitives -------------------------------------------

    /// 1D convolution over `[N, Cin, L]` with symmetric zero padding.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[n, cin, l], &[cout, cin2, k]) = (&xs[..], &ws[..]) else {
            return shape_err("conv1d", &xs, &ws);
        };
        if cin != cin2 || b.is_some_and(|b| self.shape(b) != [cout]) {
            return shape_err("conv1d", &xs, &ws);
        }
        let geom = Conv1dGeom {
            batch: n,
            c_in: cin,
            len_in: l,
            c_out: cout,
            kernel: k,
            stride,
            dilation: dilation.max(1),
            padding,
        };
        let Some(lout) = geom.len_out() else {
            return arg_err("conv1d", format!("input length {l} too short for kernel {k}"));
        };
        let out = conv::conv1d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::new(&[n, cout, lout], out)?,
            Op::Conv1d { x, w, b, geom },
            ng,
        ))
    }

    /// 2D convolution over `[N, Cin, H, W]`, square stride and padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[n, cin, h, wd], &[cout, cin2, kh, kw]) = (&xs[..], &ws[..]) else {
            return shape_err("conv2d", &xs, &ws);
        };
        if cin != cin2 || b.is_some_and(|b| self.shape(b) != [cout]) {
            return shape_err("conv2d", &xs, &ws);
        }
        let geom = Conv2dGeom {
            batch: n,
            c_in: cin,
            h_in: h,
            w_in: wd,
            c_out: cout,
            kh,
            kw,
            stride,
            padding,
        };
        let Some((ho, wo)) = geom.out_hw() else {
            return arg_err("conv2d", format!("input {h}x{wd} too small for {kh}x{kw}"));
        };
        let out = conv::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::new(&[n, cout, ho, wo], out)?,
            Op::Conv2d { x, w, b, geom },
            ng,
        ))
    }

    /// Batch normalization over axis 1 of `[N, C, ...]`. Training mode uses
    /// batch statistics and schedules a running-statistics update; eval mode
    /// reads the running buffers.
    pub fn batch_norm(
        &mut self,
        store: &ParamStore<T>,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: BufferId,
        running_var: BufferId,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return shape_err("batch_norm", &shape, &[0, 0]);
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("batch_norm", &shape, self.shape(gamma));
        }
        let eps = T::lit(self.norm.eps);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); c];
        let count = n * inner;
        if self.training {
            if count < 2 {
                return arg_err("batch_norm", "training mode needs more than one value per channel");
            }
            let cnt = T::from_usize_lossy(count);
            let mom = T::lit(self.norm.momentum);
            let mut new_mean = store.buffer(running_mean).clone();
            let mut new_var = store.buffer(running_var).clone();
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * inner;
                    s += xv[base..base + inner].iter().copied().sum::<T>();
                }
                let mean = s / cnt;
                let mut sq = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * inner;
                    for &v in &xv[base..base + inner] {
                        sq += (v - mean) * (v - mean);
                    }
                }
                let var = sq / cnt;
                let is = T::one() / (var + eps).sqrt();
                inv_std[ch] = is;
                for b in 0..n {
                    let base = (b * c + ch) * inner;
                    for i in base..base + inner {
                        let h = (xv[i] - mean) * is;
                        xhat[i] = h;
                        out[i] = g[ch] * h + bt[ch];
                    }
                }
                let unbiased = sq / T::from_usize_lossy(count - 1);
                let rm = &mut new_mean.data_mut()[ch];
                *rm = (T::one() - mom) * *rm + mom * mean;
                let rv = &mut new_var.data_mut()[ch];
                *rv = (T::one() - mom) * *rv + mom * unbiased;
            }
            self.buffer_updates.push((running_mean, new_mean));
            self.buffer_updates.push((running_var, new_var));
        } else {
            let rm = store.buffer(running_mean).data();
            let rv = store.buffer(running_var).data();
            for ch in 0..c {
                let is = T::one() / (rv[ch] + eps).sqrt();
                inv_std[ch] = is;
                for b in 0..n {
                    let base = (b * c + ch) * inner;
                    for i in base..base + inner {
                        let h = (xv[i] - rm[ch]) * is;
                        xhat[i] = h;
                        out[i] = g[ch] * h + bt[ch];
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let training = self.training;
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            ng,
        ))
    }

    /// Layer normalization across axis 1 (features / channels) of
    /// `[N, C, ...]`, independently at every other position.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return shape_err("layer_norm", &shape, &[0, 0]);
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("layer_norm", &shape, self.shape(gamma));
        }
        let eps = T::lit(self.norm.eps);
        let cf = T::from_usize_lossy(c);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); n * inner];
        for b in 0..n {
            for p in 0..inner {
                let idx = |ch: usize| (b * c + ch) * inner + p;
                let mean = (0..c).map(|ch| xv[idx(ch)]).sum::<T>() / cf;
                let var = (0..c)
                    .map(|ch| (xv[idx(ch)] - mean) * (xv[idx(ch)] - mean))
                    .sum::<T>()
                    / cf;
                let is = T::one() / (var + eps).sqrt();
                inv_std[b * inner + p] = is;
                for ch in 0..c {
                    let h = (xv[idx(ch)] - mean) * is;
                    xhat[idx(ch)] = h;
                    out[idx(ch)] = g[ch] * h + bt[ch];
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(&shape, out)?,
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

    /// Non-overlapping average pooling along the last axis of `[N, C, L]`.
    pub fn avg_pool1d(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [n, c, l] = s[..] else {
            return shape_err("avg_pool1d", &s, &[0, 0, 0]);
        };
        if kernel == 0 || l < kernel {
            return arg_err("avg_pool1d", format!("kernel {kernel} for length {l}"));
        }
        let lo = l / kernel;
        let xv = self.value(x).data();
        let kf = T::from_usize_lossy(kernel);
        let mut out = vec![T::zero(); n * c * lo];
        for r in 0..n * c {
            for t in 0..lo {
                let start = r * l + t * kernel;
                out[r * lo + t] = xv[start..start + kernel].iter().copied().sum::<T>() / kf;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::new(&[n, c, lo], out)?,
            Op::AvgPool1d { x, kernel },
            ng,
        ))
    }

    /// Adaptive average pooling to a single position: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return shape_err("global_avg_pool", &s, &[0, 0, 0]);
        }
        let inner: usize = s[2..].iter().product();
        let f = T::from_usize_lossy(inner);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|ch| ch.iter().copied().sum::<T>() / f)
            .collect();
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(&s[..2], out)?, Op::GlobalAvgPool(x), ng))
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return arg_err("dropout", format!("p = {p} outside [0, 1)"));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let len = self.value(x).len();
        let mask: Vec<T> = (0..len)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, mask }, ng))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return arg_err("backward", format!("loss has shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            match node.op {
                Op::Leaf => continue,
                Op::Param(pid) => {
                    params.push((pid, i));
                    continue;
                }
                _ => {}
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dy, &mut grads)?;
        }
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        let t = Tensor::new(self.shape(v), g).expect("gradient shape matches value");
        self.acc(grads, v, t);
    }

    fn backprop_node(&self, i: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let d = dy.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    self.acc_data(grads, *a, d.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if self.needs(*b) {
                    self.acc_data(grads, *b, d.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, dy.map(|v| v * *c)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let t = Tensor::new(self.shape(*a), d.to_vec())?;
                self.acc(grads, *a, t);
            }
            Op::AddRow(a, v) => {
                self.acc(grads, *a, dy.clone());
                if self.needs(*v) {
                    let n = self.shape(*v)[0];
                    let mut gv = vec![T::zero(); n];
                    for row in d.chunks(n) {
                        for (g, &x) in gv.iter_mut().zip(row) {
                            *g += x;
                        }
                    }
                    self.acc_data(grads, *v, gv);
                }
            }
            Op::AddCol(a, u) => {
                self.acc(grads, *a, dy.clone());
                if self.needs(*u) {
                    let m = self.shape(*u)[0];
                    let n = d.len() / m.max(1);
                    let gu = d.chunks(n).map(|r| r.iter().copied().sum()).collect();
                    self.acc_data(grads, *u, gu);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims2("matmul", self.value(*a))?;
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    // dA = dY @ B^T
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        d,
                        n as isize,
                        1,
                        self.value(*b).data(),
                        1,
                        n as isize,
                        T::zero(),
                        &mut ga,
                        k as isize,
                        1,
                    );
                    self.acc_data(grads, *a, ga);
                }
                if self.needs(*b) {
                    // dB = A^T @ dY
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*a).data(),
                        1,
                        k as isize,
                        d,
                        n as isize,
                        1,
                        T::zero(),
                        &mut gb,
                        n as isize,
                        1,
                    );
                    self.acc_data(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = dims2("transpose", self.value(*a))?;
                let mut g = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] = d[j * m + i];
                    }
                }
                self.acc_data(grads, *a, g);
            }
            Op::Linear { x, w, b } => {
                let (nb, fin) = dims2("linear", self.value(*x))?;
                let fout = self.shape(*w)[0];
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); nb * fin];
                    T::gemm(
                        nb,
                        fout,
                        fin,
                        T::one(),
                        d,
                        fout as isize,
                        1,
                        self.value(*w).data(),
                        fin as isize,
                        1,
                        T::zero(),
                        &mut gx,
                        fin as isize,
                        1,
                    );
                    self.acc_data(grads, *x, gx);
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); fout * fin];
                    T::gemm(
                        fout,
                        nb,
                        fin,
                        T::one(),
                        d,
                        1,
                        fout as isize,
                        self.value(*x).data(),
                        fin as isize,
                        1,
                        T::zero(),
                        &mut gw,
                        fin as isize,
                        1,
                    );
                    self.acc_data(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = vec![T::zero(); fout];
                        for row in d.chunks(fout) {
                            for (g, &v) in gb.iter_mut().zip(row) {
                                *g += v;
                            }
                        }
                        self.acc_data(grads, *b, gb);
                    }
                }
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                let g = d
                    .iter()
                    .zip(xv)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.acc_data(grads, *a, g);
            }
            Op::Exp(a) => {
                let y = node.value.data();
                self.acc_data(grads, *a, d.iter().zip(y).map(|(&g, &y)| g * y).collect());
            }
            Op::Log(a) => {
                let xv = self.value(*a).data();
                self.acc_data(grads, *a, d.iter().zip(xv).map(|(&g, &x)| g / x).collect());
            }
            Op::SumAll(a) => {
                let t = Tensor::full(self.shape(*a), d[0]);
                self.acc(grads, *a, t);
            }
            Op::MeanAll(a) => {
                let n = T::from_usize_lossy(self.value(*a).len().max(1));
                let t = Tensor::full(self.shape(*a), d[0] / n);
                self.acc(grads, *a, t);
            }
            Op::LogSumExp(a, axis) => {
                let (m, n) = dims2("logsumexp", self.value(*a))?;
                let xv = self.value(*a).data();
                let lse = node.value.data();
                let mut g = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        let r = match axis {
                            Axis::Cols => i,
                            Axis::Rows => j,
                        };
                        if lse[r] != T::neg_infinity() {
                            g[i * n + j] = d[r] * (xv[i * n + j] - lse[r]).exp();
                        }
                    }
                }
                self.acc_data(grads, *a, g);
            }
            Op::L2NormalizeRows { x, norms } => {
                let (m, n) = dims2("l2_normalize_rows", self.value(*x))?;
                let y = node.value.data();
                let eps = T::lit(1e-12);
                let xv = self.value(*x).data();
                let mut g = vec![T::zero(); m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let dr = &d[i * n..(i + 1) * n];
                    let raw = xv[i * n..(i + 1) * n].iter().map(|&v| v * v).sum::<T>().sqrt();
                    if raw <= eps {
                        for j in 0..n {
                            g[i * n + j] = dr[j] / norms[i];
                        }
                        continue;
                    }
                    let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        g[i * n + j] = (dr[j] - yr[j] * dot) / norms[i];
                    }
                }
                self.acc_data(grads, *x, g);
            }
            Op::SqDist(a, b) => {
                let (m, dd) = dims2("sqdist", self.value(*a))?;
                let n = self.shape(*b)[0];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let two = T::lit(2.0);
                let mut ga = vec![T::zero(); m * dd];
                let mut gb = vec![T::zero(); n * dd];
                for i in 0..m {
                    for j in 0..n {
                        let w = two * d[i * n + j];
                        if w == T::zero() {
                            continue;
                        }
                        for k in 0..dd {
                            let diff = w * (av[i * dd + k] - bv[j * dd + k]);
                            ga[i * dd + k] += diff;
                            gb[j * dd + k] -= diff;
                        }
                    }
                }
                self.acc_data(grads, *a, ga);
                self.acc_data(grads, *b, gb);
            }
            Op::Pick { x, idx } => {
                let n = self.shape(*x)[1];
                let mut g = vec![T::zero(); self.value(*x).len()];
                for (i, &j) in idx.iter().enumerate() {
                    g[i * n + j] += d[i];
                }
                self.acc_data(grads, *x, g);
            }
            Op::SelectRows { x, idx } => {
                let w: usize = self.shape(*x)[1..].iter().product();
                let mut g = vec![T::zero(); self.value(*x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..w {
                        g[i * w + k] += d[r * w + k];
                    }
                }
                self.acc_data(grads, *x, g);
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let k = self.shape(p)[*axis];
                    if self.needs(p) {
                        let mut g = Vec::with_capacity(outer * k * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            g.extend_from_slice(&d[start..start + k * inner]);
                        }
                        self.acc_data(grads, p, g);
                    }
                    offset += k;
                }
            }
            Op::Conv1d { x, w, b, geom } => {
                let (gx, gw, gb) = conv::conv1d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    d,
                    self.needs(*x),
                );
                if self.needs(*x) {
                    self.acc_data(grads, *x, gx);
                }
                self.acc_data(grads, *w, gw);
                if let Some(b) = b {
                    self.acc_data(grads, *b, gb);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = conv::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    d,
                    self.needs(*x),
                );
                if self.needs(*x) {
                    self.acc_data(grads, *x, gx);
                }
                self.acc_data(grads, *w, gw);
                if let Some(b) = b {
                    self.acc_data(grads, *b, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); d.len()];
                let cnt = T::from_usize_lossy(n * inner);
                for ch in 0..c {
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xhat = T::zero();
                    for bi in 0..n {
                        let base = (bi * c + ch) * inner;
                        for k in base..base + inner {
                            sum_dy += d[k];
                            sum_dy_xhat += d[k] * xhat[k];
                        }
                    }
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    let scale = g[ch] * inv_std[ch];
                    for bi in 0..n {
                        let base = (bi * c + ch) * inner;
                        for k in base..base + inner {
                            dx[k] = if *training {
                                scale * (d[k] - sum_dy / cnt - xhat[k] * sum_dy_xhat / cnt)
                            } else {
                                scale * d[k]
                            };
                        }
                    }
                }
                self.acc_data(grads, *x, dx);
                self.acc_data(grads, *gamma, dgamma);
                self.acc_data(grads, *beta, dbeta);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let g = self.value(*gamma).data();
                let cf = T::from_usize_lossy(c);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); d.len()];
                for b in 0..n {
                    for p in 0..inner {
                        let idx = |ch: usize| (b * c + ch) * inner + p;
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for ch in 0..c {
                            let k = idx(ch);
                            let dh = d[k] * g[ch];
                            s1 += dh;
                            s2 += dh * xhat[k];
                            dgamma[ch] += d[k] * xhat[k];
                            dbeta[ch] += d[k];
                        }
                        let is = inv_std[b * inner + p];
                        for ch in 0..c {
                            let k = idx(ch);
                            let dh = d[k] * g[ch];
                            dx[k] = is * (dh - s1 / cf - xhat[k] * s2 / cf);
                        }
                    }
                }
                self.acc_data(grads, *x, dx);
                self.acc_data(grads, *gamma, dgamma);
                self.acc_data(grads, *beta, dbeta);
            }
            Op::AvgPool1d { x, kernel } => {
                let s = self.shape(*x);
                let (l, lo) = (s[2], node.value.shape()[2]);
                let kf = T::from_usize_lossy(*kernel);
                let mut g = vec![T::zero(); self.value(*x).len()];
                for r in 0..s[0] * s[1] {
                    for t in 0..lo {
                        let v = d[r * lo + t] / kf;
                        let start = r * l + t * kernel;
                        for slot in &mut g[start..start + kernel] {
                            *slot = v;
                        }
                    }
                }
                self.acc_data(grads, *x, g);
            }
            Op::GlobalAvgPool(x) => {
                let inner: usize = self.shape(*x)[2..].iter().product();
                let f = T::from_usize_lossy(inner);
                let mut g = Vec::with_capacity(self.value(*x).len());
                for &v in d {
                    g.extend(std::iter::repeat_n(v / f, inner));
                }
                self.acc_data(grads, *x, g);
            }
            Op::Dropout { x, mask } => {
                self.acc_data(grads, *x, d.iter().zip(mask).map(|(&g, &m)| g * m).collect());
            }
        }
        Ok(())
    }
}
