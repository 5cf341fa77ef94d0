//! Reverse-mode tape.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Ops append
//! nodes; [`Graph::backward`] walks them in reverse. A graph built with
//! [`Graph::no_grad`] stores values only and cannot be differentiated.

use std::collections::BTreeMap;

use crate::error::{geometry_err, shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{GradMap, ParamSet, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, f64),
    ScaleBy(Var, Var),
    MulRow(Var, Var),
    AddRow(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    ChwToTokens(Var),
    TokensToChw(Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Bilinear(Var),
    SpaceToDepth(Var, usize),
    DepthToSpace(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; an exact zero tensor when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.dims[v.0].clone()).expect("node dims are valid"),
        }
    }
}

/// Parameters placed on a graph as differentiable leaves.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Usage(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Graph {
    /// A recording graph.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A value-only graph; every node is a constant.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        let rg = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if rg { op } else { Op::Constant };
        Ok(self.push_raw(value, op, rg))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    /// A differentiable input. On a no-grad graph this is a constant.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.record;
        self.push_raw(value, if rg { Op::Leaf } else { Op::Constant }, rg)
    }

    pub fn bind(&mut self, params: &ParamSet) -> BoundParams {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_string(), self.leaf(t.clone())))
            .collect();
        BoundParams { vars }
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return shape_err(op, self.dims(a), self.dims(b));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(av.dims().to_vec(), data).expect("same dims")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::new(
            av.dims().to_vec(),
            av.data().iter().map(|x| f(*x)).collect(),
        )
        .expect("same dims")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.map(a, |x| x * c);
        self.push("mul_const", out, Op::MulConst(a, c), &[a])
    }

    /// `x * s` for a one-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err("scale_by", self.dims(x), self.dims(s));
        }
        let sv = self.value(s).data()[0];
        let out = self.map(x, |v| v * sv);
        self.push("scale_by", out, Op::ScaleBy(x, s), &[x, s])
    }

    fn row_operand(&self, op: &'static str, x: Var, r: Var) -> Result<(usize, usize)> {
        let (n, d) = self.value(x).rows_cols()?;
        if self.dims(r) != [d] {
            return shape_err(op, self.dims(x), self.dims(r));
        }
        Ok((n, d))
    }

    /// `(n,d) * (d)` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (_, d) = self.row_operand("mul_row", x, r)?;
        let rv = self.value(r).data().to_vec();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * rv[i % d])
            .collect();
        let out = Tensor::new(xv.dims().to_vec(), data)?;
        self.push("mul_row", out, Op::MulRow(x, r), &[x, r])
    }

    /// `(n,d) + (d)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (_, d) = self.row_operand("add_row", x, r)?;
        let rv = self.value(r).data().to_vec();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + rv[i % d])
            .collect();
        let out = Tensor::new(xv.dims().to_vec(), data)?;
        self.push("add_row", out, Op::AddRow(x, r), &[x, r])
    }

    /// `x W^T + b` for `x (n,in)`, `W (out,in)`, `b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (_, din) = self.value(x).rows_cols()?;
        let (dout, din2) = self.value(w).rows_cols()?;
        if din != din2 {
            return shape_err("linear", self.dims(x), self.dims(w));
        }
        let mut out = kernels::matmul_nt(self.value(x), self.value(w))?;
        if let Some(b) = b {
            if self.dims(b) != [dout] {
                return shape_err("linear bias", self.dims(b), &[dout]);
            }
            let bv = self.value(b).data().to_vec();
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o += bv[i % dout];
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("linear", out, Op::Linear { x, w, b }, &parents)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_nt(self.value(a), self.value(b))?;
        self.push("matmul_nt", out, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::tanh);
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, kernels::gelu_scalar);
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    /// Softmax over the last axis of a rank-2 tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(a))?;
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    /// Layer norm over the last axis of `(n,d)` with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.value(x).rows_cols()?;
        if self.dims(gamma) != [d] || self.dims(beta) != [d] {
            return shape_err("layer_norm", self.dims(x), self.dims(gamma));
        }
        let (xhat, rstd) = kernels::layer_norm_stats(self.value(x))?;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let data: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % d] + b[i % d])
            .collect();
        let out = Tensor::new(vec![n, d], data)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push("layer_norm", out, op, &[x, gamma, beta])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Usage("concat of zero tensors".into()));
        };
        let base = self.dims(first).to_vec();
        if axis >= base.len() {
            return geometry_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.len() != base.len()
                || d.iter()
                    .enumerate()
                    .any(|(i, e)| i != axis && *e != base[i])
            {
                return shape_err("concat", &base, d);
            }
            total += d[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.dims(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut dims = base;
        dims[axis] = total;
        let out = Tensor::new(dims, data)?;
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        self.push("concat", out, op, parts)
    }

    /// Channel concatenation of `C,H,W` tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.value(p).chw()?;
        }
        self.concat(parts, 0)
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if axis >= dims.len() || len == 0 || start + len > dims[axis] {
            return geometry_err(
                "narrow",
                format!("range {start}+{len} on axis {axis} of {dims:?}"),
            );
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dims[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_dims = dims;
        out_dims[axis] = len;
        let out = Tensor::new(out_dims, data)?;
        self.push("narrow", out, Op::Narrow { x, axis, start }, &[x])
    }

    /// Spatial crop of a `C,H,W` tensor.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        self.value(x).chw()?;
        let rows = self.narrow(x, 1, top, h)?;
        self.narrow(rows, 2, left, w)
    }

    pub fn chw_to_tokens(&mut self, x: Var) -> Result<Var> {
        let out = kernels::chw_to_tokens(self.value(x))?;
        self.push("chw_to_tokens", out, Op::ChwToTokens(x), &[x])
    }

    pub fn tokens_to_chw(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = kernels::tokens_to_chw(self.value(x), h, w)?;
        self.push("tokens_to_chw", out, Op::TokensToChw(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = kernels::transpose(self.value(x))?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(dims.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom }, &parents)
    }

    pub fn interpolate_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::bilinear(self.value(x), out_h, out_w)?;
        self.push("interpolate_bilinear", out, Op::Bilinear(x), &[x])
    }

    pub fn space_to_depth(&mut self, x: Var, block: usize) -> Result<Var> {
        let out = kernels::space_to_depth(self.value(x), block)?;
        self.push("space_to_depth", out, Op::SpaceToDepth(x, block), &[x])
    }

    pub fn depth_to_space(&mut self, x: Var, block: usize) -> Result<Var> {
        let out = kernels::depth_to_space(self.value(x), block)?;
        self.push("depth_to_space", out, Op::DepthToSpace(x, block), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Column means of `(n,d)` as a `(1,d)` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).rows_cols()?;
        let src = self.value(x).data();
        let mut data = vec![0.0; d];
        for i in 0..n {
            for (o, v) in data.iter_mut().zip(&src[i * d..(i + 1) * d]) {
                *o += v;
            }
        }
        for o in &mut data {
            *o /= n as f64;
        }
        let out = Tensor::new(vec![1, d], data)?;
        self.push("mean_rows", out, Op::MeanRows(x), &[x])
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(TensorError::Usage("backward on a no-grad graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(self.dims(loss).to_vec())?);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(&node.op, Var(i), &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let dims = self.nodes.iter().map(|n| n.value.dims().to_vec()).collect();
        Ok(Gradients { grads, dims })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.dims(), self.dims(v));
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: Var, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| self.value(v);
        let scaled = |t: &Tensor, f: &dyn Fn(usize, f64) -> f64| {
            let data = t.data().iter().enumerate().map(|(i, v)| f(i, *v)).collect();
            Tensor::new(t.dims().to_vec(), data).expect("same dims")
        };
        match op {
            Op::Constant | Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, scaled(g, &|_, v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                self.acc(grads, *a, scaled(g, &|i, v| v * bv[i]));
                self.acc(grads, *b, scaled(g, &|i, v| v * av[i]));
            }
            Op::MulConst(a, c) => self.acc(grads, *a, scaled(g, &|_, v| v * c)),
            Op::ScaleBy(x, s) => {
                let sv = val(*s).data()[0];
                let xv = val(*x).data();
                self.acc(grads, *x, scaled(g, &|_, v| v * sv));
                let ds: f64 = g.data().iter().zip(xv).map(|(a, b)| a * b).sum();
                self.acc(grads, *s, Tensor::new(self.dims(*s).to_vec(), vec![ds])?);
            }
            Op::MulRow(x, r) => {
                let d = self.dims(*r)[0];
                let (xv, rv) = (val(*x).data(), val(*r).data());
                self.acc(grads, *x, scaled(g, &|i, v| v * rv[i % d]));
                let mut dr = vec![0.0; d];
                for (i, v) in g.data().iter().enumerate() {
                    dr[i % d] += v * xv[i];
                }
                self.acc(grads, *r, Tensor::new(vec![d], dr)?);
            }
            Op::AddRow(x, r) => {
                let d = self.dims(*r)[0];
                self.acc(grads, *x, g.clone());
                let mut dr = vec![0.0; d];
                for (i, v) in g.data().iter().enumerate() {
                    dr[i % d] += v;
                }
                self.acc(grads, *r, Tensor::new(vec![d], dr)?);
            }
            Op::Linear { x, w, b } => {
                if self.requires_grad(*x) {
                    self.acc(grads, *x, kernels::matmul(g, val(*w))?);
                }
                if self.requires_grad(*w) {
                    self.acc(grads, *w, kernels::matmul_tn(g, val(*x))?);
                }
                if let Some(b) = b {
                    let (_, dout) = g.rows_cols()?;
                    let mut db = vec![0.0; dout];
                    for (i, v) in g.data().iter().enumerate() {
                        db[i % dout] += v;
                    }
                    self.acc(grads, *b, Tensor::new(vec![dout], db)?);
                }
            }
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.acc(grads, *a, kernels::matmul_nt(g, val(*b))?);
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, kernels::matmul_tn(val(*a), g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.requires_grad(*a) {
                    self.acc(grads, *a, kernels::matmul(g, val(*b))?);
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, kernels::matmul_tn(g, val(*a))?);
                }
            }
            Op::Tanh(a) => {
                let y = val(out).data();
                self.acc(grads, *a, scaled(g, &|i, v| v * (1.0 - y[i] * y[i])));
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                self.acc(
                    grads,
                    *a,
                    scaled(g, &|i, v| v * kernels::gelu_grad_scalar(x[i])),
                );
            }
            Op::Softmax(a) => {
                let (r, c) = g.rows_cols()?;
                let y = val(out).data();
                let gd = g.data();
                let mut dx = vec![0.0; gd.len()];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = gd[row.clone()]
                        .iter()
                        .zip(&y[row.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for j in row {
                        dx[j] = y[j] * (gd[j] - dot);
                    }
                }
                self.acc(grads, *a, Tensor::new(vec![r, c], dx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = g.rows_cols()?;
                let gm = val(*gamma).data();
                let gd = g.data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let k = i * d + j;
                        dgamma[j] += gd[k] * xhat[k];
                        dbeta[j] += gd[k];
                        let dxh = gd[k] * gm[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[k];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        let k = i * d + j;
                        let dxh = gd[k] * gm[j];
                        dx[k] = rstd[i] * (dxh - mean_dxhat - xhat[k] * mean_dxhat_xhat);
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![n, d], dx)?);
                self.acc(grads, *gamma, Tensor::new(vec![d], dgamma)?);
                self.acc(grads, *beta, Tensor::new(vec![d], dbeta)?);
            }
            Op::Concat { parts, axis } => {
                let dims = g.dims();
                let outer: usize = dims[..*axis].iter().product();
                let inner: usize = dims[axis + 1..].iter().product();
                let total = dims[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.dims(p)[*axis];
                    if self.requires_grad(p) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.acc(grads, p, Tensor::new(self.dims(p).to_vec(), data)?);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let full = self.dims(*x);
                let outer: usize = full[..*axis].iter().product();
                let inner: usize = full[axis + 1..].iter().product();
                let len = g.dims()[*axis];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * full[*axis] + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.acc(grads, *x, Tensor::new(full.to_vec(), dx)?);
            }
            Op::ChwToTokens(x) => {
                let (_, h, w) = val(*x).chw()?;
                self.acc(grads, *x, kernels::tokens_to_chw(g, h, w)?);
            }
            Op::TokensToChw(x) => self.acc(grads, *x, kernels::chw_to_tokens(g)?),
            Op::Transpose(x) => self.acc(grads, *x, kernels::transpose(g)?),
            Op::Reshape(x) => self.acc(grads, *x, g.reshape(self.dims(*x).to_vec())?),
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv2d_backward(val(*x), val(*w), g, *geom)?;
                self.acc(grads, *x, gx);
                self.acc(grads, *w, gw);
                if let Some(b) = b {
                    self.acc(grads, *b, gb);
                }
            }
            Op::Bilinear(x) => {
                let (_, h, w) = val(*x).chw()?;
                self.acc(grads, *x, kernels::bilinear_backward(g, h, w)?);
            }
            Op::SpaceToDepth(x, block) => self.acc(grads, *x, kernels::depth_to_space(g, *block)?),
            Op::DepthToSpace(x, block) => self.acc(grads, *x, kernels::space_to_depth(g, *block)?),
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.acc(grads, *x, Tensor::full(self.dims(*x).to_vec(), gv)?);
            }
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                let gv = g.data()[0] / n;
                self.acc(grads, *x, Tensor::full(self.dims(*x).to_vec(), gv)?);
            }
            Op::MeanRows(x) => {
                let (n, d) = val(*x).rows_cols()?;
                let gd = g.data();
                let data = (0..n * d).map(|i| gd[i % d] / n as f64).collect();
                self.acc(grads, *x, Tensor::new(vec![n, d], data)?);
            }
        }
        Ok(())
    }
}

/// Gradient of `loss` with respect to every bound parameter. Parameters the
/// loss does not reach get exact zeros.
pub fn backward(graph: &Graph, loss: Var, params: &BoundParams) -> Result<GradMap> {
    let grads = graph.backward(loss)?;
    Ok(params
        .iter()
        .map(|(name, v)| (name.to_string(), grads.get(v)))
        .collect())
}
