//! Reverse-mode differentiation over a recorded forward pass.
//!
//! Every operation appends a node holding its output value. Nodes are only
//! ever appended after their inputs, so creation order is a topological
//! order and `backward` walks it in reverse exactly once.

use std::collections::BTreeMap;

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::params::ParamSet;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    AddSampleBias { x: Var, b: Var },
    Conv3x3 { x: Var, w: Var, stride: usize },
    Upsample2(Var),
    Concat { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Silu(Var),
    Sigmoid(Var),
    Square(Var),
    Abs(Var),
    Sqrt(Var),
    SumLast(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a named trainable parameter.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Gradient of any node that required one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn insert_param(&mut self, name: impl Into<String>, grad: Tensor) {
        self.params.insert(name.into(), grad);
    }

    /// Adds `other`'s parameter gradients into `self`.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (name, g) in &other.params {
            match self.params.get_mut(name) {
                Some(acc) => {
                    acc.same_shape(g)?;
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.params.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }
}

/// Tape of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical(format!("non-finite output from {op:?}")));
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An unnamed leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A named parameter; it requires a gradient iff it is trainable in `params`.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        let entry = params
            .entry(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))?;
        self.nodes.push(Node {
            op: Op::Param(name.to_string()),
            value: entry.tensor.clone(),
            requires_grad: entry.trainable,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `x [n, k] · w [k, m] -> [n, m]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return shape_err(format!("matmul {xs:?} x {ws:?}"));
        }
        let (n, k, m) = (xs[0], xs[1], ws[1]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0f32; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for (p, &xv) in xd[i * k..(i + 1) * k].iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (o, &wv) in row.iter_mut().zip(&wd[p * m..(p + 1) * m]) {
                    *o += xv * wv;
                }
            }
        }
        let rg = self.rg(&[x, w]);
        self.push(Op::MatMul { x, w }, Tensor::new(vec![n, m], out)?, rg)
    }

    /// Adds `b [C]` to every length-`C` row along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(b).shape();
        let c = *xs.last().unwrap_or(&0);
        if bs.len() != 1 || bs[0] != c {
            return shape_err(format!("bias {bs:?} for input {xs:?}"));
        }
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, &bv) in chunk.iter_mut().zip(&bd) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(Op::AddBias { x, b }, out, rg)
    }

    /// Adds a per-sample channel vector `b [N, C]` to `x [N, ..., C]`.
    pub fn add_sample_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(b).shape();
        if bs.len() != 2 || xs.len() < 2 || bs[0] != xs[0] || bs[1] != *xs.last().unwrap() {
            return shape_err(format!("sample bias {bs:?} for input {xs:?}"));
        }
        let c = bs[1];
        let per = self.value(x).item_len();
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (n, item) in out.data_mut().chunks_mut(per).enumerate() {
            let row = &bd[n * c..(n + 1) * c];
            for chunk in item.chunks_mut(c) {
                for (o, &bv) in chunk.iter_mut().zip(row) {
                    *o += bv;
                }
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(Op::AddSampleBias { x, b }, out, rg)
    }

    /// Same-padded 3x3 convolution of `x [N, H, W, Ci]` with `w [3, 3, Ci, Co]`.
    /// Stride 2 halves the spatial extents (rounding up).
    pub fn conv3x3(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        if stride != 1 && stride != 2 {
            return invalid(format!("conv3x3 stride must be 1 or 2, got {stride}"));
        }
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != 3 || ws[1] != 3 || ws[2] != xs[3] {
            return shape_err(format!("conv3x3 input {xs:?} kernel {ws:?}"));
        }
        let geo = ConvGeom::new(&xs, ws[3], stride);
        let out = conv_forward(self.value(x).data(), self.value(w).data(), &geo);
        let rg = self.rg(&[x, w]);
        self.push(
            Op::Conv3x3 { x, w, stride },
            Tensor::new(vec![geo.n, geo.oh, geo.ow, geo.co], out)?,
            rg,
        )
    }

    /// Nearest-neighbour 2x upsampling of `[N, H, W, C]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return shape_err(format!("upsample2 needs [N,H,W,C], got {xs:?}"));
        }
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; n * 4 * h * w * c];
        for b in 0..n {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let s = ((b * h + y / 2) * w + xx / 2) * c;
                    let d = ((b * 2 * h + y) * 2 * w + xx) * c;
                    out[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Op::Upsample2(x),
            Tensor::new(vec![n, 2 * h, 2 * w, c], out)?,
            rg,
        )
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return shape_err(format!("concat {sa:?} with {sb:?}"));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = self.value(a).len() / ca.max(1);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for r in 0..rows {
            out.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let rg = self.rg(&[a, b]);
        self.push(Op::Concat { a, b }, Tensor::new(shape, out)?, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(&[a, b]);
        self.push(op, out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Result<Var> {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(op, out, rg)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), f32::abs)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numerical("sqrt of a non-positive value".into()));
        }
        self.unary(x, Op::Sqrt(x), f32::sqrt)
    }

    /// Sums the last axis: `[..., m] -> [...]` (a 1-D input gives `[1]`).
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let m = *xs.last().unwrap_or(&1);
        let out: Vec<f32> = self
            .value(x)
            .data()
            .chunks(m.max(1))
            .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        let shape = if xs.len() > 1 {
            xs[..xs.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let rg = self.rg(&[x]);
        self.push(Op::SumLast(x), Tensor::new(shape, out)?, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum() as f32;
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return invalid("mean of an empty tensor");
        }
        let s = (t.sum() / t.len() as f64) as f32;
        let rg = self.rg(&[x]);
        self.push(Op::Mean(x), Tensor::scalar(s), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(Op::Reshape(x), out, rg)
    }

    /// `x · w + b` with `w [k, m]`, `b [m]` taken from `params` under `prefix.w` / `prefix.b`.
    pub fn dense(&mut self, x: Var, params: &ParamSet, prefix: &str) -> Result<Var> {
        let w = self.param(params, &format!("{prefix}.w"))?;
        let b = self.param(params, &format!("{prefix}.b"))?;
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Convolution plus channel bias from `prefix.w` / `prefix.b`.
    pub fn conv_layer(
        &mut self,
        x: Var,
        params: &ParamSet,
        prefix: &str,
        stride: usize,
    ) -> Result<Var> {
        let w = self.param(params, &format!("{prefix}.w"))?;
        let b = self.param(params, &format!("{prefix}.b"))?;
        let y = self.conv3x3(x, w, stride)?;
        self.add_bias(y, b)
    }

    /// Runs the reverse sweep from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                params: BTreeMap::new(),
                nodes: grads,
            });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }

        let mut params = BTreeMap::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Param(name), Some(g)) = (&node.op, g) {
                match params.get_mut(name) {
                    None => {
                        params.insert(name.clone(), g.clone());
                    }
                    Some(acc) => {
                        let acc: &mut Tensor = acc;
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }

    fn backprop_node(
        &self,
        node: &Node,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let g = gout.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { x, w } => {
                let (xs, ws) = (self.value(*x).shape(), self.value(*w).shape());
                let (n, k, m) = (xs[0], xs[1], ws[1]);
                if self.requires_grad(*x) {
                    let wd = self.value(*w).data();
                    let mut dx = vec![0.0f32; n * k];
                    for i in 0..n {
                        let gr = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let wr = &wd[p * m..(p + 1) * m];
                            dx[i * k + p] = gr.iter().zip(wr).map(|(a, b)| a * b).sum();
                        }
                    }
                    accumulate(grads, *x, xs, dx)?;
                }
                if self.requires_grad(*w) {
                    let xd = self.value(*x).data();
                    let mut dw = vec![0.0f32; k * m];
                    for i in 0..n {
                        let gr = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let xv = xd[i * k + p];
                            if xv == 0.0 {
                                continue;
                            }
                            for (d, &gv) in dw[p * m..(p + 1) * m].iter_mut().zip(gr) {
                                *d += xv * gv;
                            }
                        }
                    }
                    accumulate(grads, *w, ws, dw)?;
                }
            }
            Op::AddBias { x, b } => {
                if self.requires_grad(*x) {
                    accumulate(grads, *x, gout.shape(), g.to_vec())?;
                }
                if self.requires_grad(*b) {
                    let c = self.value(*b).len();
                    let mut db = vec![0.0f32; c];
                    for chunk in g.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, &[c], db)?;
                }
            }
            Op::AddSampleBias { x, b } => {
                if self.requires_grad(*x) {
                    accumulate(grads, *x, gout.shape(), g.to_vec())?;
                }
                if self.requires_grad(*b) {
                    let bs = self.value(*b).shape().to_vec();
                    let c = bs[1];
                    let per = gout.item_len();
                    let mut db = vec![0.0f32; bs[0] * c];
                    for (n, item) in g.chunks(per).enumerate() {
                        let row = &mut db[n * c..(n + 1) * c];
                        for chunk in item.chunks(c) {
                            for (d, &v) in row.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                    }
                    accumulate(grads, *b, &bs, db)?;
                }
            }
            Op::Conv3x3 { x, w, stride } => {
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let geo = ConvGeom::new(&xs, ws[3], *stride);
                if self.requires_grad(*x) {
                    let dx = conv_backward_input(g, self.value(*w).data(), &geo);
                    accumulate(grads, *x, &xs, dx)?;
                }
                if self.requires_grad(*w) {
                    let dw = conv_backward_kernel(g, self.value(*x).data(), &geo);
                    accumulate(grads, *w, &ws, dw)?;
                }
            }
            Op::Upsample2(x) => {
                let xs = self.value(*x).shape().to_vec();
                let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
                let mut dx = vec![0.0f32; n * h * w * c];
                for b in 0..n {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let s = ((b * h + y / 2) * w + xx / 2) * c;
                            let d = ((b * 2 * h + y) * 2 * w + xx) * c;
                            for ch in 0..c {
                                dx[s + ch] += g[d + ch];
                            }
                        }
                    }
                }
                accumulate(grads, *x, &xs, dx)?;
            }
            Op::Concat { a, b } => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
                let rows = g.len() / (ca + cb);
                if self.requires_grad(*a) {
                    let mut da = Vec::with_capacity(rows * ca);
                    for r in 0..rows {
                        da.extend_from_slice(&g[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                    accumulate(grads, *a, &sa, da)?;
                }
                if self.requires_grad(*b) {
                    let mut db = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        db.extend_from_slice(&g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                    accumulate(grads, *b, &sb, db)?;
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.requires_grad(*v) {
                        accumulate(grads, *v, gout.shape(), g.to_vec())?;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, gout.shape(), g.to_vec())?;
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, gout.shape(), g.iter().map(|v| -v).collect())?;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let d = g.iter().zip(vb).map(|(gv, bv)| gv * bv).collect();
                    accumulate(grads, *a, gout.shape(), d)?;
                }
                if self.requires_grad(*b) {
                    let d = g.iter().zip(va).map(|(gv, av)| gv * av).collect();
                    accumulate(grads, *b, gout.shape(), d)?;
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let d = g.iter().zip(vb).map(|(gv, bv)| gv / bv).collect();
                    accumulate(grads, *a, gout.shape(), d)?;
                }
                if self.requires_grad(*b) {
                    let d = g
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                        .collect();
                    accumulate(grads, *b, gout.shape(), d)?;
                }
            }
            Op::Scale(x, c) => {
                accumulate(grads, *x, gout.shape(), g.iter().map(|v| v * c).collect())?;
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, &shape, g.to_vec())?;
            }
            Op::Silu(x) => {
                let d = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &v)| {
                        let s = sigmoid(v);
                        gv * (s + v * s * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, *x, gout.shape(), d)?;
            }
            Op::Sigmoid(x) => {
                let d = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, &s)| gv * s * (1.0 - s))
                    .collect();
                accumulate(grads, *x, gout.shape(), d)?;
            }
            Op::Square(x) => {
                let d = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &v)| 2.0 * gv * v)
                    .collect();
                accumulate(grads, *x, gout.shape(), d)?;
            }
            Op::Abs(x) => {
                let d = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &v)| {
                        if v > 0.0 {
                            *gv
                        } else if v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *x, gout.shape(), d)?;
            }
            Op::Sqrt(x) => {
                let d = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, &s)| gv * 0.5 / s)
                    .collect();
                accumulate(grads, *x, gout.shape(), d)?;
            }
            Op::SumLast(x) => {
                let xs = self.value(*x).shape().to_vec();
                let m = *xs.last().unwrap_or(&1);
                let mut d = Vec::with_capacity(self.value(*x).len());
                for &gv in g {
                    d.extend(std::iter::repeat_n(gv, m));
                }
                accumulate(grads, *x, &xs, d)?;
            }
            Op::Sum(x) => {
                let xs = self.value(*x).shape().to_vec();
                let n = self.value(*x).len();
                accumulate(grads, *x, &xs, vec![g[0]; n])?;
            }
            Op::Mean(x) => {
                let xs = self.value(*x).shape().to_vec();
                let n = self.value(*x).len();
                accumulate(grads, *x, &xs, vec![g[0] / n as f32; n])?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], d: Vec<f32>) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(&d) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), d)?),
    }
    Ok(())
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    ci: usize,
    oh: usize,
    ow: usize,
    co: usize,
    stride: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], co: usize, stride: usize) -> Self {
        let (n, h, w, ci) = (xs[0], xs[1], xs[2], xs[3]);
        Self {
            n,
            h,
            w,
            ci,
            oh: (h + stride - 1) / stride,
            ow: (w + stride - 1) / stride,
            co,
            stride,
        }
    }

    /// Visits every (output pixel, input pixel, kernel tap) triple in a fixed order.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.n {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let o = (b * self.oh + oy) * self.ow + ox;
                    for ky in 0..3 {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let i = (b * self.h + iy as usize) * self.w + ix as usize;
                            f(o, i, ky * 3 + kx);
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &[f32], w: &[f32], geo: &ConvGeom) -> Vec<f32> {
    let (ci, co) = (geo.ci, geo.co);
    let mut out = vec![0.0f32; geo.n * geo.oh * geo.ow * co];
    geo.for_each_tap(|o, i, tap| {
        let orow = &mut out[o * co..(o + 1) * co];
        let xin = &x[i * ci..(i + 1) * ci];
        let wt = &w[tap * ci * co..(tap + 1) * ci * co];
        for (c, &xv) in xin.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (ov, &wv) in orow.iter_mut().zip(&wt[c * co..(c + 1) * co]) {
                *ov += xv * wv;
            }
        }
    });
    out
}

fn conv_backward_input(g: &[f32], w: &[f32], geo: &ConvGeom) -> Vec<f32> {
    let (ci, co) = (geo.ci, geo.co);
    let mut dx = vec![0.0f32; geo.n * geo.h * geo.w * ci];
    geo.for_each_tap(|o, i, tap| {
        let grow = &g[o * co..(o + 1) * co];
        let wt = &w[tap * ci * co..(tap + 1) * ci * co];
        let drow = &mut dx[i * ci..(i + 1) * ci];
        for (c, d) in drow.iter_mut().enumerate() {
            *d += grow
                .iter()
                .zip(&wt[c * co..(c + 1) * co])
                .map(|(a, b)| a * b)
                .sum::<f32>();
        }
    });
    dx
}

fn conv_backward_kernel(g: &[f32], x: &[f32], geo: &ConvGeom) -> Vec<f32> {
    let (ci, co) = (geo.ci, geo.co);
    let mut dw = vec![0.0f32; 9 * ci * co];
    geo.for_each_tap(|o, i, tap| {
        let grow = &g[o * co..(o + 1) * co];
        let xin = &x[i * ci..(i + 1) * ci];
        let wt = &mut dw[tap * ci * co..(tap + 1) * ci * co];
        for (c, &xv) in xin.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (d, &gv) in wt[c * co..(c + 1) * co].iter_mut().zip(grow) {
                *d += xv * gv;
            }
        }
    });
    dw
}
