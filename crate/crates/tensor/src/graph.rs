//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node whose operands are already on the tape, so the
//! node list is topologically ordered by construction and `backward` is a
//! single reverse sweep.

use crate::error::{invalid, Result, TensorError};
use crate::kernels::{self, ConvGeom, MatRef};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Powf(Var, f64),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    XLogX(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Concat(Vec<Var>),
    SliceCols { input: Var, start: usize },
    GatherRows { input: Var, index: Vec<usize> },
    SegmentMax { input: Var, winner: Vec<usize> },
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    MaxPool2x { input: Var, winner: Vec<usize> },
    Upsample2x(Var),
    DiffX(Var),
    DiffY(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Values are computed eagerly as ops are appended.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

/// `(outer, axis extent, inner)` split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn image_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(invalid(op, format!("expected [H, W, C], got {:?}", t.shape()))),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into a leaf by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    /// `max(x, s)` elementwise; the gradient is passed where `x > s`.
    pub fn clamp_min(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x.max(s), Op::ClampMin(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `x ln x` with the convention `0 ln 0 = 0`.
    pub fn xlogx(&mut self, a: Var) -> Var {
        self.unary(a, xlogx, Op::XLogX(a))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums the `rows x cols` view over rows, giving a `[cols]` vector.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let value = Tensor::new(&[cols], out).expect("sum_rows shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::SumRows(a), rg)
    }

    /// Sums over the last axis; the result drops that axis.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let mut shape = t.shape()[..t.rank().saturating_sub(1)].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(&shape, out).expect("sum_cols shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::SumCols(a), rg)
    }

    // ---- linear algebra / layout ---------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => return Err(shape_err("matmul", ta, tb)),
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            1.0,
            MatRef::rowmajor(ta.data(), k),
            MatRef::rowmajor(tb.data(), n),
            0.0,
            &mut out,
            n,
        );
        let value = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = match *t.shape() {
            [m, n] => (m, n),
            _ => return Err(invalid("transpose", format!("expected rank 2, got {:?}", t.shape()))),
        };
        let value = Tensor::new(&[n, m], transpose(t.data(), m, n))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    fn row_bcast(&mut self, name: &'static str, x: Var, r: Var, mul: bool) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(r));
        let cols = tx.cols();
        if tr.numel() != cols {
            return Err(shape_err(name, tx, tr));
        }
        let rv = tr.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if mul { v * rv[i % cols] } else { v + rv[i % cols] })
            .collect();
        let value = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x, r]);
        let op = if mul { Op::MulRow(x, r) } else { Op::AddRow(x, r) };
        Ok(self.push(value, op, rg))
    }

    /// Adds the `[C]` vector `r` to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_bcast("add_row", x, r, false)
    }

    /// Multiplies every row of `x` elementwise by the `[C]` vector `r`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_bcast("mul_row", x, r, true)
    }

    /// Multiplies row `m` of `x` by the scalar `v[m]`.
    pub fn mul_col(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        let cols = tx.cols();
        if tv.numel() != tx.rows() {
            return Err(shape_err("mul_col", tx, tv));
        }
        let vv = tv.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &e)| e * vv[i / cols])
            .collect();
        let value = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x, v]);
        Ok(self.push(value, Op::MulCol(x, v), rg))
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no operands"))?;
        let lead = self.value(*first).shape()[..self.value(*first).rank() - 1].to_vec();
        let mut total = 0;
        for p in parts {
            let t = self.value(*p);
            if t.shape()[..t.rank() - 1] != lead[..] {
                return Err(shape_err("concat", self.value(*first), t));
            }
            total += t.cols();
        }
        let rows = self.value(*first).rows();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        if start + len > cols {
            return Err(invalid(
                "slice_cols",
                format!("range {start}..{} exceeds {cols} columns", start + len),
            ));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(&shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols { input: a, start }, rg))
    }

    /// Rows of the `rows x cols` view picked by `index`, as `[index.len(), cols]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= t.rows() {
                return Err(invalid("gather_rows", format!("row {i} out of {}", t.rows())));
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(&[index.len(), cols], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            value,
            Op::GatherRows {
                input: a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise max over consecutive row segments: output row `n` is the
    /// max of rows `offsets[n]..offsets[n + 1]`. Empty segments give zeros.
    pub fn segment_max(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        if offsets.is_empty() || *offsets.last().unwrap() > t.rows() {
            return Err(invalid("segment_max", "offsets exceed the input rows"));
        }
        let n = offsets.len() - 1;
        let mut data = vec![0.0; n * cols];
        let mut winner = vec![usize::MAX; n * cols];
        for s in 0..n {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if hi < lo {
                return Err(invalid("segment_max", "offsets must be nondecreasing"));
            }
            for c in 0..cols {
                let mut best = usize::MAX;
                for r in lo..hi {
                    if best == usize::MAX || t.row(r)[c] > t.row(best)[c] {
                        best = r;
                    }
                }
                if best != usize::MAX {
                    data[s * cols + c] = t.row(best)[c];
                    winner[s * cols + c] = best * cols + c;
                }
            }
        }
        let value = Tensor::new(&[n, cols], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SegmentMax { input: a, winner }, rg))
    }

    // ---- normalizers ---------------------------------------------------

    fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
        if axis >= t.rank() {
            Err(invalid(op, format!("axis {axis} out of rank {}", t.rank())))
        } else {
            Ok(())
        }
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        Self::check_axis("softmax", t, axis)?;
        let value = Tensor::new(t.shape(), softmax_along(t.data(), t.shape(), axis, false))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax { input: a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        Self::check_axis("log_softmax", t, axis)?;
        let value = Tensor::new(t.shape(), softmax_along(t.data(), t.shape(), axis, true))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LogSoftmax { input: a, axis }, rg))
    }

    // ---- spatial -------------------------------------------------------

    /// Same-padded 2D convolution of an `[H, W, C_in]` input with a
    /// `[kh, kw, C_in / groups, C_out]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, dilation: usize, groups: usize) -> Result<Var> {
        let (h, w, cin) = image_dims("conv2d", self.value(input))?;
        let tk = self.value(kernel);
        let (kh, kw, cin_g, cout) = match *tk.shape() {
            [kh, kw, ci, co] => (kh, kw, ci, co),
            _ => {
                return Err(invalid(
                    "conv2d",
                    format!("kernel must be [kh, kw, cin/groups, cout], got {:?}", tk.shape()),
                ))
            }
        };
        if dilation < 1 {
            return Err(invalid("conv2d", "dilation must be at least 1"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel extents must be odd, got {kh}x{kw}")));
        }
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(invalid(
                "conv2d",
                format!("groups={groups} must divide C_in={cin} and C_out={cout}"),
            ));
        }
        if cin / groups != cin_g {
            return Err(shape_err("conv2d", self.value(input), tk));
        }
        let geom = ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            dilation,
            groups,
        };
        let out = kernels::conv2d_forward(&geom, self.value(input).data(), tk.data());
        let value = Tensor::new(&[h, w, cout], out)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2; odd extents are edge-replicated.
    pub fn max_pool2x(&mut self, a: Var) -> Result<Var> {
        let (h, w, c) = image_dims("max_pool2x", self.value(a))?;
        let (out, winner, oh, ow) = kernels::max_pool2x(self.value(a).data(), h, w, c);
        let value = Tensor::new(&[oh, ow, c], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MaxPool2x { input: a, winner }, rg))
    }

    /// Bilinear 2x upsampling with half-pixel centers.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let (h, w, c) = image_dims("upsample2x", self.value(a))?;
        let out = kernels::upsample2x(self.value(a).data(), h, w, c);
        let value = Tensor::new(&[2 * h, 2 * w, c], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Upsample2x(a), rg))
    }

    /// Forward difference along the width axis, zero in the last column.
    pub fn diff_x(&mut self, a: Var) -> Result<Var> {
        let (h, w, c) = image_dims("diff_x", self.value(a))?;
        let t = self.value(a).data();
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                for ch in 0..c {
                    let i = (y * w + x) * c + ch;
                    out[i] = t[i + c] - t[i];
                }
            }
        }
        let value = Tensor::new(&[h, w, c], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::DiffX(a), rg))
    }

    /// Forward difference along the height axis, zero in the last row.
    pub fn diff_y(&mut self, a: Var) -> Result<Var> {
        let (h, w, c) = image_dims("diff_y", self.value(a))?;
        let t = self.value(a).data();
        let stride = w * c;
        let mut out = vec![0.0; h * w * c];
        for i in 0..h.saturating_sub(1) * stride {
            out[i] = t[i + stride] - t[i];
        }
        let value = Tensor::new(&[h, w, c], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::DiffY(a), rg))
    }

    // ---- backward ------------------------------------------------------

    /// Seeds `terminal` with a gradient of ones and back-propagates.
    pub fn backward_scalar(&mut self, terminal: Var) -> Result<()> {
        let seed = Tensor::ones(self.shape(terminal));
        self.backward(terminal, seed)
    }

    /// Back-propagates `seed` from `terminal`. Afterwards every leaf that
    /// requires gradients and feeds `terminal` holds its gradient. A graph
    /// can be consumed only once.
    pub fn backward(&mut self, terminal: Var, seed: Tensor) -> Result<()> {
        if self.consumed {
            return Err(TensorError::Consumed);
        }
        if seed.shape() != self.shape(terminal) {
            return Err(TensorError::SeedMismatch {
                seed: seed.shape().to_vec(),
                terminal: self.shape(terminal).to_vec(),
            });
        }
        self.consumed = true;
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.requires_grad(terminal) {
            return Ok(());
        }
        self.grads[terminal.0] = Some(seed);
        for i in (0..=terminal.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g);
            for (v, t) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape(), data).expect("grad shape");
        let zip = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            a.data().iter().zip(g.data()).map(|(&x, &gy)| f(x, gy)).collect()
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                vec![
                    (*a, like(ta, zip(tb, &|x, gy| x * gy))),
                    (*b, like(tb, zip(ta, &|x, gy| x * gy))),
                ]
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let da = zip(tb, &|x, gy| gy / x);
                let db = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .zip(g.data())
                    .map(|((&x, &z), &gy)| -gy * x / (z * z))
                    .collect();
                vec![(*a, like(ta, da)), (*b, like(tb, db))]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|v| v * s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::ClampMin(a, s) => {
                let s = *s;
                vec![(*a, like(y, zip(val(*a), &|x, gy| if x > s { gy } else { 0.0 })))]
            }
            Op::Exp(a) => vec![(*a, like(y, zip(y, &|e, gy| e * gy)))],
            Op::Log(a) => vec![(*a, like(y, zip(val(*a), &|x, gy| gy / x)))],
            Op::Sqrt(a) => vec![(*a, like(y, zip(y, &|s, gy| 0.5 * gy / s)))],
            Op::Powf(a, p) => {
                let p = *p;
                vec![(*a, like(y, zip(val(*a), &|x, gy| gy * p * x.powf(p - 1.0))))]
            }
            Op::Abs(a) => vec![(*a, like(y, zip(val(*a), &|x, gy| gy * sign(x))))],
            Op::Relu(a) => vec![(*a, like(y, zip(val(*a), &|x, gy| if x > 0.0 { gy } else { 0.0 })))],
            Op::Sigmoid(a) => vec![(*a, like(y, zip(y, &|s, gy| gy * s * (1.0 - s))))],
            Op::Square(a) => vec![(*a, like(y, zip(val(*a), &|x, gy| 2.0 * x * gy)))],
            Op::XLogX(a) => vec![(
                *a,
                like(y, zip(val(*a), &|x, gy| if x > 0.0 { gy * (x.ln() + 1.0) } else { 0.0 })),
            )],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::SumRows(a) => {
                let ta = val(*a);
                let cols = ta.cols();
                let gd = g.data();
                vec![(*a, Tensor::from_fn(ta.shape(), |i| gd[i % cols]))]
            }
            Op::SumCols(a) => {
                let ta = val(*a);
                let cols = ta.cols();
                let gd = g.data();
                vec![(*a, Tensor::from_fn(ta.shape(), |i| gd[i / cols]))]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut da = vec![0.0; m * k];
                kernels::gemm(
                    m,
                    n,
                    k,
                    1.0,
                    MatRef::rowmajor(g.data(), n),
                    MatRef::rowmajor(tb.data(), n).t(),
                    0.0,
                    &mut da,
                    k,
                );
                let mut db = vec![0.0; k * n];
                kernels::gemm(
                    k,
                    m,
                    n,
                    1.0,
                    MatRef::rowmajor(ta.data(), k).t(),
                    MatRef::rowmajor(g.data(), n),
                    0.0,
                    &mut db,
                    n,
                );
                vec![(*a, like(ta, da)), (*b, like(tb, db))]
            }
            Op::Transpose(a) => {
                let (n, m) = (y.shape()[0], y.shape()[1]);
                vec![(*a, like(val(*a), transpose(g.data(), n, m)))]
            }
            Op::Reshape(a) => vec![(*a, like(val(*a), g.data().to_vec()))],
            Op::AddRow(x, r) => {
                let cols = y.cols();
                let mut dr = vec![0.0; cols];
                for (i, gy) in g.data().iter().enumerate() {
                    dr[i % cols] += gy;
                }
                vec![(*x, g.clone()), (*r, like(val(*r), dr))]
            }
            Op::MulRow(x, r) => {
                let (tx, tr) = (val(*x), val(*r));
                let cols = y.cols();
                let rv = tr.data();
                let mut dx = vec![0.0; tx.numel()];
                let mut dr = vec![0.0; cols];
                for (i, (&xv, &gy)) in tx.data().iter().zip(g.data()).enumerate() {
                    dx[i] = gy * rv[i % cols];
                    dr[i % cols] += gy * xv;
                }
                vec![(*x, like(tx, dx)), (*r, like(tr, dr))]
            }
            Op::MulCol(x, v) => {
                let (tx, tv) = (val(*x), val(*v));
                let cols = y.cols();
                let vv = tv.data();
                let mut dx = vec![0.0; tx.numel()];
                let mut dv = vec![0.0; tv.numel()];
                for (i, (&xv, &gy)) in tx.data().iter().zip(g.data()).enumerate() {
                    dx[i] = gy * vv[i / cols];
                    dv[i / cols] += gy * xv;
                }
                vec![(*x, like(tx, dx)), (*v, like(tv, dv))]
            }
            Op::Concat(parts) => {
                let total = y.cols();
                let rows = y.rows();
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let tp = val(*p);
                        let c = tp.cols();
                        let mut d = Vec::with_capacity(tp.numel());
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        offset += c;
                        (*p, like(tp, d))
                    })
                    .collect()
            }
            Op::SliceCols { input, start } => {
                let ti = val(*input);
                let (cols, len) = (ti.cols(), y.cols());
                let mut d = vec![0.0; ti.numel()];
                for r in 0..y.rows() {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                }
                vec![(*input, like(ti, d))]
            }
            Op::GatherRows { input, index } => {
                let ti = val(*input);
                let cols = ti.cols();
                let mut d = vec![0.0; ti.numel()];
                for (k, &r) in index.iter().enumerate() {
                    for (dst, gv) in d[r * cols..(r + 1) * cols].iter_mut().zip(g.row(k)) {
                        *dst += gv;
                    }
                }
                vec![(*input, like(ti, d))]
            }
            Op::SegmentMax { input, winner } | Op::MaxPool2x { input, winner } => {
                let ti = val(*input);
                let mut d = vec![0.0; ti.numel()];
                for (&w, &gy) in winner.iter().zip(g.data()) {
                    if w != usize::MAX {
                        d[w] += gy;
                    }
                }
                vec![(*input, like(ti, d))]
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut d = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * n + a) * inner + i;
                        let dot: f64 = (0..n).map(|a| gd[idx(a)] * yd[idx(a)]).sum();
                        for a in 0..n {
                            d[idx(a)] = yd[idx(a)] * (gd[idx(a)] - dot);
                        }
                    }
                }
                vec![(*input, like(y, d))]
            }
            Op::LogSoftmax { input, axis } => {
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut d = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * n + a) * inner + i;
                        let total: f64 = (0..n).map(|a| gd[idx(a)]).sum();
                        for a in 0..n {
                            d[idx(a)] = gd[idx(a)] - yd[idx(a)].exp() * total;
                        }
                    }
                }
                vec![(*input, like(y, d))]
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (ti, tk) = (val(*input), val(*kernel));
                let (di, dk) = kernels::conv2d_backward(geom, ti.data(), tk.data(), g.data());
                vec![(*input, like(ti, di)), (*kernel, like(tk, dk))]
            }
            Op::Upsample2x(a) => {
                let ta = val(*a);
                let (h, w, c) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                vec![(*a, like(ta, kernels::upsample2x_backward(g.data(), h, w, c)))]
            }
            Op::DiffX(a) => {
                let (h, w, c) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                let gd = g.data();
                let mut d = vec![0.0; y.numel()];
                for yy in 0..h {
                    for x in 0..w.saturating_sub(1) {
                        for ch in 0..c {
                            let i = (yy * w + x) * c + ch;
                            d[i] -= gd[i];
                            d[i + c] += gd[i];
                        }
                    }
                }
                vec![(*a, like(y, d))]
            }
            Op::DiffY(a) => {
                let (h, w, c) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                let stride = w * c;
                let gd = g.data();
                let mut d = vec![0.0; y.numel()];
                for i in 0..h.saturating_sub(1) * stride {
                    d[i] -= gd[i];
                    d[i + stride] += gd[i];
                }
                vec![(*a, like(y, d))]
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn transpose(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}

fn softmax_along(data: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * n + a) * inner + i;
            let max = (0..n).map(|a| data[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).map(|a| (data[idx(a)] - max).exp()).sum();
            for a in 0..n {
                let shifted = data[idx(a)] - max;
                out[idx(a)] = if log { shifted - z.ln() } else { shifted.exp() / z };
            }
        }
    }
    out
}
