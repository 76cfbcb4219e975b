//! Reverse-mode differentiation over an explicit operation record.
//!
//! Every op evaluates eagerly, stores its output on the tape and remembers
//! its operands. [`Graph::backward`] walks the tape once in reverse and
//! applies each op's adjoint rule. Composite losses are spelled out in
//! primitive ops so each gradient can be audited; the one fused op is the
//! clamped cross-entropy on logits, whose gradient deliberately ignores the
//! clamp.

use super::kernels;
use super::linalg::gemm;
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulConst(Var, Tensor),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Sum(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Transpose(Var),
    Reshape(Var),
    Gram(Var),
    NormalizeRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    MaskedSoftmaxRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        cols: Vec<f64>,
    },
    Upsample(Var, usize),
    AvgPool2(Var),
    ClampedBceLogits {
        z: Var,
        pos: Tensor,
        neg: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() == b.dims() {
        Ok(())
    } else {
        Err(Error::shape(op, a.dims(), b.dims()))
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Records the named parameter; its gradient is reported by
    /// [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .get(name)
            .ok_or_else(|| Error::MissingParams(vec![name.to_owned()]))?
            .clone();
        Ok(self.push(value, Op::Param(name.to_owned())))
    }

    /// Copies a value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [m, k] = ta.dims2("matmul")?;
        let [k2, n] = tb.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.dims(), tb.dims()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_dims(name, ta, tb)?;
        let value = ta.zip_map(tb, f)?;
        Ok(self.push(value, op))
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

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, delta: f64) -> Var {
        let value = self.value(a).map(|x| x + delta);
        self.push(value, Op::Offset(a))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let ta = self.value(a);
        same_dims("mul_const", ta, &c)?;
        let value = ta.zip_map(&c, |x, y| x * y)?;
        Ok(self.push(value, Op::MulConst(a, c)))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, usize)> {
        let (tx, tr) = (self.value(x), self.value(row));
        let [m, n] = tx.dims2(name)?;
        if tr.dims() != [n] {
            return Err(Error::shape(name, tx.dims(), tr.dims()));
        }
        let mut out = tx.data().to_vec();
        for i in 0..m {
            for (o, &r) in out[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *o = f(*o, r);
            }
        }
        Ok((Tensor::new(&[m, n], out)?, n))
    }

    /// `x[i, j] + row[j]` for an m×n matrix and a length-n vector.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (value, _) = self.row_broadcast("add_row", x, row, |a, b| a + b)?;
        Ok(self.push(value, Op::AddRow(x, row)))
    }

    /// `x[i, j] * row[j]`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (value, _) = self.row_broadcast("mul_row", x, row, |a, b| a * b)?;
        Ok(self.push(value, Op::MulRow(x, row)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(logistic);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    /// `Σ pos·(−log p) + neg·(−log(1−p))` with `p = σ(z)` clamped to
    /// `[eps, 1−eps]`, as a scalar. The value matches clamping `sigmoid(z)`
    /// before `log`; the gradient is the unclamped `pos·(σ−1) + neg·σ`, so
    /// confidently wrong entries keep pulling back instead of going flat.
    pub fn clamped_bce_logits(
        &mut self,
        z: Var,
        pos: Tensor,
        neg: Tensor,
        eps: f64,
    ) -> Result<Var> {
        same_dims("clamped_bce_logits", self.value(z), &pos)?;
        same_dims("clamped_bce_logits", self.value(z), &neg)?;
        let (lo, hi) = (-(1.0 - eps).ln(), -eps.ln());
        let mut total = 0.0;
        for ((&x, &wp), &wn) in self.value(z).data().iter().zip(pos.data()).zip(neg.data()) {
            if wp != 0.0 {
                total += wp * softplus(-x).clamp(lo, hi);
            }
            if wn != 0.0 {
                total += wn * softplus(x).clamp(lo, hi);
            }
        }
        Ok(self.push(Tensor::scalar(total), Op::ClampedBceLogits { z, pos, neg }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose2()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(dims)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// `x · xᵀ`, computed on the upper triangle and mirrored so the result
    /// is exactly symmetric.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [n, d] = tx.dims2("gram")?;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let ri = tx.row(i);
            for j in i..n {
                let dot: f64 = ri.iter().zip(tx.row(j)).map(|(a, b)| a * b).sum();
                out[i * n + j] = dot;
                out[j * n + i] = dot;
            }
        }
        debug_assert!(d > 0);
        let value = Tensor::new(&[n, n], out)?;
        Ok(self.push(value, Op::Gram(x)))
    }

    /// Standardizes each row to zero mean and unit variance (`eps` added to
    /// the variance).
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let [m, n] = tx.dims2("normalize_rows")?;
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            inv_std.push(s);
        }
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::NormalizeRows { x, inv_std }))
    }

    /// Row-wise softmax restricted to the columns where `keep` is true;
    /// excluded columns get exactly zero weight.
    pub fn masked_softmax_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        let [m, n] = tx.dims2("masked_softmax_rows")?;
        if keep.len() != n {
            return Err(Error::shape(
                "masked_softmax_rows",
                tx.dims(),
                &[keep.len()],
            ));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::InvalidArgument("softmax over zero columns".into()));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .fold(f64::NEG_INFINITY, |acc, (&v, _)| acc.max(v));
            let dst = &mut out[i * n..(i + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if keep[j] {
                    dst[j] = (row[j] - max).exp();
                    total += dst[j];
                }
            }
            dst.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MaskedSoftmaxRows(x)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let [m, n] = tx.dims2("slice_cols")?;
        if start + len > n || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{} of a {m}x{n} matrix",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let value = Tensor::new(&[m, len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let [m, _] = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pm, pn] = self.value(p).dims2("concat_cols")?;
            if pm != m {
                return Err(Error::shape("concat_cols", &[m], &[pm]));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// 3×3 convolution, stride 1, zero padding 1.
    /// `input` is Cin×H×W, `kernel` Cout×Cin×3×3, `bias` Cout.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (ti, tk, tb) = (self.value(input), self.value(kernel), self.value(bias));
        let [cin, h, w] = ti.dims3("conv2d")?;
        let [cout, kin, kh, kw] = match tk.dims()[..] {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape("conv2d", ti.dims(), tk.dims())),
        };
        if kin != cin || kh != 3 || kw != 3 {
            return Err(Error::shape("conv2d", ti.dims(), tk.dims()));
        }
        if tb.dims() != [cout] {
            return Err(Error::shape("conv2d", tk.dims(), tb.dims()));
        }
        let hw = h * w;
        let cols = kernels::im2col3(ti.data(), cin, h, w);
        let mut out = vec![0.0; cout * hw];
        for (o, &b) in out.chunks_mut(hw).zip(tb.data()) {
            o.fill(b);
        }
        gemm(
            cout,
            cin * 9,
            hw,
            tk.data(),
            false,
            &cols,
            false,
            &mut out,
            1.0,
        );
        let value = Tensor::new(&[cout, h, w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                cols,
            },
        ))
    }

    /// Bilinear upsampling with half-pixel centres; `factor` ∈ {2, 4}.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor != 2 && factor != 4 {
            return Err(Error::InvalidArgument(format!(
                "upsample factor must be 2 or 4, got {factor}"
            )));
        }
        let tx = self.value(x);
        let [c, h, w] = tx.dims3("upsample_bilinear")?;
        let out = kernels::upsample_bilinear(tx.data(), c, h, w, factor);
        let value = Tensor::new(&[c, h * factor, w * factor], out)?;
        Ok(self.push(value, Op::Upsample(x, factor)))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [c, h, w] = tx.dims3("avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "avg_pool2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let out = kernels::avg_pool2(tx.data(), c, h, w);
        let value = Tensor::new(&[c, h / 2, w / 2], out)?;
        Ok(self.push(value, Op::AvgPool2(x)))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar, got dims {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(self.dims(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of every recorded parameter into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut send = |v: Var, t: Tensor| {
            let slot = &mut grads[v.0];
            match slot {
                Some(acc) => acc.add_assign(&t),
                None => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let [m, k] = ta.dims2("matmul")?;
                let [_, n] = tb.dims2("matmul")?;
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, 0.0);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, 0.0);
                send(*a, Tensor::new(&[m, k], ga)?);
                send(*b, Tensor::new(&[k, n], gb)?);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), |x, y| x * y)?);
                send(*b, g.zip_map(val(*a), |x, y| x * y)?);
            }
            Op::Div(a, b) => {
                let tb = val(*b);
                send(*a, g.zip_map(tb, |x, y| x / y)?);
                let q = node.value.zip_map(tb, |c, y| c / y)?;
                send(*b, g.zip_map(&q, |x, q| -x * q)?);
            }
            Op::Scale(a, f) => send(*a, g.map(|x| x * f)),
            Op::Offset(a) => send(*a, g.clone()),
            Op::MulConst(a, c) => send(*a, g.zip_map(c, |x, y| x * y)?),
            Op::AddRow(x, row) => {
                let [m, n] = g.dims2("add_row")?;
                let mut gr = vec![0.0; n];
                for i in 0..m {
                    for (acc, v) in gr.iter_mut().zip(g.row(i)) {
                        *acc += v;
                    }
                }
                send(*x, g.clone());
                send(*row, Tensor::new(&[n], gr)?);
            }
            Op::MulRow(x, row) => {
                let (tx, tr) = (val(*x), val(*row));
                let [m, n] = g.dims2("mul_row")?;
                let mut gx = g.data().to_vec();
                let mut gr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gr[j] += g.data()[i * n + j] * tx.data()[i * n + j];
                        gx[i * n + j] *= tr.data()[j];
                    }
                }
                send(*x, Tensor::new(&[m, n], gx)?);
                send(*row, Tensor::new(&[n], gr)?);
            }
            Op::Sum(a) => send(*a, Tensor::full(val(*a).dims(), g.item())),
            Op::Log(a) => send(*a, g.zip_map(val(*a), |x, y| x / y)?),
            Op::Sigmoid(a) => send(*a, g.zip_map(&node.value, |x, s| x * s * (1.0 - s))?),
            Op::Relu(a) => send(
                *a,
                g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })?,
            ),
            Op::Clamp(a, lo, hi) => send(
                *a,
                g.zip_map(val(*a), |x, y| if y >= *lo && y <= *hi { x } else { 0.0 })?,
            ),
            Op::ClampedBceLogits { z, pos, neg } => {
                let up = g.item();
                let mut gz = val(*z).map(logistic);
                for ((v, &wp), &wn) in gz.data_mut().iter_mut().zip(pos.data()).zip(neg.data()) {
                    *v = up * (wp * (*v - 1.0) + wn * *v);
                }
                send(*z, gz)
            }
            Op::Transpose(a) => send(*a, g.transpose2()?),
            Op::Reshape(a) => send(*a, g.reshape(val(*a).dims())?),
            Op::Gram(x) => {
                let tx = val(*x);
                let [n, d] = tx.dims2("gram")?;
                // d(x xᵀ) = (G + Gᵀ) x
                let sym = g.zip_map(&g.transpose2()?, |a, b| a + b)?;
                let mut gx = vec![0.0; n * d];
                gemm(n, n, d, sym.data(), false, tx.data(), false, &mut gx, 0.0);
                send(*x, Tensor::new(&[n, d], gx)?);
            }
            Op::NormalizeRows { x, inv_std } => {
                let y = &node.value;
                let [m, n] = y.dims2("normalize_rows")?;
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let (gy, yr) = (g.row(i), y.row(i));
                    let mean_g = gy.iter().sum::<f64>() / n as f64;
                    let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[i * n + j] = inv_std[i] * (gy[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                send(*x, Tensor::new(&[m, n], gx)?);
            }
            Op::MaskedSoftmaxRows(x) => {
                let y = &node.value;
                let [m, n] = y.dims2("masked_softmax_rows")?;
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let (gy, yr) = (g.row(i), y.row(i));
                    let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] = yr[j] * (gy[j] - dot);
                    }
                }
                send(*x, Tensor::new(&[m, n], gx)?);
            }
            Op::SliceCols { x, start } => {
                let [m, n] = val(*x).dims2("slice_cols")?;
                let [_, len] = g.dims2("slice_cols")?;
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len].copy_from_slice(g.row(i));
                }
                send(*x, Tensor::new(&[m, n], gx)?);
            }
            Op::ConcatCols(parts) => {
                let [m, n] = g.dims2("concat_cols")?;
                let mut offset = 0;
                for &p in parts {
                    let [_, pn] = val(p).dims2("concat_cols")?;
                    let mut gp = Vec::with_capacity(m * pn);
                    for i in 0..m {
                        gp.extend_from_slice(&g.data()[i * n + offset..i * n + offset + pn]);
                    }
                    send(p, Tensor::new(&[m, pn], gp)?);
                    offset += pn;
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                cols,
            } => {
                let tk = val(*kernel);
                let [cin, h, w] = val(*input).dims3("conv2d")?;
                let cout = tk.dims()[0];
                let hw = h * w;
                let mut gk = vec![0.0; cout * cin * 9];
                gemm(cout, hw, cin * 9, g.data(), false, cols, true, &mut gk, 0.0);
                let gb: Vec<f64> = g.data().chunks(hw).map(|c| c.iter().sum()).collect();
                let mut gcols = vec![0.0; cin * 9 * hw];
                gemm(
                    cin * 9,
                    cout,
                    hw,
                    tk.data(),
                    true,
                    g.data(),
                    false,
                    &mut gcols,
                    0.0,
                );
                let gi = kernels::col2im3(&gcols, cin, h, w);
                send(*input, Tensor::new(&[cin, h, w], gi)?);
                send(*kernel, Tensor::new(tk.dims(), gk)?);
                send(*bias, Tensor::new(&[cout], gb)?);
            }
            Op::Upsample(x, f) => {
                let [c, h, w] = val(*x).dims3("upsample_bilinear")?;
                let gi = kernels::upsample_bilinear_backward(g.data(), c, h, w, *f);
                send(*x, Tensor::new(&[c, h, w], gi)?);
            }
            Op::AvgPool2(x) => {
                let [c, h, w] = val(*x).dims3("avg_pool2")?;
                let gi = kernels::avg_pool2_backward(g.data(), c, h, w);
                send(*x, Tensor::new(&[c, h, w], gi)?);
            }
        }
        Ok(())
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
