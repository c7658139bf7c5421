//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.

use indexmap::IndexMap;

use super::params::ParamStore;
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    Dense { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Conv1d { x: Var, w: Var, b: Var, stride: usize, padding: usize },
    AvgPool1d { x: Var, factor: usize },
    GlobalAvgPool { x: Var },
    Reshape { x: Var },
    Relu { x: Var },
    Exp { x: Var },
    Tanh { x: Var },
    Square { x: Var },
    Sqrt { x: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Scale { x: Var, s: f64 },
    AddScalar { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    RowSum { x: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    BatchMean { x: Var },
    BatchVar { x: Var },
    Mse { a: Var, b: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar with respect to the trainable parameters that took
/// part in its computation, keyed by parameter name in tape order.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: IndexMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.grads.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.grads.insert(name, grad);
    }

    /// Multiplies every gradient by `s`.
    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    /// Puts a stored parameter on the tape. Frozen parameters enter as
    /// constants and therefore never appear in the gradient map.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let entry = store
            .entry(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if entry.frozen {
            return Ok(self.constant(entry.tensor.clone()));
        }
        if let Some((_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        self.nodes.push(Node {
            value: entry.tensor.clone(),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    /// Leaf that is differentiated under a caller-chosen name but not backed
    /// by a store. Used by gradient checks on raw inputs.
    pub fn input(&mut self, name: &str, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.to_string(), v));
        v
    }

    // ---------------------------------------------------------------- layers

    /// `x[B,in] · w[in,out] + b[out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, n_in) = self.value(x).dims2()?;
        let (w_in, n_out) = self.value(w).dims2()?;
        if w_in != n_in || self.value(b).len() != n_out {
            return Err(Error::Shape(format!(
                "dense: x {:?}, w {:?}, b {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; bs * n_out];
        for row in out.chunks_mut(n_out) {
            row.copy_from_slice(self.value(b).data());
        }
        matmul_into(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            bs,
            n_in,
            n_out,
        );
        let t = Tensor::new(vec![bs, n_out], out)?;
        self.push(t, Op::Dense { x, w, b }, "dense")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push(t, Op::MatMul { a, b }, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        self.push(t, Op::Transpose { x }, "transpose")
    }

    /// One-dimensional cross-correlation: `x[B,C,L]`, `w[O,C,K]`, `b[O]`,
    /// zero padding on both ends.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (bs, c, l) = self.value(x).dims3()?;
        let (o, wc, k) = self.value(w).dims3()?;
        if wc != c || self.value(b).len() != o || stride == 0 || l + 2 * padding < k {
            return Err(Error::Shape(format!(
                "conv1d: x {:?}, w {:?}, b {:?}, stride {stride}, padding {padding}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let lout = (l + 2 * padding - k) / stride + 1;
        let geom = ConvGeom {
            c,
            l,
            k,
            stride,
            padding,
            lout,
        };
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; bs * o * lout];
        let mut cols = vec![0.0; c * k * lout];
        for bi in 0..bs {
            geom.im2col(&xd[bi * c * l..(bi + 1) * c * l], &mut cols);
            let y = &mut out[bi * o * lout..(bi + 1) * o * lout];
            for (oi, row) in y.chunks_mut(lout).enumerate() {
                row.fill(bd[oi]);
            }
            matmul_into(wd, &cols, y, o, c * k, lout);
        }
        let t = Tensor::new(vec![bs, o, lout], out)?;
        self.push(
            t,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            },
            "conv1d",
        )
    }

    /// Non-overlapping average pooling along the last axis of `[B,C,L]`.
    pub fn avg_pool1d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (bs, c, l) = self.value(x).dims3()?;
        if factor == 0 || l % factor != 0 {
            return Err(Error::Shape(format!(
                "avg_pool1d: length {l} not divisible by {factor}"
            )));
        }
        let lo = l / factor;
        let xd = self.value(x).data();
        let inv = 1.0 / factor as f64;
        let out: Vec<f64> = xd.chunks(factor).map(|w| w.iter().sum::<f64>() * inv).collect();
        let t = Tensor::new(vec![bs, c, lo], out)?;
        self.push(t, Op::AvgPool1d { x, factor }, "avg_pool1d")
    }

    /// `[B,C,L] -> [B,C]` mean over the length axis.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (bs, c, l) = self.value(x).dims3()?;
        let inv = 1.0 / l as f64;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(l)
            .map(|w| w.iter().sum::<f64>() * inv)
            .collect();
        let t = Tensor::new(vec![bs, c], out)?;
        self.push(t, Op::GlobalAvgPool { x }, "global_avg_pool")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape { x }, "reshape")
    }

    // ----------------------------------------------------------- elementwise

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu { x }, "relu")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp { x }, "exp")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::tanh);
        self.push(t, Op::Tanh { x }, "tanh")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * v);
        self.push(t, Op::Square { x }, "square")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("sqrt of negative value".into()));
        }
        let t = self.value(x).map(f64::sqrt);
        self.push(t, Op::Sqrt { x }, "sqrt")
    }

    /// Hard clamp; the gradient is zero where the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(t, Op::Clamp { x, lo, hi }, "clamp")
    }

    fn check_same(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push(t, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push(t, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push(t, Op::Mul { a, b }, "mul")
    }

    /// Bias-style broadcast: `x[B,D] + row[D]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, d) = self.value(x).dims2()?;
        if self.value(row).len() != d {
            return Err(Error::Shape(format!(
                "add_row: x {:?}, row {:?}",
                self.shape(x),
                self.shape(row)
            )));
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(x).clone();
        for chunk in t.data_mut().chunks_mut(d) {
            for (v, rv) in chunk.iter_mut().zip(&r) {
                *v += rv;
            }
        }
        self.push(t, Op::AddRow { x, row }, "add_row")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale { x, s }, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v + s);
        self.push(t, Op::AddScalar { x }, "add_scalar")
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(t, Op::Mean { x }, "mean")
    }

    /// `[B,D] -> [B,1]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (bs, d) = self.value(x).dims2()?;
        let out = self
            .value(x)
            .data()
            .chunks(d)
            .map(|r| r.iter().sum())
            .collect();
        let t = Tensor::new(vec![bs, 1], out)?;
        self.push(t, Op::RowSum { x }, "row_sum")
    }

    /// Columns `start..end` of a `[B,D]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (bs, d) = self.value(x).dims2()?;
        if start >= end || end > d {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of {d}")));
        }
        let out = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let t = Tensor::new(vec![bs, end - start], out)?;
        self.push(t, Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if *rows.get_or_insert(r) != r {
                return Err(Error::Shape("concat_cols: row count mismatch".into()));
            }
            widths.push(c);
        }
        let rows = rows.ok_or_else(|| Error::Shape("concat_cols: no inputs".into()))?;
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        self.push(
            t,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            "concat_cols",
        )
    }

    /// Rows `start..end` along the leading axis (any rank).
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if start >= end || end > shape[0] {
            return Err(Error::Shape(format!("slice_rows {start}..{end} of {}", shape[0])));
        }
        let stride: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * stride..end * stride].to_vec();
        let mut new_shape = shape;
        new_shape[0] = end - start;
        let t = Tensor::new(new_shape, data)?;
        self.push(t, Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_rows: no inputs".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(Error::Shape("concat_rows: trailing shape mismatch".into()));
            }
            rows += self.shape(p)[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let t = Tensor::new(shape, data)?;
        self.push(
            t,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            "concat_rows",
        )
    }

    /// Per-column mean and unbiased variance of a `[B,D]` batch.
    pub fn batch_mean_var(&mut self, x: Var) -> Result<(Var, Var)> {
        let (bs, d) = self.value(x).dims2()?;
        if bs < 2 {
            return Err(Error::Shape("batch_mean_var needs at least 2 rows".into()));
        }
        let (mean, var) = column_mean_var(self.value(x).data(), bs, d);
        let m = self.push(Tensor::new(vec![d], mean)?, Op::BatchMean { x }, "batch_mean")?;
        let v = self.push(Tensor::new(vec![d], var)?, Op::BatchVar { x }, "batch_var")?;
        Ok((m, v))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mse")?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(s / n), Op::Mse { a, b }, "mse")
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param => param_grads[i] = Some(g),
                op => self.backprop(op, &node.value, &g, &mut grads)?,
            }
        }

        let mut out = Gradients::default();
        for (name, v) in &self.params {
            let g = param_grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
            if !g.all_finite() {
                return Err(Error::NonFinite("backward"));
            }
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn backprop(
        &self,
        op: &Op,
        y: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Constant | Op::Param => {}
            Op::Dense { x, w, b } => {
                let (bs, n_in) = val(x).dims2()?;
                let n_out = y.shape()[1];
                let mut dx = vec![0.0; bs * n_in];
                matmul_bt_into(g.data(), val(w).data(), &mut dx, bs, n_out, n_in);
                let mut dw = vec![0.0; n_in * n_out];
                matmul_at_into(val(x).data(), g.data(), &mut dw, bs, n_in, n_out);
                let db = column_sums(g.data(), bs, n_out);
                accumulate(grads, *x, Tensor::new(vec![bs, n_in], dx)?);
                accumulate(grads, *w, Tensor::new(vec![n_in, n_out], dw)?);
                accumulate(grads, *b, Tensor::new(val(b).shape().to_vec(), db)?);
            }
            Op::MatMul { a, b } => {
                let (m, k) = val(a).dims2()?;
                let n = y.shape()[1];
                let mut da = vec![0.0; m * k];
                matmul_bt_into(g.data(), val(b).data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_at_into(val(a).data(), g.data(), &mut db, m, k, n);
                accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
            }
            Op::Transpose { x } => {
                let (r, c) = val(x).dims2()?;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g.data()[j * r + i];
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![r, c], dx)?);
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (bs, c, l) = val(x).dims3()?;
                let (o, _, k) = val(w).dims3()?;
                let lout = y.shape()[2];
                let geom = ConvGeom {
                    c,
                    l,
                    k,
                    stride: *stride,
                    padding: *padding,
                    lout,
                };
                let xd = val(x).data();
                let wd = val(w).data();
                let mut dx = vec![0.0; bs * c * l];
                let mut dw = vec![0.0; o * c * k];
                let mut db = vec![0.0; o];
                let mut cols = vec![0.0; c * k * lout];
                let mut dcols = vec![0.0; c * k * lout];
                for bi in 0..bs {
                    let gb = &g.data()[bi * o * lout..(bi + 1) * o * lout];
                    geom.im2col(&xd[bi * c * l..(bi + 1) * c * l], &mut cols);
                    matmul_bt_into(gb, &cols, &mut dw, o, lout, c * k);
                    dcols.fill(0.0);
                    matmul_at_into(wd, gb, &mut dcols, o, c * k, lout);
                    geom.col2im(&dcols, &mut dx[bi * c * l..(bi + 1) * c * l]);
                    for (oi, row) in gb.chunks(lout).enumerate() {
                        db[oi] += row.iter().sum::<f64>();
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![bs, c, l], dx)?);
                accumulate(grads, *w, Tensor::new(vec![o, c, k], dw)?);
                accumulate(grads, *b, Tensor::new(val(b).shape().to_vec(), db)?);
            }
            Op::AvgPool1d { x, factor } => {
                let inv = 1.0 / *factor as f64;
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat(gv * inv).take(*factor))
                    .collect();
                accumulate(grads, *x, Tensor::new(val(x).shape().to_vec(), dx)?);
            }
            Op::GlobalAvgPool { x } => {
                let l = val(x).shape()[2];
                let inv = 1.0 / l as f64;
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat(gv * inv).take(l))
                    .collect();
                accumulate(grads, *x, Tensor::new(val(x).shape().to_vec(), dx)?);
            }
            Op::Reshape { x } => {
                let dx = g.clone().reshape(val(x).shape().to_vec())?;
                accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                let dx = zip(g, val(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                accumulate(grads, *x, dx);
            }
            Op::Exp { x } => accumulate(grads, *x, zip(g, y, |gv, yv| gv * yv)),
            Op::Tanh { x } => accumulate(grads, *x, zip(g, y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Square { x } => {
                accumulate(grads, *x, zip(g, val(x), |gv, xv| 2.0 * gv * xv));
            }
            Op::Sqrt { x } => accumulate(grads, *x, zip(g, y, |gv, yv| 0.5 * gv / yv)),
            Op::Clamp { x, lo, hi } => {
                let dx = zip(g, val(x), |gv, xv| {
                    if xv >= *lo && xv <= *hi {
                        gv
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                accumulate(grads, *a, zip(g, val(b), |gv, bv| gv * bv));
                accumulate(grads, *b, zip(g, val(a), |gv, av| gv * av));
            }
            Op::AddRow { x, row } => {
                let (bs, d) = g.dims2()?;
                let dr = column_sums(g.data(), bs, d);
                accumulate(grads, *x, g.clone());
                accumulate(grads, *row, Tensor::new(val(row).shape().to_vec(), dr)?);
            }
            Op::Scale { x, s } => accumulate(grads, *x, g.map(|v| v * s)),
            Op::AddScalar { x } => accumulate(grads, *x, g.clone()),
            Op::Sum { x } => {
                accumulate(grads, *x, Tensor::full(val(x).shape(), g.item()));
            }
            Op::Mean { x } => {
                let n = val(x).len() as f64;
                accumulate(grads, *x, Tensor::full(val(x).shape(), g.item() / n));
            }
            Op::RowSum { x } => {
                let (bs, d) = val(x).dims2()?;
                let mut dx = Vec::with_capacity(bs * d);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat(gv).take(d));
                }
                accumulate(grads, *x, Tensor::new(vec![bs, d], dx)?);
            }
            Op::SliceCols { x, start } => {
                let (bs, d) = val(x).dims2()?;
                let w = y.shape()[1];
                let mut dx = vec![0.0; bs * d];
                for i in 0..bs {
                    dx[i * d + start..i * d + start + w]
                        .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                accumulate(grads, *x, Tensor::new(vec![bs, d], dx)?);
            }
            Op::ConcatCols { parts } => {
                let (bs, total) = g.dims2()?;
                let mut offset = 0;
                for p in parts {
                    let w = val(p).shape()[1];
                    let mut dp = Vec::with_capacity(bs * w);
                    for i in 0..bs {
                        dp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    accumulate(grads, *p, Tensor::new(vec![bs, w], dp)?);
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let shape = val(x).shape().to_vec();
                let stride: usize = shape[1..].iter().product();
                let mut dx = vec![0.0; val(x).len()];
                dx[start * stride..start * stride + g.len()].copy_from_slice(g.data());
                accumulate(grads, *x, Tensor::new(shape, dx)?);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = val(p).len();
                    let dp = g.data()[offset..offset + n].to_vec();
                    accumulate(grads, *p, Tensor::new(val(p).shape().to_vec(), dp)?);
                    offset += n;
                }
            }
            Op::BatchMean { x } => {
                let (bs, d) = val(x).dims2()?;
                let inv = 1.0 / bs as f64;
                let mut dx = Vec::with_capacity(bs * d);
                for _ in 0..bs {
                    dx.extend(g.data().iter().map(|v| v * inv));
                }
                accumulate(grads, *x, Tensor::new(vec![bs, d], dx)?);
            }
            Op::BatchVar { x } => {
                let (bs, d) = val(x).dims2()?;
                let (mean, _) = column_mean_var(val(x).data(), bs, d);
                let scale = 2.0 / (bs as f64 - 1.0);
                let mut dx = Vec::with_capacity(bs * d);
                for row in val(x).data().chunks(d) {
                    for j in 0..d {
                        dx.push(g.data()[j] * scale * (row[j] - mean[j]));
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![bs, d], dx)?);
            }
            Op::Mse { a, b } => {
                let n = val(a).len() as f64;
                let gs = g.item() * 2.0 / n;
                let da = zip(val(a), val(b), |av, bv| gs * (av - bv));
                accumulate(grads, *b, da.map(|v| -v));
                accumulate(grads, *a, da);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn column_sums(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in data.chunks(cols).take(rows) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Column means and unbiased variances (two-pass).
pub(crate) fn column_mean_var(data: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = column_sums(data, rows, cols);
    for m in &mut mean {
        *m /= rows as f64;
    }
    let mut var = vec![0.0; cols];
    for row in data.chunks(cols) {
        for j in 0..cols {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    for v in &mut var {
        *v /= rows as f64 - 1.0;
    }
    (mean, var)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    l: usize,
    k: usize,
    stride: usize,
    padding: usize,
    lout: usize,
}

impl ConvGeom {
    /// Valid output range `[t0, t1)` for kernel tap `kk`.
    fn tap_range(&self, kk: usize) -> (usize, usize) {
        // input index = t*stride + kk - padding must lie in [0, l)
        let t0 = if kk >= self.padding {
            0
        } else {
            (self.padding - kk).div_ceil(self.stride)
        };
        let t1 = if self.l + self.padding > kk {
            ((self.l + self.padding - kk - 1) / self.stride + 1).min(self.lout)
        } else {
            0
        };
        (t0, t1.max(t0))
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        cols.fill(0.0);
        for ci in 0..self.c {
            let xs = &x[ci * self.l..(ci + 1) * self.l];
            for kk in 0..self.k {
                let row = &mut cols[(ci * self.k + kk) * self.lout..(ci * self.k + kk + 1) * self.lout];
                let (t0, t1) = self.tap_range(kk);
                for (t, slot) in row.iter_mut().enumerate().take(t1).skip(t0) {
                    *slot = xs[t * self.stride + kk - self.padding];
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        for ci in 0..self.c {
            let xs = &mut dx[ci * self.l..(ci + 1) * self.l];
            for kk in 0..self.k {
                let row = &cols[(ci * self.k + kk) * self.lout..(ci * self.k + kk + 1) * self.lout];
                let (t0, t1) = self.tap_range(kk);
                for (t, &v) in row.iter().enumerate().take(t1).skip(t0) {
                    xs[t * self.stride + kk - self.padding] += v;
                }
            }
        }
    }
}
