use super::conv::{self, ConvGeometry, Padding};
use super::{gemm, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    AvgPool2d(Var, usize),
    GlobalAvgPool(Var),
    ConcatChannels(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    L2Normalize(Var, T),
    BatchStandardize(Var, T),
    Huber(Var, T),
    SelfExcludedCrossEntropy(Var, Vec<usize>),
    OffDiagonalSquareSum(Var),
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// A tape of executed operations.
///
/// Nodes are appended in execution order, so the tape is already a
/// topological order; [`Graph::backward`] walks it once in reverse.
/// Leaf gradients accumulate over backward calls until [`Graph::zero_grad`].
#[derive(Debug, Default)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input: gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A fixed input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
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

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op_name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op_name.to_string(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(name, out, op, &[a, b])
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let out = transpose(self.value(x).data(), r, c);
        self.push("transpose", Tensor::from_parts(vec![c, r], out), Op::Transpose(x), &[x])
    }

    /// `x w + b` for `x: N x I`, `w: I x O`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push("scale", out, Op::Scale(x, factor), &[x])
    }

    /// Adds `b` (length C) to every row of an `R x C` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("add_bias", x)?;
        if self.shape(b) != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for {r}x{c} input", self.shape(b)),
            ));
        }
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &bb)| v + bb))
            .collect();
        self.push("add_bias", Tensor::from_parts(vec![r, c], data), Op::AddBias(x, b), &[x, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// Elementwise Huber penalty: `d²/2` for `|d| <= delta`, else `delta (|d| - delta/2)`.
    pub fn huber(&mut self, x: Var, delta: T) -> Result<Var> {
        if !(delta > T::zero()) {
            return Err(Error::InvalidArgument(format!("huber delta must be positive, got {delta}")));
        }
        let half = T::from_f64(0.5);
        let out = self.value(x).map(|d| {
            if d.abs() <= delta {
                half * d * d
            } else {
                delta * (d.abs() - half * delta)
            }
        });
        self.push("huber", out, Op::Huber(x, delta), &[x])
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = sum_f64(self.value(x).data());
        self.push("sum", Tensor::scalar(T::from_f64(s)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = sum_f64(t.data()) / t.numel() as f64;
        self.push("mean", Tensor::scalar(T::from_f64(m)), Op::Mean(x), &[x])
    }

    /// Σ_{i≠j} C_ij² of a square matrix.
    pub fn off_diagonal_square_sum(&mut self, c: Var) -> Result<Var> {
        let (r, k) = self.matrix_dims("off_diagonal_square_sum", c)?;
        if r != k {
            return Err(Error::shape("off_diagonal_square_sum", format!("{r}x{k} is not square")));
        }
        let data = self.value(c).data();
        let mut s = 0.0f64;
        for i in 0..r {
            for j in 0..r {
                if i != j {
                    let v = data[i * r + j].as_f64();
                    s += v * v;
                }
            }
        }
        self.push(
            "off_diagonal_square_sum",
            Tensor::scalar(T::from_f64(s)),
            Op::OffDiagonalSquareSum(c),
            &[c],
        )
    }

    /// Mean over rows of softmax cross-entropy where row `i` excludes column
    /// `i` from its partition function and targets column `targets[i]`.
    pub fn self_excluded_cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let (n, k) = self.matrix_dims("self_excluded_cross_entropy", logits)?;
        if n != k || targets.len() != n {
            return Err(Error::shape(
                "self_excluded_cross_entropy",
                format!("{n}x{k} logits with {} targets", targets.len()),
            ));
        }
        if targets.iter().enumerate().any(|(i, &t)| t == i || t >= n) {
            return Err(Error::InvalidArgument(
                "each target must be another column of its row".into(),
            ));
        }
        let data = self.value(logits).data();
        let mut total = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            let row = &data[i * n..(i + 1) * n];
            total += log_sum_exp_excluding(row, i) - row[t].as_f64();
        }
        let out = Tensor::scalar(T::from_f64(total / n as f64));
        self.push(
            "self_excluded_cross_entropy",
            out,
            Op::SelfExcludedCrossEntropy(logits, targets),
            &[logits],
        )
    }

    // ---- row / channel plumbing ---------------------------------------

    /// Collapses `B x ...` into `B x (product of the rest)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let b = *t
            .shape()
            .first()
            .ok_or_else(|| Error::shape("flatten", "scalar input"))?;
        let out = Tensor::from_parts(vec![b, t.numel() / b], t.data().to_vec());
        self.push("flatten", out, Op::Reshape(x), &[x])
    }

    /// Joins `B x Cᵢ x H x W` maps along the channel axis, in order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let &[b, _, h, w] = self.shape(*first) else {
            return Err(Error::shape("concat_channels", format!("{:?}", self.shape(*first))));
        };
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            match *self.shape(x) {
                [b2, c, h2, w2] if (b2, h2, w2) == (b, h, w) => channels.push(c),
                ref s => {
                    return Err(Error::shape(
                        "concat_channels",
                        format!("{s:?} does not match batch/spatial {b}x_x{h}x{w}"),
                    ))
                }
            }
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for (&x, &c) in xs.iter().zip(&channels) {
                let src = self.value(x).data();
                data.extend_from_slice(&src[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let out = Tensor::from_parts(vec![b, total, h, w], data);
        self.push("concat_channels", out, Op::ConcatChannels(xs.to_vec()), xs)
    }

    /// Joins tensors along the leading axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        if self.shape(*first).is_empty() {
            return Err(Error::shape("concat_rows", "scalar input"));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            if t.shape().get(1..) != Some(tail.as_slice()) {
                return Err(Error::shape("concat_rows", format!("{:?} vs tail {tail:?}", t.shape())));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push("concat_rows", Tensor::from_parts(shape, data), Op::ConcatRows(xs.to_vec()), xs)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        self.push("slice_rows", out, Op::SliceRows(x, start), &[x])
    }

    // ---- convolution / pooling ----------------------------------------

    /// Dilated cross-correlation of `x: B x Cin x H x W` with `w: Cout x Cin x k x k`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        dilation: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), dilation, stride, padding)?;
        if self.shape(bias) != [geom.out_channels] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {} output channels", self.shape(bias), geom.out_channels),
            ));
        }
        let out = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
        );
        let out = Tensor::from_parts(geom.output_shape().to_vec(), out);
        self.push("conv2d", out, Op::Conv2d { x, w, bias, geom }, &[x, w, bias])
    }

    /// Non-overlapping `size x size` average pooling.
    pub fn avg_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let &[b, c, h, w] = self.shape(x) else {
            return Err(Error::shape("avg_pool2d", format!("{:?}", self.shape(x))));
        };
        if size == 0 || h % size != 0 || w % size != 0 {
            return Err(Error::shape("avg_pool2d", format!("{h}x{w} not divisible by {size}")));
        }
        let (oh, ow) = (h / size, w / size);
        let inv = T::from_f64(1.0 / (size * size) as f64);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * c * oh * ow];
        for (plane_idx, dst) in out.chunks_mut(oh * ow).enumerate() {
            let p = &src[plane_idx * h * w..(plane_idx + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    let o = (i / size) * ow + j / size;
                    dst[o] = dst[o] + p[i * w + j];
                }
            }
            for v in dst.iter_mut() {
                *v = *v * inv;
            }
        }
        let out = Tensor::from_parts(vec![b, c, oh, ow], out);
        self.push("avg_pool2d", out, Op::AvgPool2d(x, size), &[x])
    }

    /// Per-channel spatial mean: `B x C x H x W -> B x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let &[b, c, h, w] = self.shape(x) else {
            return Err(Error::shape("global_avg_pool", format!("{:?}", self.shape(x))));
        };
        let plane = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| T::from_f64(sum_f64(p) / plane as f64))
            .collect();
        self.push(
            "global_avg_pool",
            Tensor::from_parts(vec![b, c], data),
            Op::GlobalAvgPool(x),
            &[x],
        )
    }

    // ---- normalization -------------------------------------------------

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let (_, d) = self.matrix_dims("l2_normalize", x)?;
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| {
                let n = row_norm(row).max(eps);
                row.iter().map(move |&v| v / n)
            })
            .collect();
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push("l2_normalize", out, Op::L2Normalize(x, eps), &[x])
    }

    /// Standardizes each column to zero mean and unit population standard
    /// deviation, dividing by `max(σ, eps)`.
    pub fn batch_standardize(&mut self, x: Var, eps: T) -> Result<Var> {
        let (b, d) = self.matrix_dims("batch_standardize", x)?;
        if b < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch_standardize needs at least 2 rows, got {b}"
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * d];
        for j in 0..d {
            let (mean, sd) = column_moments(src, b, d, j);
            let denom = sd.max(eps.as_f64());
            for i in 0..b {
                out[i * d + j] = T::from_f64((src[i * d + j].as_f64() - mean) / denom);
            }
        }
        let out = Tensor::from_parts(vec![b, d], out);
        self.push("batch_standardize", out, Op::BatchStandardize(x, eps), &[x])
    }

    // ---- backward ------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, shape is {:?}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Disconnected);
        }
        // Only leaves accumulate across calls; intermediate gradients are
        // recomputed from scratch.
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        self.accumulate(loss, vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dv) in contributions {
                self.accumulate(v, dv);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, dv: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(dv) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(dv),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Vector-Jacobian products of node `i` for each input needing a gradient.
    fn input_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g, false, self.data(b), true, &mut da, false);
                    out.push((a, da));
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, self.data(a), true, g, false, &mut db, false);
                    out.push((b, db));
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                out.push((x, transpose(g, c, r)));
            }
            &Op::Add(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Sub(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.iter().map(|&v| -v).collect()));
            }
            &Op::Mul(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                out.push((a, g.iter().zip(db).map(|(&gv, &bv)| gv * bv).collect()));
                out.push((b, g.iter().zip(da).map(|(&gv, &av)| gv * av).collect()));
            }
            &Op::Scale(x, f) => out.push((x, g.iter().map(|&v| v * f).collect())),
            &Op::AddBias(x, b) => {
                let c = self.shape(b)[0];
                out.push((x, g.to_vec()));
                if self.needs(b) {
                    let mut db = vec![0.0f64; c];
                    for row in g.chunks(c) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v.as_f64();
                        }
                    }
                    out.push((b, db.into_iter().map(T::from_f64).collect()));
                }
            }
            &Op::Relu(x) => {
                let y = node.value.data();
                out.push((
                    x,
                    g.iter()
                        .zip(y)
                        .map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() })
                        .collect(),
                ));
            }
            &Op::Huber(x, delta) => {
                let d = self.data(x);
                out.push((
                    x,
                    g.iter()
                        .zip(d)
                        .map(|(&gv, &dv)| {
                            if dv.abs() <= delta {
                                gv * dv
                            } else {
                                gv * delta * dv.signum()
                            }
                        })
                        .collect(),
                ));
            }
            &Op::Sum(x) => out.push((x, vec![g[0]; self.data(x).len()])),
            &Op::Mean(x) => {
                let n = self.data(x).len();
                out.push((x, vec![g[0] / T::from_f64(n as f64); n]));
            }
            &Op::OffDiagonalSquareSum(c) => {
                let r = self.shape(c)[0];
                let two = T::from_f64(2.0);
                let dc = self
                    .data(c)
                    .iter()
                    .enumerate()
                    .map(|(idx, &v)| if idx / r == idx % r { T::zero() } else { two * v * g[0] })
                    .collect();
                out.push((c, dc));
            }
            Op::SelfExcludedCrossEntropy(logits, targets) => {
                let n = targets.len();
                let data = self.data(*logits);
                let scale = g[0].as_f64() / n as f64;
                let mut dl = vec![T::zero(); n * n];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &data[i * n..(i + 1) * n];
                    let lse = log_sum_exp_excluding(row, i);
                    for k in 0..n {
                        if k == i {
                            continue;
                        }
                        let p = (row[k].as_f64() - lse).exp();
                        let target = if k == t { 1.0 } else { 0.0 };
                        dl[i * n + k] = T::from_f64((p - target) * scale);
                    }
                }
                out.push((*logits, dl));
            }
            &Op::Reshape(x) => out.push((x, g.to_vec())),
            Op::ConcatChannels(xs) => {
                let &[b, total, h, w] = node.value.shape() else {
                    unreachable!("concat output is 4-D")
                };
                let plane = h * w;
                let mut offset = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if self.needs(x) {
                        let mut dx = Vec::with_capacity(b * c * plane);
                        for bi in 0..b {
                            let base = (bi * total + offset) * plane;
                            dx.extend_from_slice(&g[base..base + c * plane]);
                        }
                        out.push((x, dx));
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.data(x).len();
                    if self.needs(x) {
                        out.push((x, g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            &Op::SliceRows(x, start) => {
                let src = &self.nodes[x.0].value;
                let stride = src.numel() / src.shape()[0];
                let mut dx = vec![T::zero(); src.numel()];
                dx[start * stride..start * stride + g.len()].copy_from_slice(g);
                out.push((x, dx));
            }
            &Op::Conv2d { x, w, bias, geom } => {
                let grads = conv::backward(
                    &geom,
                    self.data(x),
                    self.data(w),
                    g,
                    self.needs(x),
                    self.needs(w),
                    self.needs(bias),
                );
                out.extend(grads.x.map(|d| (x, d)));
                out.extend(grads.w.map(|d| (w, d)));
                out.extend(grads.bias.map(|d| (bias, d)));
            }
            &Op::AvgPool2d(x, size) => {
                let &[_, _, h, w] = self.shape(x) else {
                    unreachable!("pool input is 4-D")
                };
                let (oh, ow) = (h / size, w / size);
                let inv = T::from_f64(1.0 / (size * size) as f64);
                let mut dx = vec![T::zero(); self.data(x).len()];
                for (plane_idx, gp) in g.chunks(oh * ow).enumerate() {
                    let dst = &mut dx[plane_idx * h * w..(plane_idx + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w {
                            dst[i * w + j] = gp[(i / size) * ow + j / size] * inv;
                        }
                    }
                }
                out.push((x, dx));
            }
            &Op::GlobalAvgPool(x) => {
                let &[_, _, h, w] = self.shape(x) else {
                    unreachable!("pool input is 4-D")
                };
                let plane = h * w;
                let inv = T::from_f64(1.0 / plane as f64);
                let dx = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * inv, plane))
                    .collect();
                out.push((x, dx));
            }
            &Op::L2Normalize(x, eps) => {
                let d = self.shape(x)[1];
                let y = node.value.data();
                let mut dx = Vec::with_capacity(y.len());
                for ((xr, yr), gr) in self.data(x).chunks(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let norm = row_norm(xr);
                    if norm > eps {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / norm));
                    } else {
                        dx.extend(gr.iter().map(|&gv| gv / eps));
                    }
                }
                out.push((x, dx));
            }
            &Op::BatchStandardize(x, eps) => {
                let (b, d) = (self.shape(x)[0], self.shape(x)[1]);
                let src = self.data(x);
                let z = node.value.data();
                let mut dx = vec![T::zero(); b * d];
                for j in 0..d {
                    let (_, sd) = column_moments(src, b, d, j);
                    let gmean = (0..b).map(|i| g[i * d + j].as_f64()).sum::<f64>() / b as f64;
                    if sd > eps.as_f64() {
                        let gz = (0..b)
                            .map(|i| g[i * d + j].as_f64() * z[i * d + j].as_f64())
                            .sum::<f64>()
                            / b as f64;
                        for i in 0..b {
                            let v = (g[i * d + j].as_f64() - gmean - z[i * d + j].as_f64() * gz) / sd;
                            dx[i * d + j] = T::from_f64(v);
                        }
                    } else {
                        for i in 0..b {
                            dx[i * d + j] = T::from_f64((g[i * d + j].as_f64() - gmean) / eps.as_f64());
                        }
                    }
                }
                out.push((x, dx));
            }
        }
        out
    }
}

fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(src[r * cols + c]);
        }
    }
    out
}

fn sum_f64<T: Element>(xs: &[T]) -> f64 {
    xs.iter().map(|v| v.as_f64()).sum()
}

fn row_norm<T: Element>(row: &[T]) -> T {
    T::from_f64(row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
}

/// Mean and population standard deviation of column `j` of a `b x d` matrix.
fn column_moments<T: Element>(src: &[T], b: usize, d: usize, j: usize) -> (f64, f64) {
    let mean = (0..b).map(|i| src[i * d + j].as_f64()).sum::<f64>() / b as f64;
    let var = (0..b)
        .map(|i| {
            let c = src[i * d + j].as_f64() - mean;
            c * c
        })
        .sum::<f64>()
        / b as f64;
    (mean, var.sqrt())
}

/// `log Σ_{k≠skip} exp(row[k])`, stabilized by the row maximum.
fn log_sum_exp_excluding<T: Element>(row: &[T], skip: usize) -> f64 {
    let max = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != skip)
        .map(|(_, v)| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != skip)
        .map(|(_, v)| (v.as_f64() - max).exp())
        .sum();
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(row, col).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);

        assert!(g.matmul(row, row).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.37).collect();
        let b: Vec<f64> = (0..8).map(|i| ((i * 3 % 7) as f64 - 3.0) * 0.21).collect();
        let mut g = Graph::<f64>::new();
        let va = g.constant(t(&[3, 4], &a));
        let vb = g.constant(t(&[4, 2], &b));
        let p = g.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut e = 0.0;
                for k in 0..4 {
                    e += a[i * 4 + k] * b[k * 2 + j];
                }
                let got = g.value(p).data()[i * 2 + j];
                assert!((got - e).abs() <= 1e-6 * e.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sum_of_squares_gradient_is_2x() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.5, -2.0, 0.25]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let z = g.scale(x, 0.0).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_connected_scalar() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let s = g.sum(c).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Disconnected)));
        let p = g.param(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn global_avg_pool_of_constant_channel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([2, 3, 4, 5], 0.75));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.shape(y), &[2, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn l2_normalize_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]));
        let y = g.l2_normalize(x, 1e-12).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
        assert_eq!(&d[2..], &[0.0, 0.0]);
    }

    #[test]
    fn batch_standardize_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[1.0, 5.0, 3.0, 5.0]));
        let y = g.batch_standardize(x, 1e-12).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 0.0, 1.0, 0.0]);
        let one = g.constant(t(&[1, 2], &[1.0, 2.0]));
        assert!(g.batch_standardize(one, 1e-12).is_err());
    }

    #[test]
    fn constant_f32_column_standardizes_to_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full([7, 3], 0.3f32));
        let y = g.batch_standardize(x, 1e-12).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_are_reproducible_after_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 3], &[0.3, -1.2, 0.7, 2.0, 0.1, -0.4]));
        let n = g.l2_normalize(x, 1e-12).unwrap();
        let s = g.batch_standardize(n, 1e-12).unwrap();
        let sq = g.mul(s, n).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        let first = g.grad(x).unwrap();
        g.zero_grad();
        g.backward(l).unwrap();
        assert_eq!(first, g.grad(x).unwrap());
    }

    #[test]
    fn self_excluded_cross_entropy_rejects_self_target() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros([2, 2]));
        assert!(g.self_excluded_cross_entropy(l, vec![0, 0]).is_err());
        let v = g.self_excluded_cross_entropy(l, vec![1, 0]).unwrap();
        assert_eq!(g.value(v).item().unwrap(), 0.0);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }
}
