use super::kernels::{self, ConvGeometry, RoiSample};
use super::Tensor;
use crate::error::{Error, Result};

/// Probability clamp applied before every logarithm in the likelihood losses.
pub const PROB_EPS: f64 = 1e-7;

/// Handle to a node of a [`Graph`].
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
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
        batch: usize,
        cout: usize,
        cols: Vec<f64>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    SmoothL1(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Bce {
        probs: Var,
        targets: Vec<f64>,
    },
    GradReverse {
        input: Var,
        coeff: f64,
    },
    Upsample {
        input: Var,
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
    },
    RoiAlign {
        input: Var,
        channels: usize,
        plane: usize,
        samples: Vec<RoiSample>,
        bins: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    IndexRows {
        input: Var,
        rows: Vec<usize>,
        width: usize,
    },
    MeanRows {
        input: Var,
        rows: usize,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Append-only operation tape. Node order is a topological order.
#[derive(Debug, Default)]
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

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
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

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(v).numel()])
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let &[batch, cin, h, wd] = x.shape() else {
            return Err(Error::shape(format!(
                "conv2d input must be [N, C, H, W], got {:?}",
                x.shape()
            )));
        };
        let &[cout, wcin, kh, kw] = w.shape() else {
            return Err(Error::shape(format!(
                "conv2d weight must be [Cout, Cin, Kh, Kw], got {:?}",
                w.shape()
            )));
        };
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d input has {cin} channels but weight expects {wcin}"
            )));
        }
        if b.shape() != [cout] {
            return Err(Error::shape(format!(
                "conv2d bias must be [{cout}], got {:?}",
                b.shape()
            )));
        }
        let geom = ConvGeometry::new(cin, h, wd, kh, kw, stride, padding)?;
        let (rows, spatial) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; batch * rows * spatial];
        let mut out = vec![0.0; batch * cout * spatial];
        for n in 0..batch {
            let img = &x.data()[n * cin * h * wd..(n + 1) * cin * h * wd];
            let col = &mut cols[n * rows * spatial..(n + 1) * rows * spatial];
            kernels::im2col(&geom, img, col);
            let o = &mut out[n * cout * spatial..(n + 1) * cout * spatial];
            for (c, chunk) in o.chunks_mut(spatial).enumerate() {
                chunk.fill(b.data()[c]);
            }
            kernels::gemm(cout, rows, spatial, w.data(), false, col, false, o, 1.0);
        }
        let value = Tensor::new(&[batch, cout, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
                cout,
                cols,
            },
            &[input, weight, bias],
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let &[n, din] = x.shape() else {
            return Err(Error::shape(format!(
                "fully_connected input must be [N, Din], got {:?}",
                x.shape()
            )));
        };
        let &[dout, wdin] = w.shape() else {
            return Err(Error::shape(format!(
                "fully_connected weight must be [Dout, Din], got {:?}",
                w.shape()
            )));
        };
        if wdin != din {
            return Err(Error::shape(format!(
                "fully_connected input width {din} does not match weight width {wdin}"
            )));
        }
        if b.shape() != [dout] {
            return Err(Error::shape(format!(
                "fully_connected bias must be [{dout}], got {:?}",
                b.shape()
            )));
        }
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        kernels::gemm(n, din, dout, x.data(), false, w.data(), true, &mut out, 1.0);
        let value = Tensor::with_empty(&[n, dout], out)?;
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    fn map(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::with_empty(x.shape(), data).expect("same shape");
        self.push(value, op, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.map(input, |v| v.max(0.0), Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.map(input, sigmoid, Op::Sigmoid(input))
    }

    /// Elementwise smooth-L1 (Huber, beta 1) of a residual tensor.
    pub fn smooth_l1(&mut self, input: Var) -> Var {
        self.map(input, smooth_l1, Op::SmoothL1(input))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        self.map(input, |v| v * factor, Op::Scale(input, factor))
    }

    /// Identity forward; multiplies the incoming gradient by `-coeff`.
    pub fn gradient_reverse(&mut self, input: Var, coeff: f64) -> Result<Var> {
        if !(coeff >= 0.0) {
            return Err(Error::invalid(format!(
                "gradient reversal coefficient must be non-negative, got {coeff}"
            )));
        }
        Ok(self.map(input, |v| v, Op::GradReverse { input, coeff }))
    }

    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let &[n, k] = x.shape() else {
            return Err(Error::shape(format!(
                "softmax_rows expects rank 2, got {:?}",
                x.shape()
            )));
        };
        let mut out = vec![0.0; n * k];
        for (row, dst) in x.data().chunks(k.max(1)).zip(out.chunks_mut(k.max(1))) {
            softmax_into(row, dst);
        }
        let value = Tensor::with_empty(&[n, k], out)?;
        Ok(self.push(value, Op::SoftmaxRows(input), &[input]))
    }

    /// Per-row `-ln(clamp(softmax(logits)[label]))`, shape `[N]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let &[n, k] = x.shape() else {
            return Err(Error::shape(format!(
                "cross_entropy expects rank 2, got {:?}",
                x.shape()
            )));
        };
        if labels.len() != n {
            return Err(Error::shape(format!(
                "cross_entropy got {} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!(
                "cross_entropy label {bad} outside [0, {k})"
            )));
        }
        let mut probs = vec![0.0; n * k];
        for (row, dst) in x.data().chunks(k.max(1)).zip(probs.chunks_mut(k.max(1))) {
            softmax_into(row, dst);
        }
        let losses = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * k + l].clamp(PROB_EPS, 1.0 - PROB_EPS).ln())
            .collect();
        let value = Tensor::with_empty(&[n], losses)?;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Elementwise binary cross-entropy of probabilities against constant
    /// targets in `[0, 1]`.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &[f64]) -> Result<Var> {
        let p = self.value(probs);
        if p.numel() != targets.len() {
            return Err(Error::shape(format!(
                "binary_cross_entropy got {} targets for {} probabilities",
                targets.len(),
                p.numel()
            )));
        }
        let data = p
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &t)| bce(p, t))
            .collect();
        let value = Tensor::with_empty(p.shape(), data)?;
        Ok(self.push(
            value,
            Op::Bce {
                probs,
                targets: targets.to_vec(),
            },
            &[probs],
        ))
    }

    /// Align-corners bilinear up-sampling of a `[H, W]` node.
    pub fn bilinear_upsample(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let x = self.value(input);
        let &[h, w] = x.shape() else {
            return Err(Error::shape(format!(
                "bilinear_upsample expects [H, W], got {:?}",
                x.shape()
            )));
        };
        kernels::check_upsample(h, w, out_h, out_w)?;
        let data = kernels::upsample_forward(x.data(), h, w, out_h, out_w);
        let value = Tensor::new(&[out_h, out_w], data)?;
        Ok(self.push(
            value,
            Op::Upsample {
                input,
                h,
                w,
                out_h,
                out_w,
            },
            &[input],
        ))
    }

    /// Gathers `bins` bilinear samples per RoI from a `[1, C, H, W]` feature
    /// map. `samples` holds `R * bins` entries; output is `[R, C * bins]`
    /// laid out channel-major.
    pub fn roi_align(&mut self, input: Var, samples: Vec<RoiSample>, bins: usize) -> Result<Var> {
        let x = self.value(input);
        let &[1, channels, h, w] = x.shape() else {
            return Err(Error::shape(format!(
                "roi_align expects [1, C, H, W], got {:?}",
                x.shape()
            )));
        };
        if bins == 0 || samples.len() % bins != 0 {
            return Err(Error::shape(format!(
                "{} RoI samples do not divide into {bins} bins",
                samples.len()
            )));
        }
        let plane = h * w;
        if samples
            .iter()
            .any(|s| s.taps.iter().any(|&(idx, _)| idx >= plane))
        {
            return Err(Error::Index("roi_align tap outside feature plane".into()));
        }
        let rois = samples.len() / bins;
        let width = channels * bins;
        let mut out = vec![0.0; rois * width];
        let data = x.data();
        for r in 0..rois {
            let row = &mut out[r * width..(r + 1) * width];
            for c in 0..channels {
                let src = &data[c * plane..(c + 1) * plane];
                for b in 0..bins {
                    let s = &samples[r * bins + b];
                    row[c * bins + b] = s.taps.iter().map(|&(i, wt)| src[i] * wt).sum();
                }
            }
        }
        let value = Tensor::with_empty(&[rois, width], out)?;
        Ok(self.push(
            value,
            Op::RoiAlign {
                input,
                channels,
                plane,
                samples,
                bins,
            },
            &[input],
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::with_empty(x.shape(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).sum();
        self.push(Tensor::scalar(total), Op::Sum(input), &[input])
    }

    /// Mean of all elements, shape `[1]`; zero for an empty tensor.
    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let m = if x.numel() == 0 { 0.0 } else { x.mean() };
        self.push(Tensor::scalar(m), Op::Mean(input), &[input])
    }

    /// Selects elements by flat index; output shape `[indices.len()]`.
    pub fn gather(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::Index(format!(
                "gather index {bad} outside tensor of {} elements",
                x.numel()
            )));
        }
        let data = indices.iter().map(|&i| x.data()[i]).collect();
        let value = Tensor::with_empty(&[indices.len()], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                input,
                indices: indices.to_vec(),
            },
            &[input],
        ))
    }

    /// Selects rows of a `[N, D]` tensor; output `[rows.len(), D]`.
    pub fn index_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let &[n, width] = x.shape() else {
            return Err(Error::shape(format!(
                "index_rows expects rank 2, got {:?}",
                x.shape()
            )));
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index(format!("row {bad} outside [0, {n})")));
        }
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&x.data()[r * width..(r + 1) * width]);
        }
        let value = Tensor::with_empty(&[rows.len(), width], data)?;
        Ok(self.push(
            value,
            Op::IndexRows {
                input,
                rows: rows.to_vec(),
                width,
            },
            &[input],
        ))
    }

    /// Column-wise mean of a `[N, D]` tensor with `N >= 1`; output `[D]`.
    pub fn mean_rows(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let &[n, width] = x.shape() else {
            return Err(Error::shape(format!(
                "mean_rows expects rank 2, got {:?}",
                x.shape()
            )));
        };
        if n == 0 {
            return Err(Error::shape("mean_rows of zero rows"));
        }
        let mut data = vec![0.0; width];
        for row in x.data().chunks(width) {
            for (acc, v) in data.iter_mut().zip(row) {
                *acc += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= n as f64);
        let value = Tensor::new(&[width], data)?;
        Ok(self.push(value, Op::MeanRows { input, rows: n }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                x.shape()
            )));
        }
        let value = Tensor::with_empty(shape, x.data().to_vec())?;
        Ok(self.push(value, Op::Reshape(input), &[input]))
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contrib),
        }
    }

    /// Back-propagates from the scalar `loss`, adding gradients into every
    /// reachable leaf that requires them. Intermediate gradients are cleared
    /// afterwards, so repeated calls accumulate into leaves only.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backward_node(i, &grad);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        // Split borrow: the op and value of node i are read while inputs (all
        // with smaller indices) receive gradient.
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        let mut pending: Vec<(Var, Vec<f64>)> = Vec::new();
        let wants = |v: &Var| before[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
                cout,
                cols,
            } => {
                let (rows, spatial) = (geom.col_rows(), geom.col_cols());
                let in_len = geom.cin * geom.h * geom.w;
                let w = before[weight.0].value.data();
                if wants(weight) {
                    let mut dw = vec![0.0; cout * rows];
                    for n in 0..*batch {
                        let go = &g[n * cout * spatial..(n + 1) * cout * spatial];
                        let col = &cols[n * rows * spatial..(n + 1) * rows * spatial];
                        kernels::gemm(*cout, spatial, rows, go, false, col, true, &mut dw, 1.0);
                    }
                    pending.push((*weight, dw));
                }
                if wants(bias) {
                    let mut db = vec![0.0; *cout];
                    for n in 0..*batch {
                        for (c, acc) in db.iter_mut().enumerate() {
                            let off = (n * cout + c) * spatial;
                            *acc += g[off..off + spatial].iter().sum::<f64>();
                        }
                    }
                    pending.push((*bias, db));
                }
                if wants(input) {
                    let mut dx = vec![0.0; batch * in_len];
                    let mut dcol = vec![0.0; rows * spatial];
                    for n in 0..*batch {
                        let go = &g[n * cout * spatial..(n + 1) * cout * spatial];
                        kernels::gemm(rows, *cout, spatial, w, true, go, false, &mut dcol, 0.0);
                        kernels::col2im_add(geom, &dcol, &mut dx[n * in_len..(n + 1) * in_len]);
                    }
                    pending.push((*input, dx));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = &before[input.0].value;
                let w = &before[weight.0].value;
                let (n, din) = (x.shape()[0], x.shape()[1]);
                let dout = w.shape()[0];
                if wants(input) {
                    let mut dx = vec![0.0; n * din];
                    kernels::gemm(n, dout, din, g, false, w.data(), false, &mut dx, 0.0);
                    pending.push((*input, dx));
                }
                if wants(weight) {
                    let mut dw = vec![0.0; dout * din];
                    kernels::gemm(dout, n, din, g, true, x.data(), false, &mut dw, 0.0);
                    pending.push((*weight, dw));
                }
                if wants(bias) {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks(dout.max(1)) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    pending.push((*bias, db));
                }
            }
            Op::Relu(input) => {
                let x = before[input.0].value.data();
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                pending.push((*input, dx));
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                let dx = y.iter().zip(g).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                pending.push((*input, dx));
            }
            Op::SoftmaxRows(input) => {
                let y = node.value.data();
                let k = node.value.shape()[1].max(1);
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(k).zip(g.chunks(k)).zip(dx.chunks_mut(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                pending.push((*input, dx));
            }
            Op::SmoothL1(input) => {
                let x = before[input.0].value.data();
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| gv * if v.abs() < 1.0 { v } else { v.signum() })
                    .collect();
                pending.push((*input, dx));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = before[logits.0].value.shape()[1];
                let mut dx = vec![0.0; probs.len()];
                for (i, &label) in labels.iter().enumerate() {
                    let p = probs[i * k + label];
                    if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                        continue;
                    }
                    for j in 0..k {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        dx[i * k + j] = g[i] * (probs[i * k + j] - onehot);
                    }
                }
                pending.push((*logits, dx));
            }
            Op::Bce { probs, targets } => {
                let p = before[probs.0].value.data();
                let dx = p
                    .iter()
                    .zip(targets)
                    .zip(g)
                    .map(|((&p, &t), &gv)| {
                        if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                            0.0
                        } else {
                            gv * (-(t / p) + (1.0 - t) / (1.0 - p))
                        }
                    })
                    .collect();
                pending.push((*probs, dx));
            }
            Op::GradReverse { input, coeff } => {
                pending.push((*input, g.iter().map(|v| -coeff * v).collect()));
            }
            Op::Upsample {
                input,
                h,
                w,
                out_h,
                out_w,
            } => {
                let mut dx = vec![0.0; h * w];
                kernels::upsample_backward(g, *h, *w, *out_h, *out_w, &mut dx);
                pending.push((*input, dx));
            }
            Op::RoiAlign {
                input,
                channels,
                plane,
                samples,
                bins,
            } => {
                let mut dx = vec![0.0; channels * plane];
                let width = channels * bins;
                for (r, grow) in g.chunks(width.max(1)).enumerate() {
                    for c in 0..*channels {
                        let dst = &mut dx[c * plane..(c + 1) * plane];
                        for b in 0..*bins {
                            let gv = grow[c * bins + b];
                            for &(idx, wt) in &samples[r * bins + b].taps {
                                dst[idx] += gv * wt;
                            }
                        }
                    }
                }
                pending.push((*input, dx));
            }
            Op::Add(a, b) => {
                pending.push((*a, g.to_vec()));
                pending.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                pending.push((*a, g.to_vec()));
                pending.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (x, y) = (before[a.0].value.data(), before[b.0].value.data());
                if wants(a) {
                    pending.push((*a, y.iter().zip(g).map(|(q, gv)| q * gv).collect()));
                }
                if wants(b) {
                    pending.push((*b, x.iter().zip(g).map(|(p, gv)| p * gv).collect()));
                }
            }
            Op::Scale(input, factor) => {
                pending.push((*input, g.iter().map(|v| v * factor).collect()));
            }
            Op::Sum(input) => {
                pending.push((*input, vec![g[0]; before[input.0].value.numel()]));
            }
            Op::Mean(input) => {
                let n = before[input.0].value.numel();
                if n > 0 {
                    pending.push((*input, vec![g[0] / n as f64; n]));
                }
            }
            Op::Gather { input, indices } => {
                let mut dx = vec![0.0; before[input.0].value.numel()];
                for (&i, &gv) in indices.iter().zip(g) {
                    dx[i] += gv;
                }
                pending.push((*input, dx));
            }
            Op::IndexRows { input, rows, width } => {
                let mut dx = vec![0.0; before[input.0].value.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    let src = &g[k * width..(k + 1) * width];
                    dx[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
                pending.push((*input, dx));
            }
            Op::MeanRows { input, rows } => {
                let scaled: Vec<f64> = g.iter().map(|v| v / *rows as f64).collect();
                let mut dx = Vec::with_capacity(rows * scaled.len());
                for _ in 0..*rows {
                    dx.extend_from_slice(&scaled);
                }
                pending.push((*input, dx));
            }
            Op::Reshape(input) => pending.push((*input, g.to_vec())),
        }
        for (v, contrib) in pending {
            self.accumulate(v, contrib);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub(crate) fn bce(p: f64, target: f64) -> f64 {
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(target * pc.ln() + (1.0 - target) * (1.0 - pc).ln())
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}
