//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records one forward pass. Every operation appends a node holding
//! its value and whatever it needs for the backward pass; [`Tape::backward`]
//! walks the nodes in reverse and returns the gradient of a scalar output with
//! respect to every node that requires one.
//!
//! The op set is exactly what the models in this crate need: dense layers,
//! 3x3 same-padding convolution, batch normalization, ReLU, 2x2 max-pooling,
//! pairwise Euclidean distances, row softmax and summed cross-entropy.

use crate::exec::Exec;
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Added under the square root of every Euclidean distance so the gradient is
/// finite at zero distance.
pub const DIST_EPS: f64 = 1e-12;

/// Batch-normalization variance epsilon.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the given running mean and (unbiased) variance.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Batch statistics observed by a train-mode batch norm; the caller decides
/// whether to fold them into running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (`n - 1` denominator), or the biased one when `n == 1`.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    Conv3x3 { x: Var, w: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    PairwiseDist { a: Var, b: Var },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(Exec::default())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new(exec: Exec) -> Self {
        Self { nodes: Vec::new(), exec }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `x[m, n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        let n = bv.len();
        assert_eq!(xv.row_len(), n, "bias width mismatch");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddBias(x, bias), rg)
    }

    /// Dense layer `x W + b` with `W: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Rows `start..end` along the leading dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        assert!(start <= end && end <= xv.rows());
        let w = xv.row_len();
        let mut shape = xv.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::new(shape, xv.data()[start * w..end * w].to_vec());
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceRows { x, start }, rg)
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let total: f64 = xs.iter().map(|&v| self.value(v).data().iter().sum::<f64>()).sum();
        let rg = self.rg(xs);
        self.push(Tensor::scalar(total), Op::Sum(xs.to_vec()), rg)
    }

    /// 3x3 convolution, stride 1, zero padding 1: `x[b, c, h, w]`,
    /// `w[o, c, 3, 3]`, `b[o]` -> `[b, o, h, w]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let exec = self.exec;
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let &[batch, cin, h, wd] = xv.shape() else { panic!("conv3x3 expects a 4-d input") };
        let &[cout, cin2, 3, 3] = wv.shape() else { panic!("conv3x3 expects [o, c, 3, 3] weights") };
        assert_eq!(cin, cin2, "conv3x3 channel mismatch");
        assert_eq!(bv.len(), cout);
        let hw = h * wd;
        let img_in = cin * hw;
        let img_out = cout * hw;
        let mut out = vec![0.0; batch * img_out];
        exec.for_each_chunk(&mut out, img_out, |i, dst| {
            let cols = im2col(&xv.data()[i * img_in..(i + 1) * img_in], cin, h, wd);
            gemm(cout, cin * 9, hw, wv.data(), false, &cols, false, dst, false);
            for (o, plane) in dst.chunks_mut(hw).enumerate() {
                let bias = bv.data()[o];
                plane.iter_mut().for_each(|v| *v += bias);
            }
        });
        let rg = self.rg(&[x, w, b]);
        self.push(Tensor::new([batch, cout, h, wd], out), Op::Conv3x3 { x, w, b }, rg)
    }

    /// 2x2 max-pool with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let &[batch, c, h, w] = xv.shape() else { panic!("max_pool2 expects a 4-d input") };
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(batch * c * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        let d = xv.data();
        for plane in 0..batch * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new([batch, c, oh, ow], out), Op::MaxPool2 { x, argmax }, rg)
    }

    /// Per-channel batch normalization of `[b, c]` or `[b, c, h, w]` input.
    ///
    /// In [`BnMode::Train`] the observed batch statistics are returned
    /// alongside the output; the tape itself never mutates running averages.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> (Var, Option<BatchStats>) {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        assert!(shape.len() == 2 || shape.len() == 4, "batch_norm expects 2-d or 4-d input");
        let (batch, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let n = batch * spatial;
        let d = xv.data();
        let channel_iter = |ch: usize| {
            (0..batch).flat_map(move |b| {
                let off = (b * c + ch) * spatial;
                off..off + spatial
            })
        };

        let (mean, inv_std, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var_b = vec![0.0; c];
                for ch in 0..c {
                    let m = channel_iter(ch).map(|i| d[i]).sum::<f64>() / n as f64;
                    let v = channel_iter(ch).map(|i| (d[i] - m).powi(2)).sum::<f64>() / n as f64;
                    mean[ch] = m;
                    var_b[ch] = v;
                }
                let inv: Vec<f64> = var_b.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let unbiased = if n > 1 { var_b.iter().map(|v| v * n as f64 / (n - 1) as f64).collect() } else { var_b.clone() };
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, inv, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                assert_eq!(mean.len(), c);
                assert_eq!(var.len(), c);
                let inv = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                (mean.to_vec(), inv, None)
            }
        };

        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        assert_eq!(g.len(), c);
        assert_eq!(bt.len(), c);
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for ch in 0..c {
            for i in channel_iter(ch) {
                let xh = (d[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = g[ch] * xh + bt[ch];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let train = matches!(mode, BnMode::Train);
        let v = self.push(Tensor::new(shape, out), Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, rg);
        (v, stats)
    }

    /// `out[i, j] = sqrt(|a_i - b_j|^2 + eps)` for `a: [m, d]`, `b: [k, d]`.
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Var {
        let out = pairwise_dist(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::PairwiseDist { a, b }, rg)
    }

    /// Numerically stable softmax over each row.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Summed cross-entropy `sum_i -log softmax(logits_i)[targets_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape().len(), 2);
        assert_eq!(lv.rows(), targets.len(), "one target per row");
        let k = lv.row_len();
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < k, "target {t} out of range for {k} classes");
            let row = lv.row(i);
            loss += log_sum_exp(row) - row[t];
        }
        let rg = self.rg(&[logits]);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs: probs.into_data() }, rg)
    }

    /// Gradients of the scalar `output` with respect to every node that
    /// requires one.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape().to_vec(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                    self.accumulate(grads, *a, Tensor::new([m, k], da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                    self.accumulate(grads, *b, Tensor::new([k, n], db));
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, db));
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = g.data().iter().zip(xv.data()).map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data.collect()));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(shape));
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let w = xv.row_len();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                dx.data_mut()[start * w..start * w + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(xs) => {
                let s = g.item();
                for &x in xs {
                    let shape = self.value(x).shape().to_vec();
                    self.accumulate(grads, x, Tensor::full(shape, s));
                }
            }
            Op::Conv3x3 { x, w, b } => self.conv_backward(*x, *w, *b, g, grads),
            Op::MaxPool2 { x, argmax } => {
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                    let d = dx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        d[src] += gv;
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let shape = self.value(*x).shape().to_vec();
                let (batch, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let n = (batch * spatial) as f64;
                let gam = self.value(*gamma).data();
                let gd = g.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; gd.len()];
                for ch in 0..c {
                    let idx = || {
                        (0..batch).flat_map(move |b| {
                            let off = (b * c + ch) * spatial;
                            off..off + spatial
                        })
                    };
                    let sum_g: f64 = idx().map(|i| gd[i]).sum();
                    let sum_gx: f64 = idx().map(|i| gd[i] * xhat[i]).sum();
                    dgamma[ch] = sum_gx;
                    dbeta[ch] = sum_g;
                    let k = gam[ch] * inv_std[ch];
                    if *train {
                        for i in idx() {
                            dx[i] = k * (gd[i] - sum_g / n - xhat[i] * sum_gx / n);
                        }
                    } else {
                        for i in idx() {
                            dx[i] = k * gd[i];
                        }
                    }
                }
                let gshape = self.value(*gamma).shape().to_vec();
                self.accumulate(grads, *gamma, Tensor::new(gshape.clone(), dgamma));
                self.accumulate(grads, *beta, Tensor::new(gshape, dbeta));
                self.accumulate(grads, *x, Tensor::new(shape, dx));
            }
            Op::PairwiseDist { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, d) = (av.rows(), av.row_len());
                let k = bv.rows();
                let dist = node.value.data();
                let mut da = vec![0.0; m * d];
                let mut db = vec![0.0; k * d];
                for i in 0..m {
                    for j in 0..k {
                        let coef = g.data()[i * k + j] / dist[i * k + j];
                        if coef == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = av.data()[i * d + t] - bv.data()[j * d + t];
                            da[i * d + t] += coef * diff;
                            db[j * d + t] -= coef * diff;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da));
                self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let k = y.row_len();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(k).zip(g.data().chunks(k)).zip(dx.chunks_mut(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for t in 0..k {
                        dr[t] = yr[t] * (gr[t] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let s = g.item();
                let lv = self.value(*logits);
                let k = lv.row_len();
                let mut dx: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * k + t] -= s;
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), dx));
            }
        }
    }

    fn conv_backward(&self, x: Var, w: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let exec = self.exec;
        let (xv, wv) = (self.value(x), self.value(w));
        let &[batch, cin, h, wd] = xv.shape() else { unreachable!() };
        let cout = wv.shape()[0];
        let hw = h * wd;
        let (img_in, img_out) = (cin * hw, cout * hw);

        if self.wants(b) {
            let mut db = vec![0.0; cout];
            for (i, plane) in g.data().chunks(hw).enumerate() {
                db[i % cout] += plane.iter().sum::<f64>();
            }
            self.accumulate(grads, b, Tensor::new([cout], db));
        }
        if self.wants(w) {
            let klen = cin * 9;
            let dw = exec.sum_into(batch, cout * klen, |i, acc| {
                let cols = im2col(&xv.data()[i * img_in..(i + 1) * img_in], cin, h, wd);
                let gi = &g.data()[i * img_out..(i + 1) * img_out];
                gemm(cout, hw, klen, gi, false, &cols, true, acc, true);
            });
            self.accumulate(grads, w, Tensor::new(wv.shape().to_vec(), dw));
        }
        if self.wants(x) {
            let mut dx = vec![0.0; batch * img_in];
            exec.for_each_chunk(&mut dx, img_in, |i, dst| {
                let gi = &g.data()[i * img_out..(i + 1) * img_out];
                let mut dcols = vec![0.0; cin * 9 * hw];
                gemm(cin * 9, cout, hw, wv.data(), true, gi, false, &mut dcols, false);
                col2im(&dcols, cin, h, wd, dst);
            });
            self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), dx));
        }
    }
}

/// Unfolds one `[c, h, w]` image into `[c * 9, h * w]` columns for a 3x3
/// kernel with zero padding 1.
fn im2col(img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back into `[c, h, w]`.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, img: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut img[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let k = x.row_len();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Plain pairwise Euclidean distance matrix with the [`DIST_EPS`] guard.
pub fn pairwise_dist(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, d) = (a.rows(), a.row_len());
    let k = b.rows();
    assert_eq!(b.row_len(), d, "pairwise_dist dimension mismatch");
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let ai = a.row(i);
        for j in 0..k {
            let s: f64 = ai.iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            out[i * k + j] = (s + DIST_EPS).sqrt();
        }
    }
    Tensor::new([m, k], out)
}
