//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and whatever it needs for
//! its backward rule. Operands always precede the node that consumes them, so a
//! reverse sweep over the node list is a valid topological order.

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_a_bt, gemm_at_b, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGradient,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Relu(usize),
    Reshape(usize),
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    GlobalAvgPool(usize),
    SoftmaxCrossEntropy { logits: usize, probs: Vec<f64>, targets: Vec<usize> },
}

impl Op {
    fn operands(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::StopGradient => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) => vec![a, b],
            Op::Scale(x, _) | Op::Sum(x) | Op::Relu(x) | Op::Reshape(x) | Op::GlobalAvgPool(x) => vec![x],
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::MaxPool2d { x, .. } => vec![x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Per-channel batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Number of samples per channel the statistics were taken over.
    pub count: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }

    /// Unrolls sample `n` into a `[C*KH*KW x HO*WO]` patch matrix.
    fn im2col(&self, x: &[f64], n: usize, cols: &mut [f64]) {
        let (h, w, ho, wo) = (self.h, self.w, self.ho, self.wo);
        let base = n * self.c * h * w;
        let hw_out = self.spatial_out();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        for oj in 0..wo {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            dst[oi * wo + oj] = if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                x[base + (c * h + ii as usize) * w + jj as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a patch-matrix gradient back onto sample `n` of `dx`.
    fn col2im(&self, cols: &[f64], n: usize, dx: &mut [f64]) {
        let (h, w, ho, wo) = (self.h, self.w, self.ho, self.wo);
        let base = n * self.c * h * w;
        let hw_out = self.spatial_out();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    for oi in 0..ho {
                        let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                        if ii < 0 || ii as usize >= h {
                            continue;
                        }
                        for oj in 0..wo {
                            let jj = (oj * self.stride + kj) as isize - self.padding as isize;
                            if jj >= 0 && (jj as usize) < w {
                                dx[base + (c * h + ii as usize) * w + jj as usize] += src[oi * wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter. Gradients are only produced for leaves
    /// named in the `wrt` list of [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Identity in the forward pass; blocks every gradient in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0)))
    }

    /// `x[N x M] + bias[M]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::dim("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let mut out = self.value(x).clone();
        let m = sb[0];
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(m) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x.0, bias.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_inplace(s);
        self.push(out, Op::Scale(x.0, s))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu(x.0))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x.0)))
    }

    /// Flattens everything but the leading batch dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = vec![t.batch(), t.row_len()];
        self.reshape(x, shape)
    }

    /// Direct cross-correlation of `x[N x C x H x W]` with `w[F x C x KH x KW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, padding: usize, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::dim("conv2d", format!("input {sx:?} with filters {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kh, kw) = (sw[0], sw[2], sw[3]);
        let (ph, pw) = (h + 2 * padding, wd + 2 * padding);
        if kh > ph || kw > pw {
            return Err(Error::Config(format!("conv2d kernel {kh}x{kw} larger than padded input {ph}x{pw}")));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d output size is not integral: ({h} + 2*{padding} - {kh}) / {stride}"
            )));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            f,
            kh,
            kw,
            ho: (ph - kh) / stride + 1,
            wo: (pw - kw) / stride + 1,
            stride,
            padding,
        };
        let hw_out = geom.spatial_out();
        let mut out = vec![0.0; n * f * hw_out];
        let mut cols = vec![0.0; geom.patch() * hw_out];
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        for s in 0..n {
            geom.im2col(xd, s, &mut cols);
            gemm(wdata, &cols, &mut out[s * f * hw_out..(s + 1) * f * hw_out], f, geom.patch(), hw_out);
        }
        let value = Tensor::new(vec![n, f, geom.ho, geom.wo], out)?;
        Ok(self.push(value, Op::Conv2d { x: x.0, w: w.0, geom }))
    }

    /// Windowed max over `x[N x C x H x W]`. Ties resolve to the first element in
    /// row-major window order, which is also where the gradient goes.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return Err(Error::dim("maxpool2d", format!("expected NCHW input, got {sx:?}")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if kernel == 0 || stride == 0 {
            return Err(Error::Config("maxpool2d kernel and stride must be >= 1".into()));
        }
        if kernel > h || kernel > w {
            return Err(Error::Config(format!("maxpool2d kernel {kernel} larger than input {h}x{w}")));
        }
        let ho = (h - kernel) / stride + 1;
        let wo = (w - kernel) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = base + oi * stride * w + oj * stride;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let idx = base + (oi * stride + ki) * w + oj * stride + kj;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2d { x: x.0, argmax }))
    }

    /// Train-mode batch normalization over `[N x C]` or `[N x C x H x W]` using
    /// batch statistics (biased variance). Returns the statistics so the caller
    /// can maintain running averages.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (n, c, inner) = self.bn_dims(x, gamma, beta)?;
        if n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        let count = n * inner;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                mean[ch] += xd[base..base + inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                var[ch] += xd[base..base + inner].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let stats = BatchStats { mean: mean.clone(), var, count };
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, stats))
    }

    /// Eval-mode batch normalization with fixed (running) statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let (_, c, _) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("batchnorm", format!("running stats of length {} for {c} channels", mean.len())));
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false)
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        if sx.len() != 2 && sx.len() != 4 {
            return Err(Error::dim("batchnorm", format!("expected [N,C] or [N,C,H,W], got {sx:?}")));
        }
        let c = sx[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(
                "batchnorm",
                format!("gamma {:?} / beta {:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        let inner = sx[2..].iter().product();
        Ok((sx[0], c, inner))
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: Vec<f64>, train: bool) -> Result<Var> {
        let (n, c, inner) = self.bn_dims(x, gamma, beta)?;
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                for i in base..base + inner {
                    let xh = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, train }))
    }

    /// `[N x C x H x W] -> [N x C]` mean over spatial positions.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return Err(Error::dim("global_avg_pool", format!("expected NCHW input, got {sx:?}")));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let out: Vec<f64> = self.value(x).data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(x.0)))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits {sl:?} with {} targets", targets.len()),
            ));
        }
        let (n, k) = (sl[0], sl[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Data(format!("target {bad} out of range for {k} classes")));
        }
        let probs = self.value(logits).softmax_rows().into_data();
        let mut loss = 0.0;
        for (row, &t) in self.value(logits).data().chunks(k).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits: logits.0, probs, targets: targets.to_vec() },
        ))
    }

    /// True if a gradient path (one not crossing a stop-gradient node) leads
    /// from `output` back to `input`.
    pub fn reaches(&self, output: Var, input: Var) -> bool {
        if input.0 > output.0 {
            return false;
        }
        let mut seen = vec![false; output.0 + 1];
        let mut stack = vec![output.0];
        while let Some(i) = stack.pop() {
            if i == input.0 {
                return true;
            }
            if seen[i] {
                continue;
            }
            seen[i] = true;
            for o in self.nodes[i].op.operands() {
                if o >= input.0 && !seen[o] {
                    stack.push(o);
                }
            }
        }
        false
    }

    /// Reverse sweep from the given seed gradients. Returns the gradient for each
    /// entry of `wrt`, or `None` where no gradient path exists.
    pub fn backward(&self, seeds: &[(Var, Tensor)], wrt: &[Var]) -> Result<Vec<Option<Tensor>>> {
        let Some(top) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Ok(vec![None; wrt.len()]);
        };
        let needs = self.requires_grad(wrt, top);
        let mut grads: Vec<Option<Tensor>> = vec![None; top + 1];
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(Error::dim(
                    "backward",
                    format!("seed {:?} for node of shape {:?}", g.shape(), self.shape(*v)),
                ));
            }
            accumulate(&mut grads, v.0, g.clone());
        }
        for i in (0..=top).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &needs, &mut grads);
            grads[i] = Some(g);
        }
        Ok(wrt.iter().map(|v| grads.get(v.0).cloned().flatten()).collect())
    }

    /// Backward from a scalar loss with seed 1; missing gradients become zeros.
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.backward(&[(loss, Tensor::full(self.shape(loss), 1.0))], wrt)?;
        Ok(grads
            .into_iter()
            .zip(wrt)
            .map(|(g, v)| g.unwrap_or_else(|| Tensor::zeros(self.shape(*v))))
            .collect())
    }

    fn requires_grad(&self, wrt: &[Var], top: usize) -> Vec<bool> {
        let mut needs = vec![false; top + 1];
        for v in wrt {
            if v.0 <= top {
                needs[v.0] = true;
            }
        }
        for i in 0..=top {
            if needs[i] || matches!(self.nodes[i].op, Op::StopGradient) {
                continue;
            }
            needs[i] = self.nodes[i].op.operands().iter().any(|&o| needs[o]);
        }
        needs
    }

    fn backprop_node(&self, i: usize, g: &Tensor, needs: &[bool], grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        if let [only] = node.op.operands()[..] {
            if !needs[only] {
                return;
            }
        }
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs[a] {
                    let mut da = vec![0.0; m * k];
                    gemm_a_bt(g.data(), bv.data(), &mut da, m, n, k);
                    accumulate(grads, a, tensor(av.shape(), da));
                }
                if needs[b] {
                    let mut db = vec![0.0; k * n];
                    gemm_at_b(av.data(), g.data(), &mut db, k, m, n);
                    accumulate(grads, b, tensor(bv.shape(), db));
                }
            }
            &Op::AddBias(x, bias) => {
                if needs[x] {
                    accumulate(grads, x, g.clone());
                }
                if needs[bias] {
                    let m = self.nodes[bias].value.len();
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, bias, tensor(&[m], db));
                }
            }
            &Op::Add(a, b) => {
                if needs[a] {
                    accumulate(grads, a, g.clone());
                }
                if needs[b] {
                    accumulate(grads, b, g.clone());
                }
            }
            &Op::Scale(x, s) => {
                let mut d = g.clone();
                d.scale_inplace(s);
                accumulate(grads, x, d);
            }
            &Op::Sum(x) => {
                accumulate(grads, x, Tensor::full(self.nodes[x].value.shape(), g.item()));
            }
            &Op::Relu(x) => {
                let mut d = g.clone();
                for (dv, &out) in d.data_mut().iter_mut().zip(node.value.data()) {
                    if out <= 0.0 {
                        *dv = 0.0;
                    }
                }
                accumulate(grads, x, d);
            }
            &Op::Reshape(x) => {
                let d = g.clone().reshape(self.nodes[x].value.shape().to_vec()).expect("reshape grad");
                accumulate(grads, x, d);
            }
            &Op::Conv2d { x, w, geom } => self.conv_backward(x, w, geom, g, needs, grads),
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[*x].value.len()];
                for (&src, gv) in argmax.iter().zip(g.data()) {
                    dx[src] += gv;
                }
                accumulate(grads, *x, tensor(self.nodes[*x].value.shape(), dx));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                self.bn_backward([*x, *gamma, *beta], xhat, inv_std, *train, g, needs, grads)
            }
            &Op::GlobalAvgPool(x) => {
                let shape = self.nodes[x].value.shape();
                let hw = shape[2] * shape[3];
                let mut dx = Vec::with_capacity(self.nodes[x].value.len());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                accumulate(grads, x, tensor(shape, dx));
            }
            Op::SoftmaxCrossEntropy { logits, probs, targets } => {
                let n = targets.len();
                let k = probs.len() / n;
                let scale = g.item() / n as f64;
                let mut d = probs.clone();
                for (s, &t) in targets.iter().enumerate() {
                    d[s * k + t] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                accumulate(grads, *logits, tensor(&[n, k], d));
            }
        }
    }

    fn conv_backward(&self, x: usize, w: usize, geom: ConvGeom, g: &Tensor, needs: &[bool], grads: &mut [Option<Tensor>]) {
        let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
        let hw_out = geom.spatial_out();
        let patch = geom.patch();
        let f = geom.f;
        let mut cols = vec![0.0; patch * hw_out];
        let mut dw = needs[w].then(|| vec![0.0; wv.len()]);
        let mut dx = needs[x].then(|| vec![0.0; xv.len()]);
        let mut dcols = vec![0.0; patch * hw_out];
        for s in 0..geom.n {
            let gs = &g.data()[s * f * hw_out..(s + 1) * f * hw_out];
            if let Some(dw) = dw.as_mut() {
                geom.im2col(xv.data(), s, &mut cols);
                gemm_a_bt(gs, &cols, dw, f, hw_out, patch);
            }
            if let Some(dx) = dx.as_mut() {
                dcols.fill(0.0);
                gemm_at_b(wv.data(), gs, &mut dcols, patch, f, hw_out);
                geom.col2im(&dcols, s, dx);
            }
        }
        if let Some(dw) = dw {
            accumulate(grads, w, tensor(wv.shape(), dw));
        }
        if let Some(dx) = dx {
            accumulate(grads, x, tensor(xv.shape(), dx));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_backward(
        &self,
        [x, gamma, beta]: [usize; 3],
        xhat: &[f64],
        inv_std: &[f64],
        train: bool,
        g: &Tensor,
        needs: &[bool],
        grads: &mut [Option<Tensor>],
    ) {
        let shape = self.nodes[x].value.shape();
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let m = (n * inner) as f64;
        let gd = g.data();
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                for i in base..base + inner {
                    sum_dy[ch] += gd[i];
                    sum_dy_xhat[ch] += gd[i] * xhat[i];
                }
            }
        }
        if needs[x] {
            let gam = self.nodes[gamma].value.data();
            let mut dx = vec![0.0; gd.len()];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * inner;
                    let k = gam[ch] * inv_std[ch];
                    for i in base..base + inner {
                        dx[i] = if train {
                            k / m * (m * gd[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch])
                        } else {
                            k * gd[i]
                        };
                    }
                }
            }
            accumulate(grads, x, tensor(shape, dx));
        }
        if needs[gamma] {
            accumulate(grads, gamma, tensor(&[c], sum_dy_xhat));
        }
        if needs[beta] {
            accumulate(grads, beta, tensor(&[c], sum_dy));
        }
    }
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("gradient shape matches operand")
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
