use super::kernels::{self, ConvGeom};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Smallest divisor `l2_normalize` uses.
pub const NORM_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    ChannelAffine {
        input: Var,
        scale: Option<Var>,
        shift: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    SliceRows {
        input: Var,
        start: usize,
    },
    L2Normalize {
        input: Var,
        /// Row norms; `None` for rows mapped to zero.
        norms: Vec<Option<T>>,
    },
    MaxRows {
        input: Var,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so every node's inputs precede it and
/// a single reverse sweep visits each node once.
#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    bn_stats: Vec<BnBatchStats<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn channels_and_inner(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape.len() {
        2 => Some((shape[0], shape[1], 1)),
        4 => Some((shape[0], shape[1], shape[2] * shape[3])),
        _ => None,
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bn_stats: Vec::new(),
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Statistics recorded by every training-mode batch norm, in call order.
    pub fn bn_stats(&self) -> &[BnBatchStats<T>] {
        &self.bn_stats
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf value. Gradients are produced only for leaves created
    /// with `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let v = Tensor::from_vec([m, n], out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected 2-d, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let v = Tensor::from_vec([c, r], out)?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self
            .value(a)
            .reshape(shape.to_vec())
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", self.value(a).shape())))?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// 2-d convolution of `input` (N,C,H,W) with a square `kernel` (O,C,k,k).
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.value(input).shape().to_vec(), self.value(kernel).shape().to_vec());
        if sx.len() != 4 || sk.len() != 4 || sk[2] != sk[3] {
            return Err(Error::shape("conv2d", format!("input {sx:?}, kernel {sk:?}")));
        }
        if sx[1] != sk[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", sx[1], sk[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let k = sk[2];
        if sx[2] + 2 * pad < k || sx[3] + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {}x{}", sx[2], sx[3]),
            ));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sk[0],
            kernel: k,
            stride,
            pad,
            out_h: (sx[2] + 2 * pad - k) / stride + 1,
            out_w: (sx[3] + 2 * pad - k) / stride + 1,
        };
        let cols = kernels::im2col(self.value(input).data(), &geom);
        let (o, ncols, pos) = (geom.out_ch, geom.cols(), geom.positions());
        let mut mat = vec![T::zero(); o * ncols];
        kernels::gemm_nn(self.value(kernel).data(), &cols, &mut mat, o, geom.patch(), ncols);
        let mut out = vec![T::zero(); o * ncols];
        for oc in 0..o {
            for n in 0..geom.batch {
                out[(n * o + oc) * pos..][..pos].copy_from_slice(&mat[oc * ncols + n * pos..][..pos]);
            }
        }
        let v = Tensor::from_vec([geom.batch, o, geom.out_h, geom.out_w], out)?;
        let keep_cols = self.requires_grad(kernel);
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols: keep_cols.then_some(cols),
            },
            &[input, kernel],
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    /// 2×2 max pooling with stride 2 over (N,C,H,W); odd trailing rows and
    /// columns are dropped.
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("max_pool2", format!("expected (N,C,H>=2,W>=2), got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::from_vec([s[0], s[1], oh, ow], out)?;
        Ok(self.push(v, Op::MaxPool2 { input: a, argmax }, &[a]))
    }

    /// Mean over spatial positions: (N,C,H,W) -> (N,C).
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected 4-d, got {s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = T::one() / T::of(hw as f64);
        let data: Vec<T> = self
            .value(a)
            .data()
            .chunks_exact(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::from_vec([s[0], s[1]], data)?;
        Ok(self.push(v, Op::GlobalAvgPool(a), &[a]))
    }

    fn check_channel_vec(&self, op: &'static str, x: Var, p: Var) -> Result<(usize, usize, usize)> {
        let sx = self.value(x).shape();
        let (n, c, inner) =
            channels_and_inner(sx).ok_or_else(|| Error::shape(op, format!("expected (N,C) or (N,C,H,W), got {sx:?}")))?;
        let sp = self.value(p).shape();
        if sp != [c] {
            return Err(Error::shape(op, format!("per-channel vector {sp:?} for {c} channels")));
        }
        Ok((n, c, inner))
    }

    /// Per-channel `scale * x + shift` over (N,C) or (N,C,H,W). With no scale
    /// this is a bias add.
    pub fn channel_affine(&mut self, input: Var, scale: Option<Var>, shift: Var) -> Result<Var> {
        let (n, c, inner) = self.check_channel_vec("batch_affine", input, shift)?;
        if let Some(s) = scale {
            self.check_channel_vec("batch_affine", input, s)?;
        }
        let x = self.value(input).data();
        let b = self.value(shift).data();
        let g = scale.map(|s| self.value(s).data());
        let mut out = Vec::with_capacity(x.len());
        for ni in 0..n {
            for ci in 0..c {
                let mul = g.map_or(T::one(), |g| g[ci]);
                let add = b[ci];
                let base = (ni * c + ci) * inner;
                out.extend(x[base..base + inner].iter().map(|&v| mul * v + add));
            }
        }
        let v = Tensor::from_vec(self.value(input).shape().to_vec(), out)?;
        let mut inputs = vec![input, shift];
        inputs.extend(scale);
        Ok(self.push(v, Op::ChannelAffine { input, scale, shift }, &inputs))
    }

    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        self.channel_affine(input, None, bias)
    }

    /// Training-mode batch normalization using statistics of the current
    /// batch. The observed statistics are appended to [`Tape::bn_stats`].
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (n, c, inner) = self.check_channel_vec("batch_norm", input, gamma)?;
        self.check_channel_vec("batch_norm", input, beta)?;
        let m = n * inner;
        if m < 2 {
            return Err(Error::shape("batch_norm", "need at least two values per channel"));
        }
        let x = self.value(input).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                mean[ci] = mean[ci] + x[base..base + inner].iter().copied().sum::<T>();
            }
        }
        let mf = T::of(m as f64);
        for v in &mut mean {
            *v = *v / mf;
        }
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                let mu = mean[ci];
                var[ci] = var[ci] + x[base..base + inner].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
        }
        let biased: Vec<T> = var.iter().map(|&v| v / mf).collect();
        let inv_std: Vec<T> = biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                for &v in &x[base..base + inner] {
                    let h = (v - mean[ci]) * inv_std[ci];
                    xhat.push(h);
                    out.push(gd[ci] * h + bd[ci]);
                }
            }
        }
        let unbiased = var.iter().map(|&v| v / T::of((m - 1) as f64)).collect();
        self.bn_stats.push(BnBatchStats { mean, var: unbiased });
        let v = Tensor::from_vec(self.value(input).shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[input, gamma, beta],
        ))
    }

    /// Row-wise log-softmax of a 2-d tensor, max-shifted for stability.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::shape("log_softmax", format!("expected (B,C>0), got {s:?}")));
        }
        let mut out = Vec::with_capacity(s[0] * s[1]);
        for row in self.value(a).data().chunks_exact(s[1]) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let v = Tensor::from_vec(s, out)?;
        Ok(self.push(v, Op::LogSoftmax(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let v = Tensor::scalar(self.value(a).sum() / T::of(n as f64));
        Ok(self.push(v, Op::Mean(a), &[a]))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&tensors)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, end)?;
        Ok(self.push(v, Op::SliceRows { input: a, start }, &[a]))
    }

    /// Scales every row of a 2-d tensor to unit Euclidean norm. Rows with
    /// norm below `NORM_FLOOR` map to zeros and pass no gradient.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape("l2_normalize", format!("expected 2-d, got {s:?}")));
        }
        let floor = T::of(NORM_FLOOR);
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = Vec::with_capacity(s[0] * s[1]);
        for (i, row) in self.value(a).data().chunks_exact(s[1].max(1)).enumerate() {
            let nrm = kernels::dot(row, row).sqrt();
            if !nrm.is_finite() {
                return Err(Error::NonFinite(format!("l2_normalize: row {i} has norm {nrm}")));
            }
            if nrm < floor {
                norms.push(None);
                out.extend(row.iter().map(|_| T::zero()));
            } else {
                norms.push(Some(nrm));
                out.extend(row.iter().map(|&v| v / nrm));
            }
        }
        let v = Tensor::from_vec(s, out)?;
        Ok(self.push(v, Op::L2Normalize { input: a, norms }, &[a]))
    }

    /// Row-wise maximum of a 2-d tensor, shape (B,1). The gradient flows to
    /// the first maximal entry.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::shape("max_rows", format!("expected (B,C>0), got {s:?}")));
        }
        let mut out = Vec::with_capacity(s[0]);
        let mut argmax = Vec::with_capacity(s[0]);
        for (i, row) in self.value(a).data().chunks_exact(s[1]).enumerate() {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(row[best]);
            argmax.push(i * s[1] + best);
        }
        let v = Tensor::from_vec([s[0], 1], out)?;
        Ok(self.push(v, Op::MaxRows { input: a, argmax }, &[a]))
    }

    /// Reverse sweep from a scalar `loss`. Every leaf created with
    /// `requires_grad` receives a gradient, zero if the loss does not depend
    /// on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e = *e + *x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if rg(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_nt(g.data(), vb.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_vec([m, k], da)?);
                }
                if rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_tn(va.data(), g.data(), &mut db, m, k, n);
                    self.accumulate(grads, *b, Tensor::from_vec([k, n], db)?);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                let mut out = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec([c, r], out)?);
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.reshape(self.value(*a).shape().to_vec())?);
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (o, ncols, pos, patch) = (geom.out_ch, geom.cols(), geom.positions(), geom.patch());
                let mut dmat = vec![T::zero(); o * ncols];
                for oc in 0..o {
                    for n in 0..geom.batch {
                        dmat[oc * ncols + n * pos..][..pos].copy_from_slice(&g.data()[(n * o + oc) * pos..][..pos]);
                    }
                }
                if rg(*kernel) {
                    let cols = cols.as_ref().expect("columns kept when kernel requires grad");
                    let mut dw = vec![T::zero(); o * patch];
                    kernels::gemm_nt(&dmat, cols, &mut dw, o, ncols, patch);
                    self.accumulate(grads, *kernel, Tensor::from_vec(self.value(*kernel).shape().to_vec(), dw)?);
                }
                if rg(*input) {
                    let mut dcols = vec![T::zero(); patch * ncols];
                    kernels::gemm_tn(self.value(*kernel).data(), &dmat, &mut dcols, o, patch, ncols);
                    let mut dx = vec![T::zero(); self.value(*input).len()];
                    kernels::col2im(&dcols, geom, &mut dx);
                    self.accumulate(grads, *input, Tensor::from_vec(self.value(*input).shape().to_vec(), dx)?);
                }
            }
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { T::zero() })?;
                self.accumulate(grads, *a, d);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = Tensor::zeros(self.value(*input).shape().to_vec());
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[i] = dx.data()[i] + gv;
                }
                self.accumulate(grads, *input, dx);
            }
            Op::GlobalAvgPool(a) => {
                let s = self.value(*a).shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::of(hw as f64);
                let mut dx = Vec::with_capacity(self.value(*a).len());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                self.accumulate(grads, *a, Tensor::from_vec(s.to_vec(), dx)?);
            }
            Op::ChannelAffine { input, scale, shift } => {
                let (n, c, inner) = channels_and_inner(self.value(*input).shape()).expect("checked in forward");
                let x = self.value(*input).data();
                let gd = g.data();
                let sv = scale.map(|s| self.value(s).data());
                if rg(*input) {
                    let mut dx = Vec::with_capacity(x.len());
                    for ni in 0..n {
                        for ci in 0..c {
                            let mul = sv.map_or(T::one(), |s| s[ci]);
                            let base = (ni * c + ci) * inner;
                            dx.extend(gd[base..base + inner].iter().map(|&v| v * mul));
                        }
                    }
                    self.accumulate(grads, *input, Tensor::from_vec(self.value(*input).shape().to_vec(), dx)?);
                }
                let mut dshift = vec![T::zero(); c];
                let mut dscale = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * inner;
                        let gs = &gd[base..base + inner];
                        dshift[ci] = dshift[ci] + gs.iter().copied().sum::<T>();
                        if scale.is_some() {
                            dscale[ci] = dscale[ci] + kernels::dot(gs, &x[base..base + inner]);
                        }
                    }
                }
                self.accumulate(grads, *shift, Tensor::from_vec([c], dshift)?);
                if let Some(s) = scale {
                    self.accumulate(grads, *s, Tensor::from_vec([c], dscale)?);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, inner) = channels_and_inner(self.value(*input).shape()).expect("checked in forward");
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * inner;
                        dbeta[ci] = dbeta[ci] + gd[base..base + inner].iter().copied().sum::<T>();
                        dgamma[ci] = dgamma[ci] + kernels::dot(&gd[base..base + inner], &xhat[base..base + inner]);
                    }
                }
                if rg(*input) {
                    let mf = T::of((n * inner) as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * inner;
                            // dxhat = g*gamma; sums of dxhat and dxhat*xhat are gamma*dbeta and gamma*dgamma.
                            let k = gam[ci] * inv_std[ci] / mf;
                            for j in base..base + inner {
                                dx[j] = k * (mf * gd[j] - dbeta[ci] - xhat[j] * dgamma[ci]);
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::from_vec(self.value(*input).shape().to_vec(), dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::from_vec([c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::from_vec([c], dbeta)?);
            }
            Op::LogSoftmax(a) => {
                let cols = node.value.shape()[1];
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.data().chunks_exact(cols).zip(node.value.data().chunks_exact(cols)) {
                    let gs: T = grow.iter().copied().sum();
                    dx.extend(grow.iter().zip(yrow).map(|(&gv, &y)| gv - y.exp() * gs));
                }
                self.accumulate(grads, *a, Tensor::from_vec(g.shape().to_vec(), dx)?);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape().to_vec(), gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let gv = g.data()[0] / T::of(n as f64);
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape().to_vec(), gv));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).shape()[0];
                    if rg(p) {
                        self.accumulate(grads, p, g.slice_rows(start, start + rows)?);
                    }
                    start += rows;
                }
            }
            Op::SliceRows { input, start } => {
                let src = self.value(*input);
                let rows = src.shape()[0];
                let stride = if rows == 0 { 0 } else { src.len() / rows };
                let mut dx = Tensor::zeros(src.shape().to_vec());
                dx.data_mut()[start * stride..start * stride + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *input, dx);
            }
            Op::L2Normalize { input, norms } => {
                let cols = node.value.shape()[1];
                let mut dx = Vec::with_capacity(g.len());
                for ((grow, yrow), &nrm) in g
                    .data()
                    .chunks_exact(cols)
                    .zip(node.value.data().chunks_exact(cols))
                    .zip(norms)
                {
                    match nrm {
                        Some(nrm) => {
                            let proj = kernels::dot(grow, yrow);
                            dx.extend(grow.iter().zip(yrow).map(|(&gv, &y)| (gv - y * proj) / nrm));
                        }
                        None => dx.extend(grow.iter().map(|_| T::zero())),
                    }
                }
                self.accumulate(grads, *input, Tensor::from_vec(g.shape().to_vec(), dx)?);
            }
            Op::MaxRows { input, argmax } => {
                let mut dx = Tensor::zeros(self.value(*input).shape().to_vec());
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[i] = dx.data()[i] + gv;
                }
                self.accumulate(grads, *input, dx);
            }
        }
        Ok(())
    }
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a leaf created with `requires_grad`; `None` otherwise.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = t(&[3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.5]);
        let i = tape.constant(Tensor::eye(3));
        let av = tape.constant(a.clone());
        let y = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(y), &a);
    }

    #[test]
    fn conv2d_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([1, 1, 4, 4]));
        let k = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[9.0; 4]);
    }

    #[test]
    fn conv2d_channel_mismatch_names_dims() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([1, 3, 4, 4]));
        let k = tape.constant(Tensor::ones([2, 2, 3, 3]));
        let err = tape.conv2d(x, k, 1, 1).unwrap_err().to_string();
        assert!(err.contains("conv2d") && err.contains("3 channels") && err.contains("expects 2"), "{err}");
    }

    #[test]
    fn matmul_mismatch_is_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones([2, 3]));
        let b = tape.constant(Tensor::ones([2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0f64), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_subgradient_convention() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[2.0, -1.0, 0.0]), true);
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = tape.leaf(t(&[2, 2], &[1.0; 4]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 4]);
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn l2_normalize_rows_have_unit_norm_and_zero_row_stays_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[3.0, 4.0, 0.0, -1.0, 1e-3, 7.0]));
        let y = tape.l2_normalize(x).unwrap();
        for i in 0..2 {
            let n: f64 = tape.value(y).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let z = tape.leaf(t(&[2, 2], &[0.0, 0.0, 3.0, 4.0]), true);
        let y = tape.l2_normalize(z).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.6, 0.8]);
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        let g = g.get(z).unwrap().data();
        assert_eq!(&g[..2], &[0.0, 0.0]);
        assert!(g[2..].iter().all(|v| v.is_finite()));
        let inf = tape.constant(t(&[1, 2], &[f64::INFINITY, 1.0]));
        assert!(tape.l2_normalize(inf).is_err());
    }

    #[test]
    fn max_pool_and_max_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 5.0, 3.0, 2.0]), true);
        let p = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0]);
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);

        let m = tape.constant(t(&[2, 3], &[1.0, 4.0, 4.0, -2.0, -1.0, -3.0]));
        let r = tape.max_rows(m).unwrap();
        assert_eq!(tape.value(r).data(), &[4.0, -1.0]);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::from_fn([2, 3, 6, 6], |i| ((i * 7919) % 97) as f32 / 97.0));
            let k = tape.constant(Tensor::from_fn([4, 3, 3, 3], |i| ((i * 31) % 13) as f32 / 13.0 - 0.5));
            let y = tape.conv2d(x, k, 2, 1).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
