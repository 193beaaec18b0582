use std::fmt;
use std::rc::Rc;

use super::kernels::{col2im_add, geometry, im2col_into, ConvGeometry};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Vector-Jacobian product for a user-supplied unary op:
/// `(input, output, upstream) -> input gradient`.
pub type CustomBackward<T> = Rc<dyn Fn(&[T], &[T], &[T]) -> Vec<T>>;

/// Recorded operation tag plus the context its backward rule needs.
pub(crate) enum Op<T: Element> {
    Add,
    Sub,
    Mul,
    Scale(T),
    Square,
    Abs,
    Relu,
    Exp,
    MatMul,
    Conv2d { geometry: ConvGeometry },
    MaxPool2d { argmax: Vec<usize> },
    GlobalAvgPool,
    LogSoftmax,
    Sum,
    Mean,
    Reshape,
    Gather { indices: Vec<usize> },
    Custom { name: &'static str, backward: CustomBackward<T> },
}

impl<T: Element> fmt::Debug for Op<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Index map for the limited broadcasting we support: the smaller operand
/// is a scalar or its shape is a suffix of the larger one's, so element
/// `i` of the output reads element `i % len` of each operand.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if nb == 1 && b.len() <= a.len() {
        return Ok(a.to_vec());
    }
    if na == 1 && a.len() <= b.len() {
        return Ok(b.to_vec());
    }
    if b.len() < a.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if a.len() < b.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::shape(op, a, b))
}

/// Sums a full-size gradient down onto an operand of `len` elements.
fn reduce_to<T: Element>(g: &[T], len: usize) -> Vec<T> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); len];
    for chunk in g.chunks(len) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o = *o + *v);
    }
    out
}

impl<T: Element> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Square => "square",
            Op::Abs => "abs",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::LogSoftmax => "log_softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Reshape => "reshape",
            Op::Gather { .. } => "gather",
            Op::Custom { name, .. } => name,
        }
    }

    /// Gradient for each input given the upstream gradient `g` of `out`.
    /// Entries are `None` for inputs that do not require gradients.
    pub fn backward(&self, inputs: &[Tensor<T>], out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let want = |i: usize| inputs[i].requires_grad();
        match self {
            Op::Add | Op::Sub => {
                let a = want(0).then(|| reduce_to(g, inputs[0].numel()));
                let b = want(1).then(|| {
                    let mut gb = reduce_to(g, inputs[1].numel());
                    if matches!(self, Op::Sub) {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    gb
                });
                vec![a, b]
            }
            Op::Mul => {
                let (ad, bd) = (inputs[0].data(), inputs[1].data());
                let (na, nb) = (ad.len(), bd.len());
                let ga = want(0).then(|| {
                    let full: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi * bd[i % nb]).collect();
                    reduce_to(&full, na)
                });
                let gb = want(1).then(|| {
                    let full: Vec<T> = g.iter().enumerate().map(|(i, &gi)| gi * ad[i % na]).collect();
                    reduce_to(&full, nb)
                });
                vec![ga, gb]
            }
            Op::Scale(s) => vec![Some(g.iter().map(|&v| v * *s).collect())],
            Op::Square => {
                let x = inputs[0].data();
                let two = T::from_f64(2.0);
                vec![Some(g.iter().zip(x.iter()).map(|(&gi, &xi)| gi * two * xi).collect())]
            }
            Op::Abs => {
                let x = inputs[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(&gi, &xi)| {
                            if xi > T::zero() {
                                gi
                            } else if xi < T::zero() {
                                -gi
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                )]
            }
            Op::Relu => {
                let x = inputs[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect(),
                )]
            }
            Op::Exp => {
                let y = out.data();
                vec![Some(g.iter().zip(y.iter()).map(|(&gi, &yi)| gi * yi).collect())]
            }
            Op::MatMul => {
                let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                let n = inputs[1].shape()[1];
                let ga = want(0).then(|| {
                    // dA = dC · Bᵀ
                    let b = inputs[1].data();
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g, (n, 1), &b, (1, n), T::zero(), &mut da, (k, 1));
                    da
                });
                let gb = want(1).then(|| {
                    // dB = Aᵀ · dC
                    let a = inputs[0].data();
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), &a, (1, k), g, (n, 1), T::zero(), &mut db, (n, 1));
                    db
                });
                vec![ga, gb]
            }
            Op::Conv2d { geometry: geo } => conv2d_backward(inputs, geo, g),
            Op::MaxPool2d { argmax } => {
                let mut gi = vec![T::zero(); inputs[0].numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gi[src] = gi[src] + gv;
                }
                vec![Some(gi)]
            }
            Op::GlobalAvgPool => {
                let s = inputs[0].shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_usize(hw);
                let mut gi = Vec::with_capacity(inputs[0].numel());
                for &gv in g {
                    gi.extend(std::iter::repeat_n(gv * inv, hw));
                }
                vec![Some(gi)]
            }
            Op::LogSoftmax => {
                let y = out.data();
                let c = *inputs[0].shape().last().unwrap();
                let mut gi = vec![T::zero(); y.len()];
                for ((grow, yrow), dst) in g.chunks(c).zip(y.chunks(c)).zip(gi.chunks_mut(c)) {
                    let total: T = grow.iter().copied().sum();
                    for ((d, &gv), &yv) in dst.iter_mut().zip(grow).zip(yrow) {
                        *d = gv - yv.exp() * total;
                    }
                }
                vec![Some(gi)]
            }
            Op::Sum => vec![Some(vec![g[0]; inputs[0].numel()])],
            Op::Mean => {
                let n = inputs[0].numel();
                vec![Some(vec![g[0] / T::from_usize(n); n])]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Gather { indices } => {
                let c = inputs[0].shape()[1];
                let mut gi = vec![T::zero(); inputs[0].numel()];
                for (row, (&idx, &gv)) in indices.iter().zip(g).enumerate() {
                    gi[row * c + idx] = gv;
                }
                vec![Some(gi)]
            }
            Op::Custom { backward, .. } => {
                let x = inputs[0].data();
                let y = out.data();
                vec![Some(backward(&x, &y, g))]
            }
        }
    }
}

fn conv2d_backward<T: Element>(inputs: &[Tensor<T>], geo: &ConvGeometry, g: &[T]) -> Vec<Option<Vec<T>>> {
    let (input, kernel, bias) = (&inputs[0], &inputs[1], &inputs[2]);
    let n = input.shape()[0];
    let cout = kernel.shape()[0];
    let rows = geo.col_rows();
    let hw = geo.col_cols();
    let in_len = geo.channels * geo.height * geo.width;

    let x = input.data();
    let w = kernel.data();
    let mut gx = input.requires_grad().then(|| vec![T::zero(); x.len()]);
    let mut gw = kernel.requires_grad().then(|| vec![T::zero(); w.len()]);
    let gb = bias.requires_grad().then(|| {
        let mut gb = vec![T::zero(); cout];
        for sample in g.chunks(cout * hw) {
            for (c, plane) in sample.chunks(hw).enumerate() {
                gb[c] = gb[c] + plane.iter().copied().sum::<T>();
            }
        }
        gb
    });

    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * hw] };
    let mut dcols = vec![T::zero(); rows * hw];
    for s in 0..n {
        let gs = &g[s * cout * hw..(s + 1) * cout * hw];
        let image = &x[s * in_len..(s + 1) * in_len];
        if let Some(gw) = gw.as_mut() {
            let col: &[T] = if geo.is_pointwise() {
                image
            } else {
                im2col_into(image, geo, &mut cols);
                &cols
            };
            // dW += dOut · colsᵀ
            T::gemm(cout, hw, rows, T::one(), gs, (hw, 1), col, (1, hw), T::one(), gw, (rows, 1));
        }
        if let Some(gx) = gx.as_mut() {
            // dcols = Wᵀ · dOut
            let dst = &mut gx[s * in_len..(s + 1) * in_len];
            if geo.is_pointwise() {
                T::gemm(rows, cout, hw, T::one(), &w, (1, rows), gs, (hw, 1), T::zero(), dst, (hw, 1));
            } else {
                T::gemm(rows, cout, hw, T::one(), &w, (1, rows), gs, (hw, 1), T::zero(), &mut dcols, (hw, 1));
                col2im_add(&dcols, geo, dst);
            }
        }
    }
    vec![gx, gw, gb]
}

impl<T: Element> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let shape = broadcast_shape(op.name(), self.shape(), other.shape())?;
        let (a, b) = (self.data(), other.data());
        let data: Vec<T> = if a.len() == b.len() {
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n: usize = shape.iter().product();
            (0..n).map(|i| f(a[i % a.len()], b[i % b.len()])).collect()
        };
        drop((a, b));
        Ok(Tensor::from_op(data, shape, op, &[self, other]))
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), op, &[self])
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&self, s: T) -> Tensor<T> {
        self.unary(Op::Scale(s), |x| x * s)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary(Op::Square, |x| x * x)
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(Op::Abs, |x| x.abs())
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(Op::Relu, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(Op::Exp, |x| x.exp())
    }

    /// Unary op with a caller-provided backward rule.
    pub fn custom_unary(
        &self,
        name: &'static str,
        forward: impl Fn(T) -> T,
        backward: CustomBackward<T>,
    ) -> Tensor<T> {
        self.unary(Op::Custom { name, backward }, forward)
    }

    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        Tensor::from_op(vec![s], Vec::new(), Op::Sum, &[self])
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::from_usize(self.numel());
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(vec![s / n], Vec::new(), Op::Mean, &[self])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape, &[self]))
    }

    /// `[M, K] × [K, N] → [M, N]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), &self.data(), (k, 1), &other.data(), (n, 1), T::zero(), &mut out, (n, 1));
        Ok(Tensor::from_op(out, vec![m, n], Op::MatMul, &[self, other]))
    }

    /// 2-D convolution of `[N, Cin, H, W]` by `[Cout, Cin, kh, kw]` with
    /// per-output-channel bias and zero padding.
    pub fn conv2d(&self, kernel: &Tensor<T>, bias: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        let (si, sk) = (self.shape(), kernel.shape());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(Error::shape("conv2d", si, sk));
        }
        if bias.shape() != [sk[0]] {
            return Err(Error::shape("conv2d bias", bias.shape(), &[sk[0]]));
        }
        let (n, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        let geo = geometry(cin, h, w, kh, kw, stride, padding).ok_or_else(|| Error::DegenerateOutput {
            op: "conv2d",
            input: si.to_vec(),
        })?;
        let (rows, hw) = (geo.col_rows(), geo.col_cols());
        let in_len = cin * h * w;

        let x = self.data();
        let wk = kernel.data();
        let b = bias.data();
        let mut out = vec![T::zero(); n * cout * hw];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * hw] };
        for s in 0..n {
            let image = &x[s * in_len..(s + 1) * in_len];
            let dst = &mut out[s * cout * hw..(s + 1) * cout * hw];
            for (c, plane) in dst.chunks_mut(hw).enumerate() {
                plane.fill(b[c]);
            }
            let col: &[T] = if geo.is_pointwise() {
                image
            } else {
                im2col_into(image, &geo, &mut cols);
                &cols
            };
            T::gemm(cout, rows, hw, T::one(), &wk, (rows, 1), col, (hw, 1), T::one(), dst, (hw, 1));
        }
        drop((x, wk, b));
        Ok(Tensor::from_op(
            out,
            vec![n, cout, geo.out_h, geo.out_w],
            Op::Conv2d { geometry: geo },
            &[self, kernel, bias],
        ))
    }

    /// Max pooling without padding. Ties route to the first maximum in
    /// row-major order.
    pub fn max_pool2d(&self, window: usize, stride: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("max_pool2d", s, &[0, 0, 0, 0]));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(Error::DegenerateOutput {
                op: "max_pool2d",
                input: s.to_vec(),
            });
        }
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let x = self.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for i in 0..window {
                        for j in 0..window {
                            let idx = base + (oy * stride + i) * w + ox * stride + j;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(out, vec![n, c, oh, ow], Op::MaxPool2d { argmax }, &[self]))
    }

    /// `[N, C, H, W] → [N, C, 1, 1]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(Error::DegenerateOutput {
                op: "global_avg_pool",
                input: s.to_vec(),
            });
        }
        let hw = s[2] * s[3];
        let inv = T::one() / T::from_usize(hw);
        let out: Vec<T> = self.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        Ok(Tensor::from_op(out, vec![s[0], s[1], 1, 1], Op::GlobalAvgPool, &[self]))
    }

    /// Row-wise log-softmax of a `[N, C]` tensor. The row maximum is
    /// subtracted before exponentiation.
    pub fn log_softmax(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::shape("log_softmax", s, &[0, 0]));
        }
        let c = s[1];
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data().chunks(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            out.extend(row.iter().map(|&v| v - lse));
        }
        Ok(Tensor::from_op(out, s.to_vec(), Op::LogSoftmax, &[self]))
    }

    /// Picks `x[j, indices[j]]` from a `[N, C]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != indices.len() {
            return Err(Error::shape("gather", s, &[indices.len()]));
        }
        let c = s[1];
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        let x = self.data();
        let out: Vec<T> = indices.iter().enumerate().map(|(row, &i)| x[row * c + i]).collect();
        drop(x);
        Ok(Tensor::from_op(
            out,
            vec![indices.len()],
            Op::Gather {
                indices: indices.to_vec(),
            },
            &[self],
        ))
    }
}
