//! Tape-based reverse-mode automatic differentiation over a fixed op
//! vocabulary.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward pass. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients for every node that (transitively) depends on a
//! leaf created with `requires_grad`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`; odd totals put the
    /// extra pixel on the high side.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        }
    }

    pub fn valid(stride: usize) -> Self {
        Self {
            stride,
            dilation: 1,
            padding: Padding::Valid,
        }
    }

    pub fn dilated(dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: Padding::Same,
        }
    }

    /// Output extent and low-side padding for one spatial axis.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "stride and dilation must be positive, got stride {} dilation {}",
                self.stride, self.dilation
            )));
        }
        let span = (kernel - 1) * self.dilation + 1;
        match self.padding {
            Padding::Valid => {
                if span > input {
                    return Err(Error::InvalidArgument(format!(
                        "kernel span {span} exceeds input extent {input} with valid padding"
                    )));
                }
                Ok(((input - span) / self.stride + 1, 0))
            }
            Padding::Same => {
                let out = input.div_ceil(self.stride);
                let total = ((out - 1) * self.stride + span).saturating_sub(input);
                Ok((out, total / 2))
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    dilation: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let k = self.patch_len();
        let mut cols = vec![T::zero(); self.rows() * k];
        for b in 0..self.n {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = (b * self.oh + oy) * self.ow + ox;
                    let dst = &mut cols[row * k..(row + 1) * k];
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize
                            - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx * self.dilation) as isize
                                - self.pad_left as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            let d = (ky * self.kw + kx) * self.cin;
                            dst[d..d + self.cin].copy_from_slice(&x[src..src + self.cin]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let k = self.patch_len();
        for b in 0..self.n {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = (b * self.oh + oy) * self.ow + ox;
                    let src = &cols[row * k..(row + 1) * k];
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky * self.dilation) as isize
                            - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx * self.dilation) as isize
                                - self.pad_left as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let dst = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            let s = (ky * self.kw + kx) * self.cin;
                            for c in 0..self.cin {
                                dx[dst + c] += src[s + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// A square window `(batch index, top, left)` cut out of an NHWC tensor.
pub type Window = (usize, usize, usize);

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchedMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    Relu {
        x: Var,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Train mode normalizes with batch statistics that themselves
        /// depend on `x`.
        batch_stats: bool,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    AddScalar {
        x: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaxAxis {
        x: Var,
        /// Flat source index of each output element.
        argmax: Vec<usize>,
    },
    SumSquares {
        x: Var,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
        inner: usize,
    },
    Reshape {
        x: Var,
    },
    ConcatLast {
        a: Var,
        b: Var,
        ca: usize,
        cb: usize,
    },
    Patches {
        x: Var,
        windows: Vec<Window>,
        rf: usize,
        h: usize,
        w: usize,
        c: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros if `v` is not on a path to the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Split `shape` around `axis` into `(outer, len, inner)` extents.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

#[derive(Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// A constant copy of `v`: same value, no gradient flows back.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// `x[.., k] · w[k, n] + b[n]`, applied to every leading index of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let (k, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape("linear bias", self.shape(b), &[n]));
            }
        }
        let m = self.value(x).len() / k;
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(bias).for_each(|(o, &bv)| *o += bv);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b, m, k, n }, &inputs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear(a, b, None)
    }

    /// `a[B, m, k] · b[B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    false,
                    &bv[i * k * n..],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(value, Op::BatchedMatMul { a, b, batch, m, k, n }, &[a, b]))
    }

    /// Cross-correlation of NHWC input `x` (or HWC, treated as a batch of
    /// one) with kernel `[kh, kw, cin, cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let (n, h, w, cin) = match xs.as_slice() {
            [h, w, c] => (1, *h, *w, *c),
            [n, h, w, c] => (*n, *h, *w, *c),
            _ => return Err(Error::shape("conv2d input", &xs, &ks)),
        };
        if ks.len() != 4 || ks[2] != cin {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        let (oh, pad_top) = spec.output_extent(h, kh)?;
        let (ow, pad_left) = spec.output_extent(w, kw)?;
        let geom = ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            oh,
            ow,
            stride: spec.stride,
            dilation: spec.dilation,
            pad_top,
            pad_left,
        };
        let cols = if geom.is_pointwise() {
            None
        } else {
            Some(geom.im2col(self.value(x).data()))
        };
        let mut out = vec![T::zero(); geom.rows() * cout];
        {
            let a = cols.as_deref().unwrap_or(self.value(x).data());
            T::gemm(
                geom.rows(),
                geom.patch_len(),
                cout,
                a,
                false,
                self.value(kernel).data(),
                false,
                &mut out,
                false,
            );
        }
        let shape = if xs.len() == 3 {
            vec![oh, ow, cout]
        } else {
            vec![n, oh, ow, cout]
        };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Conv2d { x, kernel, geom, cols }, &[x, kernel]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x }, &[x])
    }

    fn check_bn(&self, x: Var, scale: Var, shift: Var) -> Result<(usize, usize)> {
        let xs = self.shape(x);
        let c = *xs.last().unwrap();
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(Error::shape("batch_norm", xs, self.shape(scale)));
        }
        Ok((self.value(x).len() / c, c))
    }

    /// Batch normalization over every axis but the last, using the batch's
    /// own statistics. Returns the output together with the per-channel
    /// batch mean and (biased) variance for running-stat updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (rows, c) = self.check_bn(x, scale, shift)?;
        if rows < 2 {
            return Err(Error::BatchTooSmall(rows));
        }
        let xv = self.value(x).data();
        let nf = T::from_usize(rows).unwrap();
        let mut mean = vec![T::zero(); c];
        for row in xv.chunks(c) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m = *m / nf);
        let mut var = vec![T::zero(); c];
        for row in xv.chunks(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s = *s / nf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (value, xhat) = self.bn_apply(x, scale, shift, &mean, &inv_std);
        let node = self.push(
            value,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats: true,
            },
            &[x, scale, shift],
        );
        Ok((node, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (_, c) = self.check_bn(x, scale, shift)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm running stats", &[mean.len()], &[c]));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (value, xhat) = self.bn_apply(x, scale, shift, mean, &inv_std);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats: false,
            },
            &[x, scale, shift],
        ))
    }

    fn bn_apply(
        &self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[T],
        inv_std: &[T],
    ) -> (Tensor<T>, Vec<T>) {
        let xv = self.value(x);
        let c = mean.len();
        let g = self.value(scale).data();
        let b = self.value(shift).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            for ch in 0..c {
                let xh = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(xh);
                out.push(xh * g[ch] + b[ch]);
            }
        }
        (Tensor::new(xv.shape(), out).unwrap(), xhat)
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        let xv = self.value(x);
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(out[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    s += (out[at(j)] - max).exp();
                }
                let lse = max + s.ln();
                for j in 0..len {
                    out[at(j)] = out[at(j)] - lse;
                }
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::LogSoftmax { x, outer, len, inner }, &[x]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        let xv = self.value(x);
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(out[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (out[at(j)] - max).exp();
                    out[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / s;
                }
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale { x, s }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.push(value, Op::AddScalar { x }, &[x])
    }

    /// Adds `b[c]` to every row of `x[.., c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        if self.shape(b) != [c] {
            return Err(Error::shape("add_bias", &xs, self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(&bias).for_each(|(o, &bv)| *o += bv);
        }
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(value, Op::AddBias { x, b }, &[x, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let xv = self.value(x).data();
        let nf = T::from_usize(len).unwrap();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &xv[(o * len + j) * inner..(o * len + j + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, &s)| *d += s);
            }
        }
        out.iter_mut().for_each(|v| *v = *v / nf);
        let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::MeanAxis { x, outer, len, inner }, &[x]))
    }

    /// Maximum over `axis`; ties send the gradient to the first maximum.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        if len == 0 {
            return Err(Error::InvalidArgument("max over an empty axis".into()));
        }
        let xv = self.value(x).data();
        let mut argmax: Vec<usize> = (0..outer * inner).map(|k| (k / inner) * len * inner + k % inner).collect();
        for o in 0..outer {
            for j in 1..len {
                for i in 0..inner {
                    let src = (o * len + j) * inner + i;
                    let best = &mut argmax[o * inner + i];
                    if xv[src] > xv[*best] {
                        *best = src;
                    }
                }
            }
        }
        let out = argmax.iter().map(|&k| xv[k]).collect();
        let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::MaxAxis { x, argmax }, &[x]))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().map(|&v| v * v).sum());
        self.push(value, Op::SumSquares { x }, &[x])
    }

    /// Treats `x` as `[R, ..rest]` and picks rows by index (repeats allowed),
    /// giving `[rows.len(), ..rest]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape[0];
        let inner: usize = shape[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidArgument(format!(
                "row {bad} out of range for shape {shape:?}"
            )));
        }
        if rows.is_empty() {
            return Err(Error::InvalidArgument("select_rows with no rows".into()));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &i in rows {
            out.extend_from_slice(&xv[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = rows.len();
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
                inner,
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let ca = *sa.last().unwrap();
        let cb = *sb.last().unwrap();
        let rows = self.value(a).len() / ca;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::ConcatLast { a, b, ca, cb }, &[a, b]))
    }

    /// Cuts `rf x rf` windows out of NHWC `x`, giving `[windows, rf, rf, c]`.
    pub fn patches(&mut self, x: Var, windows: &[Window], rf: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, h, w, c] = shape[..] else {
            return Err(Error::shape("patches", &shape, &[rf, rf]));
        };
        for &(b, top, left) in windows {
            if b >= n || top + rf > h || left + rf > w {
                return Err(Error::InvalidArgument(format!(
                    "window ({b}, {top}, {left}) of size {rf} outside input {shape:?}"
                )));
            }
        }
        if windows.is_empty() {
            return Err(Error::InvalidArgument("no windows".into()));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(windows.len() * rf * rf * c);
        for &(b, top, left) in windows {
            for y in top..top + rf {
                let start = ((b * h + y) * w + left) * c;
                out.extend_from_slice(&xv[start..start + rf * c]);
            }
        }
        let value = Tensor::new(&[windows.len(), rf, rf, c], out)?;
        Ok(self.push(
            value,
            Op::Patches {
                x,
                windows: windows.to_vec(),
                rf,
                h,
                w,
                c,
            },
            &[x],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        // only leaves and explicitly requested nodes keep their gradients
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, self.value(*w).data(), true, &mut dx, false);
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(*x).data(), true, g, false, &mut dw, false);
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); n];
                        for row in g.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::BatchedMatMul { a, b, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            false,
                            &bv[i * k * n..],
                            true,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            &av[i * m * k..],
                            true,
                            &g[i * m * n..],
                            false,
                            &mut db[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, kernel, geom, cols } => {
                let rows = geom.rows();
                let kl = geom.patch_len();
                let cout = geom.cout;
                if self.needs(*kernel) {
                    let a = cols.as_deref().unwrap_or(self.value(*x).data());
                    let mut dk = vec![T::zero(); kl * cout];
                    T::gemm(kl, rows, cout, a, true, g, false, &mut dk, false);
                    accumulate(grads, *kernel, dk);
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); rows * kl];
                    T::gemm(rows, cout, kl, g, false, self.value(*kernel).data(), true, &mut dcols, false);
                    if geom.is_pointwise() {
                        accumulate(grads, *x, dcols);
                    } else {
                        let mut dx = vec![T::zero(); geom.n * geom.h * geom.w * geom.cin];
                        geom.col2im(&dcols, &mut dx);
                        accumulate(grads, *x, dx);
                    }
                }
            }
            Op::Relu { x } => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let rows = xhat.len() / c;
                let mut dscale = vec![T::zero(); c];
                let mut dshift = vec![T::zero(); c];
                for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        dscale[ch] += grow[ch] * xrow[ch];
                        dshift[ch] += grow[ch];
                    }
                }
                if self.needs(*x) {
                    let gamma = self.value(*scale).data();
                    let mut dx = Vec::with_capacity(g.len());
                    if *batch_stats {
                        let nf = T::from_usize(rows).unwrap();
                        for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                            for ch in 0..c {
                                // d xhat = g * gamma; sums of it are dshift*gamma and dscale*gamma
                                let dxh = grow[ch] * gamma[ch];
                                let v = (nf * dxh - dshift[ch] * gamma[ch] - xrow[ch] * dscale[ch] * gamma[ch])
                                    * inv_std[ch]
                                    / nf;
                                dx.push(v);
                            }
                        }
                    } else {
                        for grow in g.chunks(c) {
                            for ch in 0..c {
                                dx.push(grow[ch] * gamma[ch] * inv_std[ch]);
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.needs(*scale) {
                    accumulate(grads, *scale, dscale);
                }
                if self.needs(*shift) {
                    accumulate(grads, *shift, dshift);
                }
            }
            Op::LogSoftmax { x, outer, len, inner } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let gs: T = (0..*len).map(|j| g[at(j)]).sum();
                        for j in 0..*len {
                            dx[at(j)] = g[at(j)] - y[at(j)].exp() * gs;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    accumulate(grads, *a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    accumulate(grads, *b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale { x, s } => {
                accumulate(grads, *x, g.iter().map(|&v| v * *s).collect());
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                accumulate(grads, *x, g.to_vec());
            }
            Op::AddBias { x, b } => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if self.needs(*b) {
                    let c = self.value(*b).len();
                    let mut db = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Sum { x } => {
                accumulate(grads, *x, vec![g[0]; self.value(*x).len()]);
            }
            Op::MeanAxis { x, outer, len, inner } => {
                let nf = T::from_usize(*len).unwrap();
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..*outer {
                    for j in 0..*len {
                        for i in 0..*inner {
                            dx[(o * len + j) * inner + i] = g[o * inner + i] / nf;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::MaxAxis { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (k, &src) in argmax.iter().enumerate() {
                    dx[src] += g[k];
                }
                accumulate(grads, *x, dx);
            }
            Op::SumSquares { x } => {
                let two = T::lit(2.0);
                accumulate(
                    grads,
                    *x,
                    self.value(*x).data().iter().map(|&v| two * v * g[0]).collect(),
                );
            }
            Op::SelectRows { x, rows, inner } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    let src = &g[k * inner..(k + 1) * inner];
                    dx[r * inner..(r + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &s)| *d += s);
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatLast { a, b, ca, cb } => {
                let width = ca + cb;
                if self.needs(*a) {
                    let da = g.chunks(width).flat_map(|r| r[..*ca].iter().copied()).collect();
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = g.chunks(width).flat_map(|r| r[*ca..].iter().copied()).collect();
                    accumulate(grads, *b, db);
                }
            }
            Op::Patches {
                x,
                windows,
                rf,
                h,
                w,
                c,
            } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                let rowlen = rf * c;
                for (p, &(b, top, left)) in windows.iter().enumerate() {
                    for dy in 0..*rf {
                        let dst = ((b * h + top + dy) * w + left) * c;
                        let src = (p * rf + dy) * rowlen;
                        dx[dst..dst + rowlen]
                            .iter_mut()
                            .zip(&g[src..src + rowlen])
                            .for_each(|(d, &s)| *d += s);
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, &x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}
