//! Forward and backward kernels for every supported layer kind.
//!
//! Kernels are plain functions over [`Tensor`]s so they can be tested in
//! isolation against loop oracles; [`super::Tape`] wires them together.

use serde::{Deserialize, Serialize};

use super::{NnError, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

fn shape_err(msg: String) -> NnError {
    NnError::Shape(msg)
}

fn check_not_nan<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(), NnError> {
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(NnError::NonFinite(format!("NaN input to {what}")));
    }
    Ok(())
}

/// Promotes `[C,H,W]` to `[1,C,H,W]`.
fn as_batched<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize), NnError> {
    match *x.shape() {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(shape_err(format!("expected [C,H,W] or [N,C,H,W], got {s:?}"))),
    }
}

pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

pub fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom, NnError> {
    let (n, c_in, h, w) = as_batched(x)?;
    let [c_out, wc, kh, kw] = *weights.shape() else {
        return Err(shape_err(format!(
            "conv weights must be [C_out,C_in,kH,kW], got {:?}",
            weights.shape()
        )));
    };
    if wc != c_in {
        return Err(shape_err(format!(
            "conv expects {wc} input channels, input has {c_in}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(shape_err(format!(
            "conv bias must be [{c_out}], got {:?}",
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(NnError::InvalidLayer("conv stride must be >= 1".into()));
    }
    let oh = conv_output_extent(h, kh, stride, padding);
    let ow = conv_output_extent(w, kw, stride, padding);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(shape_err(format!(
            "conv {kh}x{kw} (stride {stride}, padding {padding}) on {h}x{w} input has no output positions"
        )));
    };
    Ok(ConvGeom { n, c_in, h, w, c_out, kh, kw, oh, ow, stride, padding })
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c_in {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c_in {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. Accepts `[C,H,W]` (returns
/// `[C_out,OH,OW]`) or `[N,C,H,W]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, NnError> {
    let (out, _) = conv2d_forward_cached(x, weights, bias, stride, padding)?;
    if x.rank() == 3 {
        let s = out.shape()[1..].to_vec();
        return out.reshape(&s);
    }
    Ok(out)
}

/// Batched convolution returning the im2col buffer for reuse in backward.
pub fn conv2d_forward_cached<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<T>), NnError> {
    let g = conv_geometry(x, weights, bias, stride, padding)?;
    let (ck, p) = (g.patch(), g.positions());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut cols = vec![T::zero(); g.n * ck * p];
    let mut out = vec![T::zero(); g.n * out_sz];
    for s in 0..g.n {
        let col = &mut cols[s * ck * p..(s + 1) * ck * p];
        im2col(&x.data()[s * in_sz..(s + 1) * in_sz], &g, col);
        let o = &mut out[s * out_sz..(s + 1) * out_sz];
        for (oc, chunk) in o.chunks_mut(p).enumerate() {
            chunk.fill(bias.data()[oc]);
        }
        T::gemm(
            g.c_out,
            ck,
            p,
            T::one(),
            weights.data(),
            ck as isize,
            1,
            col,
            p as isize,
            1,
            T::one(),
            o,
            p as isize,
            1,
        );
    }
    Ok((Tensor::new(&[g.n, g.c_out, g.oh, g.ow], out)?, cols))
}

/// Returns `(dx, dweights, dbias)`.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    weights: &Tensor<T>,
    cols: &[T],
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (ck, p) = (g.patch(), g.positions());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut dx = vec![T::zero(); g.n * in_sz];
    let mut dw = vec![T::zero(); g.c_out * ck];
    let mut db = vec![0.0f64; g.c_out];
    let mut dcols = vec![T::zero(); ck * p];
    for s in 0..g.n {
        let dy = &grad_out.data()[s * out_sz..(s + 1) * out_sz];
        let col = &cols[s * ck * p..(s + 1) * ck * p];
        for (oc, chunk) in dy.chunks(p).enumerate() {
            db[oc] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        // dW += dY · colsᵀ
        T::gemm(g.c_out, p, ck, T::one(), dy, p as isize, 1, col, 1, p as isize, T::one(), &mut dw, ck as isize, 1);
        // dcols = Wᵀ · dY
        T::gemm(
            ck,
            g.c_out,
            p,
            T::one(),
            weights.data(),
            1,
            ck as isize,
            dy,
            p as isize,
            1,
            T::zero(),
            &mut dcols,
            p as isize,
            1,
        );
        col2im(&dcols, g, &mut dx[s * in_sz..(s + 1) * in_sz]);
    }
    (
        Tensor::new(&[g.n, g.c_in, g.h, g.w], dx).expect("conv dx shape"),
        Tensor::new(weights.shape(), dw).expect("conv dw shape"),
        Tensor::new(&[g.c_out], db.into_iter().map(T::from_f64).collect()).expect("conv db shape"),
    )
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: Tensor::zeros(&[channels]), var: Tensor::full(&[channels], T::one()) }
    }
}

/// Cached values of a batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

fn bn_layout<T: Scalar>(x: &Tensor<T>, channels: usize) -> Result<(usize, usize), NnError> {
    let s = x.shape();
    if s.len() < 2 || s[1] != channels {
        return Err(shape_err(format!(
            "batchnorm over {channels} channels got input {s:?}"
        )));
    }
    Ok((s[0], s[2..].iter().product()))
}

/// Batch normalization over axis 1 of `[N,C]` or `[N,C,H,W]`.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>), NnError> {
    let c = gamma.len();
    if beta.len() != c || running.mean.len() != c {
        return Err(shape_err("batchnorm parameter lengths disagree".into()));
    }
    let (n, inner) = bn_layout(x, c)?;
    if mode == Mode::Train && n < 2 {
        return Err(NnError::Invalid(
            "batchnorm in train mode needs a batch of at least 2".into(),
        ));
    }
    let count = (n * inner) as f64;
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut s = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * inner;
                    s += xd[off..off + inner].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = s / count;
                let mut s2 = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * inner;
                    s2 += xd[off..off + inner]
                        .iter()
                        .map(|v| (v.as_f64() - mean).powi(2))
                        .sum::<f64>();
                }
                let var = s2 / count;
                let unbiased = s2 / (count - 1.0).max(1.0);
                let rm = &mut running.mean.data_mut()[ch];
                *rm = T::from_f64((1.0 - BN_MOMENTUM) * rm.as_f64() + BN_MOMENTUM * mean);
                let rv = &mut running.var.data_mut()[ch];
                *rv = T::from_f64((1.0 - BN_MOMENTUM) * rv.as_f64() + BN_MOMENTUM * unbiased);
                (mean, var)
            }
            Mode::Eval => (running.mean.data()[ch].as_f64(), running.var.data()[ch].as_f64()),
        };
        let istd = 1.0 / (var + BN_EPS).sqrt();
        inv_std.push(T::from_f64(istd));
        let (gm, bt) = (gamma.data()[ch].as_f64(), beta.data()[ch].as_f64());
        for b in 0..n {
            let off = (b * c + ch) * inner;
            for k in off..off + inner {
                let h = (xd[k].as_f64() - mean) * istd;
                xhat[k] = T::from_f64(h);
                y[k] = T::from_f64(h * gm + bt);
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        BatchNormCache { xhat: Tensor::new(x.shape(), xhat)?, inv_std, mode },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.len();
    let shape = cache.xhat.shape();
    let n = shape[0];
    let inner: usize = shape[2..].iter().product();
    let m = (n * inner) as f64;
    let (xh, dy) = (cache.xhat.data(), grad_out.data());
    let mut dx = vec![T::zero(); xh.len()];
    let mut dgamma = Vec::with_capacity(c);
    let mut dbeta = Vec::with_capacity(c);
    for ch in 0..c {
        let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
        for b in 0..n {
            let off = (b * c + ch) * inner;
            for k in off..off + inner {
                sdy += dy[k].as_f64();
                sdyx += dy[k].as_f64() * xh[k].as_f64();
            }
        }
        dgamma.push(T::from_f64(sdyx));
        dbeta.push(T::from_f64(sdy));
        let g = gamma.data()[ch].as_f64();
        let istd = cache.inv_std[ch].as_f64();
        for b in 0..n {
            let off = (b * c + ch) * inner;
            for k in off..off + inner {
                let v = match cache.mode {
                    Mode::Train => {
                        g * istd / m * (m * dy[k].as_f64() - sdy - xh[k].as_f64() * sdyx)
                    }
                    Mode::Eval => g * istd * dy[k].as_f64(),
                };
                dx[k] = T::from_f64(v);
            }
        }
    }
    (
        Tensor::new(shape, dx).expect("bn dx"),
        Tensor::new(&[c], dgamma).expect("bn dgamma"),
        Tensor::new(&[c], dbeta).expect("bn dbeta"),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Elementwise ReLU/sigmoid, or softmax over the last axis.
pub fn activation_forward<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Result<Tensor<T>, NnError> {
    check_not_nan(x, "activation")?;
    Ok(match kind {
        Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Softmax => {
            let k = *x.shape().last().expect("non-empty shape");
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(k) {
                let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut s = 0.0f64;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += v.as_f64();
                }
                let inv = T::from_f64(1.0 / s);
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
            Tensor::new(x.shape(), out)?
        }
    })
}

/// Gradient with respect to the activation input, given its output `y`.
pub fn activation_backward<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    grad_out: &Tensor<T>,
    kind: Activation,
) -> Tensor<T> {
    let g = grad_out.data();
    let data: Vec<T> = match kind {
        Activation::Relu => x
            .data()
            .iter()
            .zip(g)
            .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
            .collect(),
        Activation::Sigmoid => y
            .data()
            .iter()
            .zip(g)
            .map(|(&s, &d)| d * s * (T::one() - s))
            .collect(),
        Activation::Softmax => {
            let k = *y.shape().last().expect("non-empty shape");
            let mut out = vec![T::zero(); g.len()];
            for ((yr, gr), or) in y.data().chunks(k).zip(g.chunks(k)).zip(out.chunks_mut(k)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                let dot = T::from_f64(dot);
                for i in 0..k {
                    or[i] = yr[i] * (gr[i] - dot);
                }
            }
            out
        }
    };
    Tensor::new(x.shape(), data).expect("activation grad shape")
}

/// Windowed maximum over `[N,C,H,W]` (or `[C,H,W]`) without padding. The
/// second value holds the flat input index of each selected maximum.
pub fn maxpool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>), NnError> {
    let (n, c, h, w) = as_batched(x)?;
    if kernel == 0 || stride == 0 {
        return Err(NnError::InvalidLayer("maxpool kernel and stride must be >= 1".into()));
    }
    if kernel > h || kernel > w {
        return Err(shape_err(format!("maxpool kernel {kernel} larger than input {h}x{w}")));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for i in 0..kernel {
                    for j in 0..kernel {
                        let idx = base + (oy * stride + i) * w + ox * stride + j;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    let shape: Vec<usize> = if x.rank() == 3 { vec![c, oh, ow] } else { vec![n, c, oh, ow] };
    Ok((Tensor::new(&shape, out)?, arg))
}

pub fn maxpool2d_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    dx
}

/// `x·W + b` for `x` of shape `[N, ...]` flattened to `[N,F]`, `W` `[F,G]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>, NnError> {
    let n = x.dim(0);
    let f = x.len() / n;
    let [wf, g] = *w.shape() else {
        return Err(shape_err(format!("linear weights must be [F,G], got {:?}", w.shape())));
    };
    if wf != f {
        return Err(shape_err(format!("linear expects {wf} input features, got {f}")));
    }
    let mut out = vec![T::zero(); n * g];
    if let Some(b) = b {
        if b.shape() != [g] {
            return Err(shape_err(format!("linear bias must be [{g}], got {:?}", b.shape())));
        }
        for row in out.chunks_mut(g) {
            row.copy_from_slice(b.data());
        }
    }
    T::gemm(n, f, g, T::one(), x.data(), f as isize, 1, w.data(), g as isize, 1, T::one(), &mut out, g as isize, 1);
    Tensor::new(&[n, g], out)
}

/// Returns `(dx, dW, db)`; `dx` has the (unflattened) shape of `x`.
pub fn linear_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = x.dim(0);
    let f = x.len() / n;
    let g = w.dim(1);
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); n * f];
    T::gemm(n, g, f, T::one(), dy, g as isize, 1, w.data(), 1, g as isize, T::zero(), &mut dx, f as isize, 1);
    let mut dw = vec![T::zero(); f * g];
    T::gemm(f, n, g, T::one(), x.data(), 1, f as isize, dy, g as isize, 1, T::zero(), &mut dw, g as isize, 1);
    let mut db = vec![0.0f64; g];
    for row in dy.chunks(g) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v.as_f64();
        }
    }
    (
        Tensor::new(x.shape(), dx).expect("linear dx"),
        Tensor::new(w.shape(), dw).expect("linear dw"),
        Tensor::new(&[g], db.into_iter().map(T::from_f64).collect()).expect("linear db"),
    )
}

/// Concatenates `[N,A]` and `[N,B]` into `[N,A+B]`.
pub fn concat_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0) {
        return Err(shape_err(format!("cannot concat {:?} with {:?}", a.shape(), b.shape())));
    }
    let (n, fa, fb) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = Vec::with_capacity(n * (fa + fb));
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * fa..(i + 1) * fa]);
        out.extend_from_slice(&b.data()[i * fb..(i + 1) * fb]);
    }
    Tensor::new(&[n, fa + fb], out)
}

pub fn concat_backward<T: Scalar>(fa: usize, grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let n = grad_out.dim(0);
    let f = grad_out.dim(1);
    let fb = f - fa;
    let mut ga = Vec::with_capacity(n * fa);
    let mut gb = Vec::with_capacity(n * fb);
    for row in grad_out.data().chunks(f) {
        ga.extend_from_slice(&row[..fa]);
        gb.extend_from_slice(&row[fa..]);
    }
    (Tensor::new(&[n, fa], ga).expect("concat ga"), Tensor::new(&[n, fb], gb).expect("concat gb"))
}

/// Feature modulation `f * (1 + gamma) + beta`, elementwise.
pub fn modulate_forward<T: Scalar>(f: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    if f.shape() != gamma.shape() || f.shape() != beta.shape() {
        return Err(shape_err(format!(
            "modulation shapes differ: f {:?}, gamma {:?}, beta {:?}",
            f.shape(),
            gamma.shape(),
            beta.shape()
        )));
    }
    let data = f
        .data()
        .iter()
        .zip(gamma.data())
        .zip(beta.data())
        .map(|((&x, &g), &b)| x * (T::one() + g) + b)
        .collect();
    Tensor::new(f.shape(), data)
}

/// Returns `(df, dgamma, dbeta)`.
pub fn modulate_backward<T: Scalar>(f: &Tensor<T>, gamma: &Tensor<T>, grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let dy = grad_out.data();
    let df = gamma.data().iter().zip(dy).map(|(&g, &d)| d * (T::one() + g)).collect();
    let dg = f.data().iter().zip(dy).map(|(&x, &d)| d * x).collect();
    (
        Tensor::new(f.shape(), df).expect("mod df"),
        Tensor::new(f.shape(), dg).expect("mod dg"),
        grad_out.clone(),
    )
}

/// Target of a loss: dense values for MSE, class indices for cross-entropy.
#[derive(Clone, Debug)]
pub enum LossTarget<T> {
    Dense(Tensor<T>),
    Classes(Vec<usize>),
}

const PROB_TOL: f64 = 1e-3;
const PROB_FLOOR: f64 = 1e-30;

/// Mean loss over the batch. Cross-entropy expects probabilities (softmax
/// output) and class indices.
pub fn loss<T: Scalar>(pred: &Tensor<T>, target: &LossTarget<T>, kind: LossKind) -> Result<f64, NnError> {
    match (kind, target) {
        (LossKind::Mse, LossTarget::Dense(t)) => {
            if t.shape() != pred.shape() {
                return Err(shape_err(format!("mse shapes differ: {:?} vs {:?}", pred.shape(), t.shape())));
            }
            let s: f64 = pred
                .data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum();
            Ok(s / pred.len() as f64)
        }
        (LossKind::CrossEntropy, LossTarget::Classes(labels)) => {
            let (n, k) = probs_layout(pred, labels)?;
            let mut s = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                s -= pred.data()[i * k + y].as_f64().max(PROB_FLOOR).ln();
            }
            Ok(s / n as f64)
        }
        (LossKind::CrossEntropy, LossTarget::Dense(onehot)) => {
            let labels = onehot_to_classes(onehot)?;
            loss(pred, &LossTarget::Classes(labels), kind)
        }
        (LossKind::Mse, LossTarget::Classes(_)) => {
            Err(NnError::Invalid("mse needs a dense target".into()))
        }
    }
}

fn onehot_to_classes<T: Scalar>(onehot: &Tensor<T>) -> Result<Vec<usize>, NnError> {
    if onehot.rank() != 2 {
        return Err(shape_err("one-hot targets must be [N,K]".into()));
    }
    let k = onehot.dim(1);
    onehot
        .data()
        .chunks(k)
        .map(|row| {
            let ones: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, v)| v.as_f64() == 1.0)
                .map(|(i, _)| i)
                .collect();
            let zeros = row.iter().filter(|v| v.as_f64() == 0.0).count();
            if ones.len() == 1 && zeros == k - 1 {
                Ok(ones[0])
            } else {
                Err(NnError::Invalid(format!("row {row:?} is not one-hot")))
            }
        })
        .collect()
}

fn probs_layout<T: Scalar>(pred: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize), NnError> {
    if pred.rank() != 2 || pred.dim(0) != labels.len() {
        return Err(shape_err(format!(
            "cross-entropy needs [N,K] probabilities for {} labels, got {:?}",
            labels.len(),
            pred.shape()
        )));
    }
    let k = pred.dim(1);
    for (i, row) in pred.data().chunks(k).enumerate() {
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        let in_range = row.iter().all(|v| (0.0..=1.0).contains(&v.as_f64()));
        if !in_range || (s - 1.0).abs() > PROB_TOL {
            return Err(NnError::Invalid(format!(
                "cross-entropy input row {i} is not a probability vector (sum {s})"
            )));
        }
        if labels[i] >= k {
            return Err(NnError::Invalid(format!("class {} out of range for {k} classes", labels[i])));
        }
    }
    Ok((pred.dim(0), k))
}

/// Gradient of the mean loss with respect to `pred`.
pub fn loss_backward<T: Scalar>(pred: &Tensor<T>, target: &LossTarget<T>, kind: LossKind) -> Result<Tensor<T>, NnError> {
    match (kind, target) {
        (LossKind::Mse, LossTarget::Dense(t)) => {
            let scale = 2.0 / pred.len() as f64;
            let data = pred
                .data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| T::from_f64(scale * (a.as_f64() - b.as_f64())))
                .collect();
            Tensor::new(pred.shape(), data)
        }
        (LossKind::CrossEntropy, LossTarget::Classes(labels)) => {
            let (n, k) = probs_layout(pred, labels)?;
            let mut g = vec![T::zero(); n * k];
            for (i, &y) in labels.iter().enumerate() {
                let p = pred.data()[i * k + y].as_f64().max(PROB_FLOOR);
                g[i * k + y] = T::from_f64(-1.0 / (p * n as f64));
            }
            Tensor::new(pred.shape(), g)
        }
        (LossKind::CrossEntropy, LossTarget::Dense(onehot)) => {
            let labels = onehot_to_classes(onehot)?;
            loss_backward(pred, &LossTarget::Classes(labels), kind)
        }
        (LossKind::Mse, LossTarget::Classes(_)) => Err(NnError::Invalid("mse needs a dense target".into())),
    }
}
