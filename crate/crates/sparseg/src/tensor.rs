//! Dense 4-D tensor in batch x channel x height x width layout, plus the
//! pointwise/normalization operations the model graphs are built from.
//!
//! All arithmetic is 64-bit. Operations are pure: they never mutate their
//! inputs and identical inputs produce bit-identical outputs.

use crate::error::{Error, Result};

/// Dense 4-D array of `f64` in row-major `n x c x h x w` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, v: f64) -> Tensor {
        Tensor { n, c, h, w, data: vec![v; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {}x{}x{}x{}",
                data.len(),
                n, c, h, w
            )));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Pointwise combination kind for [`eltwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EltwiseKind {
    Sum,
    Max,
    Product,
}

/// Pointwise activation kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Relu,
    Sigmoid,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Combine two tensors of identical dims pointwise.
pub fn eltwise(a: &Tensor, b: &Tensor, kind: EltwiseKind) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "eltwise operands differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| match kind {
            EltwiseKind::Sum => x + y,
            EltwiseKind::Max => x.max(y),
            EltwiseKind::Product => x * y,
        })
        .collect();
    Ok(Tensor { n: a.n, c: a.c, h: a.h, w: a.w, data })
}

/// Adjoint of [`eltwise`]: gradients w.r.t. both operands.
///
/// `max` routes the gradient to the larger operand; ties go to `a`.
pub fn eltwise_adjoint(
    a: &Tensor,
    b: &Tensor,
    kind: EltwiseKind,
    out_grad: &Tensor,
) -> (Tensor, Tensor) {
    assert_eq!(a.dims(), b.dims());
    assert_eq!(a.dims(), out_grad.dims());
    let mut ga = Tensor::zeros(a.n, a.c, a.h, a.w);
    let mut gb = Tensor::zeros(a.n, a.c, a.h, a.w);
    for i in 0..a.data.len() {
        let g = out_grad.data[i];
        match kind {
            EltwiseKind::Sum => {
                ga.data[i] = g;
                gb.data[i] = g;
            }
            EltwiseKind::Max => {
                if a.data[i] >= b.data[i] {
                    ga.data[i] = g;
                } else {
                    gb.data[i] = g;
                }
            }
            EltwiseKind::Product => {
                ga.data[i] = g * b.data[i];
                gb.data[i] = g * a.data[i];
            }
        }
    }
    (ga, gb)
}

pub fn activation(input: &Tensor, kind: ActKind) -> Tensor {
    match kind {
        ActKind::Relu => input.map(|v| if v > 0.0 { v } else { 0.0 }),
        ActKind::Sigmoid => input.map(sigmoid),
    }
}

pub fn activation_adjoint(input: &Tensor, kind: ActKind, out_grad: &Tensor) -> Tensor {
    assert_eq!(input.dims(), out_grad.dims());
    let mut g = Tensor::zeros(input.n, input.c, input.h, input.w);
    for i in 0..input.data.len() {
        g.data[i] = match kind {
            ActKind::Relu => {
                if input.data[i] > 0.0 {
                    out_grad.data[i]
                } else {
                    0.0
                }
            }
            ActKind::Sigmoid => {
                let s = sigmoid(input.data[i]);
                out_grad.data[i] * s * (1.0 - s)
            }
        };
    }
    g
}

/// Channel softmax at every spatial location, computed with max-subtraction.
pub fn softmax_channels(input: &Tensor) -> Tensor {
    let (n, c, h, w) = input.dims();
    let mut out = Tensor::zeros(n, c, h, w);
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(input.at(i, ch, y, x));
                }
                let mut denom = 0.0;
                for ch in 0..c {
                    denom += (input.at(i, ch, y, x) - m).exp();
                }
                for ch in 0..c {
                    out.set(i, ch, y, x, (input.at(i, ch, y, x) - m).exp() / denom);
                }
            }
        }
    }
    out
}

/// Adjoint of [`softmax_channels`] given its own output.
pub fn softmax_channels_adjoint(output: &Tensor, out_grad: &Tensor) -> Tensor {
    let (n, c, h, w) = output.dims();
    assert_eq!(output.dims(), out_grad.dims());
    let mut g = Tensor::zeros(n, c, h, w);
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut dot = 0.0;
                for ch in 0..c {
                    dot += out_grad.at(i, ch, y, x) * output.at(i, ch, y, x);
                }
                for ch in 0..c {
                    let v = output.at(i, ch, y, x) * (out_grad.at(i, ch, y, x) - dot);
                    g.set(i, ch, y, x, v);
                }
            }
        }
    }
    g
}

/// 2x2 average pooling with stride 2. Requires even spatial dims.
pub fn pool_avg(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Param(format!("pool_avg needs even dims, got {h}x{w}")));
    }
    let mut out = Tensor::zeros(n, c, h / 2, w / 2);
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    let s = input.at(i, ch, 2 * y, 2 * x)
                        + input.at(i, ch, 2 * y, 2 * x + 1)
                        + input.at(i, ch, 2 * y + 1, 2 * x)
                        + input.at(i, ch, 2 * y + 1, 2 * x + 1);
                    out.set(i, ch, y, x, s / 4.0);
                }
            }
        }
    }
    Ok(out)
}

pub fn pool_avg_adjoint(input_dims: (usize, usize, usize, usize), out_grad: &Tensor) -> Tensor {
    let (n, c, h, w) = input_dims;
    let mut g = Tensor::zeros(n, c, h, w);
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    let v = out_grad.at(i, ch, y, x) / 4.0;
                    g.set(i, ch, 2 * y, 2 * x, v);
                    g.set(i, ch, 2 * y, 2 * x + 1, v);
                    g.set(i, ch, 2 * y + 1, 2 * x, v);
                    g.set(i, ch, 2 * y + 1, 2 * x + 1, v);
                }
            }
        }
    }
    g
}

pub const BN_EPS: f64 = 1e-8;

/// Per-channel scale/shift with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnParams {
    pub fn new(channels: usize) -> BnParams {
        BnParams {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// Batch statistics captured by a train-mode forward pass; needed by the
/// backward pass and by the running-statistics update.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization.
///
/// In train mode normalizes with the batch statistics of `input` and returns
/// them in the cache; running statistics are NOT touched here (see
/// [`bn_update_running`]), so the forward pass stays pure. In inference mode
/// the frozen running statistics are used and the cache is `None`.
pub fn batchnorm(input: &Tensor, p: &BnParams, train: bool) -> Result<(Tensor, Option<BnCache>)> {
    let (n, c, h, w) = input.dims();
    if c != p.channels() {
        return Err(Error::Shape(format!(
            "batchnorm has {} channels, input has {c}",
            p.channels()
        )));
    }
    let m = (n * h * w) as f64;
    let (mean, var) = if train {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        s += input.at(i, ch, y, x);
                    }
                }
            }
            mean[ch] = s / m;
            let mut v = 0.0;
            for i in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let d = input.at(i, ch, y, x) - mean[ch];
                        v += d * d;
                    }
                }
            }
            var[ch] = v / m;
        }
        (mean, var)
    } else {
        (p.running_mean.clone(), p.running_var.clone())
    };

    let mut out = Tensor::zeros(n, c, h, w);
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let xhat = (input.at(i, ch, y, x) - mean[ch]) * inv;
                    out.set(i, ch, y, x, p.scale[ch] * xhat + p.shift[ch]);
                }
            }
        }
    }
    let cache = train.then(|| BnCache { mean, var });
    Ok((out, cache))
}

/// Fold the batch statistics of one train-mode pass into the running stats.
pub fn bn_update_running(p: &mut BnParams, cache: &BnCache, momentum: f64) {
    for ch in 0..p.channels() {
        p.running_mean[ch] = momentum * p.running_mean[ch] + (1.0 - momentum) * cache.mean[ch];
        p.running_var[ch] = momentum * p.running_var[ch] + (1.0 - momentum) * cache.var[ch];
    }
}

/// Train-mode batchnorm backward. Returns (input_grad, scale_grad, shift_grad).
pub fn batchnorm_adjoint(
    input: &Tensor,
    p: &BnParams,
    cache: &BnCache,
    out_grad: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = input.dims();
    let m = (n * h * w) as f64;
    let mut input_grad = Tensor::zeros(n, c, h, w);
    let mut scale_grad = vec![0.0; c];
    let mut shift_grad = vec![0.0; c];
    for ch in 0..c {
        let inv = 1.0 / (cache.var[ch] + BN_EPS).sqrt();
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let g = out_grad.at(i, ch, y, x);
                    let xhat = (input.at(i, ch, y, x) - cache.mean[ch]) * inv;
                    sum_g += g;
                    sum_gx += g * xhat;
                    scale_grad[ch] += g * xhat;
                    shift_grad[ch] += g;
                }
            }
        }
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let g = out_grad.at(i, ch, y, x);
                    let xhat = (input.at(i, ch, y, x) - cache.mean[ch]) * inv;
                    let v = p.scale[ch] * inv * (g - sum_g / m - xhat * sum_gx / m);
                    input_grad.set(i, ch, y, x, v);
                }
            }
        }
    }
    (input_grad, scale_grad, shift_grad)
}

/// Inference-mode batchnorm backward: a per-channel linear map.
pub fn batchnorm_adjoint_frozen(p: &BnParams, out_grad: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = out_grad.dims();
    let mut input_grad = Tensor::zeros(n, c, h, w);
    let mut scale_grad = vec![0.0; c];
    let mut shift_grad = vec![0.0; c];
    for ch in 0..c {
        let inv = 1.0 / (p.running_var[ch] + BN_EPS).sqrt();
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let g = out_grad.at(i, ch, y, x);
                    input_grad.set(i, ch, y, x, g * p.scale[ch] * inv);
                    shift_grad[ch] += g;
                }
            }
        }
    }
    (input_grad, scale_grad, shift_grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{finite_diff_scalar, rand_tensor};

    #[test]
    fn eltwise_sum_with_zero_is_identity() {
        let a = rand_tensor(1, 2, 3, 3, 7);
        let z = Tensor::zeros(1, 2, 3, 3);
        let out = eltwise(&a, &z, EltwiseKind::Sum).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn eltwise_max_self_is_identity() {
        let a = rand_tensor(1, 2, 3, 3, 8);
        let out = eltwise(&a, &a, EltwiseKind::Max).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn eltwise_product_with_mask_zeroes_exactly() {
        let a = rand_tensor(1, 1, 2, 2, 9);
        let mask = Tensor::from_vec(1, 1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = eltwise(&a, &mask, EltwiseKind::Product).unwrap();
        assert_eq!(out.data()[1], 0.0);
        assert_eq!(out.data()[2], 0.0);
        assert_eq!(out.data()[0], a.data()[0]);
    }

    #[test]
    fn eltwise_dim_mismatch_errors() {
        let a = Tensor::zeros(1, 1, 2, 2);
        let b = Tensor::zeros(1, 1, 2, 3);
        assert!(matches!(eltwise(&a, &b, EltwiseKind::Sum), Err(Error::Shape(_))));
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn softmax_equal_channels_gives_half() {
        let t = Tensor::filled(1, 2, 2, 2, 3.7);
        let s = softmax_channels(&t);
        for &v in s.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_one_two() {
        let t = Tensor::from_vec(1, 2, 1, 1, vec![1.0, 2.0]).unwrap();
        let s = softmax_channels(&t);
        assert!((s.data()[0] - 0.26894).abs() < 1e-5);
        assert!((s.data()[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn softmax_shift_invariance() {
        let t = rand_tensor(1, 4, 3, 3, 11);
        let shifted = t.map(|v| v + 1000.0);
        let a = softmax_channels(&t);
        let b = softmax_channels(&shifted);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let t = rand_tensor(2, 5, 2, 3, 13);
        let s = softmax_channels(&t);
        let (n, c, h, w) = s.dims();
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let sum: f64 = (0..c).map(|ch| s.at(i, ch, y, x)).sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pool_avg_block() {
        let t = Tensor::from_vec(1, 1, 2, 2, vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let p = pool_avg(&t).unwrap();
        assert_eq!(p.data(), &[3.0]);
    }

    #[test]
    fn pool_avg_constant() {
        let t = Tensor::filled(1, 2, 4, 4, 0.3);
        let p = pool_avg(&t).unwrap();
        for &v in p.data() {
            assert!((v - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn pool_avg_odd_dims_error() {
        let t = Tensor::zeros(1, 1, 3, 4);
        assert!(matches!(pool_avg(&t), Err(Error::Param(_))));
    }

    #[test]
    fn batchnorm_constant_input_train() {
        let t = Tensor::filled(1, 2, 4, 4, 2.5);
        let p = BnParams::new(2);
        let (out, _) = batchnorm(&t, &p, true).unwrap();
        // constant input: batch mean equals the value, so output is the shift
        for &v in out.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_train_moments_match_scale_shift() {
        // build data with exactly zero mean and unit variance per channel
        let mut t = rand_tensor(2, 2, 4, 4, 21);
        let (n, c, h, w) = t.dims();
        let m = (n * h * w) as f64;
        for ch in 0..c {
            let mut mean = 0.0;
            for i in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        mean += t.at(i, ch, y, x);
                    }
                }
            }
            mean /= m;
            let mut var = 0.0;
            for i in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let d = t.at(i, ch, y, x) - mean;
                        var += d * d;
                    }
                }
            }
            var /= m;
            let s = var.sqrt();
            for i in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let v = (t.at(i, ch, y, x) - mean) / s;
                        t.set(i, ch, y, x, v);
                    }
                }
            }
        }
        let mut p = BnParams::new(2);
        p.scale = vec![1.5, 0.5];
        p.shift = vec![-0.25, 2.0];
        let (out, _) = batchnorm(&t, &p, true).unwrap();
        for ch in 0..c {
            let mut mean = 0.0;
            for i in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        mean += out.at(i, ch, y, x);
                    }
                }
            }
            mean /= m;
            let mut var = 0.0;
            for i in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let d = out.at(i, ch, y, x) - mean;
                        var += d * d;
                    }
                }
            }
            var /= m;
            assert!((mean - p.shift[ch]).abs() < 1e-6, "mean {} vs shift {}", mean, p.shift[ch]);
            assert!((var.sqrt() - p.scale[ch]).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_inference_is_deterministic() {
        let t = rand_tensor(1, 3, 4, 4, 5);
        let p = BnParams::new(3);
        let (a, ca) = batchnorm(&t, &p, false).unwrap();
        let (b, cb) = batchnorm(&t, &p, false).unwrap();
        assert_eq!(a, b);
        assert!(ca.is_none() && cb.is_none());
    }

    #[test]
    fn softmax_adjoint_matches_fd() {
        let t = rand_tensor(1, 3, 2, 2, 31);
        let g = rand_tensor(1, 3, 2, 2, 32);
        let out = softmax_channels(&t);
        let analytic = softmax_channels_adjoint(&out, &g);
        let fd = finite_diff_scalar(&t, 1e-5, |x| {
            let o = softmax_channels(x);
            o.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        });
        assert!(analytic.max_abs_diff(&fd) < 1e-7);
    }

    #[test]
    fn activation_adjoints_match_fd() {
        for kind in [ActKind::Relu, ActKind::Sigmoid] {
            let t = rand_tensor(1, 2, 3, 3, 41);
            let g = rand_tensor(1, 2, 3, 3, 42);
            let analytic = activation_adjoint(&t, kind, &g);
            let fd = finite_diff_scalar(&t, 1e-6, |x| {
                let o = activation(x, kind);
                o.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
            });
            assert!(analytic.max_abs_diff(&fd) < 1e-7, "{kind:?}");
        }
    }

    #[test]
    fn eltwise_adjoints_match_fd() {
        for kind in [EltwiseKind::Sum, EltwiseKind::Max, EltwiseKind::Product] {
            let a = rand_tensor(1, 2, 3, 3, 51);
            let b = rand_tensor(1, 2, 3, 3, 52);
            let g = rand_tensor(1, 2, 3, 3, 53);
            let (ga, gb) = eltwise_adjoint(&a, &b, kind, &g);
            let fda = finite_diff_scalar(&a, 1e-6, |x| {
                let o = eltwise(x, &b, kind).unwrap();
                o.data().iter().zip(g.data()).map(|(p, q)| p * q).sum()
            });
            let fdb = finite_diff_scalar(&b, 1e-6, |x| {
                let o = eltwise(&a, x, kind).unwrap();
                o.data().iter().zip(g.data()).map(|(p, q)| p * q).sum()
            });
            assert!(ga.max_abs_diff(&fda) < 1e-7, "{kind:?} a");
            assert!(gb.max_abs_diff(&fdb) < 1e-7, "{kind:?} b");
        }
    }

    #[test]
    fn pool_adjoint_matches_fd() {
        let t = rand_tensor(1, 2, 4, 4, 61);
        let g = rand_tensor(1, 2, 2, 2, 62);
        let analytic = pool_avg_adjoint(t.dims(), &g);
        let fd = finite_diff_scalar(&t, 1e-6, |x| {
            let o = pool_avg(x).unwrap();
            o.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        });
        assert!(analytic.max_abs_diff(&fd) < 1e-7);
    }

    #[test]
    fn batchnorm_adjoint_matches_fd() {
        let t = rand_tensor(2, 2, 3, 3, 71);
        let g = rand_tensor(2, 2, 3, 3, 72);
        let mut p = BnParams::new(2);
        p.scale = vec![1.3, 0.7];
        p.shift = vec![0.2, -0.4];
        let (_, cache) = batchnorm(&t, &p, true).unwrap();
        let cache = cache.unwrap();
        let (gi, gs, gb) = batchnorm_adjoint(&t, &p, &cache, &g);
        let fd = finite_diff_scalar(&t, 1e-5, |x| {
            let (o, _) = batchnorm(x, &p, true).unwrap();
            o.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        });
        assert!(gi.max_abs_diff(&fd) < 1e-6);

        // scale/shift gradients by direct perturbation
        for ch in 0..2 {
            let eps = 1e-6;
            let mut pp = p.clone();
            pp.scale[ch] += eps;
            let (op, _) = batchnorm(&t, &pp, true).unwrap();
            let mut pm = p.clone();
            pm.scale[ch] -= eps;
            let (om, _) = batchnorm(&t, &pm, true).unwrap();
            let lp: f64 = op.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let lm: f64 = om.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            assert!((gs[ch] - (lp - lm) / (2.0 * eps)).abs() < 1e-6);

            let mut pp = p.clone();
            pp.shift[ch] += eps;
            let (op, _) = batchnorm(&t, &pp, true).unwrap();
            let mut pm = p.clone();
            pm.shift[ch] -= eps;
            let (om, _) = batchnorm(&t, &pm, true).unwrap();
            let lp: f64 = op.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let lm: f64 = om.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            assert!((gb[ch] - (lp - lm) / (2.0 * eps)).abs() < 1e-6);
        }
    }
}
