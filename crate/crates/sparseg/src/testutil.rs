//! Shared helpers for unit tests: seeded random tensors and central
//! finite differences, kept independent of the analytic adjoint paths
//! they are used to check.

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub(crate) fn rand_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(n, c, h, w, data).unwrap()
}

/// Central finite differences of a scalar function w.r.t. every entry of `t`.
pub(crate) fn finite_diff_scalar(t: &Tensor, eps: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let (n, c, h, w) = t.dims();
    let mut grad = Tensor::zeros(n, c, h, w);
    let mut probe = t.clone();
    for i in 0..t.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Central finite differences w.r.t. a parameter vector accessed by closures.
pub(crate) fn finite_diff_vec(
    len: usize,
    eps: f64,
    mut poke: impl FnMut(usize, f64),
    peek: impl Fn(usize) -> f64,
    f: impl Fn() -> f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; len];
    for i in 0..len {
        let orig = peek(i);
        poke(i, orig + eps);
        let fp = f();
        poke(i, orig - eps);
        let fm = f();
        poke(i, orig);
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}
