//! Spatial up/down-sampling between resolution levels.
//!
//! Bilinear sampling uses half-pixel centers with edge clamping; nearest
//! replicates. Down-sampling by 1/2 requires even input dims.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleFactor {
    Half,
    X2,
    X4,
}

impl ResampleFactor {
    /// (numerator, denominator) of the scale factor.
    pub fn ratio(self) -> (usize, usize) {
        match self {
            ResampleFactor::Half => (1, 2),
            ResampleFactor::X2 => (2, 1),
            ResampleFactor::X4 => (4, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Bilinear,
    Nearest,
}

fn out_extent(v: usize, factor: ResampleFactor) -> usize {
    let (num, den) = factor.ratio();
    v * num / den
}

/// Source taps of one output coordinate: ((i0, w0), (i1, w1)).
fn bilinear_taps(o: usize, out_len: usize, in_len: usize) -> ((usize, f64), (usize, f64)) {
    let scale = in_len as f64 / out_len as f64;
    let src = (o as f64 + 0.5) * scale - 0.5;
    let i0 = src.floor();
    let frac = src - i0;
    let clamp = |v: f64| -> usize { v.max(0.0).min((in_len - 1) as f64) as usize };
    ((clamp(i0), 1.0 - frac), (clamp(i0 + 1.0), frac))
}

fn nearest_tap(o: usize, out_len: usize, in_len: usize) -> usize {
    let scale = in_len as f64 / out_len as f64;
    let src = (o as f64 + 0.5) * scale;
    (src.floor() as usize).min(in_len - 1)
}

pub fn resample(input: &Tensor, factor: ResampleFactor, mode: ResampleMode) -> Result<Tensor> {
    let (n, c, h, w) = input.dims();
    if factor == ResampleFactor::Half && (h % 2 != 0 || w % 2 != 0) {
        return Err(Error::Param(format!("cannot halve odd dims {h}x{w}")));
    }
    let (oh, ow) = (out_extent(h, factor), out_extent(w, factor));
    if oh == 0 || ow == 0 {
        return Err(Error::Param(format!("resample of {h}x{w} collapses to zero extent")));
    }
    let mut out = Tensor::zeros(n, c, oh, ow);
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = match mode {
                        ResampleMode::Nearest => {
                            input.at(i, ch, nearest_tap(oy, oh, h), nearest_tap(ox, ow, w))
                        }
                        ResampleMode::Bilinear => {
                            let ((y0, wy0), (y1, wy1)) = bilinear_taps(oy, oh, h);
                            let ((x0, wx0), (x1, wx1)) = bilinear_taps(ox, ow, w);
                            wy0 * (wx0 * input.at(i, ch, y0, x0) + wx1 * input.at(i, ch, y0, x1))
                                + wy1
                                    * (wx0 * input.at(i, ch, y1, x0)
                                        + wx1 * input.at(i, ch, y1, x1))
                        }
                    };
                    out.set(i, ch, oy, ox, v);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`resample`]: scatters each output gradient back onto the
/// source taps with the same weights.
pub fn resample_adjoint(
    input_dims: (usize, usize, usize, usize),
    factor: ResampleFactor,
    mode: ResampleMode,
    out_grad: &Tensor,
) -> Tensor {
    let (n, c, h, w) = input_dims;
    let (_, _, oh, ow) = out_grad.dims();
    let mut g = Tensor::zeros(n, c, h, w);
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = out_grad.at(i, ch, oy, ox);
                    match mode {
                        ResampleMode::Nearest => {
                            let (sy, sx) = (nearest_tap(oy, oh, h), nearest_tap(ox, ow, w));
                            let idx = g.idx(i, ch, sy, sx);
                            g.data_mut()[idx] += go;
                        }
                        ResampleMode::Bilinear => {
                            let ((y0, wy0), (y1, wy1)) = bilinear_taps(oy, oh, h);
                            let ((x0, wx0), (x1, wx1)) = bilinear_taps(ox, ow, w);
                            for (sy, wy) in [(y0, wy0), (y1, wy1)] {
                                for (sx, wx) in [(x0, wx0), (x1, wx1)] {
                                    let idx = g.idx(i, ch, sy, sx);
                                    g.data_mut()[idx] += go * wy * wx;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{finite_diff_scalar, rand_tensor};

    #[test]
    fn constant_stays_constant() {
        let t = Tensor::filled(1, 2, 4, 4, 0.37);
        for factor in [ResampleFactor::Half, ResampleFactor::X2, ResampleFactor::X4] {
            for mode in [ResampleMode::Bilinear, ResampleMode::Nearest] {
                let out = resample(&t, factor, mode).unwrap();
                for &v in out.data() {
                    assert!((v - 0.37).abs() < 1e-12, "{factor:?} {mode:?}");
                }
            }
        }
    }

    #[test]
    fn nearest_up_then_down_is_identity() {
        let t = rand_tensor(1, 2, 3, 5, 42);
        let up = resample(&t, ResampleFactor::X2, ResampleMode::Nearest).unwrap();
        let down = resample(&up, ResampleFactor::Half, ResampleMode::Nearest).unwrap();
        assert_eq!(down, t);
    }

    #[test]
    fn bilinear_x2_half_pixel_centers() {
        let t = Tensor::from_vec(1, 1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = resample(&t, ResampleFactor::X2, ResampleMode::Bilinear).unwrap();
        // hand evaluation of half-pixel-center sampling with edge clamping
        let expect = [
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        for (a, b) in out.data().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn half_of_odd_dims_errors() {
        let t = Tensor::zeros(1, 1, 3, 4);
        assert!(matches!(
            resample(&t, ResampleFactor::Half, ResampleMode::Bilinear),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn bilinear_half_is_block_average() {
        let t = rand_tensor(1, 1, 4, 4, 44);
        let out = resample(&t, ResampleFactor::Half, ResampleMode::Bilinear).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                let avg = (t.at(0, 0, 2 * y, 2 * x)
                    + t.at(0, 0, 2 * y, 2 * x + 1)
                    + t.at(0, 0, 2 * y + 1, 2 * x)
                    + t.at(0, 0, 2 * y + 1, 2 * x + 1))
                    / 4.0;
                assert!((out.at(0, 0, y, x) - avg).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoints_match_fd() {
        for factor in [ResampleFactor::Half, ResampleFactor::X2, ResampleFactor::X4] {
            for mode in [ResampleMode::Bilinear, ResampleMode::Nearest] {
                let t = rand_tensor(1, 2, 4, 4, 55);
                let out = resample(&t, factor, mode).unwrap();
                let (gn, gc, gh, gw) = out.dims();
                let g = rand_tensor(gn, gc, gh, gw, 56);
                let analytic = resample_adjoint(t.dims(), factor, mode, &g);
                let fd = finite_diff_scalar(&t, 1e-6, |x| {
                    let o = resample(x, factor, mode).unwrap();
                    o.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
                });
                assert!(analytic.max_abs_diff(&fd) < 1e-7, "{factor:?} {mode:?}");
            }
        }
    }
}
