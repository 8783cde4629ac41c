//! Sparse region weighting: activation rates, the moving-average sparsity
//! penalty, winner-take-all selection, and region-constant weight broadcast.

use crate::conv::{conv2d, ConvParams};
use crate::error::{Error, Result};
use crate::regions::RegionGrid;
use crate::tensor::{sigmoid, Tensor};

/// Clamp bound keeping the penalty finite as q approaches 0 or 1.
pub const Q_CLAMP: f64 = 1e-6;

/// Runtime sparsity state: the raw weight map `s`, the moving-average rate
/// `q`, the binary mask and the list of active regions.
#[derive(Debug, Clone)]
pub struct SparseState {
    /// Raw per-region scores, dims (N, 1, H, W).
    pub s: Tensor,
    /// Moving-average activation rate of the training run.
    pub q: f64,
    /// Binary mask, dims (N, 1, H, W), entries in {0, 1}.
    pub mask: Tensor,
    /// Active (image, region-row, region-col) triples.
    pub active: Vec<(usize, usize, usize)>,
}

/// Region scoring head: a single tau x tau convolution kernel applied with
/// stride tau, one scalar per region, no activation.
pub fn sparse_head(features: &Tensor, grid: &RegionGrid, kernel: &ConvParams) -> Result<Tensor> {
    let (_, _, fh, fw) = features.dims();
    if fh != grid.rows * grid.tau || fw != grid.cols * grid.tau {
        return Err(Error::Param(format!(
            "sparse head expects {}x{} features, got {fh}x{fw}",
            grid.rows * grid.tau,
            grid.cols * grid.tau
        )));
    }
    if kernel.out_channels != 1
        || kernel.kernel != (grid.tau, grid.tau)
        || kernel.stride != grid.tau
        || kernel.padding != 0
    {
        return Err(Error::Param("sparse head kernel must be tau x tau, stride tau".into()));
    }
    conv2d(features, kernel)
}

/// Per-image activation rate: the mean of sigmoid(s) over all regions of
/// each image. Values lie strictly inside (0, 1).
pub fn rate_per_image(s: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = s.dims();
    debug_assert_eq!(c, 1);
    let m = (c * h * w) as f64;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        acc += sigmoid(s.at(i, ch, y, x));
                    }
                }
            }
            acc / m
        })
        .collect()
}

/// Per-location activation rate: the mean of sigmoid(s) over the batch at
/// each (y, x). Returned row-major, length H*W.
pub fn rate_per_location(s: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = s.dims();
    debug_assert_eq!(c, 1);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for i in 0..n {
                acc += sigmoid(s.at(i, 0, y, x));
            }
            out[y * w + x] = acc / n as f64;
        }
    }
    out
}

/// Moving-average update `q = alpha*q_old + (1-alpha)*r`, clamped away
/// from 0 and 1.
pub fn update_q(q_old: f64, r: f64, alpha: f64) -> f64 {
    (alpha * q_old + (1.0 - alpha) * r).clamp(Q_CLAMP, 1.0 - Q_CLAMP)
}

/// Cross-entropy sparsity penalty `lambda * (-p ln q - (1-p) ln(1-q))`.
pub fn sparsity_penalty(p: f64, q: f64, lambda: f64) -> f64 {
    let q = q.clamp(Q_CLAMP, 1.0 - Q_CLAMP);
    lambda * (-p * q.ln() - (1.0 - p) * (1.0 - q).ln())
}

/// d/dq of [`sparsity_penalty`].
pub fn sparsity_penalty_dq(p: f64, q: f64, lambda: f64) -> f64 {
    let q = q.clamp(Q_CLAMP, 1.0 - Q_CLAMP);
    lambda * ((1.0 - p) / (1.0 - q) - p / q)
}

/// Winner-take-all selection: per image, exactly the `k` largest entries of
/// `s` get mask 1. Ties break by row-major scan order (earlier wins).
pub fn select_wta(s: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, h, w) = s.dims();
    debug_assert_eq!(c, 1);
    let regions = h * w;
    if k > regions {
        return Err(Error::Param(format!("k = {k} exceeds region count {regions}")));
    }
    let mut mask = Tensor::zeros(n, 1, h, w);
    for i in 0..n {
        let mut order: Vec<usize> = (0..regions).collect();
        order.sort_by(|&a, &b| {
            let va = s.data()[i * regions + a];
            let vb = s.data()[i * regions + b];
            vb.partial_cmp(&va).unwrap().then(a.cmp(&b))
        });
        for &r in order.iter().take(k) {
            mask.data_mut()[i * regions + r] = 1.0;
        }
    }
    Ok(mask)
}

/// Active (image, row, col) triples of a binary mask, scan order.
pub fn active_regions(mask: &Tensor) -> Vec<(usize, usize, usize)> {
    let (n, _, h, w) = mask.dims();
    let mut out = Vec::new();
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                if mask.at(i, 0, y, x) != 0.0 {
                    out.push((i, y, x));
                }
            }
        }
    }
    out
}

/// Inference-time region count for a target rate p on the given grid:
/// the whole number of regions covered by the rate (floor), so p = 0.4 on a
/// 32-region grid computes 12 regions.
pub fn wta_count(p: f64, grid: &RegionGrid) -> usize {
    ((p * grid.count() as f64).floor() as usize).min(grid.count())
}

/// Region-constant broadcast of `mask * sigmoid(s)` to `target` spatial
/// dims. Every pixel of an inactive region's footprint is exactly zero.
pub fn broadcast_weights(
    mask: &Tensor,
    s: &Tensor,
    target_h: usize,
    target_w: usize,
) -> Result<Tensor> {
    let (n, _, h, w) = s.dims();
    if mask.dims() != s.dims() {
        return Err(Error::Shape("mask and s dims differ".into()));
    }
    if target_h % h != 0 || target_w % w != 0 {
        return Err(Error::Param(format!(
            "target {target_h}x{target_w} is not a multiple of the {h}x{w} grid"
        )));
    }
    let (fy, fx) = (target_h / h, target_w / w);
    let mut out = Tensor::zeros(n, 1, target_h, target_w);
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let v = if mask.at(i, 0, y, x) != 0.0 { sigmoid(s.at(i, 0, y, x)) } else { 0.0 };
                for dy in 0..fy {
                    for dx in 0..fx {
                        out.set(i, 0, y * fy + dy, x * fx + dx, v);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`broadcast_weights`] w.r.t. `s`: footprint-summed gradients
/// scaled by the sigmoid derivative; masked regions pass nothing.
pub fn broadcast_weights_adjoint(mask: &Tensor, s: &Tensor, out_grad: &Tensor) -> Tensor {
    let (n, _, h, w) = s.dims();
    let (_, _, th, tw) = out_grad.dims();
    let (fy, fx) = (th / h, tw / w);
    let mut g = Tensor::zeros(n, 1, h, w);
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                if mask.at(i, 0, y, x) == 0.0 {
                    continue;
                }
                let mut acc = 0.0;
                for dy in 0..fy {
                    for dx in 0..fx {
                        acc += out_grad.at(i, 0, y * fy + dy, x * fx + dx);
                    }
                }
                let sg = sigmoid(s.at(i, 0, y, x));
                g.set(i, 0, y, x, acc * sg * (1.0 - sg));
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rand_tensor;
    use proptest::prelude::*;

    #[test]
    fn sparse_head_zero_kernel_gives_zero() {
        let grid = RegionGrid::new(64, 128, 16, 4).unwrap(); // tau = 4
        let features = rand_tensor(1, 2, 16, 32, 3);
        let kernel = ConvParams::new(2, 1, (4, 4), 4, 1, 1, 0).unwrap();
        let s = sparse_head(&features, &grid, &kernel).unwrap();
        assert_eq!(s.dims(), (1, 1, 4, 8));
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sparse_head_delta_kernel_selects_top_left() {
        let grid = RegionGrid::new(64, 128, 16, 4).unwrap();
        let features = rand_tensor(1, 1, 16, 32, 5);
        let mut kernel = ConvParams::new(1, 1, (4, 4), 4, 1, 1, 0).unwrap();
        kernel.weights.set(0, 0, 0, 0, 1.0);
        let s = sparse_head(&features, &grid, &kernel).unwrap();
        for y in 0..4 {
            for x in 0..8 {
                assert_eq!(s.at(0, 0, y, x), features.at(0, 0, 4 * y, 4 * x));
            }
        }
    }

    #[test]
    fn sparse_head_rejects_bad_dims() {
        let grid = RegionGrid::new(64, 128, 16, 4).unwrap();
        let features = rand_tensor(1, 1, 15, 32, 5);
        let kernel = ConvParams::new(1, 1, (4, 4), 4, 1, 1, 0).unwrap();
        assert!(sparse_head(&features, &grid, &kernel).is_err());
    }

    #[test]
    fn rate_per_image_values() {
        let s = Tensor::zeros(1, 1, 4, 8);
        assert!((rate_per_image(&s)[0] - 0.5).abs() < 1e-15);

        let s = Tensor::filled(1, 1, 4, 8, 20.0);
        assert!((rate_per_image(&s)[0] - 1.0).abs() < 1e-8);

        let mut s = Tensor::filled(1, 1, 4, 8, 20.0);
        for i in 0..16 {
            s.data_mut()[i] = -20.0;
        }
        assert!((rate_per_image(&s)[0] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn rate_per_location_values() {
        let s = Tensor::zeros(3, 1, 2, 2);
        for r in rate_per_location(&s) {
            assert!((r - 0.5).abs() < 1e-15);
        }

        let mut s = Tensor::zeros(2, 1, 1, 1);
        s.data_mut()[1] = 20.0;
        let r = rate_per_location(&s);
        assert!((r[0] - 0.75).abs() < 1e-8);
    }

    #[test]
    fn rate_duality_under_transpose() {
        // swapping the batch and flattened spatial axes swaps the two rates
        let s = rand_tensor(3, 1, 2, 2, 77);
        let per_loc = rate_per_location(&s);
        let mut swapped = Tensor::zeros(4, 1, 1, 3);
        for i in 0..3 {
            for j in 0..4 {
                swapped.set(j, 0, 0, i, s.data()[i * 4 + j]);
            }
        }
        let per_img = rate_per_image(&swapped);
        for (a, b) in per_loc.iter().zip(per_img.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn update_q_blend_and_fixed_point() {
        assert!((update_q(0.5, 0.3, 0.9) - 0.48).abs() < 1e-15);
        assert!((update_q(0.37, 0.37, 0.9) - 0.37).abs() < 1e-15);
    }

    #[test]
    fn update_q_converges_geometrically() {
        let mut q = 0.5;
        let mut gap = q - 0.25f64;
        for _ in 0..50 {
            q = update_q(q, 0.25, 0.9);
            let new_gap = q - 0.25;
            assert!((new_gap - 0.9 * gap).abs() < 1e-12);
            gap = new_gap;
        }
        assert!(gap < 0.01);
    }

    #[test]
    fn penalty_values() {
        assert!((sparsity_penalty(0.5, 0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((sparsity_penalty(0.25, 0.25, 1.0) - 0.562335).abs() < 1e-6);
        assert_eq!(sparsity_penalty(0.3, 0.8, 0.0), 0.0);
    }

    #[test]
    fn penalty_minimized_at_q_equals_p() {
        for p in [0.25, 0.5, 0.7] {
            assert!(sparsity_penalty_dq(p, p - 0.01, 1.0) < 0.0);
            assert!(sparsity_penalty_dq(p, p + 0.01, 1.0) > 0.0);
            let here = sparsity_penalty(p, p, 1.0);
            assert!(sparsity_penalty(p, p - 0.05, 1.0) > here);
            assert!(sparsity_penalty(p, p + 0.05, 1.0) > here);
        }
    }

    #[test]
    fn wta_all_and_examples() {
        let s = rand_tensor(1, 1, 2, 2, 91);
        let mask = select_wta(&s, 4).unwrap();
        assert!(mask.data().iter().all(|&v| v == 1.0));

        let s = Tensor::from_vec(1, 1, 2, 2, vec![0.9, 0.1, 0.4, 0.8]).unwrap();
        let mask = select_wta(&s, 2).unwrap();
        assert_eq!(mask.data(), &[1.0, 0.0, 0.0, 1.0]);

        assert!(select_wta(&s, 5).is_err());
    }

    #[test]
    fn wta_count_matches_table_grid() {
        let grid = RegionGrid::new(64, 128, 16, 16).unwrap();
        assert_eq!(wta_count(0.13, &grid), 4);
        assert_eq!(wta_count(0.2, &grid), 6);
        assert_eq!(wta_count(0.25, &grid), 8);
        assert_eq!(wta_count(0.4, &grid), 12);
        assert_eq!(wta_count(0.5, &grid), 16);
        assert_eq!(wta_count(1.0, &grid), 32);
    }

    #[test]
    fn wta_tie_break_scan_order() {
        let s = Tensor::filled(1, 1, 2, 4, 0.5);
        let mask = select_wta(&s, 3).unwrap();
        assert_eq!(mask.data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn wta_per_image_counts() {
        let s = rand_tensor(3, 1, 4, 8, 17);
        let mask = select_wta(&s, 8).unwrap();
        for i in 0..3 {
            let ones: f64 = mask.data()[i * 32..(i + 1) * 32].iter().sum();
            assert_eq!(ones, 8.0);
        }
    }

    #[test]
    fn broadcast_values_and_support() {
        let s = Tensor::zeros(1, 1, 2, 2);
        let mask = Tensor::filled(1, 1, 2, 2, 1.0);
        let w = broadcast_weights(&mask, &s, 8, 8).unwrap();
        assert!(w.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));

        let mut mask = Tensor::zeros(1, 1, 2, 2);
        mask.set(0, 0, 1, 0, 1.0);
        let w = broadcast_weights(&mask, &s, 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let inside = (4..8).contains(&y) && x < 4;
                if inside {
                    assert_eq!(w.at(0, 0, y, x), 0.5);
                } else {
                    assert_eq!(w.at(0, 0, y, x), 0.0);
                }
            }
        }
        // footprint of one region at quarter-resolution score maps
        assert_eq!(w.data().iter().filter(|&&v| v != 0.0).count(), 16);
    }

    #[test]
    fn broadcast_rejects_non_multiple_dims() {
        let s = Tensor::zeros(1, 1, 2, 2);
        let mask = Tensor::filled(1, 1, 2, 2, 1.0);
        assert!(broadcast_weights(&mask, &s, 7, 8).is_err());
    }

    proptest! {
        #[test]
        fn wta_invariant_under_monotone_transform(values in prop::collection::vec(-10.0f64..10.0, 32)) {
            let s = Tensor::from_vec(1, 1, 4, 8, values).unwrap();
            let k = 8;
            let base = select_wta(&s, k).unwrap();
            // strictly increasing transforms preserve the argmax set
            let t1 = s.map(|v| 3.0 * v + 7.0);
            let t2 = s.map(|v| v.exp());
            prop_assert_eq!(base.data(), select_wta(&t1, k).unwrap().data());
            prop_assert_eq!(base.data(), select_wta(&t2, k).unwrap().data());
        }

        #[test]
        fn rate_per_image_in_unit_interval(values in prop::collection::vec(-50.0f64..50.0, 8)) {
            let s = Tensor::from_vec(1, 1, 2, 4, values).unwrap();
            let r = rate_per_image(&s)[0];
            prop_assert!(r > 0.0 && r < 1.0);
        }
    }
}
