//! Geometry of the partition of an image into square regions.

use crate::error::{Error, Result};

/// The H x W partition of an image into square regions, with the
/// sparse-head kernel size `tau` and the feature stride it is derived from.
///
/// `feature_stride` is the stride of the half-resolution-column features
/// feeding the sparse head, measured in full-resolution pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionGrid {
    pub region_px: usize,
    pub rows: usize,
    pub cols: usize,
    pub tau: usize,
    pub feature_stride: usize,
}

impl RegionGrid {
    pub fn new(
        image_h: usize,
        image_w: usize,
        region_px: usize,
        feature_stride: usize,
    ) -> Result<RegionGrid> {
        if region_px == 0 || feature_stride == 0 {
            return Err(Error::Param("region_px and feature_stride must be positive".into()));
        }
        if image_h % region_px != 0 || image_w % region_px != 0 {
            return Err(Error::Param(format!(
                "image {image_h}x{image_w} is not divisible into {region_px}-px regions"
            )));
        }
        if region_px % feature_stride != 0 {
            return Err(Error::Param(format!(
                "region_px {region_px} is not a multiple of feature stride {feature_stride}"
            )));
        }
        Ok(RegionGrid {
            region_px,
            rows: image_h / region_px,
            cols: image_w / region_px,
            tau: region_px / feature_stride,
            feature_stride,
        })
    }

    /// Number of regions per image.
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    /// Side length of one region's footprint on a map with the given stride
    /// (in full-resolution pixels per cell).
    pub fn footprint(&self, stride: usize) -> Result<usize> {
        if stride == 0 || self.region_px % stride != 0 {
            return Err(Error::Param(format!(
                "region_px {} not divisible by stride {stride}",
                self.region_px
            )));
        }
        Ok(self.region_px / stride)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cityscapes_scale_geometry() {
        // 1024x2048 image, 256-px regions, deepest half-column features at
        // stride 32 of the half image = 64 full-resolution pixels per cell
        let g = RegionGrid::new(1024, 2048, 256, 64).unwrap();
        assert_eq!((g.rows, g.cols), (4, 8));
        assert_eq!(g.count(), 32);
        assert_eq!(g.tau, 4);
    }

    #[test]
    fn toy_scale_geometry() {
        let g = RegionGrid::new(64, 128, 16, 16).unwrap();
        assert_eq!((g.rows, g.cols), (4, 8));
        assert_eq!(g.count(), 32);
        assert_eq!(g.tau, 1);
        assert_eq!(g.footprint(4).unwrap(), 4);
    }

    #[test]
    fn non_divisible_dims_error() {
        assert!(RegionGrid::new(60, 128, 16, 16).is_err());
        assert!(RegionGrid::new(64, 128, 16, 5).is_err());
    }
}
