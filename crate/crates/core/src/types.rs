//! Domain value types shared across the suite.

use crate::error::{Error, Result};
use patchbench_tensor::Tensor;

/// A `[channels, height, width]` image of finite pixel intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    tensor: Tensor,
}

impl ImageTensor {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (_, _, _) = tensor.dims3()?;
        if !tensor.all_finite() {
            return Err(Error::invalid("image", "non-finite pixel value"));
        }
        if tensor.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("image", "pixel value outside [0, 1]"));
        }
        Ok(ImageTensor { tensor })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    /// Number of spatial pixels (the `d` that ablation draws from).
    pub fn spatial_pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// Spatial pixel indices at which any channel differs from `other`.
    pub fn differing_pixels(&self, other: &ImageTensor) -> Result<Vec<usize>> {
        if self.tensor.shape() != other.tensor.shape() {
            return Err(Error::invalid("image", "shape mismatch in pixel diff"));
        }
        let (c_n, h, w) = self.tensor.dims3()?;
        let a = self.tensor.data();
        let b = other.tensor.data();
        let mut out = Vec::new();
        for p in 0..h * w {
            if (0..c_n).any(|c| a[c * h * w + p] != b[c * h * w + p]) {
                out.push(p);
            }
        }
        Ok(out)
    }
}

/// A `[height, width]` grid of nonnegative person densities; the sum over
/// all entries is the predicted or annotated crowd count.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    tensor: Tensor,
}

impl DensityMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (_, _) = tensor.dims2()?;
        if !tensor.all_finite() {
            return Err(Error::invalid("density map", "non-finite entry"));
        }
        if tensor.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("density map", "negative entry"));
        }
        Ok(DensityMap { tensor })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        DensityMap {
            tensor: Tensor::zeros(vec![height, width]),
        }
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    /// Crowd count: the sum of all entries.
    pub fn count(&self) -> f64 {
        self.tensor.sum()
    }

    /// Mass-preserving downsample by summing disjoint `factor x factor`
    /// blocks. Requires both dimensions to be divisible by `factor`.
    pub fn downsample_block(&self, factor: usize) -> Result<DensityMap> {
        let (h, w) = self.tensor.dims2()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::invalid(
                "density map",
                format!("{}x{} not divisible into {}x{} blocks", h, w, factor, factor),
            ));
        }
        let (oh, ow) = (h / factor, w / factor);
        let src = self.tensor.data();
        let mut out = vec![0.0; oh * ow];
        for y in 0..h {
            for x in 0..w {
                out[(y / factor) * ow + x / factor] += src[y * w + x];
            }
        }
        Ok(DensityMap {
            tensor: Tensor::new(vec![oh, ow], out)?,
        })
    }

    /// Elementwise scaling, e.g. building an attack target `alpha * GT`.
    pub fn scaled(&self, factor: f64) -> Result<DensityMap> {
        DensityMap::new(self.tensor.map(|v| v * factor))
    }
}

/// Head positions in pixel coordinates, `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointAnnotations {
    points: Vec<(f64, f64)>,
}

impl PointAnnotations {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        PointAnnotations { points }
    }

    /// Validating constructor: every point must lie inside the canvas.
    pub fn within(points: Vec<(f64, f64)>, height: usize, width: usize) -> Result<Self> {
        for &(r, c) in &points {
            if !(0.0..height as f64).contains(&r) || !(0.0..width as f64).contains(&c) {
                return Err(Error::invalid(
                    "annotations",
                    format!("point ({r}, {c}) outside {height}x{width} canvas"),
                ));
            }
        }
        Ok(PointAnnotations { points })
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_range_values() {
        let t = Tensor::new(vec![1, 2, 2], vec![0.0, 0.5, 1.0, 1.5]).unwrap();
        assert!(ImageTensor::new(t).is_err());
    }

    #[test]
    fn density_rejects_negative_entries() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 0.5, -0.1, 1.0]).unwrap();
        assert!(DensityMap::new(t).is_err());
    }

    #[test]
    fn block_downsample_preserves_mass_exactly() {
        let data: Vec<f64> = (0..64).map(|v| (v as f64) * 0.37 + 0.01).collect();
        let map = DensityMap::new(Tensor::new(vec![8, 8], data).unwrap()).unwrap();
        let down = map.downsample_block(4).unwrap();
        assert_eq!(down.height(), 2);
        // Block sums reorder additions within each block only; compare to
        // the same blockwise accumulation done by hand.
        let mut expect = [0.0; 4];
        for y in 0..8 {
            for x in 0..8 {
                expect[(y / 4) * 2 + x / 4] += map.tensor().data()[y * 8 + x];
            }
        }
        assert_eq!(down.tensor().data(), &expect);
    }

    #[test]
    fn annotations_validate_bounds() {
        assert!(PointAnnotations::within(vec![(3.0, 3.0)], 4, 4).is_ok());
        assert!(PointAnnotations::within(vec![(4.0, 3.0)], 4, 4).is_err());
    }

    #[test]
    fn differing_pixels_finds_patch_footprint() {
        let a = ImageTensor::new(Tensor::filled(vec![2, 2, 2], 0.5)).unwrap();
        let mut data = a.tensor().data().to_vec();
        data[5] = 0.75; // channel 1, pixel 1
        let b = ImageTensor::new(Tensor::new(vec![2, 2, 2], data).unwrap()).unwrap();
        assert_eq!(a.differing_pixels(&b).unwrap(), vec![1]);
    }
}
