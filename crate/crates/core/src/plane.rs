//! Dense per-pixel planes over a shared `width × height` grid, stored row-major.

use crate::error::{Error, Result};

/// Unconstrained real-valued plane (disparities, gradients, scratch data).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("plane dimensions must be non-zero"));
        }
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "plane data has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Plane::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// 2×2 box-filter downsampling to `floor(w/2) × floor(h/2)`.
    pub fn downsample(&self) -> Result<Plane> {
        let (w, h) = (self.width / 2, self.height / 2);
        if w == 0 || h == 0 {
            return Err(Error::invalid(format!(
                "cannot downsample a {}x{} plane",
                self.width, self.height
            )));
        }
        Plane::from_fn(w, h, |x, y| {
            let (x0, y0) = (2 * x, 2 * y);
            (self.get(x0, y0) + self.get(x0 + 1, y0) + self.get(x0, y0 + 1) + self.get(x0 + 1, y0 + 1)) / 4.0
        })
    }
}

/// Grayscale intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage(Plane);

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        GrayImage::from_plane(Plane::new(width, height, data)?)
    }

    pub fn from_plane(plane: Plane) -> Result<Self> {
        if let Some(v) = plane.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("intensity {v} outside [0, 1]")));
        }
        Ok(GrayImage(plane))
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        GrayImage::from_plane(Plane::filled(width, height, value)?)
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        GrayImage::from_plane(Plane::from_fn(width, height, f)?)
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.0.get(x, y)
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn downsample(&self) -> Result<GrayImage> {
        // box averages of values in [0, 1] stay in [0, 1]
        Ok(GrayImage(self.0.downsample()?))
    }
}

/// Per-pixel depth with an explicit validity flag. Valid depths are finite
/// and strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Values that are non-finite or `<= 0` are marked invalid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let plane = Plane::new(width, height, values)?;
        let valid = plane.data.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Ok(DepthMap {
            width,
            height,
            depth: plane.data,
            valid,
        })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Result<Self> {
        if !(depth.is_finite() && depth > 0.0) {
            return Err(Error::InvalidDepth(depth));
        }
        DepthMap::from_values(width, height, vec![depth; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        DepthMap::from_values(width, height, Plane::from_fn(width, height, f)?.data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Depth at `(x, y)` if valid.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.depth[i])
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.depth
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Valid depths in row-major order.
    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.depth
            .iter()
            .zip(&self.valid)
            .filter_map(|(d, v)| v.then_some(*d))
    }

    /// Inverse depth, zero where invalid.
    pub fn disparity(&self) -> Plane {
        let data = self
            .depth
            .iter()
            .zip(&self.valid)
            .map(|(d, v)| if *v { 1.0 / d } else { 0.0 })
            .collect();
        Plane {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn scaled(&self, s: f64) -> DepthMap {
        DepthMap {
            width: self.width,
            height: self.height,
            depth: self.depth.iter().map(|d| d * s).collect(),
            valid: self.valid.clone(),
        }
    }

    /// 2×2 downsampling averaging only the valid depths of each block; a
    /// block with no valid depth is invalid.
    pub fn downsample(&self) -> Result<DepthMap> {
        let (w, h) = (self.width / 2, self.height / 2);
        if w == 0 || h == 0 {
            return Err(Error::invalid(format!(
                "cannot downsample a {}x{} depth map",
                self.width, self.height
            )));
        }
        let mut depth = Vec::with_capacity(w * h);
        let mut valid = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (mut sum, mut n) = (0.0, 0usize);
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    if let Some(d) = self.get(2 * x + dx, 2 * y + dy) {
                        sum += d;
                        n += 1;
                    }
                }
                depth.push(if n > 0 { sum / n as f64 } else { 0.0 });
                valid.push(n > 0);
            }
        }
        Ok(DepthMap {
            width: w,
            height: h,
            depth,
            valid,
        })
    }
}

/// Per-pixel loss weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityMask(Plane);

impl ValidityMask {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let plane = Plane::new(width, height, data)?;
        if let Some(v) = plane.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("mask weight {v} outside [0, 1]")));
        }
        Ok(ValidityMask(plane))
    }

    pub fn ones(width: usize, height: usize) -> Result<Self> {
        ValidityMask::new(width, height, vec![1.0; width * height])
    }

    pub fn from_flags(width: usize, height: usize, flags: &[bool]) -> Result<Self> {
        ValidityMask::new(width, height, flags.iter().map(|f| if *f { 1.0 } else { 0.0 }).collect())
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.0.get(x, y)
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    /// Number of pixels with non-zero weight.
    pub fn support(&self) -> usize {
        self.0.data.iter().filter(|v| **v > 0.0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dimensions() {
        assert!(Plane::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Plane::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn gray_image_range_checked() {
        assert!(GrayImage::new(1, 1, vec![1.5]).is_err());
        assert!(GrayImage::new(1, 1, vec![f64::NAN]).is_err());
        assert!(GrayImage::new(1, 1, vec![1.0]).is_ok());
    }

    #[test]
    fn depth_validity_from_values() {
        let d = DepthMap::from_values(3, 1, vec![1.0, 0.0, f64::INFINITY]).unwrap();
        assert_eq!(d.validity(), &[true, false, false]);
        assert_eq!(d.get(0, 0), Some(1.0));
        assert_eq!(d.get(1, 0), None);
        assert!(DepthMap::constant(2, 2, 0.0).is_err());
    }

    #[test]
    fn depth_downsample_skips_invalid() {
        let d = DepthMap::from_values(2, 2, vec![2.0, 0.0, 4.0, 0.0]).unwrap();
        assert_eq!(d.downsample().unwrap().get(0, 0), Some(3.0));
        let none = DepthMap::from_values(2, 2, vec![0.0; 4]).unwrap();
        assert_eq!(none.downsample().unwrap().get(0, 0), None);
    }

    #[test]
    fn mask_weights_checked() {
        assert!(ValidityMask::new(1, 1, vec![-0.1]).is_err());
        let m = ValidityMask::from_flags(2, 1, &[true, false]).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0]);
        assert_eq!(m.support(), 1);
    }
}
