//! Pinhole camera model and the dense target→source coordinate field.
//!
//! Pixel `(u, v)` samples the continuous image coordinate `(u, v)`; there is
//! no half-pixel offset.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::DepthMap;
use crate::se3::SE3;

/// Points with camera-frame depth at or below this are treated as behind
/// the camera.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid(format!("focal lengths must be finite and positive: {self:?}")));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be non-zero"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::invalid(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Linear rescale for a resized image: `fx, cx` scale by `sx`, `fy, cy` by `sy`.
    pub fn rescaled(&self, sx: f64, sy: f64, width: usize, height: usize) -> Result<Self> {
        Intrinsics::new(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)
    }

    /// Rescale to a new image size, deriving the factors from the size ratio.
    pub fn resized_to(&self, width: usize, height: usize) -> Result<Self> {
        self.rescaled(
            width as f64 / self.width as f64,
            height as f64 / self.height as f64,
            width,
            height,
        )
    }

    /// Intrinsics of pyramid level `level`: all four parameters halve per
    /// level and the size floors.
    pub fn at_level(&self, level: usize) -> Result<Self> {
        let s = 0.5f64.powi(level as i32);
        Intrinsics::new(
            self.fx * s,
            self.fy * s,
            self.cx * s,
            self.cy * s,
            self.width >> level,
            self.height >> level,
        )
    }

    /// `d · K⁻¹ · (u, v, 1)`.
    pub fn backproject(&self, u: f64, v: f64, d: f64) -> Result<Vector3<f64>> {
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::InvalidDepth(d));
        }
        Ok(Vector3::new(d * (u - self.cx) / self.fx, d * (v - self.cy) / self.fy, d))
    }

    /// Perspective projection; `None` for points at or behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z.is_nan() || p.z <= MIN_PROJECTION_DEPTH || !p.x.is_finite() || !p.y.is_finite() {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    fn check_dims(&self, w: usize, h: usize) -> Result<()> {
        if (w, h) != (self.width, self.height) {
            return Err(Error::invalid(format!(
                "grid {}x{} does not match intrinsics {}x{}",
                w, h, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Source-image coordinates for every target pixel. Pixels without a finite
/// coordinate (invalid depth, behind the camera) carry `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordField {
    width: usize,
    height: usize,
    coords: Vec<Option<(f64, f64)>>,
}

impl CoordField {
    pub fn new(width: usize, height: usize, coords: Vec<Option<(f64, f64)>>) -> Result<Self> {
        if coords.len() != width * height {
            return Err(Error::invalid(format!(
                "coordinate field has {} entries, expected {}x{}",
                coords.len(),
                width,
                height
            )));
        }
        let coords = coords
            .into_iter()
            .map(|c| c.filter(|(u, v)| u.is_finite() && v.is_finite()))
            .collect();
        Ok(CoordField {
            width,
            height,
            coords,
        })
    }

    /// Every pixel maps to its own integer coordinate.
    pub fn identity(width: usize, height: usize) -> Self {
        let coords = (0..height)
            .flat_map(|y| (0..width).map(move |x| Some((x as f64, y as f64))))
            .collect();
        CoordField {
            width,
            height,
            coords,
        }
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

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        self.coords[y * self.width + x]
    }

    pub fn coords(&self) -> &[Option<(f64, f64)>] {
        &self.coords
    }
}

/// Maps every target pixel with valid depth through
/// `project(K, T · backproject(K, p, D(p)))`.
pub fn warp_coordinates(k: &Intrinsics, t: &SE3, depth: &DepthMap) -> Result<CoordField> {
    k.check_dims(depth.width(), depth.height())?;
    let mut coords = Vec::with_capacity(depth.width() * depth.height());
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let c = match depth.get(x, y) {
                Some(d) => {
                    let p = k.backproject(x as f64, y as f64, d)?;
                    k.project(&t.apply(&p))
                }
                None => None,
            };
            coords.push(c);
        }
    }
    CoordField::new(depth.width(), depth.height(), coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::Twist;
    use approx::assert_relative_eq;

    fn unit() -> Intrinsics {
        Intrinsics::new(1.0, 1.0, 0.0, 0.0, 4, 4).unwrap()
    }

    #[test]
    fn validation() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 0.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 0.0, -0.1, 4, 4).is_err());
    }

    #[test]
    fn backproject_examples() {
        assert_eq!(unit().backproject(0.0, 0.0, 5.0).unwrap(), Vector3::new(0.0, 0.0, 5.0));
        let k = Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        assert_eq!(k.backproject(50.0, 50.0, 2.0).unwrap(), Vector3::new(0.0, 0.0, 2.0));
        let k = Intrinsics::new(200.0, 100.0, 0.0, 0.0, 200, 100).unwrap();
        assert_eq!(k.backproject(100.0, 50.0, 4.0).unwrap(), Vector3::new(2.0, 2.0, 4.0));
    }

    #[test]
    fn backproject_rejects_bad_depth() {
        for d in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(unit().backproject(0.0, 0.0, d), Err(Error::InvalidDepth(_))));
        }
    }

    #[test]
    fn project_examples() {
        assert_eq!(unit().project(&Vector3::new(0.0, 0.0, 5.0)), Some((0.0, 0.0)));
        let k = Intrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap();
        assert_eq!(k.project(&Vector3::new(1.0, -1.0, 2.0)), Some((114.0, 14.0)));
        assert_eq!(k.project(&Vector3::new(1.0, 1.0, 1e-7)), None);
        assert_eq!(k.project(&Vector3::new(1.0, 1.0, -2.0)), None);
    }

    #[test]
    fn identity_warp_is_pixel_grid() {
        let k = Intrinsics::new(90.0, 80.0, 10.3, 7.7, 21, 15).unwrap();
        let d = DepthMap::from_fn(21, 15, |x, y| 1.0 + 0.1 * x as f64 + 0.3 * y as f64).unwrap();
        let f = warp_coordinates(&k, &SE3::identity(), &d).unwrap();
        for y in 0..15 {
            for x in 0..21 {
                let (u, v) = f.get(x, y).unwrap();
                assert_relative_eq!(u, x as f64, epsilon = 1e-9);
                assert_relative_eq!(v, y as f64, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn horizontal_baseline_gives_uniform_disparity() {
        let k = Intrinsics::new(100.0, 100.0, 16.0, 8.0, 32, 16).unwrap();
        let (b, d) = (0.1, 5.0);
        let t = SE3::from_twist(&Twist::translation(b, 0.0, 0.0)).unwrap();
        let f = warp_coordinates(&k, &t, &DepthMap::constant(32, 16, d).unwrap()).unwrap();
        for y in 0..16 {
            for x in 0..32 {
                let (u, v) = f.get(x, y).unwrap();
                assert_relative_eq!(u, x as f64 + 100.0 * b / d, epsilon = 1e-12);
                assert_relative_eq!(v, y as f64, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn invalid_depth_and_behind_camera_flagged() {
        let k = Intrinsics::new(10.0, 10.0, 1.0, 1.0, 3, 3).unwrap();
        let mut values = vec![2.0; 9];
        values[4] = 0.0;
        let d = DepthMap::from_values(3, 3, values).unwrap();
        let f = warp_coordinates(&k, &SE3::identity(), &d).unwrap();
        assert!(f.get(1, 1).is_none());
        assert!(f.get(0, 0).is_some());
        let back = SE3::from_twist(&Twist::translation(0.0, 0.0, -3.0)).unwrap();
        let f = warp_coordinates(&k, &back, &DepthMap::constant(3, 3, 2.0).unwrap()).unwrap();
        assert!(f.coords().iter().all(|c| c.is_none()));
    }

    #[test]
    fn dimension_mismatch() {
        let k = Intrinsics::new(10.0, 10.0, 1.0, 1.0, 3, 3).unwrap();
        let d = DepthMap::constant(4, 3, 1.0).unwrap();
        assert!(warp_coordinates(&k, &SE3::identity(), &d).is_err());
    }

    #[test]
    fn level_intrinsics_halve() {
        let k = Intrinsics::new(100.0, 80.0, 96.0, 32.0, 192, 64).unwrap();
        let k2 = k.at_level(2).unwrap();
        assert_eq!((k2.fx, k2.fy, k2.cx, k2.cy, k2.width, k2.height), (25.0, 20.0, 24.0, 8.0, 48, 16));
    }

    #[test]
    fn rescale_by_factors() {
        let k = Intrinsics::new(718.856, 718.856, 607.1928, 185.2157, 1226, 370).unwrap();
        let (sx, sy) = (416.0 / 1226.0, 128.0 / 370.0);
        let r = k.rescaled(sx, sy, 416, 128).unwrap();
        assert_relative_eq!(r.fx, 718.856 * sx);
        assert_relative_eq!(r.cx, 607.1928 * sx);
        assert_relative_eq!(r.fy, 718.856 * sy);
        assert_relative_eq!(r.cy, 185.2157 * sy);
    }
}
