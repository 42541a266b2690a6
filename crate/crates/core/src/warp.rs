//! Inverse warping by bilinear sampling, and box-filter image pyramids.
//!
//! A coordinate is sampled only if it lies in the closed box
//! `[0, W−1] × [0, H−1]` (up to [`BORDER_TOLERANCE`]); anything else yields
//! output 0 with mask 0.

use crate::camera::{warp_coordinates, CoordField, Intrinsics};
use crate::error::{Error, Result};
use crate::plane::{DepthMap, GrayImage, Plane, ValidityMask};
use crate::se3::SE3;

/// The four bilinear neighbours of a coordinate and its fractional offsets.
#[derive(Debug, Clone, Copy)]
struct Cell {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: f64,
    ay: f64,
}

/// Coordinates this close outside the box are snapped onto its border, so
/// that round-off in backproject/project does not drop edge pixels.
pub const BORDER_TOLERANCE: f64 = 1e-9;

#[inline]
fn snap(c: f64, max: f64) -> Option<f64> {
    if (0.0..=max).contains(&c) {
        Some(c)
    } else if (-BORDER_TOLERANCE..0.0).contains(&c) {
        Some(0.0)
    } else if c > max && c <= max + BORDER_TOLERANCE {
        Some(max)
    } else {
        None
    }
}

#[inline]
fn cell(width: usize, height: usize, u: f64, v: f64) -> Option<Cell> {
    let u = snap(u, (width - 1) as f64)?;
    let v = snap(v, (height - 1) as f64)?;
    let (x0, x1) = span(u, width);
    let (y0, y1) = span(v, height);
    Some(Cell {
        x0,
        x1,
        y0,
        y1,
        ax: u - x0 as f64,
        ay: v - y0 as f64,
    })
}

// left/top neighbour clamped so that the right/bottom one stays in bounds
#[inline]
fn span(c: f64, n: usize) -> (usize, usize) {
    if n == 1 {
        return (0, 0);
    }
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1)
}

/// Bilinear interpolation of a plane at `(u, v)`.
#[inline]
pub fn sample(plane: &Plane, u: f64, v: f64) -> Option<f64> {
    let c = cell(plane.width(), plane.height(), u, v)?;
    let (tl, tr) = (plane.get(c.x0, c.y0), plane.get(c.x1, c.y0));
    let (bl, br) = (plane.get(c.x0, c.y1), plane.get(c.x1, c.y1));
    Some((1.0 - c.ax) * (1.0 - c.ay) * tl + c.ax * (1.0 - c.ay) * tr + (1.0 - c.ax) * c.ay * bl + c.ax * c.ay * br)
}

/// Bilinear interpolation together with the exact partial derivatives of
/// the interpolant, `(value, ∂/∂u, ∂/∂v)`.
#[inline]
pub fn sample_with_gradient(plane: &Plane, u: f64, v: f64) -> Option<(f64, f64, f64)> {
    let c = cell(plane.width(), plane.height(), u, v)?;
    let (tl, tr) = (plane.get(c.x0, c.y0), plane.get(c.x1, c.y0));
    let (bl, br) = (plane.get(c.x0, c.y1), plane.get(c.x1, c.y1));
    let value = (1.0 - c.ax) * (1.0 - c.ay) * tl + c.ax * (1.0 - c.ay) * tr + (1.0 - c.ax) * c.ay * bl + c.ax * c.ay * br;
    let du = if c.x1 > c.x0 {
        (1.0 - c.ay) * (tr - tl) + c.ay * (br - bl)
    } else {
        0.0
    };
    let dv = if c.y1 > c.y0 {
        (1.0 - c.ax) * (bl - tl) + c.ax * (br - tr)
    } else {
        0.0
    };
    Some((value, du, dv))
}

/// Samples `img` at every coordinate of `coords`. The output grid is the
/// grid of `coords`.
pub fn bilinear_sample(img: &GrayImage, coords: &CoordField) -> Result<(GrayImage, ValidityMask)> {
    let (w, h) = coords.dims();
    let mut out = Vec::with_capacity(w * h);
    let mut mask = Vec::with_capacity(w * h);
    for c in coords.coords() {
        match c.and_then(|(u, v)| sample(img.plane(), u, v)) {
            Some(val) => {
                // convex combination of [0,1] values; clamp guards rounding only
                out.push(val.clamp(0.0, 1.0));
                mask.push(1.0);
            }
            None => {
                out.push(0.0);
                mask.push(0.0);
            }
        }
    }
    Ok((GrayImage::new(w, h, out)?, ValidityMask::new(w, h, mask)?))
}

/// Synthesizes the target view from `src` using the target depth and the
/// target→source transform.
pub fn inverse_warp(src: &GrayImage, depth: &DepthMap, t: &SE3, k: &Intrinsics) -> Result<(GrayImage, ValidityMask)> {
    if src.dims() != depth.dims() {
        return Err(Error::invalid(format!(
            "source {:?} and depth {:?} dimensions differ",
            src.dims(),
            depth.dims()
        )));
    }
    let coords = warp_coordinates(k, t, depth)?;
    bilinear_sample(src, &coords)
}

/// Level 0 is full resolution; each further level is a 2×2 box
/// downsampling of the previous one.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    levels: Vec<GrayImage>,
}

impl Pyramid {
    pub fn levels(&self) -> &[GrayImage] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, i: usize) -> &GrayImage {
        &self.levels[i]
    }
}

pub fn build_pyramid(img: &GrayImage, n: usize) -> Result<Pyramid> {
    if n == 0 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    let min = 1usize << (n - 1);
    if img.width() < min || img.height() < min {
        return Err(Error::invalid(format!(
            "{}x{} image too small for {n} pyramid levels",
            img.width(),
            img.height()
        )));
    }
    let mut levels = vec![img.clone()];
    for _ in 1..n {
        let next = levels.last().expect("non-empty").downsample()?;
        levels.push(next);
    }
    Ok(Pyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::Twist;
    use approx::assert_relative_eq;

    fn ramp(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| ((x * 7 + y * 3) % 17) as f64 / 16.0).unwrap()
    }

    #[test]
    fn integer_grid_reproduces_image() {
        let img = ramp(9, 5);
        let (out, mask) = bilinear_sample(&img, &CoordField::identity(9, 5)).unwrap();
        assert_eq!(out, img);
        assert!(mask.data().iter().all(|m| *m == 1.0));
    }

    #[test]
    fn round_off_outside_border_is_snapped() {
        let p = Plane::new(3, 2, vec![0.0, 0.5, 1.0, 0.0, 0.5, 1.0]).unwrap();
        assert_eq!(sample(&p, 2.0 + 1e-12, 1.0 + 1e-12), Some(1.0));
        assert_eq!(sample(&p, -1e-12, 0.0), Some(0.0));
        assert_eq!(sample(&p, 2.0 + 1e-6, 0.0), None);
        assert_eq!(sample(&p, -1e-6, 0.0), None);
    }

    #[test]
    fn half_pixel_in_single_row() {
        let img = GrayImage::new(2, 1, vec![0.2, 0.8]).unwrap();
        let coords = CoordField::new(1, 1, vec![Some((0.5, 0.0))]).unwrap();
        let (out, mask) = bilinear_sample(&img, &coords).unwrap();
        assert_relative_eq!(out.get(0, 0), 0.5, epsilon = 1e-15);
        assert_eq!(mask.get(0, 0), 1.0);
    }

    #[test]
    fn out_of_bounds_is_zero_and_masked() {
        let img = ramp(4, 4);
        let coords = CoordField::new(3, 1, vec![Some((-3.0, -3.0)), Some((3.0001, 1.0)), None]).unwrap();
        let (out, mask) = bilinear_sample(&img, &coords).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(mask.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn right_and_bottom_edges_sample_exactly() {
        let img = ramp(4, 3);
        let coords = CoordField::new(1, 1, vec![Some((3.0, 2.0))]).unwrap();
        let (out, _) = bilinear_sample(&img, &coords).unwrap();
        assert_eq!(out.get(0, 0), img.get(3, 2));
    }

    #[test]
    fn gradient_of_interpolant() {
        let p = Plane::new(2, 2, vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let (v, du, dv) = sample_with_gradient(&p, 0.25, 0.5).unwrap();
        assert_relative_eq!(v, sample(&p, 0.25, 0.5).unwrap());
        // du = (1-ay)(tr-tl) + ay(br-bl) = 0.5*1 + 0.5*2
        assert_relative_eq!(du, 1.5);
        // dv = (1-ax)(bl-tl) + ax(br-tr) = 0.75*2 + 0.25*3
        assert_relative_eq!(dv, 2.25);
    }

    #[test]
    fn identity_warp_reproduces_source() {
        let k = Intrinsics::new(50.0, 50.0, 8.0, 4.0, 16, 8).unwrap();
        let src = ramp(16, 8);
        let d = DepthMap::constant(16, 8, 3.0).unwrap();
        let (out, mask) = inverse_warp(&src, &d, &SE3::identity(), &k).unwrap();
        for y in 1..7 {
            for x in 1..15 {
                assert_eq!(mask.get(x, y), 1.0);
                assert_relative_eq!(out.get(x, y), src.get(x, y), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn translation_shifts_and_masks_right_border() {
        let k = Intrinsics::new(100.0, 100.0, 8.0, 4.0, 16, 8).unwrap();
        let src = ramp(16, 8);
        let d = DepthMap::constant(16, 8, 5.0).unwrap();
        // fx * b / d = 2 pixels
        let t = SE3::from_twist(&Twist::translation(0.1, 0.0, 0.0)).unwrap();
        let (out, mask) = inverse_warp(&src, &d, &t, &k).unwrap();
        for y in 0..8 {
            for x in 0..16 {
                if x + 2 <= 15 {
                    assert_eq!(mask.get(x, y), 1.0, "({x},{y})");
                    assert_relative_eq!(out.get(x, y), src.get(x + 2, y), epsilon = 1e-9);
                } else {
                    assert_eq!(mask.get(x, y), 0.0);
                    assert_eq!(out.get(x, y), 0.0);
                }
            }
        }
    }

    #[test]
    fn pyramid_levels() {
        let img = GrayImage::filled(2, 2, 0.5).unwrap();
        let p = build_pyramid(&img, 2).unwrap();
        assert_eq!(p.level(1).data(), &[0.5]);
        let p = build_pyramid(&GrayImage::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap(), 2).unwrap();
        assert_eq!(p.level(1).data(), &[0.5]);
        assert_eq!(build_pyramid(&img, 1).unwrap().levels(), std::slice::from_ref(&img));
        assert!(build_pyramid(&img, 3).is_err());
        assert!(build_pyramid(&img, 0).is_err());
    }

    #[test]
    fn odd_dimensions_floor() {
        let p = build_pyramid(&ramp(9, 7), 3).unwrap();
        assert_eq!(p.level(1).dims(), (4, 3));
        assert_eq!(p.level(2).dims(), (2, 1));
    }
}
