//! Independent reference implementations used as test oracles. Apart from
//! `jacobian`, nothing here calls into the library's numeric code; the
//! oracles use matrix inverses, tent-kernel interpolation, explicit padding
//! and brute-force search where the library uses closed forms.

#![allow(dead_code)]

pub mod jacobian;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::Rng;

pub type Img = Vec<Vec<f64>>; // [y][x]

pub fn k_matrix(fx: f64, fy: f64, cx: f64, cy: f64) -> Matrix3<f64> {
    Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
}

/// `d · K⁻¹ (u, v, 1)` via a numeric matrix inverse.
pub fn backproject(k: &Matrix3<f64>, u: f64, v: f64, d: f64) -> Vector3<f64> {
    k.try_inverse().unwrap() * Vector3::new(u, v, 1.0) * d
}

/// Homogeneous 4×4 action.
pub fn apply(t: &Matrix4<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    let h = t * Vector4::new(p.x, p.y, p.z, 1.0);
    Vector3::new(h.x / h.w, h.y / h.w, h.z / h.w)
}

pub fn project(k: &Matrix3<f64>, p: &Vector3<f64>) -> Option<(f64, f64)> {
    if p.z <= 1e-6 {
        return None;
    }
    let q = k * p;
    Some((q.x / q.z, q.y / q.z))
}

/// Bilinear interpolation written as a separable tent kernel over all
/// pixels; `None` outside `[0, W−1] × [0, H−1]`.
pub fn tent_sample(img: &Img, u: f64, v: f64) -> Option<f64> {
    let (h, w) = (img.len(), img[0].len());
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return None;
    }
    let mut acc = 0.0;
    for (y, row) in img.iter().enumerate() {
        let wy = (1.0 - (v - y as f64).abs()).max(0.0);
        if wy == 0.0 {
            continue;
        }
        for (x, val) in row.iter().enumerate() {
            let wx = (1.0 - (u - x as f64).abs()).max(0.0);
            acc += wx * wy * val;
        }
    }
    Some(acc)
}

pub fn random_img(rng: &mut impl Rng, w: usize, h: usize) -> Img {
    (0..h).map(|_| (0..w).map(|_| rng.gen_range(0.0..1.0)).collect()).collect()
}

pub fn flatten(img: &Img) -> Vec<f64> {
    img.iter().flatten().copied().collect()
}

pub fn l1(target: &Img, warped: &[Img]) -> f64 {
    masked_l1(target, warped, &warped.iter().map(ones_like).collect::<Vec<_>>())
}

pub fn ones_like(img: &Img) -> Img {
    img.iter().map(|r| vec![1.0; r.len()]).collect()
}

pub fn masked_l1(target: &Img, warped: &[Img], masks: &[Img]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (w, m) in warped.iter().zip(masks) {
        for y in 0..target.len() {
            for x in 0..target[0].len() {
                total += m[y][x] * (target[y][x] - w[y][x]).abs();
                count += 1;
            }
        }
    }
    total / count as f64
}

fn pad_replicate(img: &Img) -> Img {
    let (h, w) = (img.len(), img[0].len());
    (0..h + 2)
        .map(|y| {
            let yy = y.saturating_sub(1).min(h - 1);
            (0..w + 2).map(|x| img[yy][x.saturating_sub(1).min(w - 1)]).collect()
        })
        .collect()
}

/// SSIM on 3×3 windows of the replicate-padded images, with two-pass
/// moments.
pub fn ssim(a: &Img, b: &Img) -> Img {
    let (pa, pb) = (pad_replicate(a), pad_replicate(b));
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = (a.len(), a[0].len());
    let mut out = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let wa: Vec<f64> = (0..3).flat_map(|j| (0..3).map(move |i| (j, i))).map(|(j, i)| pa[y + j][x + i]).collect();
            let wb: Vec<f64> = (0..3).flat_map(|j| (0..3).map(move |i| (j, i))).map(|(j, i)| pb[y + j][x + i]).collect();
            let ma = wa.iter().sum::<f64>() / 9.0;
            let mb = wb.iter().sum::<f64>() / 9.0;
            let va = wa.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / 9.0;
            let vb = wb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / 9.0;
            let cov = wa.iter().zip(&wb).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / 9.0;
            out[y][x] = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    out
}

pub fn dssim(a: &Img, b: &Img) -> f64 {
    let s = ssim(a, b);
    let n = (a.len() * a[0].len()) as f64;
    s.iter().flatten().map(|v| (1.0 - v) / 2.0).sum::<f64>() / n
}

pub fn box_down(img: &Img) -> Img {
    let (h, w) = (img.len() / 2, img[0].len() / 2);
    (0..h)
        .map(|y| {
            (0..w)
                .map(|x| (img[2 * y][2 * x] + img[2 * y][2 * x + 1] + img[2 * y + 1][2 * x] + img[2 * y + 1][2 * x + 1]) / 4.0)
                .collect()
        })
        .collect()
}

pub fn dssim_multiscale(target: &Img, warped: &[Img], scales: usize) -> f64 {
    let mut total = 0.0;
    for w in warped {
        let (mut t, mut s) = (target.clone(), w.clone());
        for level in 0..scales {
            if level > 0 {
                t = box_down(&t);
                s = box_down(&s);
            }
            total += dssim(&s, &t);
        }
    }
    total
}

pub fn smoothness(disp: &Img, guide: &Img) -> f64 {
    let (h, w) = (disp.len(), disp[0].len());
    let (mut sx, mut nx, mut sy, mut ny) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                sx += (disp[y][x + 1] - disp[y][x]).abs() * (-(guide[y][x + 1] - guide[y][x]).abs()).exp();
                nx += 1;
            }
            if y + 1 < h {
                sy += (disp[y + 1][x] - disp[y][x]).abs() * (-(guide[y + 1][x] - guide[y][x]).abs()).exp();
                ny += 1;
            }
        }
    }
    let mx = if nx > 0 { sx / nx as f64 } else { 0.0 };
    let my = if ny > 0 { sy / ny as f64 } else { 0.0 };
    mx + my
}

pub fn mask_reg(mask: &Img) -> f64 {
    let n = (mask.len() * mask[0].len()) as f64;
    mask.iter().flatten().map(|e| -(e.max(1e-7)).ln()).sum::<f64>() / n
}

/// Least-squares similarity RMSE between planar (z = 0) point sets by
/// searching the in-plane angle, with and without a flip about the x axis;
/// scale and translation are optimal in closed form for a fixed rotation.
pub fn planar_similarity_rmse(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vector3<f64>>() / n;
    let md = dst.iter().sum::<Vector3<f64>>() / n;
    let cost = |r: &Matrix3<f64>| -> f64 {
        let rs: Vec<Vector3<f64>> = src.iter().map(|p| r * (p - ms)).collect();
        let num: f64 = rs.iter().zip(dst).map(|(a, d)| a.dot(&(d - md))).sum();
        let den: f64 = rs.iter().map(|a| a.norm_squared()).sum();
        let s = (num / den).max(0.0);
        let sq: f64 = rs.iter().zip(dst).map(|(a, d)| (s * a - (d - md)).norm_squared()).sum();
        (sq / n).sqrt()
    };
    let rot = |th: f64, flip: bool| -> Matrix3<f64> {
        let rz = Matrix3::new(th.cos(), -th.sin(), 0.0, th.sin(), th.cos(), 0.0, 0.0, 0.0, 1.0);
        if flip {
            rz * Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0)
        } else {
            rz
        }
    };
    let mut best = f64::INFINITY;
    for flip in [false, true] {
        let f = |th: f64| cost(&rot(th, flip));
        let steps = 20_000;
        let (mut bi, mut bv) = (0, f64::INFINITY);
        for i in 0..steps {
            let v = f(std::f64::consts::TAU * i as f64 / steps as f64);
            if v < bv {
                bv = v;
                bi = i;
            }
        }
        let dt = std::f64::consts::TAU / steps as f64;
        let (mut lo, mut hi) = ((bi as f64 - 1.0) * dt, (bi as f64 + 1.0) * dt);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let (a, b) = (hi - g * (hi - lo), lo + g * (hi - lo));
            if f(a) < f(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        best = best.min(f((lo + hi) / 2.0)).min(bv);
    }
    best
}
