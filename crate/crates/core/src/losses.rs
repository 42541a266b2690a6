//! Unsupervised view-synthesis objective.
//!
//! Pixel sums are normalized by pixel count times source count, so values
//! do not depend on resolution and the default weights stay meaningful.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::{GrayImage, Plane, ValidityMask};
use crate::warp::Pyramid;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Lower clamp for mask weights inside the log of the regularizer.
pub const MASK_REG_FLOOR: f64 = 1e-7;

/// Weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ph: f64,
    pub lambda_d: f64,
    pub lambda_s: f64,
    pub lambda_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ph: 0.15,
            lambda_d: 0.85,
            lambda_s: 0.1,
            lambda_e: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_ph, self.lambda_d, self.lambda_s, self.lambda_e];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    pub fn zero() -> Self {
        LossWeights {
            lambda_ph: 0.0,
            lambda_d: 0.0,
            lambda_s: 0.0,
            lambda_e: 0.0,
        }
    }
}

/// Unweighted loss terms. `mask_reg` is already summed over masks.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossComponents {
    pub photometric: f64,
    pub dssim: f64,
    pub smoothness: f64,
    pub mask_reg: f64,
    /// DSSIM contribution of each pyramid scale; sums to `dssim`.
    pub dssim_per_scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub photometric: f64,
    pub dssim: f64,
    pub smoothness: f64,
    pub mask_reg: f64,
    pub total: f64,
    pub dssim_per_scale: Vec<f64>,
}

impl LossReport {
    /// Photometric plus DSSIM, the reconstruction part of the objective.
    pub fn dissimilarity(&self) -> f64 {
        self.photometric + self.dssim
    }
}

fn check_same_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{what}: dimensions {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// Mean absolute intensity difference over all pixels of all warped images.
pub fn photometric_l1(target: &GrayImage, warped: &[GrayImage]) -> Result<f64> {
    if warped.is_empty() {
        return Err(Error::invalid("photometric loss needs at least one warped image"));
    }
    let mut sum = 0.0;
    for img in warped {
        check_same_dims(target.dims(), img.dims(), "photometric loss")?;
        sum += target
            .data()
            .iter()
            .zip(img.data())
            .map(|(t, s)| (t - s).abs())
            .sum::<f64>();
    }
    Ok(sum / (target.data().len() * warped.len()) as f64)
}

/// [`photometric_l1`] with every pixel term weighted by the mask of its
/// source. The denominator does not depend on the masks.
pub fn masked_photometric(target: &GrayImage, warped: &[GrayImage], masks: &[ValidityMask]) -> Result<f64> {
    if warped.is_empty() {
        return Err(Error::invalid("photometric loss needs at least one warped image"));
    }
    if masks.len() != warped.len() {
        return Err(Error::invalid(format!(
            "{} masks for {} warped images",
            masks.len(),
            warped.len()
        )));
    }
    let mut sum = 0.0;
    for (img, mask) in warped.iter().zip(masks) {
        check_same_dims(target.dims(), img.dims(), "masked photometric loss")?;
        check_same_dims(target.dims(), mask.dims(), "masked photometric loss")?;
        sum += target
            .data()
            .iter()
            .zip(img.data())
            .zip(mask.data())
            .map(|((t, s), e)| e * (t - s).abs())
            .sum::<f64>();
    }
    Ok(sum / (target.data().len() * warped.len()) as f64)
}

/// Per-pixel SSIM over 3×3 windows with edge-replicated borders.
pub fn ssim_map(a: &GrayImage, b: &GrayImage) -> Result<Plane> {
    check_same_dims(a.dims(), b.dims(), "ssim")?;
    let (w, h) = a.dims();
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    Plane::from_fn(w, h, |x, y| {
        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let xx = clampi(x as isize + dx, w);
                let yy = clampi(y as isize + dy, h);
                let (va, vb) = (a.get(xx, yy), b.get(xx, yy));
                sa += va;
                sb += vb;
                saa += va * va;
                sbb += vb * vb;
                sab += va * vb;
            }
        }
        let (mu_a, mu_b) = (sa / 9.0, sb / 9.0);
        let var_a = saa / 9.0 - mu_a * mu_a;
        let var_b = sbb / 9.0 - mu_b * mu_b;
        let cov = sab / 9.0 - mu_a * mu_b;
        ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
    })
}

/// Mean of `(1 − SSIM) / 2` over the image.
pub fn dssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    let m = ssim_map(a, b)?;
    Ok(m.data().iter().map(|s| (1.0 - s) / 2.0).sum::<f64>() / m.len() as f64)
}

/// Multi-scale DSSIM summed over scales and sources. Returns the total and
/// the per-scale breakdown.
pub fn dssim_multiscale_per_scale(target: &Pyramid, warped: &[Pyramid]) -> Result<(f64, Vec<f64>)> {
    if warped.is_empty() {
        return Err(Error::invalid("dssim needs at least one warped pyramid"));
    }
    let mut per_scale = vec![0.0; target.len()];
    for pyr in warped {
        if pyr.len() != target.len() {
            return Err(Error::invalid(format!(
                "pyramid level counts differ: {} vs {}",
                pyr.len(),
                target.len()
            )));
        }
        for (i, (t, s)) in target.levels().iter().zip(pyr.levels()).enumerate() {
            per_scale[i] += dssim(s, t)?;
        }
    }
    Ok((per_scale.iter().sum(), per_scale))
}

pub fn dssim_multiscale(target: &Pyramid, warped: &[Pyramid]) -> Result<f64> {
    Ok(dssim_multiscale_per_scale(target, warped)?.0)
}

/// First-order edge-aware smoothness:
/// `mean|∂x d|·exp(−|∂x I|) + mean|∂y d|·exp(−|∂y I|)`, each mean taken
/// over the pixels where the forward difference exists.
pub fn smoothness(disparity: &Plane, guide: &GrayImage) -> Result<f64> {
    check_same_dims(disparity.dims(), guide.dims(), "smoothness")?;
    let (w, h) = disparity.dims();
    let mut gx = 0.0;
    if w > 1 {
        for y in 0..h {
            for x in 0..w - 1 {
                let dd = (disparity.get(x + 1, y) - disparity.get(x, y)).abs();
                let di = (guide.get(x + 1, y) - guide.get(x, y)).abs();
                gx += dd * (-di).exp();
            }
        }
        gx /= ((w - 1) * h) as f64;
    }
    let mut gy = 0.0;
    if h > 1 {
        for y in 0..h - 1 {
            for x in 0..w {
                let dd = (disparity.get(x, y + 1) - disparity.get(x, y)).abs();
                let di = (guide.get(x, y + 1) - guide.get(x, y)).abs();
                gy += dd * (-di).exp();
            }
        }
        gy /= (w * (h - 1)) as f64;
    }
    Ok(gx + gy)
}

/// Cross-entropy of the mask against an all-ones label.
pub fn mask_regularization(mask: &ValidityMask) -> f64 {
    let n = mask.data().len() as f64;
    mask.data().iter().map(|e| -e.max(MASK_REG_FLOOR).ln()).sum::<f64>() / n
}

/// Weighted sum of the loss terms.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> LossReport {
    let total = w.lambda_ph * c.photometric + w.lambda_d * c.dssim + w.lambda_s * c.smoothness + w.lambda_e * c.mask_reg;
    LossReport {
        photometric: c.photometric,
        dssim: c.dssim,
        smoothness: c.smoothness,
        mask_reg: c.mask_reg,
        total,
        dssim_per_scale: c.dssim_per_scale.clone(),
    }
}

/// Everything needed to evaluate the full objective on the final step.
pub struct LossInputs<'a> {
    pub target: &'a GrayImage,
    pub warped: &'a [GrayImage],
    pub masks: &'a [ValidityMask],
    pub disparity: &'a Plane,
    pub scales: usize,
    /// Add the mask regularizer. Off for purely geometric masks, whose
    /// regularizer carries no learning signal.
    pub regularize_masks: bool,
}

pub fn evaluate(inputs: &LossInputs<'_>, weights: &LossWeights) -> Result<LossReport> {
    let photometric = masked_photometric(inputs.target, inputs.warped, inputs.masks)?;
    let target_pyr = crate::warp::build_pyramid(inputs.target, inputs.scales)?;
    let warped_pyrs = inputs
        .warped
        .iter()
        .map(|w| crate::warp::build_pyramid(w, inputs.scales))
        .collect::<Result<Vec<_>>>()?;
    let (dssim, dssim_per_scale) = dssim_multiscale_per_scale(&target_pyr, &warped_pyrs)?;
    let smooth = smoothness(inputs.disparity, inputs.target)?;
    let mask_reg = if inputs.regularize_masks {
        inputs.masks.iter().map(mask_regularization).sum()
    } else {
        0.0
    };
    let components = LossComponents {
        photometric,
        dssim,
        smoothness: smooth,
        mask_reg,
        dssim_per_scale,
    };
    Ok(total_loss(&components, weights))
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    photometric: f64,
    dssim: f64,
    smoothness: f64,
    mask_reg: f64,
    total: f64,
}

/// Writes `step,photometric,dssim,smoothness,mask_reg,total` rows.
pub fn write_loss_csv<W: Write>(out: W, rows: &[(usize, LossReport)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for (step, r) in rows {
        wtr.serialize(LossRow {
            step: *step,
            photometric: r.photometric,
            dssim: r.dssim,
            smoothness: r.smoothness,
            mask_reg: r.mask_reg,
            total: r.total,
        })
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    wtr.flush().map_err(|e| Error::io("<loss csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::build_pyramid;
    use approx::assert_relative_eq;

    fn img(w: usize, h: usize, data: &[f64]) -> GrayImage {
        GrayImage::new(w, h, data.to_vec()).unwrap()
    }

    #[test]
    fn photometric_examples() {
        let t = img(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(photometric_l1(&t, std::slice::from_ref(&t)).unwrap(), 0.0);
        let a = GrayImage::filled(5, 3, 0.5).unwrap();
        let b = GrayImage::filled(5, 3, 0.25).unwrap();
        assert_eq!(photometric_l1(&a, &[b]).unwrap(), 0.25);
        let t = img(2, 1, &[0.0, 1.0]);
        let s = img(2, 1, &[1.0, 0.0]);
        assert_eq!(photometric_l1(&t, &[s]).unwrap(), 1.0);
    }

    #[test]
    fn photometric_errors() {
        let t = img(2, 1, &[0.0, 1.0]);
        assert!(photometric_l1(&t, &[]).is_err());
        assert!(photometric_l1(&t, &[img(1, 2, &[0.0, 1.0])]).is_err());
    }

    #[test]
    fn masked_photometric_examples() {
        let t = img(2, 1, &[0.0, 1.0]);
        let s = img(2, 1, &[1.0, 0.0]);
        let ones = ValidityMask::ones(2, 1).unwrap();
        let zeros = ValidityMask::new(2, 1, vec![0.0, 0.0]).unwrap();
        let half = ValidityMask::new(2, 1, vec![1.0, 0.0]).unwrap();
        let ws = [s.clone()];
        assert_eq!(
            masked_photometric(&t, &ws, &[ones]).unwrap(),
            photometric_l1(&t, &ws).unwrap()
        );
        assert_eq!(masked_photometric(&t, &ws, &[zeros]).unwrap(), 0.0);
        assert_eq!(masked_photometric(&t, &ws, &[half]).unwrap(), 0.5);
        assert!(masked_photometric(&t, &ws, &[]).is_err());
    }

    #[test]
    fn dssim_identical_is_zero() {
        let t = GrayImage::from_fn(8, 8, |x, y| ((x * y) % 5) as f64 / 4.0).unwrap();
        let p = build_pyramid(&t, 3).unwrap();
        assert_relative_eq!(dssim_multiscale(&p, std::slice::from_ref(&p)).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn dssim_constant_patches() {
        let a = GrayImage::filled(4, 4, 0.0).unwrap();
        let b = GrayImage::filled(4, 4, 1.0).unwrap();
        let pa = build_pyramid(&a, 1).unwrap();
        let pb = build_pyramid(&b, 1).unwrap();
        // zero variance: SSIM = C1 / (1 + C1)
        let ssim = SSIM_C1 / (1.0 + SSIM_C1);
        assert_relative_eq!(dssim_multiscale(&pa, &[pb]).unwrap(), (1.0 - ssim) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn dssim_level_mismatch() {
        let a = GrayImage::filled(4, 4, 0.2).unwrap();
        let p1 = build_pyramid(&a, 1).unwrap();
        let p2 = build_pyramid(&a, 2).unwrap();
        assert!(dssim_multiscale(&p1, &[p2]).is_err());
    }

    #[test]
    fn smoothness_examples() {
        let guide = GrayImage::filled(6, 4, 0.3).unwrap();
        let flat = Plane::filled(6, 4, 0.7).unwrap();
        assert_eq!(smoothness(&flat, &guide).unwrap(), 0.0);
        let g = 0.05;
        let ramp = Plane::from_fn(6, 4, |x, _| g * x as f64).unwrap();
        assert_relative_eq!(smoothness(&ramp, &guide).unwrap(), g, epsilon = 1e-15);

        let step = Plane::from_fn(6, 4, |x, _| if x < 3 { 0.0 } else { 1.0 }).unwrap();
        let edge = GrayImage::from_fn(6, 4, |x, _| if x < 3 { 0.0 } else { 1.0 }).unwrap();
        assert!(smoothness(&step, &edge).unwrap() < smoothness(&step, &guide).unwrap());
    }

    #[test]
    fn mask_regularization_examples() {
        assert_eq!(mask_regularization(&ValidityMask::ones(3, 3).unwrap()), 0.0);
        let e = ValidityMask::new(2, 2, vec![(-1.0f64).exp(); 4]).unwrap();
        assert_relative_eq!(mask_regularization(&e), 1.0, epsilon = 1e-15);
        let tiny = ValidityMask::new(2, 1, vec![1e-9; 2]).unwrap();
        assert_eq!(mask_regularization(&tiny), -(1e-7f64).ln());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossComponents::default(), &w).total, 0.0);
        let ones = LossComponents {
            photometric: 1.0,
            dssim: 1.0,
            smoothness: 1.0,
            mask_reg: 1.0,
            dssim_per_scale: vec![1.0],
        };
        assert_relative_eq!(total_loss(&ones, &w).total, 1.2, epsilon = 1e-15);
        assert_eq!(total_loss(&ones, &LossWeights::zero()).total, 0.0);
    }

    #[test]
    fn weights_validated() {
        let mut w = LossWeights::default();
        assert!(w.validate().is_ok());
        w.lambda_s = -0.1;
        assert!(w.validate().is_err());
    }

    #[test]
    fn csv_rows() {
        let r = total_loss(
            &LossComponents {
                photometric: 0.5,
                ..Default::default()
            },
            &LossWeights::default(),
        );
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &[(2, r)]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("step,photometric,dssim,smoothness,mask_reg,total"));
        assert_eq!(lines.next(), Some("2,0.5,0.0,0.0,0.0,0.075"));
    }
}
