//! Trajectory and depth evaluation.

use std::io::Write;

use nalgebra::{Matrix3, Vector3, SVD};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::plane::DepthMap;
use crate::se3::SE3;

/// Max-abs deviation from the identity tolerated for a trajectory origin.
pub const ORIGIN_TOLERANCE: f64 = 1e-6;

/// Camera-to-world poses keyed by frame index, starting at the identity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    poses: Vec<(usize, SE3)>,
}

impl Trajectory {
    /// Frame indices must be strictly increasing and the first pose must be
    /// the identity.
    pub fn new(poses: Vec<(usize, SE3)>) -> Result<Self> {
        if poses.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid("trajectory frame indices must be strictly increasing"));
        }
        if let Some((_, first)) = poses.first() {
            let dev = (first.to_matrix() - SE3::identity().to_matrix()).amax();
            if dev > ORIGIN_TOLERANCE {
                return Err(Error::invalid(format!(
                    "trajectory must start at the identity (deviation {dev:.3e})"
                )));
            }
        }
        Ok(Trajectory { poses })
    }

    /// Re-expresses every pose relative to the first one.
    pub fn anchored(poses: Vec<(usize, SE3)>) -> Result<Self> {
        let Some((_, first)) = poses.first() else {
            return Trajectory::new(poses);
        };
        let inv = first.inverse();
        let rebased = poses.iter().map(|(i, p)| (*i, inv * *p)).collect();
        Trajectory::new(rebased)
    }

    /// Consecutive frames `0..n`.
    pub fn from_poses(poses: Vec<SE3>) -> Result<Self> {
        Trajectory::new(poses.into_iter().enumerate().collect())
    }

    pub fn poses(&self) -> &[(usize, SE3)] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.poses.iter().map(|(i, _)| *i).collect()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|(_, p)| *p.translation()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AteResult {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl AteResult {
    fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        AteResult {
            mean,
            std: var.sqrt(),
            values,
        }
    }
}

fn check_same_frames(pred: &Trajectory, gt: &Trajectory) -> Result<()> {
    if pred.len() != gt.len() || pred.frame_indices() != gt.frame_indices() {
        return Err(Error::invalid(format!(
            "trajectories cover different frames ({} vs {} poses)",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Snippet ATE over every window of `len` consecutive poses.
///
/// Both snippets are expressed relative to their first pose, the predicted
/// translations are scaled by the least-squares factor onto the ground
/// truth, and the snippet error is the RMSE of the translation residuals
/// over all `len` frames.
pub fn ate_snippet(pred: &Trajectory, gt: &Trajectory, len: usize) -> Result<AteResult> {
    check_same_frames(pred, gt)?;
    if len < 2 {
        return Err(Error::invalid("snippet length must be at least 2"));
    }
    if pred.len() < len {
        return Err(Error::invalid(format!(
            "{} poses is fewer than the snippet length {len}",
            pred.len()
        )));
    }
    let values = (0..=pred.len() - len)
        .map(|start| {
            let rel = |traj: &Trajectory| -> Vec<Vector3<f64>> {
                let origin = traj.poses[start].1.inverse();
                traj.poses[start..start + len]
                    .iter()
                    .map(|(_, p)| *(origin * *p).translation())
                    .collect()
            };
            let (p, g) = (rel(pred), rel(gt));
            let pp: f64 = p.iter().map(|v| v.norm_squared()).sum();
            let pg: f64 = p.iter().zip(&g).map(|(a, b)| a.dot(b)).sum();
            let scale = if pp > 0.0 { pg / pp } else { 0.0 };
            let sq: f64 = p.iter().zip(&g).map(|(a, b)| (a * scale - b).norm_squared()).sum();
            (sq / len as f64).sqrt()
        })
        .collect();
    Ok(AteResult::from_values(values))
}

/// Least-squares similarity `g ≈ s·R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Umeyama alignment of `src` onto `dst`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity> {
    if src.len() != dst.len() || src.is_empty() {
        return Err(Error::invalid("umeyama needs two equally sized, non-empty point sets"));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (cs, cd) = (s - mu_s, d - mu_d);
        cov += cd * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = SVD::new(cov, true, true);
    let (u, v_t) = (svd.u.expect("svd u"), svd.v_t.expect("svd v_t"));
    let sign = if u.determinant() * v_t.determinant() < 0.0 { -1.0 } else { 1.0 };
    let fix = Vector3::new(1.0, 1.0, sign);
    let rotation = u * Matrix3::from_diagonal(&fix) * v_t;
    let scale = if var_s > 0.0 {
        svd.singular_values.component_mul(&fix).sum() / var_s
    } else {
        0.0
    };
    Ok(Similarity {
        scale,
        rotation,
        translation: mu_d - scale * (rotation * mu_s),
    })
}

/// Translational ATE over the full trajectory after 7-DoF alignment.
pub fn ate_full(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    check_same_frames(pred, gt)?;
    if pred.len() < 3 {
        return Err(Error::invalid("full-trajectory ATE needs at least 3 frames"));
    }
    let (p, g) = (pred.positions(), gt.positions());
    let sim = umeyama(&p, &g)?;
    let sq: f64 = p.iter().zip(&g).map(|(a, b)| (sim.apply(a) - b).norm_squared()).sum();
    Ok((sq / p.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    /// Column-wise mean over several images.
    pub fn mean(all: &[DepthMetrics]) -> Option<DepthMetrics> {
        if all.is_empty() {
            return None;
        }
        let n = all.len() as f64;
        let avg = |f: fn(&DepthMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Some(DepthMetrics {
            abs_rel: avg(|m| m.abs_rel),
            sq_rel: avg(|m| m.sq_rel),
            rmse: avg(|m| m.rmse),
            rmse_log: avg(|m| m.rmse_log),
            delta1: avg(|m| m.delta1),
            delta2: avg(|m| m.delta2),
            delta3: avg(|m| m.delta3),
        })
    }
}

fn co_valid(pred: &DepthMap, gt: &DepthMap) -> Result<Vec<(f64, f64)>> {
    if pred.dims() != gt.dims() {
        return Err(Error::invalid(format!(
            "depth maps {:?} and {:?} differ in size",
            pred.dims(),
            gt.dims()
        )));
    }
    let pairs: Vec<(f64, f64)> = pred
        .values()
        .iter()
        .zip(pred.validity())
        .zip(gt.values().iter().zip(gt.validity()))
        .filter_map(|((p, pv), (g, gv))| (*pv && *gv).then_some((*p, *g)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid("no pixel has both a valid prediction and valid ground truth"));
    }
    Ok(pairs)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// `median(gt) / median(pred)` over pixels valid in both maps.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let pairs = co_valid(pred, gt)?;
    let mp = median(pairs.iter().map(|p| p.0).collect());
    let mg = median(pairs.iter().map(|p| p.1).collect());
    Ok(mg / mp)
}

/// Depth errors after median scaling, with both maps capped at `cap`.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, cap: f64) -> Result<DepthMetrics> {
    let s = median_scale(pred, gt)?;
    depth_metrics_scaled(pred, gt, cap, s)
}

/// Depth errors with an explicit scale applied to the prediction.
pub fn depth_metrics_scaled(pred: &DepthMap, gt: &DepthMap, cap: f64, scale: f64) -> Result<DepthMetrics> {
    if !(cap.is_finite() && cap > 0.0) || !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid(format!("cap {cap} and scale {scale} must be positive")));
    }
    let pairs = co_valid(pred, gt)?;
    let n = pairs.len() as f64;
    let mut m = DepthMetrics {
        abs_rel: 0.0,
        sq_rel: 0.0,
        rmse: 0.0,
        rmse_log: 0.0,
        delta1: 0.0,
        delta2: 0.0,
        delta3: 0.0,
    };
    let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
    for (p, g) in pairs {
        let p = (p * scale).min(cap);
        let g = g.min(cap);
        let diff = p - g;
        m.abs_rel += diff.abs() / g;
        m.sq_rel += diff * diff / g;
        m.rmse += diff * diff;
        m.rmse_log += (p.ln() - g.ln()).powi(2);
        let ratio = (p / g).max(g / p);
        m.delta1 += (ratio < thresholds[0]) as u8 as f64;
        m.delta2 += (ratio < thresholds[1]) as u8 as f64;
        m.delta3 += (ratio < thresholds[2]) as u8 as f64;
    }
    m.abs_rel /= n;
    m.sq_rel /= n;
    m.rmse = (m.rmse / n).sqrt();
    m.rmse_log = (m.rmse_log / n).sqrt();
    m.delta1 /= n;
    m.delta2 /= n;
    m.delta3 /= n;
    Ok(m)
}

/// Formats `x` with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{x:.5e}");
    }
    format!("{:.*}", (5 - mag).max(0) as usize, x)
}

/// `label | mean ± std` rows.
pub fn format_ate_table(rows: &[(String, AteResult)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$} | ATE (mean ± std)\n", "Method");
    for (label, r) in rows {
        out.push_str(&format!("{:<width$} | {} ± {}\n", label, sig6(r.mean), sig6(r.std)));
    }
    out
}

pub const DEPTH_COLUMNS: [&str; 7] = ["Abs Rel", "Sq Rel", "RMSE", "RMSE log", "δ < 1.25", "δ < 1.25²", "δ < 1.25³"];

pub fn format_depth_table(rows: &[(String, DepthMetrics)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}", "Method");
    for c in DEPTH_COLUMNS {
        out.push_str(&format!(" | {c:>10}"));
    }
    out.push('\n');
    for (label, m) in rows {
        out.push_str(&format!("{label:<width$}"));
        for v in [m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3] {
            out.push_str(&format!(" | {:>10}", sig6(v)));
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct AteRow<'a> {
    label: &'a str,
    mean: f64,
    std: f64,
    snippets: usize,
}

pub fn write_ate_csv<W: Write>(out: W, rows: &[(String, AteResult)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for (label, r) in rows {
        wtr.serialize(AteRow {
            label,
            mean: r.mean,
            std: r.std,
            snippets: r.values.len(),
        })
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    wtr.flush().map_err(|e| Error::io("<ate csv>", e))
}

pub fn write_depth_csv<W: Write>(out: W, rows: &[(String, DepthMetrics)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    wtr.write_record(["label", "abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"])
        .map_err(csv_err)?;
    for (label, m) in rows {
        let mut rec = vec![label.clone()];
        rec.extend(
            [m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3]
                .iter()
                .map(|v| crate::kitti_io::format_real(*v)),
        );
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::io("<depth csv>", e))
}
