//! Compositional re-estimation of target→source camera motion.
//!
//! For every source the loop starts from the identity and, for `r` steps,
//! asks an [`IncrementEstimator`] for a small motion between the target and
//! the currently warped source, composes it onto the accumulated transform
//! (`T_i = ΔT_i · T_{i−1}`) and re-warps the *original* source with the
//! result. The loss is evaluated once, on the images warped with `T_r`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::gauss_newton::gauss_newton_increment;
use crate::losses::{self, LossInputs, LossReport, LossWeights};
use crate::metrics::Trajectory;
use crate::plane::{DepthMap, GrayImage, ValidityMask};
use crate::se3::{compose, Twist, SE3};
use crate::warp::inverse_warp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Number of re-estimation steps `r`.
    pub steps: usize,
    /// Pyramid depth for coarse-to-fine alignment and for the DSSIM scales.
    pub pyramid_levels: usize,
    /// Gauss–Newton iterations per pyramid level.
    pub max_inner_iterations: usize,
    pub damping_init: f64,
    /// Inner iterations stop once the update's twist norm drops below this.
    pub convergence_tol: f64,
    /// Per-step trust region on the increment's rotation norm (radians).
    pub max_rotation: f64,
    /// Per-step trust region on the increment's translation norm.
    pub max_translation: f64,
    pub weights: LossWeights,
    /// Include the mask regularizer in the total loss.
    pub regularize_masks: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            steps: 2,
            pyramid_levels: 4,
            max_inner_iterations: 20,
            damping_init: 1e-3,
            convergence_tol: 1e-8,
            max_rotation: 0.3,
            max_translation: 0.5,
            weights: LossWeights::default(),
            regularize_masks: false,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.pyramid_levels == 0 || self.max_inner_iterations == 0 {
            return Err(Error::invalid(
                "steps, pyramid_levels and max_inner_iterations must all be >= 1",
            ));
        }
        let positive = [
            self.damping_init,
            self.convergence_tol,
            self.max_rotation,
            self.max_translation,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(
                "damping, tolerance and trust-region bounds must be positive",
            ));
        }
        self.weights.validate()
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }
}

/// Inputs handed to an increment estimator at one re-estimation step.
pub struct IncrementProblem<'a> {
    pub target: &'a GrayImage,
    /// Source warped with the transform accumulated so far.
    pub warped: &'a GrayImage,
    /// Validity of `warped`.
    pub warped_mask: &'a ValidityMask,
    pub depth: &'a DepthMap,
    pub intrinsics: &'a Intrinsics,
    pub config: &'a EstimatorConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Increment {
    pub twist: Twist,
    /// Normal equations were rank-deficient; `twist` is zero.
    pub degenerate: bool,
    pub inner_iterations: usize,
}

/// Produces the motion that aligns the warped source with the target.
pub trait IncrementEstimator: Sync {
    fn estimate(&self, problem: &IncrementProblem<'_>) -> Result<Increment>;
}

/// Damped Gauss–Newton photometric alignment, coarse to fine.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussNewton;

impl IncrementEstimator for GaussNewton {
    fn estimate(&self, p: &IncrementProblem<'_>) -> Result<Increment> {
        gauss_newton_increment(p.target, p.warped, p.warped_mask, p.depth, p.intrinsics, p.config)
    }
}

/// One re-estimation step of one source.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub source: usize,
    /// 1-based step index.
    pub step: usize,
    /// Increment as returned by the estimator.
    pub raw_increment: Twist,
    /// Increment after the trust-region clamp; this is what was composed.
    pub increment: Twist,
    pub accumulated: SE3,
    pub masked_photometric: f64,
    pub inner_iterations: usize,
    pub degenerate: bool,
    #[serde(skip)]
    pub warped: Arc<GrayImage>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StepTrace {
    pub records: Vec<StepRecord>,
}

impl StepTrace {
    pub fn for_source(&self, source: usize) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter(move |r| r.source == source)
    }

    /// Records as JSON lines, one per step.
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("step record serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone)]
pub struct Estimate {
    /// Final target→source transform `T_r` per source.
    pub poses: Vec<SE3>,
    /// Validity of the final warp per source.
    pub masks: Vec<ValidityMask>,
    /// Sources warped with `T_r`.
    pub warped: Vec<GrayImage>,
    pub trace: StepTrace,
    pub loss: LossReport,
}

impl Estimate {
    /// Masked photometric error of the final warps.
    pub fn final_masked_photometric(&self, target: &GrayImage) -> Result<f64> {
        losses::masked_photometric(target, &self.warped, &self.masks)
    }
}

fn failure(reason: impl Into<String>, trace: Option<StepTrace>) -> Error {
    Error::EstimationFailure {
        reason: reason.into(),
        trace: trace.map(Box::new),
    }
}

/// Runs `cfg.steps` re-estimation steps for every source independently.
pub fn compositional_estimate(
    target: &GrayImage,
    sources: &[GrayImage],
    depth: &DepthMap,
    k: &Intrinsics,
    cfg: &EstimatorConfig,
    inc: &dyn IncrementEstimator,
) -> Result<Estimate> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::invalid("at least one source frame is required"));
    }
    if target.dims() != depth.dims() || target.dims() != (k.width, k.height) {
        return Err(Error::invalid(format!(
            "target {:?}, depth {:?} and intrinsics {}x{} disagree",
            target.dims(),
            depth.dims(),
            k.width,
            k.height
        )));
    }
    if let Some(s) = sources.iter().find(|s| s.dims() != target.dims()) {
        return Err(Error::invalid(format!(
            "source {:?} does not match target {:?}",
            s.dims(),
            target.dims()
        )));
    }
    if depth.valid_count() == 0 {
        return Err(failure("depth map has no valid pixels", None));
    }

    let mut trace = StepTrace::default();
    let mut poses = Vec::with_capacity(sources.len());
    let mut masks = Vec::with_capacity(sources.len());
    let mut warped_final = Vec::with_capacity(sources.len());

    for (s, source) in sources.iter().enumerate() {
        let mut pose = SE3::identity();
        let (mut warped, mut mask) = inverse_warp(source, depth, &pose, k)?;
        for step in 1..=cfg.steps {
            let problem = IncrementProblem {
                target,
                warped: &warped,
                warped_mask: &mask,
                depth,
                intrinsics: k,
                config: cfg,
            };
            let raw = match inc.estimate(&problem) {
                Ok(raw) => raw,
                Err(e) => return Err(failure(format!("source {s}, step {step}: {e}"), Some(trace))),
            };
            if !raw.twist.is_finite() {
                return Err(failure(
                    format!("source {s}, step {step}: non-finite increment {:?}", raw.twist),
                    Some(trace),
                ));
            }
            let increment = raw.twist.clamped(cfg.max_rotation, cfg.max_translation);
            pose = compose(&SE3::from_twist(&increment)?, &pose);
            (warped, mask) = inverse_warp(source, depth, &pose, k)?;
            let masked = losses::masked_photometric(target, std::slice::from_ref(&warped), std::slice::from_ref(&mask))?;
            trace.records.push(StepRecord {
                source: s,
                step,
                raw_increment: raw.twist,
                increment,
                accumulated: pose,
                masked_photometric: masked,
                inner_iterations: raw.inner_iterations,
                degenerate: raw.degenerate,
                warped: Arc::new(warped.clone()),
            });
        }
        poses.push(pose);
        masks.push(mask);
        warped_final.push(warped);
    }

    let disparity = depth.disparity();
    let scales = usable_scales(target, cfg.pyramid_levels);
    let loss = losses::evaluate(
        &LossInputs {
            target,
            warped: &warped_final,
            masks: &masks,
            disparity: &disparity,
            scales,
            regularize_masks: cfg.regularize_masks,
        },
        &cfg.weights,
    )?;

    Ok(Estimate {
        poses,
        masks,
        warped: warped_final,
        trace,
        loss,
    })
}

/// Largest level count `<= wanted` the image supports.
pub(crate) fn usable_scales(img: &GrayImage, wanted: usize) -> usize {
    let mut n = wanted.max(1);
    while n > 1 && (img.width() < 1 << (n - 1) || img.height() < 1 << (n - 1)) {
        n -= 1;
    }
    n
}

/// Outcome of one snippet window of a sequence.
#[derive(Debug, Clone, Serialize)]
pub struct WindowResult {
    pub center: usize,
    pub sources: Vec<usize>,
    /// `T_{center→source}` per entry of `sources`; empty on failure.
    pub poses: Vec<SE3>,
    pub loss: Option<LossReport>,
    #[serde(skip)]
    pub trace: Option<StepTrace>,
    pub error: Option<String>,
}

impl WindowResult {
    /// Transform from the center frame to `frame`, identity for the center.
    fn to_frame(&self, frame: usize) -> Option<SE3> {
        if frame == self.center {
            return Some(SE3::identity());
        }
        let i = self.sources.iter().position(|s| *s == frame)?;
        self.poses.get(i).copied()
    }
}

#[derive(Debug, Clone)]
pub struct SequenceRun {
    pub trajectory: Trajectory,
    /// Per frame: the relative motion leading to this frame could not be
    /// estimated and was replaced by the identity.
    pub failed: Vec<bool>,
    pub windows: Vec<WindowResult>,
}

/// Estimates a camera-to-world trajectory by sliding an odd-length snippet
/// over the sequence, using the middle frame of each window as target.
///
/// Consecutive relative motion `k → k+1` is taken from the window centred
/// on `k` (clamped to the valid window centres at the sequence ends).
#[allow(clippy::too_many_arguments)]
pub fn run_sequence(
    frames: &[GrayImage],
    depths: &[DepthMap],
    k: &Intrinsics,
    cfg: &EstimatorConfig,
    snippet_len: usize,
    inc: &dyn IncrementEstimator,
    jobs: usize,
) -> Result<SequenceRun> {
    cfg.validate()?;
    if snippet_len < 3 || snippet_len.is_multiple_of(2) {
        return Err(Error::invalid(format!("snippet length must be odd and >= 3, got {snippet_len}")));
    }
    if frames.len() < snippet_len {
        return Err(Error::invalid(format!(
            "{} frames is fewer than the snippet length {snippet_len}",
            frames.len()
        )));
    }
    if depths.len() != frames.len() {
        return Err(Error::invalid(format!(
            "{} depth maps for {} frames",
            depths.len(),
            frames.len()
        )));
    }
    let half = snippet_len / 2;
    let centers: Vec<usize> = (half..frames.len() - half).collect();

    let run_window = |&c: &usize| -> WindowResult {
        let sources: Vec<usize> = (c - half..=c + half).filter(|i| *i != c).collect();
        let imgs: Vec<GrayImage> = sources.iter().map(|i| frames[*i].clone()).collect();
        match compositional_estimate(&frames[c], &imgs, &depths[c], k, cfg, inc) {
            Ok(est) => WindowResult {
                center: c,
                sources,
                poses: est.poses,
                loss: Some(est.loss),
                trace: Some(est.trace),
                error: None,
            },
            Err(e) => {
                log::warn!("window centred on frame {c} failed: {e}");
                WindowResult {
                    center: c,
                    sources,
                    poses: Vec::new(),
                    loss: None,
                    error: Some(e.to_string()),
                    trace: match e {
                        Error::EstimationFailure { trace, .. } => trace.map(|t| *t),
                        _ => None,
                    },
                }
            }
        }
    };

    let windows: Vec<WindowResult> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| centers.par_iter().map(run_window).collect())
    } else {
        centers.iter().map(run_window).collect()
    };

    let n = frames.len();
    let mut poses = Vec::with_capacity(n);
    let mut failed = vec![false; n];
    poses.push(SE3::identity());
    for f in 0..n - 1 {
        let c = f.clamp(half, n - 1 - half);
        let w = &windows[c - half];
        // P_a⁻¹ P_b = T_{c→a} · T_{c→b}⁻¹
        let rel = match (w.to_frame(f), w.to_frame(f + 1)) {
            (Some(ta), Some(tb)) if w.error.is_none() => compose(&ta, &tb.inverse()),
            _ => {
                failed[f + 1] = true;
                SE3::identity()
            }
        };
        let prev = *poses.last().expect("non-empty");
        poses.push(compose(&prev, &rel));
    }
    let trajectory = Trajectory::new(poses.into_iter().enumerate().collect())?;
    Ok(SequenceRun {
        trajectory,
        failed,
        windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Twist);

    impl IncrementEstimator for Fixed {
        fn estimate(&self, _: &IncrementProblem<'_>) -> Result<Increment> {
            Ok(Increment {
                twist: self.0,
                degenerate: false,
                inner_iterations: 0,
            })
        }
    }

    fn scene() -> (GrayImage, DepthMap, Intrinsics) {
        let img = GrayImage::from_fn(32, 16, |x, y| 0.5 + 0.3 * (x as f64 * 0.3).sin() * (y as f64 * 0.2).cos()).unwrap();
        let d = DepthMap::constant(32, 16, 4.0).unwrap();
        let k = Intrinsics::new(40.0, 40.0, 16.0, 8.0, 32, 16).unwrap();
        (img, d, k)
    }

    #[test]
    fn config_validation() {
        assert!(EstimatorConfig::default().validate().is_ok());
        assert!(EstimatorConfig::default().with_steps(0).validate().is_err());
        let cfg = EstimatorConfig {
            max_translation: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn trace_accumulates_and_clamps() {
        let (img, d, k) = scene();
        let cfg = EstimatorConfig {
            steps: 3,
            ..Default::default()
        };
        let inc = Fixed(Twist::translation(0.8, 0.0, 0.0));
        let est = compositional_estimate(&img, std::slice::from_ref(&img), &d, &k, &cfg, &inc).unwrap();
        assert_eq!(est.trace.records.len(), 3);
        for r in &est.trace.records {
            assert_eq!(r.increment.tx, 0.5);
            assert_eq!(r.raw_increment.tx, 0.8);
        }
        assert!((est.poses[0].translation().x - 1.5).abs() < 1e-12);
    }

    #[test]
    fn non_finite_increment_fails_with_trace() {
        let (img, d, k) = scene();
        let inc = Fixed(Twist::translation(f64::NAN, 0.0, 0.0));
        let err = compositional_estimate(&img, std::slice::from_ref(&img), &d, &k, &EstimatorConfig::default(), &inc).unwrap_err();
        match err {
            Error::EstimationFailure { trace, .. } => assert!(trace.is_some()),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn all_invalid_depth_fails() {
        let (img, _, k) = scene();
        let d = DepthMap::from_values(32, 16, vec![0.0; 32 * 16]).unwrap();
        let err = compositional_estimate(&img, std::slice::from_ref(&img), &d, &k, &EstimatorConfig::default(), &GaussNewton).unwrap_err();
        assert!(matches!(err, Error::EstimationFailure { .. }));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn sequence_argument_checks() {
        let (img, d, k) = scene();
        let frames = vec![img.clone(); 4];
        let depths = vec![d.clone(); 4];
        let cfg = EstimatorConfig::default();
        assert!(run_sequence(&frames, &depths, &k, &cfg, 4, &GaussNewton, 1).is_err());
        assert!(run_sequence(&frames, &depths, &k, &cfg, 5, &GaussNewton, 1).is_err());
        assert!(run_sequence(&frames, &depths[..3], &k, &cfg, 3, &GaussNewton, 1).is_err());
    }

    #[test]
    fn failed_window_gives_identity_and_flag() {
        let (img, _, k) = scene();
        let frames = vec![img.clone(); 3];
        let bad = DepthMap::from_values(32, 16, vec![0.0; 32 * 16]).unwrap();
        let run = run_sequence(&frames, &vec![bad; 3], &k, &EstimatorConfig::default(), 3, &GaussNewton, 1).unwrap();
        assert_eq!(run.failed, vec![false, true, true]);
        assert!(run.trajectory.poses().iter().all(|(_, p)| *p == SE3::identity()));
        assert!(run.windows[0].error.is_some());
    }
}
