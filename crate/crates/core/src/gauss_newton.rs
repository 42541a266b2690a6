//! Direct photometric alignment by damped Gauss–Newton.
//!
//! Minimizes the mean over valid pixels of
//! `(W(p; A) − I_t(p))²`, where `W(p; A)` samples the warped source at the
//! projection of `A · X(p)` and `X(p)` is the target pixel backprojected
//! with the target depth. The pose `A` is updated by left composition,
//! `A ← exp(δ) · A`, with `δ = (rx, ry, rz, tx, ty, tz)`.

use nalgebra::{Matrix6, SymmetricEigen, Vector3, Vector6};

use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, Increment};
use crate::plane::{DepthMap, GrayImage, Plane, ValidityMask};
use crate::se3::{compose, hat, Twist, SE3};
use crate::warp::{sample, sample_with_gradient};

const MIN_VALID_PIXELS: usize = 6;
/// Eigenvalue ratio of the normal matrix below which it is rank-deficient.
const RANK_TOLERANCE: f64 = 1e-12;
const MAX_DAMPING: f64 = 1e10;
/// Mean squared residual treated as already aligned (RMS 1e-10, far below
/// 16-bit quantization).
const ALIGNED_COST: f64 = 1e-20;
// a bilinear mask sample below this touches an invalid neighbour
const MASK_FULL: f64 = 1.0 - 1e-9;

/// The alignment problem at a single resolution.
#[derive(Debug, Clone)]
pub struct PhotometricProblem {
    k: Intrinsics,
    /// Backprojected target point and target intensity per valid pixel.
    points: Vec<(Vector3<f64>, f64)>,
    warped: Plane,
    mask: Plane,
}

/// Summary of one evaluation of the cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cost {
    /// Mean squared residual over valid pixels.
    pub mean_squared: f64,
    pub valid: usize,
}

impl PhotometricProblem {
    pub fn new(target: &GrayImage, warped: &Plane, mask: &Plane, depth: &DepthMap, k: &Intrinsics) -> Result<Self> {
        let dims = target.dims();
        if warped.dims() != dims || mask.dims() != dims || depth.dims() != dims || (k.width, k.height) != dims {
            return Err(Error::invalid("alignment inputs have inconsistent dimensions"));
        }
        let mut points = Vec::with_capacity(depth.valid_count());
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                if let Some(d) = depth.get(x, y) {
                    points.push((k.backproject(x as f64, y as f64, d)?, target.get(x, y)));
                }
            }
        }
        Ok(PhotometricProblem {
            k: *k,
            points,
            warped: warped.clone(),
            mask: mask.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn project(&self, pose: &SE3, x: &Vector3<f64>) -> Option<(Vector3<f64>, f64, f64)> {
        let y = pose.apply(x);
        let (u, v) = self.k.project(&y)?;
        if sample(&self.mask, u, v)? < MASK_FULL {
            return None;
        }
        Some((y, u, v))
    }

    /// Residual `W − I_t` per target point, `None` where it is not defined.
    pub fn residuals(&self, pose: &SE3) -> Vec<Option<f64>> {
        self.points
            .iter()
            .map(|(x, t)| {
                let (_, u, v) = self.project(pose, x)?;
                Some(sample(&self.warped, u, v)? - t)
            })
            .collect()
    }

    /// Residual and its derivative with respect to a left perturbation
    /// `exp(δ) · pose`, per target point.
    pub fn linearize(&self, pose: &SE3) -> Vec<Option<(f64, Vector6<f64>)>> {
        self.points
            .iter()
            .map(|(x, t)| {
                let (y, u, v) = self.project(pose, x)?;
                let (val, gu, gv) = sample_with_gradient(&self.warped, u, v)?;
                let iz = 1.0 / y.z;
                // d(u,v)/dY scaled by the image gradient
                let dy = Vector3::new(
                    gu * self.k.fx * iz,
                    gv * self.k.fy * iz,
                    -(gu * self.k.fx * y.x + gv * self.k.fy * y.y) * iz * iz,
                );
                // dY/dδ = [ -[Y]x | I ]
                let rot = -(hat(&y).transpose() * dy);
                let jac = Vector6::new(rot.x, rot.y, rot.z, dy.x, dy.y, dy.z);
                Some((val - t, jac))
            })
            .collect()
    }

    pub fn cost(&self, pose: &SE3) -> Option<Cost> {
        let (sum, n) = self
            .residuals(pose)
            .into_iter()
            .flatten()
            .fold((0.0, 0usize), |(s, n), r| (s + r * r, n + 1));
        (n >= MIN_VALID_PIXELS).then(|| Cost {
            mean_squared: sum / n as f64,
            valid: n,
        })
    }
}

/// Result of minimizing one [`PhotometricProblem`].
#[derive(Debug, Clone, PartialEq)]
pub struct LevelOutcome {
    pub pose: SE3,
    pub iterations: usize,
    pub degenerate: bool,
    /// Cost after every accepted step, starting with the initial cost.
    pub accepted_costs: Vec<f64>,
}

/// Levenberg–Marquardt on one level, starting from `pose`.
pub fn minimize_level(problem: &PhotometricProblem, pose: SE3, cfg: &EstimatorConfig) -> LevelOutcome {
    let mut out = LevelOutcome {
        pose,
        iterations: 0,
        degenerate: false,
        accepted_costs: Vec::new(),
    };
    let Some(mut cost) = problem.cost(&out.pose) else {
        out.degenerate = true;
        return out;
    };
    out.accepted_costs.push(cost.mean_squared);
    let mut lambda = cfg.damping_init;

    while out.iterations < cfg.max_inner_iterations {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        let mut n = 0usize;
        for (r, j) in problem.linearize(&out.pose).into_iter().flatten() {
            h += j * j.transpose();
            g += j * r;
            n += 1;
        }
        if n < MIN_VALID_PIXELS || rank_deficient(&h) {
            out.degenerate = true;
            return out;
        }
        let mut improved = false;
        let mut step_norm = f64::INFINITY;
        while out.iterations < cfg.max_inner_iterations && lambda < MAX_DAMPING {
            out.iterations += 1;
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)];
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = -chol.solve(&g);
            step_norm = delta.norm();
            let step = SE3::from_twist(&Twist::from_array(delta.into()));
            let candidate = match step {
                Ok(s) => compose(&s, &out.pose),
                Err(_) => break,
            };
            match problem.cost(&candidate) {
                Some(c) if c.mean_squared < cost.mean_squared => {
                    out.pose = candidate;
                    cost = c;
                    out.accepted_costs.push(c.mean_squared);
                    lambda = (lambda * 0.1).max(1e-12);
                    improved = true;
                    break;
                }
                _ => {
                    lambda *= 10.0;
                    if step_norm < cfg.convergence_tol {
                        break;
                    }
                }
            }
        }
        if !improved || step_norm < cfg.convergence_tol {
            break;
        }
    }
    out
}

fn rank_deficient(h: &Matrix6<f64>) -> bool {
    if h.iter().any(|v| !v.is_finite()) {
        return true;
    }
    let eig = SymmetricEigen::new(*h).eigenvalues;
    let max = eig.amax();
    max <= 0.0 || eig.min() <= RANK_TOLERANCE * max
}

/// Coarse-to-fine alignment of `warped` onto `target`.
///
/// Returns the twist of the pose that maps target points into the warped
/// view. Rank-deficient normal equations give a zero twist flagged as
/// degenerate.
pub fn gauss_newton_increment(
    target: &GrayImage,
    warped: &GrayImage,
    warped_mask: &ValidityMask,
    depth: &DepthMap,
    k: &Intrinsics,
    cfg: &EstimatorConfig,
) -> Result<Increment> {
    cfg.validate()?;
    let levels = crate::estimator::usable_scales(target, cfg.pyramid_levels);

    let mut targets = vec![target.clone()];
    let mut warps = vec![warped.plane().clone()];
    let mut masks = vec![Plane::new(warped_mask.width(), warped_mask.height(), warped_mask.data().to_vec())?];
    let mut depths = vec![depth.clone()];
    for l in 1..levels {
        targets.push(targets[l - 1].downsample()?);
        warps.push(warps[l - 1].downsample()?);
        masks.push(masks[l - 1].downsample()?);
        depths.push(depths[l - 1].downsample()?);
    }

    let fine = PhotometricProblem::new(&targets[0], &warps[0], &masks[0], &depths[0], k)?;
    let start_cost = fine.cost(&SE3::identity());
    if start_cost.is_some_and(|c| c.mean_squared < ALIGNED_COST) {
        return Ok(Increment {
            twist: Twist::zero(),
            degenerate: false,
            inner_iterations: 0,
        });
    }

    let mut pose = SE3::identity();
    let mut iterations = 0;
    for l in (0..levels).rev() {
        let coarse;
        let problem = if l == 0 {
            &fine
        } else {
            coarse = PhotometricProblem::new(&targets[l], &warps[l], &masks[l], &depths[l], &k.at_level(l)?)?;
            &coarse
        };
        let out = minimize_level(problem, pose, cfg);
        iterations += out.iterations;
        if out.degenerate {
            if l == 0 {
                return Ok(Increment {
                    twist: Twist::zero(),
                    degenerate: true,
                    inner_iterations: iterations,
                });
            }
            // too little signal at this resolution; refine on the next one
            continue;
        }
        pose = out.pose;
    }
    // coarse levels can pull into a basin that is worse at full resolution
    if let (Some(c0), Some(c1)) = (start_cost, fine.cost(&pose)) {
        if c1.mean_squared >= c0.mean_squared {
            pose = SE3::identity();
        }
    }
    Ok(Increment {
        twist: pose.to_twist(),
        degenerate: false,
        inner_iterations: iterations,
    })
}
