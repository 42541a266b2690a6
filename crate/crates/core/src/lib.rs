//! Direct monocular visual odometry with compositional re-estimation.
//!
//! A target frame and its neighbours are aligned by repeatedly estimating
//! a small motion, composing it onto the accumulated transform and
//! re-warping the original source. Depth comes from files or the
//! synthetic renderer; the per-step estimator is pluggable and defaults to
//! coarse-to-fine Gauss–Newton photometric alignment.

pub mod camera;
pub mod cli;
pub mod error;
pub mod estimator;
pub mod gauss_newton;
pub mod kitti_io;
pub mod losses;
pub mod metrics;
pub mod plane;
pub mod se3;
pub mod synth;
pub mod warp;

pub use camera::{warp_coordinates, CoordField, Intrinsics};
pub use error::{Error, Result};
pub use estimator::{
    compositional_estimate, run_sequence, EstimatorConfig, GaussNewton, Increment, IncrementEstimator,
    IncrementProblem, StepTrace,
};
pub use losses::{LossReport, LossWeights};
pub use metrics::{ate_full, ate_snippet, AteResult, DepthMetrics, Trajectory};
pub use plane::{DepthMap, GrayImage, Plane, ValidityMask};
pub use se3::{compose, Twist, SE3};
pub use warp::{bilinear_sample, inverse_warp};
