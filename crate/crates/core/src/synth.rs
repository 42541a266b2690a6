//! Analytic renderer for a textured plane, used as ground truth.
//!
//! The plane is fixed in the world (= first camera) frame as
//! `Z = depth + slope_x·X + slope_y·Y`. Its texture is a sum of sinusoids
//! over world `(X, Y)`, so every pixel is evaluated in closed form with no
//! resampling.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::kitti_io;
use crate::metrics::Trajectory;
use crate::plane::{DepthMap, GrayImage};
use crate::se3::{compose, Twist, SE3};

/// One texture component `amplitude · sin(kx·X + ky·Y + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub kx: f64,
    pub ky: f64,
    pub phase: f64,
}

/// Scene description as read from a JSON config. Omitted fields take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    /// Principal point; the image centre when omitted.
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    /// Plane depth on the optical axis of the first camera.
    pub depth: f64,
    pub slope_x: f64,
    pub slope_y: f64,
    pub seed: u64,
    pub sinusoids: usize,
    /// Texture wavelengths, in pixels as seen from the first camera. The
    /// defaults keep displacements of ~25 px inside the alignment basin.
    pub min_wavelength_px: f64,
    pub max_wavelength_px: f64,
    pub frames: usize,
    /// Per-frame camera motion, expressed in the previous camera's frame.
    pub motion: Twist,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 192,
            height: 64,
            fx: 100.0,
            fy: 100.0,
            cx: None,
            cy: None,
            depth: 5.0,
            slope_x: 0.0,
            slope_y: 0.0,
            seed: 0,
            sinusoids: 6,
            min_wavelength_px: 32.0,
            max_wavelength_px: 128.0,
            frames: 10,
            motion: Twist::translation(0.1, 0.0, 0.0),
        }
    }
}

impl SceneConfig {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        let cx = self.cx.unwrap_or((self.width as f64 - 1.0) / 2.0);
        let cy = self.cy.unwrap_or((self.height as f64 - 1.0) / 2.0);
        Intrinsics::new(self.fx, self.fy, cx, cy, self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub intrinsics: Intrinsics,
    pub depth: f64,
    pub slope_x: f64,
    pub slope_y: f64,
    pub texture: Vec<Sinusoid>,
}

impl SyntheticScene {
    pub fn new(intrinsics: Intrinsics, depth: f64, slope_x: f64, slope_y: f64, texture: Vec<Sinusoid>) -> Result<Self> {
        intrinsics.validate()?;
        if !(depth.is_finite() && depth > 0.0) {
            return Err(Error::InvalidDepth(depth));
        }
        if !(slope_x.is_finite() && slope_y.is_finite()) {
            return Err(Error::invalid("plane slopes must be finite"));
        }
        let amp: f64 = texture.iter().map(|s| s.amplitude.abs()).sum();
        if amp > 0.5 + 1e-12 || texture.iter().any(|s| !(s.kx.is_finite() && s.ky.is_finite() && s.phase.is_finite())) {
            return Err(Error::invalid("texture amplitudes must sum to at most 0.5"));
        }
        Ok(SyntheticScene {
            intrinsics,
            depth,
            slope_x,
            slope_y,
            texture,
        })
    }

    /// Draws a seeded texture. Directions are uniform; wavelengths are log-
    /// uniform between the configured pixel bounds at the plane depth.
    pub fn from_config(cfg: &SceneConfig) -> Result<Self> {
        let k = cfg.intrinsics()?;
        if !(cfg.depth.is_finite() && cfg.depth > 0.0) {
            return Err(Error::InvalidDepth(cfg.depth));
        }
        if !(4..=8).contains(&cfg.sinusoids) {
            return Err(Error::invalid(format!("sinusoids must be in 4..=8, got {}", cfg.sinusoids)));
        }
        if !(cfg.min_wavelength_px >= 2.0 && cfg.max_wavelength_px >= cfg.min_wavelength_px) {
            return Err(Error::invalid("wavelength bounds must satisfy 2 <= min <= max"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let px_to_world = cfg.depth / k.fx;
        let (lo, hi) = (cfg.min_wavelength_px.ln(), cfg.max_wavelength_px.ln());
        let amplitude = 0.45 / cfg.sinusoids as f64;
        let texture = (0..cfg.sinusoids)
            .map(|_| {
                let theta = rng.gen_range(0.0..std::f64::consts::PI);
                let lambda = rng.gen_range(lo..=hi).exp() * px_to_world;
                let w = std::f64::consts::TAU / lambda;
                Sinusoid {
                    amplitude,
                    kx: w * theta.cos(),
                    ky: w * theta.sin(),
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                }
            })
            .collect();
        SyntheticScene::new(k, cfg.depth, cfg.slope_x, cfg.slope_y, texture)
    }

    /// Texture value at world `(x, y)`, in `[0.05, 0.95]`.
    pub fn texture_at(&self, x: f64, y: f64) -> f64 {
        0.5 + self
            .texture
            .iter()
            .map(|s| s.amplitude * (s.kx * x + s.ky * y + s.phase).sin())
            .sum::<f64>()
    }

    /// Renders the view of a camera whose camera-to-world pose is `pose`.
    pub fn render(&self, pose: &SE3) -> Result<(GrayImage, DepthMap)> {
        let k = &self.intrinsics;
        let (w, h) = (k.width, k.height);
        let n = Vector3::new(-self.slope_x, -self.slope_y, 1.0);
        let centre = pose.translation();
        let offset = self.depth - n.dot(centre);
        let mut intensity = Vec::with_capacity(w * h);
        let mut depth = Vec::with_capacity(w * h);
        for v in 0..h {
            for u in 0..w {
                let ray = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
                let dir = pose.rotation() * ray;
                let z = offset / n.dot(&dir);
                if !(z.is_finite() && z > 0.0) {
                    return Err(Error::invalid(format!(
                        "plane is not in front of the camera at pixel ({u}, {v})"
                    )));
                }
                let p = centre + dir * z;
                intensity.push(self.texture_at(p.x, p.y));
                depth.push(z);
            }
        }
        Ok((GrayImage::new(w, h, intensity)?, DepthMap::from_values(w, h, depth)?))
    }
}

/// Rendered frames with their exact depths and camera-to-world poses.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub frames: Vec<GrayImage>,
    pub depths: Vec<DepthMap>,
    pub ground_truth: Trajectory,
}

/// Renders `n_frames` views, applying `motion` in the camera frame between
/// consecutive frames: `P_{i+1} = P_i · exp(motion)`.
pub fn make_sequence(scene: &SyntheticScene, motion: &Twist, n_frames: usize) -> Result<SyntheticSequence> {
    let step = SE3::from_twist(motion)?;
    let mut poses = Vec::with_capacity(n_frames);
    let mut pose = SE3::identity();
    for i in 0..n_frames {
        if i > 0 {
            pose = compose(&pose, &step);
        }
        poses.push(pose);
    }
    let (frames, depths) = poses
        .iter()
        .map(|p| scene.render(p))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(SyntheticSequence {
        frames,
        depths,
        ground_truth: Trajectory::from_poses(poses)?,
    })
}

/// Writes a sequence in the KITTI layout:
/// `out/sequences/<id>/{image_0,depth_0,calib.txt}` and `out/poses/<id>.txt`.
/// Returns the sequence directory.
pub fn write_sequence(seq: &SyntheticSequence, k: &Intrinsics, out: &Path, id: &str) -> Result<std::path::PathBuf> {
    let seq_dir = out.join("sequences").join(id);
    let image_dir = seq_dir.join("image_0");
    let depth_dir = seq_dir.join("depth_0");
    let pose_dir = out.join("poses");
    for d in [&image_dir, &depth_dir, &pose_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    kitti_io::save_intrinsics(k, seq_dir.join("calib.txt"))?;
    for (i, (img, depth)) in seq.frames.iter().zip(&seq.depths).enumerate() {
        let name = format!("{i:06}");
        kitti_io::save_gray_png16(img, image_dir.join(format!("{name}.png")))?;
        kitti_io::save_depth_f32(depth, depth_dir.join(format!("{name}.f32")))?;
    }
    kitti_io::save_trajectory(&seq.ground_truth, pose_dir.join(format!("{id}.txt")))?;
    Ok(seq_dir)
}
