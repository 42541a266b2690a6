//! KITTI odometry formats and on-disk sequence layout.
//!
//! ```text
//! <root>/sequences/NN/image_0/000000.png ...
//! <root>/sequences/NN/depth_0/000000.png ...   (16-bit, value / depth_scale)
//! <root>/sequences/NN/calib.txt                (P0: line)
//! <root>/poses/NN.txt                          (12 values per line)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::metrics::Trajectory;
use crate::plane::{DepthMap, GrayImage};
use crate::se3::SE3;

/// Orthogonality drift accepted in pose files before rejecting a line.
pub const POSE_ROTATION_TOLERANCE: f64 = 1e-4;
/// KITTI depth PNGs store `depth * 256`.
pub const DEFAULT_DEPTH_SCALE: f64 = 256.0;

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_reals(path: &Path, line_no: usize, text: &str, expected: usize) -> Result<Vec<f64>> {
    let vals = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("invalid number: {e}"),
        })?;
    if vals.len() != expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("expected {expected} values, found {}", vals.len()),
        });
    }
    Ok(vals)
}

/// Reads a pose file: one row-major `[R | t]` (12 reals) per frame.
///
/// If the first pose is not the identity, all poses are re-expressed
/// relative to it.
pub fn load_poses(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let v = parse_reals(path, i + 1, line, 12)?;
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let t = Vector3::new(v[3], v[7], v[11]);
        let pose = SE3::from_parts(r, t, POSE_ROTATION_TOLERANCE).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        poses.push((i, pose));
    }
    match Trajectory::new(poses.clone()) {
        Ok(t) => Ok(t),
        Err(_) => {
            log::warn!("{}: first pose is not the identity; re-anchoring", path.display());
            Trajectory::anchored(poses)
        }
    }
}

/// Shortest decimal that reads back bit-exactly; exponent form for very
/// small or large magnitudes.
pub fn format_real(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Writes a trajectory in the pose-file format; values round-trip exactly.
pub fn save_trajectory(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (_, pose) in traj.poses() {
        let row: Vec<String> = pose.to_row_major_3x4().iter().map(|v| format_real(*v)).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads the `P0:` projection matrix of a calibration file. `width` and
/// `height` are the image size the calibration refers to.
pub fn load_intrinsics(path: impl AsRef<Path>, width: usize, height: usize) -> Result<Intrinsics> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    for (i, line) in text.lines().enumerate() {
        if let Some(rest) = line.trim_start().strip_prefix("P0:") {
            let p = parse_reals(path, i + 1, rest, 12)?;
            return Intrinsics::new(p[0], p[5], p[2], p[6], width, height);
        }
    }
    Err(Error::Data(format!("{}: no P0: projection line", path.display())))
}

/// Writes a minimal calibration file with a `P0:` line for `k`.
pub fn save_intrinsics(k: &Intrinsics, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let line = format!(
        "P0: {} 0 {} 0 0 {} {} 0 0 0 1 0\n",
        k.fx, k.cx, k.fy, k.cy
    );
    fs::write(path, line).map_err(|e| Error::io(path, e))
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Loads an 8- or 16-bit image as intensities in `[0, 1]`. Colour images
/// are reduced with ITU-R 601 luma weights.
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(b) => b.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        DynamicImage::ImageLumaA8(b) => b.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
        DynamicImage::ImageLumaA16(b) => b.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => img
            .to_rgb16()
            .pixels()
            .map(|p| luma601(p.0.map(|c| c as f64)) / 65535.0)
            .collect(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| luma601(p.0.map(|c| c as f64)) / 255.0)
            .collect(),
    };
    GrayImage::new(w, h, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

fn luma601(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Saves as 16-bit grayscale PNG.
pub fn save_gray_png16(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<u16> = img.data().iter().map(|v| (v * 65535.0).round() as u16).collect();
    save_u16(img.width(), img.height(), data, path.as_ref())
}

/// Saves as 8-bit grayscale PNG.
pub fn save_gray_png8(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let data: Vec<u8> = img.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, data).expect("buffer size");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn save_u16(w: usize, h: usize, data: Vec<u16>, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer size");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads a depth map. `.f32` files are raw little-endian floats of size
/// `dims`; anything else is decoded as a 16-bit image divided by `scale`.
/// Zero means invalid in both encodings.
pub fn load_depth(path: impl AsRef<Path>, scale: f64, dims: Option<(usize, usize)>) -> Result<DepthMap> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "f32") {
        let (w, h) = dims.ok_or_else(|| Error::invalid("raw depth needs explicit dimensions"))?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != w * h * 4 {
            return Err(Error::Data(format!(
                "{}: {} bytes is not a {w}x{h} f32 plane",
                path.display(),
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        return DepthMap::from_values(w, h, values);
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid(format!("depth scale {scale} must be positive")));
    }
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = img.to_luma16().pixels().map(|p| p.0[0] as f64 / scale).collect();
    DepthMap::from_values(w, h, values)
}

/// Saves depth as a 16-bit PNG of `round(depth * scale)`; invalid pixels
/// are written as 0.
pub fn save_depth_png16(depth: &DepthMap, path: impl AsRef<Path>, scale: f64) -> Result<()> {
    let data = depth
        .values()
        .iter()
        .zip(depth.validity())
        .map(|(d, v)| if *v { (d * scale).round().clamp(1.0, 65535.0) as u16 } else { 0 })
        .collect();
    save_u16(depth.width(), depth.height(), data, path.as_ref())
}

/// Raw little-endian f32 plane, zero for invalid pixels.
pub fn save_depth_f32(depth: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = depth
        .values()
        .iter()
        .zip(depth.validity())
        .flat_map(|(d, v)| (if *v { *d as f32 } else { 0.0 }).to_le_bytes())
        .collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Where the files of one sequence live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub sequence_id: String,
    pub frame_count: usize,
    pub image_dir: PathBuf,
    pub calibration: PathBuf,
    pub poses: Option<PathBuf>,
    pub depth_dir: Option<PathBuf>,
    pub depth_scale: f64,
    /// Image size the calibration refers to, when frames were resized.
    pub calib_size: Option<(usize, usize)>,
}

/// Optional `manifest.json` in a sequence directory; relative paths are
/// resolved against that directory.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestOverride {
    sequence_id: Option<String>,
    frame_count: Option<usize>,
    image_dir: Option<PathBuf>,
    calibration: Option<PathBuf>,
    poses: Option<PathBuf>,
    depth_dir: Option<PathBuf>,
    depth_scale: Option<f64>,
    calib_size: Option<(usize, usize)>,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    for (i, f) in files.iter().enumerate() {
        let idx = f.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<usize>().ok());
        if idx != Some(i) {
            return Err(Error::Data(format!(
                "{}: frame files must be numbered contiguously from 0 (found {} at position {i})",
                dir.display(),
                f.display()
            )));
        }
    }
    Ok(files)
}

impl SequenceManifest {
    /// Discovers the standard layout under `seq_dir`, then applies
    /// `seq_dir/manifest.json` if present.
    pub fn discover(seq_dir: impl AsRef<Path>) -> Result<Self> {
        let dir = seq_dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "sequence directory not found"),
            ));
        }
        let id = dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("00")
            .to_string();
        let poses = dir
            .parent()
            .and_then(|p| p.parent())
            .map(|root| root.join("poses").join(format!("{id}.txt")))
            .filter(|p| p.is_file());
        let depth_dir = Some(dir.join("depth_0")).filter(|p| p.is_dir());
        let mut m = SequenceManifest {
            sequence_id: id,
            frame_count: 0,
            image_dir: dir.join("image_0"),
            calibration: dir.join("calib.txt"),
            poses,
            depth_dir,
            depth_scale: DEFAULT_DEPTH_SCALE,
            calib_size: None,
        };
        let override_path = dir.join("manifest.json");
        let mut declared_count = None;
        if override_path.is_file() {
            let o: ManifestOverride = serde_json::from_str(&read_to_string(&override_path)?)
                .map_err(|e| Error::Data(format!("{}: {e}", override_path.display())))?;
            let resolve = |p: PathBuf| if p.is_absolute() { p } else { dir.join(p) };
            if let Some(v) = o.sequence_id {
                m.sequence_id = v;
            }
            if let Some(v) = o.image_dir {
                m.image_dir = resolve(v);
            }
            if let Some(v) = o.calibration {
                m.calibration = resolve(v);
            }
            if let Some(v) = o.poses {
                m.poses = Some(resolve(v));
            }
            if let Some(v) = o.depth_dir {
                m.depth_dir = Some(resolve(v));
            }
            if let Some(v) = o.depth_scale {
                m.depth_scale = v;
            }
            m.calib_size = o.calib_size.or(m.calib_size);
            declared_count = o.frame_count;
        }
        m.frame_count = frame_files(&m.image_dir)?.len();
        if let Some(n) = declared_count {
            if n != m.frame_count {
                return Err(Error::Data(format!(
                    "manifest declares {n} frames but {} were found in {}",
                    m.frame_count,
                    m.image_dir.display()
                )));
            }
        }
        Ok(m)
    }
}

/// Everything needed to run odometry on a sequence.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Vec<GrayImage>,
    pub depths: Vec<DepthMap>,
    pub intrinsics: Intrinsics,
    pub ground_truth: Option<Trajectory>,
}

pub fn load_sequence(m: &SequenceManifest) -> Result<Sequence> {
    let files = frame_files(&m.image_dir)?;
    let frames = files.iter().map(load_gray).collect::<Result<Vec<_>>>()?;
    let (w, h) = frames
        .first()
        .map(|f| f.dims())
        .ok_or_else(|| Error::Data(format!("{}: no frames", m.image_dir.display())))?;
    if let Some(f) = frames.iter().find(|f| f.dims() != (w, h)) {
        return Err(Error::Data(format!("frame size {:?} differs from {:?}", f.dims(), (w, h))));
    }
    let intrinsics = match m.calib_size {
        Some((cw, ch)) => load_intrinsics(&m.calibration, cw, ch)?.resized_to(w, h)?,
        None => load_intrinsics(&m.calibration, w, h)?,
    };
    let depth_dir = m
        .depth_dir
        .as_ref()
        .ok_or_else(|| Error::Data(format!("sequence {} has no depth directory", m.sequence_id)))?;
    let depths = files
        .iter()
        .map(|f| {
            let stem = f.file_stem().expect("frame file stem");
            let png = depth_dir.join(stem).with_extension("png");
            let raw = depth_dir.join(stem).with_extension("f32");
            let path = if png.is_file() { png } else { raw };
            let d = load_depth(&path, m.depth_scale, Some((w, h)))?;
            if d.dims() != (w, h) {
                return Err(Error::Data(format!("{}: depth size differs from frames", path.display())));
            }
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;
    let ground_truth = m.poses.as_ref().map(load_poses).transpose()?;
    Ok(Sequence {
        frames,
        depths,
        intrinsics,
        ground_truth,
    })
}

/// A labelled trajectory for [`emit_plot`].
pub struct PlotSeries<'a> {
    pub label: &'a str,
    pub trajectory: &'a Trajectory,
}

const PALETTE: [&str; 6] = ["#ff7f0e", "#1f77b4", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn is_ground_truth(label: &str) -> bool {
    let l = label.to_ascii_lowercase();
    l == "gt" || l.contains("ground truth") || l.contains("ground_truth")
}

/// Writes a top-down (x–z) SVG plot to `svg_path` and the plotted
/// coordinates as `label,frame,x,z` rows next to it (`.csv`). Ground-truth
/// series are drawn dotted gray.
pub fn emit_plot(series: &[PlotSeries<'_>], svg_path: impl AsRef<Path>) -> Result<PathBuf> {
    let svg_path = svg_path.as_ref();
    if series.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    let csv_path = svg_path.with_extension("csv");

    let mut csv = String::from("label,frame,x,z\n");
    for s in series {
        for (frame, pose) in s.trajectory.poses() {
            let t = pose.translation();
            writeln!(csv, "{},{},{},{}", s.label, frame, format_real(t.x), format_real(t.z)).expect("string write");
        }
    }

    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.trajectory.poses().iter().map(|(_, p)| (p.translation().x, p.translation().z)))
        .collect();
    let (mut xmin, mut xmax, mut zmin, mut zmax) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (x, z) in &pts {
        xmin = xmin.min(*x);
        xmax = xmax.max(*x);
        zmin = zmin.min(*z);
        zmax = zmax.max(*z);
    }
    let span = (xmax - xmin).max(zmax - zmin).max(1e-9);
    let (size, margin) = (600.0, 40.0);
    let scale = (size - 2.0 * margin) / span;
    let map = |x: f64, z: f64| -> (f64, f64) {
        (margin + (x - xmin) * scale, size - margin - (z - zmin) * scale)
    };

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    )
    .expect("string write");
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).expect("string write");
    let mut color_idx = 0;
    for (i, s) in series.iter().enumerate() {
        let (color, dash) = if is_ground_truth(s.label) {
            ("#808080", r#" stroke-dasharray="2,4""#)
        } else {
            let c = PALETTE[color_idx % PALETTE.len()];
            color_idx += 1;
            (c, "")
        };
        let coords: Vec<String> = s
            .trajectory
            .poses()
            .iter()
            .map(|(_, p)| {
                let (x, y) = map(p.translation().x, p.translation().z);
                format!("{x:.3},{y:.3}")
            })
            .collect();
        if coords.len() == 1 {
            let (x, y) = coords[0].split_once(',').expect("coordinate pair");
            writeln!(svg, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#).expect("string write");
        } else if !coords.is_empty() {
            writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
                coords.join(" ")
            )
            .expect("string write");
        }
        let ly = 20.0 + 16.0 * i as f64;
        writeln!(
            svg,
            r#"<line x1="10" y1="{ly:.1}" x2="30" y2="{ly:.1}" stroke="{color}" stroke-width="2"{dash}/><text x="36" y="{:.1}" font-family="sans-serif" font-size="12">{}</text>"#,
            ly + 4.0,
            xml_escape(s.label)
        )
        .expect("string write");
    }
    svg.push_str("</svg>\n");

    fs::write(svg_path, svg).map_err(|e| Error::io(svg_path, e))?;
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(csv_path)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
