//! Command-line frontend.
//!
//! Settings resolve as command-line flags, then the `--config` JSON file,
//! then built-in defaults. Every command that writes an output directory
//! also writes the resolved settings there as `config.json`.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{compositional_estimate, run_sequence, EstimatorConfig, GaussNewton, StepRecord};
use crate::kitti_io::{self, PlotSeries, SequenceManifest, DEFAULT_DEPTH_SCALE};
use crate::losses::LossReport;
use crate::metrics::{self, sig6, AteResult};
use crate::se3::{Twist, SE3};
use crate::synth::{self, SceneConfig, SyntheticScene};

pub const DATA_ROOT_ENV: &str = "COMPVO_DATA_ROOT";

#[derive(Debug, Parser)]
#[command(name = "compvo", version, about = "Direct monocular visual odometry with compositional re-estimation")]
pub struct Cli {
    /// Log filter, e.g. `info` or `compvo=debug`.
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the motion between a target and a source frame.
    Align(AlignArgs),
    /// Estimate the trajectory of a KITTI-layout sequence.
    Run(RunArgs),
    /// Compare a predicted trajectory with ground truth.
    Eval(EvalArgs),
    /// Render a synthetic sequence in the KITTI layout.
    SynthGen(SynthArgs),
    /// Plot trajectories top-down as SVG (plus CSV).
    Plot(PlotArgs),
}

/// Estimator overrides shared by `align` and `run`.
#[derive(Debug, Clone, Default, Args)]
pub struct EstimatorArgs {
    /// Re-estimation steps per source.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub pyramid_levels: Option<usize>,
    #[arg(long)]
    pub max_inner_iterations: Option<usize>,
    #[arg(long)]
    pub damping_init: Option<f64>,
    #[arg(long)]
    pub convergence_tol: Option<f64>,
    #[arg(long)]
    pub max_rotation: Option<f64>,
    #[arg(long)]
    pub max_translation: Option<f64>,
    #[arg(long)]
    pub lambda_ph: Option<f64>,
    #[arg(long)]
    pub lambda_d: Option<f64>,
    #[arg(long)]
    pub lambda_s: Option<f64>,
    #[arg(long)]
    pub lambda_e: Option<f64>,
    #[arg(long)]
    pub regularize_masks: Option<bool>,
    /// JSON file with any of the settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    /// Depth of the target frame (16-bit PNG or raw `.f32`).
    #[arg(long)]
    pub depth: PathBuf,
    /// Calibration file with a `P0:` line.
    #[arg(long)]
    pub calib: PathBuf,
    /// Image size the calibration refers to, if frames were resized.
    #[arg(long, num_args = 2, value_names = ["W", "H"])]
    pub calib_size: Option<Vec<usize>>,
    #[arg(long)]
    pub depth_scale: Option<f64>,
    /// Where to write the warped source; defaults to `<source>_warped.png`.
    #[arg(long)]
    pub warped_out: Option<PathBuf>,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Sequence directory, or a sequence id under `$COMPVO_DATA_ROOT/sequences`.
    pub sequence: PathBuf,
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Odd snippet length.
    #[arg(long)]
    pub snippet: Option<usize>,
    /// Worker threads for snippet-level parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Also write `trajectory.svg` (with ground truth when available).
    #[arg(long)]
    pub plot: bool,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub snippet: usize,
    #[arg(long, default_value = "pred")]
    pub label: String,
    /// Write metrics as CSV to this path.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Scene JSON; omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "00")]
    pub id: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct PlotArgs {
    /// `LABEL=PATH` pose files; a label of `gt` is drawn as ground truth.
    #[arg(long = "traj", required = true, value_parser = parse_labelled)]
    pub trajectories: Vec<(String, PathBuf)>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_labelled(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((l, p)) if !l.is_empty() && !p.is_empty() => Ok((l.to_string(), PathBuf::from(p))),
        _ => Ok((
            Path::new(s).file_stem().and_then(|x| x.to_str()).unwrap_or(s).to_string(),
            PathBuf::from(s),
        )),
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub estimator: EstimatorConfig,
    pub snippet: usize,
    pub jobs: usize,
    /// Depth PNG divisor; the sequence manifest's value when unset.
    pub depth_scale: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            estimator: EstimatorConfig::default(),
            snippet: 3,
            jobs: 1,
            depth_scale: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    fn resolve(args: &EstimatorArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let e = &mut cfg.estimator;
        macro_rules! set {
            ($($field:ident => $dst:expr),* $(,)?) => {
                $(if let Some(v) = args.$field { $dst = v; })*
            };
        }
        set!(
            steps => e.steps,
            pyramid_levels => e.pyramid_levels,
            max_inner_iterations => e.max_inner_iterations,
            damping_init => e.damping_init,
            convergence_tol => e.convergence_tol,
            max_rotation => e.max_rotation,
            max_translation => e.max_translation,
            lambda_ph => e.weights.lambda_ph,
            lambda_d => e.weights.lambda_d,
            lambda_s => e.weights.lambda_s,
            lambda_e => e.weights.lambda_e,
            regularize_masks => e.regularize_masks,
        );
        e.validate()?;
        Ok(cfg)
    }

    fn write_to(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AlignReport {
    pub twist: Twist,
    /// Target→source transform.
    pub pose: SE3,
    pub loss: LossReport,
    pub masked_photometric: f64,
    pub trace: Vec<StepRecord>,
    pub warped: PathBuf,
    pub config: RunConfig,
}

pub fn cmd_align(args: &AlignArgs) -> Result<AlignReport> {
    let mut cfg = RunConfig::resolve(&args.estimator)?;
    if args.depth_scale.is_some() {
        cfg.depth_scale = args.depth_scale;
    }
    let target = kitti_io::load_gray(&args.target)?;
    let source = kitti_io::load_gray(&args.source)?;
    let (w, h) = target.dims();
    let k = match args.calib_size.as_deref() {
        Some(&[cw, ch]) => kitti_io::load_intrinsics(&args.calib, cw, ch)?.resized_to(w, h)?,
        _ => kitti_io::load_intrinsics(&args.calib, w, h)?,
    };
    let depth = kitti_io::load_depth(&args.depth, cfg.depth_scale.unwrap_or(DEFAULT_DEPTH_SCALE), Some((w, h)))?;
    let est = compositional_estimate(&target, &[source], &depth, &k, &cfg.estimator, &GaussNewton)?;
    let warped_path = args.warped_out.clone().unwrap_or_else(|| {
        let stem = args.source.file_stem().and_then(|s| s.to_str()).unwrap_or("source");
        args.source.with_file_name(format!("{stem}_warped.png"))
    });
    kitti_io::save_gray_png16(&est.warped[0], &warped_path)?;
    let masked_photometric = est.final_masked_photometric(&target)?;
    Ok(AlignReport {
        twist: est.poses[0].to_twist(),
        pose: est.poses[0],
        loss: est.loss,
        masked_photometric,
        trace: est.trace.records,
        warped: warped_path,
        config: cfg,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub sequence_dir: PathBuf,
    pub trajectory: PathBuf,
    pub losses: PathBuf,
    pub frames: usize,
    pub failed_windows: Vec<usize>,
    pub plot: Option<PathBuf>,
}

fn resolve_sequence_dir(args: &RunArgs) -> Result<PathBuf> {
    if args.sequence.is_dir() {
        return Ok(args.sequence.clone());
    }
    if let Some(root) = &args.data_root {
        let p = root.join("sequences").join(&args.sequence);
        if p.is_dir() {
            return Ok(p);
        }
    }
    Err(Error::io(
        &args.sequence,
        std::io::Error::new(std::io::ErrorKind::NotFound, "sequence directory not found"),
    ))
}

/// Runs odometry on a sequence, writing into `args.out`:
/// `trajectory.txt`, `losses.csv` (one row per snippet), `trace.jsonl`,
/// `config.json` and optionally `trajectory.svg`/`.csv`.
///
/// Outputs are written even if some snippets fail; the error is returned
/// afterwards.
pub fn cmd_run(args: &RunArgs) -> Result<RunReport> {
    let mut cfg = RunConfig::resolve(&args.estimator)?;
    if let Some(s) = args.snippet {
        cfg.snippet = s;
    }
    if let Some(j) = args.jobs {
        cfg.jobs = j;
    }
    if cfg.jobs == 0 {
        return Err(Error::invalid("--jobs must be at least 1"));
    }
    let seq_dir = resolve_sequence_dir(args)?;
    let mut manifest = SequenceManifest::discover(&seq_dir)?;
    if let Some(s) = cfg.depth_scale {
        manifest.depth_scale = s;
    }
    let seq = kitti_io::load_sequence(&manifest)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    cfg.write_to(&args.out)?;

    let run = run_sequence(
        &seq.frames,
        &seq.depths,
        &seq.intrinsics,
        &cfg.estimator,
        cfg.snippet,
        &GaussNewton,
        cfg.jobs,
    )?;

    let traj_path = args.out.join("trajectory.txt");
    kitti_io::save_trajectory(&run.trajectory, &traj_path)?;

    let loss_path = args.out.join("losses.csv");
    write_snippet_losses(&loss_path, &run.windows)?;

    let trace_path = args.out.join("trace.jsonl");
    let mut trace = String::new();
    for w in &run.windows {
        if let Some(t) = &w.trace {
            for rec in &t.records {
                let line = serde_json::json!({ "center": w.center, "frame": w.sources[rec.source], "record": rec });
                trace.push_str(&line.to_string());
                trace.push('\n');
            }
        }
    }
    fs::write(&trace_path, trace).map_err(|e| Error::io(&trace_path, e))?;

    let plot = if args.plot {
        let svg = args.out.join("trajectory.svg");
        let mut series = vec![PlotSeries {
            label: "estimate",
            trajectory: &run.trajectory,
        }];
        if let Some(gt) = &seq.ground_truth {
            series.insert(0, PlotSeries { label: "gt", trajectory: gt });
        }
        kitti_io::emit_plot(&series, &svg)?;
        Some(svg)
    } else {
        None
    };

    let failed: Vec<usize> = run.windows.iter().filter(|w| w.error.is_some()).map(|w| w.center).collect();
    if !failed.is_empty() {
        return Err(Error::EstimationFailure {
            reason: format!(
                "{} of {} snippets failed (centres {:?}); outputs written to {}",
                failed.len(),
                run.windows.len(),
                failed,
                args.out.display()
            ),
            trace: None,
        });
    }
    Ok(RunReport {
        sequence_dir: seq_dir,
        trajectory: traj_path,
        losses: loss_path,
        frames: run.trajectory.len(),
        failed_windows: failed,
        plot,
    })
}

fn write_snippet_losses(path: &Path, windows: &[crate::estimator::WindowResult]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut wtr = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    wtr.write_record(["center", "photometric", "dssim", "smoothness", "mask_reg", "total"])
        .map_err(csv_err)?;
    for w in windows {
        let mut rec = vec![w.center.to_string()];
        match &w.loss {
            Some(l) => rec.extend([l.photometric, l.dssim, l.smoothness, l.mask_reg, l.total].iter().map(|v| kitti_io::format_real(*v))),
            None => rec.extend(std::iter::repeat_n(String::new(), 5)),
        }
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub label: String,
    pub snippet: AteResult,
    /// `None` when fewer than three poses are available.
    pub full: Option<f64>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut out = metrics::format_ate_table(&[(self.label.clone(), self.snippet.clone())]);
        match self.full {
            Some(f) => out.push_str(&format!("full-trajectory ATE: {}\n", sig6(f))),
            None => out.push_str("full-trajectory ATE: n/a (fewer than 3 poses)\n"),
        }
        out
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let pred = kitti_io::load_poses(&args.pred)?;
    let gt = kitti_io::load_poses(&args.gt)?;
    let snippet = metrics::ate_snippet(&pred, &gt, args.snippet)?;
    let full = if pred.len() >= 3 { Some(metrics::ate_full(&pred, &gt)?) } else { None };
    let report = EvalReport {
        label: args.label.clone(),
        snippet,
        full,
    };
    if let Some(path) = &args.csv {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "label,snippet_mean,snippet_std,snippets,full_ate").map_err(|e| Error::io(path, e))?;
        writeln!(
            w,
            "{},{},{},{},{}",
            report.label,
            report.snippet.mean,
            report.snippet.std,
            report.snippet.values.len(),
            report.full.map(kitti_io::format_real).unwrap_or_default()
        )
        .map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

/// Renders the configured scene; returns the sequence directory.
pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<SceneConfig>(&text).map_err(|e| Error::Parse {
                path: p.clone(),
                line: e.line(),
                message: e.to_string(),
            })?
        }
        None => SceneConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.frames {
        cfg.frames = n;
    }
    let scene = SyntheticScene::from_config(&cfg)?;
    let seq = synth::make_sequence(&scene, &cfg.motion, cfg.frames)?;
    let dir = synth::write_sequence(&seq, &scene.intrinsics, &args.out, &args.id)?;
    let path = dir.join("scene.json");
    let json = serde_json::to_string_pretty(&serde_json::json!({ "config": cfg, "scene": scene }))
        .expect("scene serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

pub fn cmd_plot(args: &PlotArgs) -> Result<PathBuf> {
    let loaded = args
        .trajectories
        .iter()
        .map(|(l, p)| kitti_io::load_poses(p).map(|t| (l.clone(), t)))
        .collect::<Result<Vec<_>>>()?;
    let series: Vec<PlotSeries<'_>> = loaded
        .iter()
        .map(|(l, t)| PlotSeries { label: l, trajectory: t })
        .collect();
    kitti_io::emit_plot(&series, &args.out)
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

/// Executes a parsed command, printing its report to stdout.
pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Align(a) => print_json(&cmd_align(a)?),
        Command::Run(a) => {
            let r = cmd_run(a)?;
            println!("wrote {} poses to {}", r.frames, r.trajectory.display());
            println!("snippet losses: {}", r.losses.display());
            if let Some(p) = r.plot {
                println!("plot: {}", p.display());
            }
        }
        Command::Eval(a) => print!("{}", cmd_eval(a)?.table()),
        Command::SynthGen(a) => println!("wrote {}", cmd_synth(a)?.display()),
        Command::Plot(a) => {
            let csv = cmd_plot(a)?;
            println!("wrote {} and {}", a.out.display(), csv.display());
        }
    }
    Ok(())
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidArgument(_) => "invalid_argument",
        Error::InvalidDepth(_) => "invalid_depth",
        Error::Parse { .. } => "parse",
        Error::Data(_) => "data",
        Error::Io { .. } => "io",
        Error::Image { .. } => "image",
        Error::EstimationFailure { .. } => "estimation_failure",
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Errors are reported on stderr as a single JSON object.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = serde_json::json!({
                "error": error_kind(&e),
                "message": e.to_string(),
                "exit_code": e.exit_code(),
            });
            eprintln!("{msg}");
            e.exit_code()
        }
    }
}
