//! Command-line interface: synth, calibrate, sync, reconstruct, evaluate.
//! Exit codes: 0 success, 2 validation error, 3 estimation failure; the
//! specific error name goes to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bundle::BaReport;
use crate::dataset::{
    read_dataset, read_intrinsics, read_scene, read_timemaps, write_dataset, write_intrinsics,
    write_scene, write_timemaps, write_truth, Dataset, IntrinsicsFile,
};
use crate::error::{Error, Result};
use crate::eval::build_report;
use crate::ply::export_ply;
use crate::reconstruct::{
    attach_dynamic_for_eval, calibrate_dataset, reconstruct_scene, ReconstructConfig,
};
use crate::scene::{ReconstructionMode, Scene};
use crate::synth::{degrade, generate, Scenario, SynthConfig};

#[derive(Parser)]
#[command(
    name = "streamsfm",
    about = "3D reconstruction from unsynchronized, uncalibrated camera streams",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Synth(SynthArgs),
    /// Two-view calibration: division coefficients and focal lengths.
    Calibrate(CalibrateArgs),
    /// Pairwise temporal synchronization from object trajectories.
    Sync(SyncArgs),
    /// Full reconstruction in one of the three settings.
    Reconstruct(ReconstructArgs),
    /// Evaluate reconstructed scenes against control points and tracklets.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Generator configuration (JSON); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Apply a degradation scenario after generation:
    /// identity|narrow-band|low-overlap|wide-baseline.
    #[arg(long)]
    degrade: Option<String>,
    /// Override the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated candidate d0 values replacing the default grid.
    #[arg(long)]
    grid: Option<String>,
    /// Allow positive (pincushion) distortion candidates.
    #[arg(long)]
    allow_positive: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SyncArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    data: PathBuf,
    /// so | sd_un | sd_sc
    #[arg(long)]
    mode: String,
    /// Keep alpha fixed at the nominal frame-rate ratio during BA.
    #[arg(long)]
    fix_alpha: bool,
    /// Output directory for scene.json, report.json, scene.ply.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Perturbation added to non-reference clock offsets before BA.
    #[arg(long, default_value_t = 0.0)]
    beta_offset: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Reconstructed scene(s); repeat for multiple settings.
    #[arg(long, required = true)]
    scene: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Emit per-observation residuals as CSV (plot data only).
    #[arg(long)]
    residuals_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Entry point returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap prints its own help/error text
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Sync(args) => cmd_sync(args),
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)?
        }
        None => SynthConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.rng_seed = seed;
    }
    let (dataset, truth) = generate(&cfg)?;
    let (dataset, truth) = match &args.degrade {
        Some(name) => degrade(&dataset, &truth, &cfg, Scenario::parse(name)?)?,
        None => (dataset, truth),
    };
    std::fs::create_dir_all(&args.out)?;
    write_dataset(&args.out, &dataset)?;
    write_truth(&args.out.join("truth.json"), &truth)?;
    println!(
        "synth: {} cameras, {} matches, {} tracklets -> {}",
        dataset.cameras.len(),
        dataset.matches.len(),
        dataset.tracklets.len(),
        args.out.display()
    );
    Ok(())
}

fn reconstruct_config(seed: u64) -> ReconstructConfig {
    let mut cfg = ReconstructConfig::default();
    cfg.ransac.rng_seed = seed;
    cfg.sync.ransac.rng_seed = seed;
    cfg
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let dataset = read_dataset(&args.data)?;
    let mut cfg = reconstruct_config(args.seed);
    cfg.allow_positive_distortion = args.allow_positive;
    let file = match &args.grid {
        Some(spec) => {
            let values: Vec<f64> = spec
                .split(',')
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|_| {
                        Error::Config(format!("cannot parse grid value `{v}`"))
                    })
                })
                .collect::<Result<_>>()?;
            calibrate_with_grid(&dataset, &cfg, &values)?
        }
        None => calibrate_dataset(&dataset, &cfg)?,
    };
    write_intrinsics(&args.data.join("intrinsics.json"), &file)?;
    for cam in &file.cameras {
        println!(
            "calibrate: camera {} f={:.2}px d0={:.3e}",
            cam.id, cam.f, cam.d0
        );
    }
    Ok(())
}

/// Calibration with a user-provided candidate list; used by `--grid`.
fn calibrate_with_grid(
    dataset: &Dataset,
    cfg: &ReconstructConfig,
    values: &[f64],
) -> Result<IntrinsicsFile> {
    // reuse the default path by substituting the grid through the config:
    // the calibration routine builds its grid from the default generator, so
    // pair the provided values directly here.
    crate::reconstruct::calibrate_dataset_with_values(dataset, cfg, values)
}

fn cmd_sync(args: SyncArgs) -> Result<()> {
    let dataset = read_dataset(&args.data)?;
    let cfg = reconstruct_config(args.seed);
    let intrinsics_path = args.data.join("intrinsics.json");
    let calib = if intrinsics_path.exists() {
        read_intrinsics(&intrinsics_path)?
    } else {
        calibrate_dataset(&dataset, &cfg)?
    };
    let intrinsics: Vec<crate::camera::Intrinsics> = calib
        .cameras
        .iter()
        .zip(&dataset.cameras)
        .map(|(r, rec)| crate::camera::Intrinsics {
            f: r.f,
            cx: r.cx,
            cy: r.cy,
            d0: r.d0,
            image_w: rec.image_w,
            image_h: rec.image_h,
        })
        .collect();
    let segments = crate::reconstruct::build_track_segments(&dataset, &intrinsics, &cfg)?;
    let pairs = crate::reconstruct::sync_all_pairs(&dataset, &segments, &cfg)?;
    if pairs.is_empty() {
        return Err(Error::SyncFailed(
            "no camera pair could be synchronized".to_string(),
        ));
    }
    let file = crate::reconstruct::timemaps_file_from_pairs(&pairs, dataset.cameras.len())?;
    write_timemaps(&args.data.join("timemaps.json"), &file)?;
    for p in &file.pairs {
        println!(
            "sync: pair ({}, {}) alpha={:.6} beta={:.3} inliers={}",
            p.cam_i, p.cam_j, p.alpha, p.beta, p.inlier_samples
        );
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ReportJson {
    mode: String,
    ba: BaReport,
    cameras: Vec<ReportCamera>,
}

#[derive(Serialize, Deserialize)]
struct ReportCamera {
    id: usize,
    focal_init: f64,
    focal_optimized: f64,
    d0: f64,
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<()> {
    let mode = ReconstructionMode::parse(&args.mode)?;
    let dataset = read_dataset(&args.data)?;
    let mut cfg = reconstruct_config(args.seed);
    cfg.fix_alpha = args.fix_alpha;
    cfg.beta_init_offset_frames = args.beta_offset;

    let intrinsics_path = args.data.join("intrinsics.json");
    let calibration = intrinsics_path
        .exists()
        .then(|| read_intrinsics(&intrinsics_path))
        .transpose()?;
    let timemaps_path = args.data.join("timemaps.json");
    let timemaps = (mode.uses_dynamic() && timemaps_path.exists())
        .then(|| read_timemaps(&timemaps_path))
        .transpose()?;

    let (scene, report, _artifacts) =
        reconstruct_scene(&dataset, mode, &cfg, calibration, timemaps)?;

    let out_dir = args.out.clone().unwrap_or_else(|| args.data.clone());
    std::fs::create_dir_all(&out_dir)?;
    write_scene(&out_dir.join("scene.json"), &scene)?;
    let report_json = ReportJson {
        mode: mode.as_str().to_string(),
        ba: report.clone(),
        cameras: scene
            .cameras
            .iter()
            .enumerate()
            .map(|(i, c)| ReportCamera {
                id: c.stream.id,
                focal_init: scene.focal_init[i],
                focal_optimized: c.intrinsics.f,
                d0: c.intrinsics.d0,
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&report_json)?;
    text.push('\n');
    std::fs::write(out_dir.join("report.json"), text)?;
    export_ply(&scene, &out_dir.join("scene.ply"))?;
    println!(
        "reconstruct ({}): cost {:.3e} -> {:.3e} in {} iterations; static rms {:.4}px dynamic rms {:.4}px",
        mode.as_str(),
        report.initial_cost,
        report.final_cost,
        report.iterations,
        report.rms_static_px,
        report.rms_dynamic_px
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let dataset = read_dataset(&args.data)?;
    let cfg = reconstruct_config(args.seed);
    let mut scenes: Vec<Scene> = Vec::new();
    for path in &args.scene {
        let scene = read_scene(path)?;
        // scenes without trajectories still get an e_traj column: rebuild
        // the dynamic part around the fixed cameras
        let scene = if scene.dynamic_objects.is_empty() && !dataset.tracklets.is_empty() {
            attach_dynamic_for_eval(&scene, &dataset, &cfg)?
        } else {
            scene
        };
        scenes.push(scene);
    }
    let name = args
        .data
        .file_name()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| args.data.display().to_string());
    let report = build_report(&name, &dataset, &scenes)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.data.join("eval.json"));
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(&out, text)?;

    if let Some(csv_path) = &args.residuals_csv {
        write_residuals_csv(csv_path, &scenes, &dataset)?;
    }

    for mode in &report.modes {
        let fmt = |v: &Vec<(usize, f64)>| {
            v.iter()
                .map(|(c, e)| format!("cam{c}={e:.3}px"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        println!(
            "evaluate ({}): e_cp [{}] e_traj [{}] success={}",
            mode.mode,
            fmt(&mode.e_cp),
            fmt(&mode.e_traj),
            mode.success
        );
    }
    Ok(())
}

/// Per-observation residuals for plotting: control-point reprojections and
/// trajectory sample reprojections, one row each.
fn write_residuals_csv(path: &Path, scenes: &[Scene], dataset: &Dataset) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "mode,kind,camera,u,v,err_px")?;
    for scene in scenes {
        for cp in &dataset.control_points {
            let cam_i = &scene.cameras[cp.cam_i];
            let cam_j = &scene.cameras[cp.cam_j];
            let Ok(x) = crate::epipolar::triangulate(&[(cam_i, cp.p1), (cam_j, cp.p2)]) else {
                continue;
            };
            for (idx, cam, obs) in [(cp.cam_i, cam_i, cp.p1), (cp.cam_j, cam_j, cp.p2)] {
                if let Ok(p) = crate::camera::project(&x, cam) {
                    writeln!(
                        f,
                        "{},cp,{},{},{},{}",
                        scene.mode.as_str(),
                        idx,
                        obs.x,
                        obs.y,
                        (p - obs).norm()
                    )?;
                }
            }
        }
        for obj in &scene.dynamic_objects {
            for tr in &obj.tracklets {
                let tm = &scene.time_maps[tr.camera];
                let cam = &scene.cameras[tr.camera];
                for (frame, obs) in &tr.samples {
                    let tau = tm.map(*frame);
                    if !obj.spline.contains(tau) {
                        continue;
                    }
                    let Ok(p) = crate::camera::project(&obj.spline.eval_unchecked(tau), cam)
                    else {
                        continue;
                    };
                    writeln!(
                        f,
                        "{},traj,{},{},{},{}",
                        scene.mode.as_str(),
                        tr.camera,
                        obs.x,
                        obs.y,
                        (p - obs).norm()
                    )?;
                }
            }
        }
    }
    Ok(())
}
