//! `gaussba`: generate synthetic scenes, train, evaluate checkpoints and run
//! the ablation grid.
//!
//! Exit codes: 0 on success, 1 on numeric or validation failures, 2 on usage
//! or I/O errors. `GAUSSBA_THREADS` caps the worker pool.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gaussba::eval::{evaluate_novel_views, pose_metrics, AlignmentMode, NovelViewReport, PoseMetrics};
use gaussba::scene::{
    generate_synthetic, load_scene_bundle, save_scene_bundle, Connectivity, Drift, Scene, SyntheticSpec, Trajectory,
};
use gaussba::trainer::{ablation_configs, patch_config, train_with, Checkpoint, SummaryRecord, TrainConfig};
use gaussba::Error;

#[derive(Parser)]
#[command(name = "gaussba", version, about = "Joint pose and Gaussian-splat optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene with ground truth and drifted poses.
    Generate(GenerateArgs),
    /// Train on a scene, writing checkpoints and a JSON-lines summary.
    Train(TrainArgs),
    /// Score a checkpoint against a scene's ground truth.
    Eval(EvalArgs),
    /// Train every ablation configuration and tabulate the results.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TrajectoryArg {
    Ring,
    Arc,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 20)]
    views: usize,
    #[arg(long, default_value_t = 5)]
    test_views: usize,
    #[arg(long, default_value_t = 500)]
    gaussians: usize,
    /// Image size as WIDTHxHEIGHT.
    #[arg(long, default_value = "64x64", value_parser = parse_resolution)]
    resolution: (usize, usize),
    #[arg(long, value_enum, default_value_t = TrajectoryArg::Ring)]
    trajectory: TrajectoryArg,
    /// Link each view to the next K views only; all pairs when omitted.
    #[arg(long, value_name = "K")]
    neighbors: Option<usize>,
    #[arg(long, default_value_t = 200)]
    correspondences: usize,
    /// Shared rotation drift, degrees.
    #[arg(long, default_value_t = 2.0)]
    shared_rot: f64,
    /// Shared translation drift as a fraction of the scene extent.
    #[arg(long, default_value_t = 0.02)]
    shared_trans: f64,
    /// Per-axis rotation jitter, degrees.
    #[arg(long, default_value_t = 0.5)]
    jitter_rot: f64,
    /// Per-axis translation jitter as a fraction of the scene extent.
    #[arg(long, default_value_t = 0.005)]
    jitter_trans: f64,
    /// Noise on the initialization points.
    #[arg(long, default_value_t = 0.02)]
    init_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

/// Flags shared by `train` and `ablate` that build a [`TrainConfig`].
#[derive(Args)]
struct ConfigArgs {
    /// JSON file with any subset of the training config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config field, e.g. `--set lr.refiner=3e-3`. Values are JSON.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignmentArg {
    Centers,
    CentersAndOrientation,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_enum, default_value_t = AlignmentArg::Centers)]
    mode: AlignmentArg,
    /// Multiplier on translation errors.
    #[arg(long, default_value_t = 1.0)]
    ate_scale: f64,
    /// Index gap of the pairs used for relative errors.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Test-time pose steps per held-out view; 0 skips novel-view scoring.
    #[arg(long, default_value_t = 300)]
    test_time_steps: usize,
    #[arg(long, default_value_t = 5e-3)]
    test_time_lr: f64,
    /// Metrics file; defaults to `eval.json` beside the checkpoint.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, required_unless_present = "dry_run")]
    scene: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, required_unless_present = "dry_run")]
    out_dir: Option<PathBuf>,
    /// Print the resolved configurations and exit.
    #[arg(long)]
    dry_run: bool,
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad size {v:?}: {e}"));
    Ok((parse(w)?, parse(h)?))
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_numeric() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(f) = configure_threads() {
        eprintln!("error: {}", f.message);
        return ExitCode::from(f.code);
    }
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("GAUSSBA_THREADS") else {
        return Ok(());
    };
    let threads: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| Failure {
        code: 2,
        message: format!("GAUSSBA_THREADS must be a positive integer, got {value:?}"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure {
            code: 2,
            message: format!("thread pool: {e}"),
        })
}

fn generate(a: GenerateArgs) -> CliResult<()> {
    let spec = SyntheticSpec {
        num_views: a.views,
        num_test_views: a.test_views,
        num_gaussians: a.gaussians,
        width: a.resolution.0,
        height: a.resolution.1,
        trajectory: match a.trajectory {
            TrajectoryArg::Ring => Trajectory::Ring,
            TrajectoryArg::Arc => Trajectory::Arc,
        },
        connectivity: a.neighbors.map_or(Connectivity::Full, Connectivity::KNearest),
        correspondences_per_edge: a.correspondences,
        drift: Drift {
            shared_rotation_deg: a.shared_rot,
            shared_translation: a.shared_trans,
            jitter_rotation_deg: a.jitter_rot,
            jitter_translation: a.jitter_trans,
        },
        init_point_noise: a.init_noise,
        seed: a.seed,
        ..SyntheticSpec::standard_benchmark(a.seed)
    };
    let synthetic = generate_synthetic(&spec)?;
    let scene: Scene = synthetic.into();
    save_scene_bundle(&scene, &a.out)?;
    let drift = pose_metrics(
        &scene.graph.initial_poses,
        scene.gt_poses.as_deref().unwrap_or_default(),
        1.0,
        AlignmentMode::Centers,
        1,
    )?;
    println!(
        "wrote {}: {} views, {} edges, {} Gaussians, initial rotation error {:.4} deg, ATE {:.5}",
        a.out.display(),
        scene.graph.num_views(),
        scene.graph.edges.len(),
        spec.num_gaussians,
        drift.rotation_error_deg,
        drift.ate_rmse
    );
    Ok(())
}

/// Nested JSON object for a dotted key, e.g. `lr.refiner=1e-3`.
fn override_patch(assignment: &str) -> CliResult<serde_json::Value> {
    let usage = |m: String| Failure { code: 2, message: m };
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("override {assignment:?} is not KEY=VALUE")))?;
    // Bare words are taken as strings so `--set pose_mode=direct` works.
    let mut value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    for part in key.split('.').rev() {
        if part.is_empty() {
            return Err(usage(format!("override key {key:?} has an empty segment")));
        }
        value = serde_json::json!({ part: value });
    }
    Ok(value)
}

fn resolve_config(a: &ConfigArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::from_json_file(path)?,
        None => TrainConfig::default(),
    };
    for assignment in &a.overrides {
        cfg = patch_config(&cfg, &override_patch(assignment)?.to_string())?;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_failure(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_failure(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_failure(path, e))
}

/// Trains into `out_dir`: the resolved config, `summary.jsonl`,
/// `timing.jsonl`, a checkpoint per summary record and `checkpoint.json`
/// for the final state.
fn run_training(scene: &Scene, cfg: &TrainConfig, out_dir: &Path, label: &str) -> CliResult<Option<SummaryRecord>> {
    create_dir(out_dir)?;
    write_json(&out_dir.join("config.json"), cfg)?;
    let summary_path = out_dir.join("summary.jsonl");
    let mut summary = BufWriter::new(File::create(&summary_path).map_err(|e| io_failure(&summary_path, e))?);
    let mut write_err: Option<Failure> = None;
    let run = train_with(scene, cfg, |state, record| {
        let line = serde_json::to_string(record).expect("summary records serialize");
        if let Err(e) = writeln!(summary, "{line}").and_then(|_| summary.flush()) {
            write_err = Some(io_failure(&summary_path, e));
            return Err(Error::Io(std::io::Error::other("summary write failed")));
        }
        let ckpt_path = out_dir.join(format!("checkpoint_{:06}.json", record.iteration));
        state.checkpoint(scene)?.save(&ckpt_path)?;
        let pose = record
            .pose
            .map(|p| format!(" rot {:.4} deg ATE {:.5}", p.rotation_error_deg, p.ate_rmse))
            .unwrap_or_default();
        eprintln!("[{label}] it {:6} L_orig {:.5}{pose}", record.iteration, record.l_orig);
        Ok(())
    });
    let run = match run {
        Ok(run) => run,
        Err(e) => return Err(write_err.unwrap_or_else(|| e.into())),
    };
    let timing_path = out_dir.join("timing.jsonl");
    let timing: String = run
        .timing
        .iter()
        .map(|t| serde_json::to_string(t).expect("timing records serialize") + "\n")
        .collect();
    fs::write(&timing_path, timing).map_err(|e| io_failure(&timing_path, e))?;
    run.state.checkpoint(scene)?.save(&out_dir.join("checkpoint.json"))?;
    Ok(run.summary.last().cloned())
}

fn load_bundle(path: &Path) -> CliResult<Scene> {
    if !path.exists() {
        return Err(Failure {
            code: 2,
            message: format!("scene file {} does not exist", path.display()),
        });
    }
    Ok(load_scene_bundle(path)?)
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let scene = load_bundle(&a.scene)?;
    let cfg = resolve_config(&a.config)?;
    let last = run_training(&scene, &cfg, &a.out_dir, "train")?;
    match last {
        Some(r) => println!("{}", serde_json::to_string(&r).expect("summary records serialize")),
        None => println!("no iterations run"),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    iteration: usize,
    pose: Option<PoseMetrics>,
    novel_view: Option<NovelViewReport>,
}

fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    let scene = load_bundle(&a.scene)?;
    if !a.checkpoint.exists() {
        return Err(io_failure(&a.checkpoint, "checkpoint does not exist"));
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let poses = ckpt.poses();
    let mode = match a.mode {
        AlignmentArg::Centers => AlignmentMode::Centers,
        AlignmentArg::CentersAndOrientation => AlignmentMode::CentersAndOrientation,
    };
    let (pose, novel_view) = match &scene.gt_poses {
        Some(gt) => {
            let metrics = pose_metrics(&poses, gt, a.ate_scale, mode, a.stride)?;
            let nv = if a.test_time_steps > 0 && !scene.test_views.is_empty() {
                Some(evaluate_novel_views(
                    &ckpt.cloud(),
                    &poses,
                    gt,
                    &scene.test_views,
                    a.test_time_steps,
                    a.test_time_lr,
                )?)
            } else {
                None
            };
            (Some(metrics), nv)
        }
        None => {
            log::warn!("scene has no ground-truth poses; nothing to score");
            (None, None)
        }
    };
    let report = EvalReport {
        iteration: ckpt.iteration,
        pose,
        novel_view,
    };
    let out = a
        .out
        .unwrap_or_else(|| a.checkpoint.with_file_name("eval.json"));
    write_json(&out, &report)?;
    println!("{}", serde_json::to_string(&report).expect("reports serialize"));
    Ok(())
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or("-".to_string(), |v| format!("{v:.digits$}"))
}

fn ablate(a: AblateArgs) -> CliResult<()> {
    let base = resolve_config(&a.config)?;
    let rows = ablation_configs(&base)?;
    if a.dry_run {
        for (name, cfg) in &rows {
            println!("{name}: {}", serde_json::to_string(cfg).expect("configs serialize"));
        }
        return Ok(());
    }
    let (Some(scene_path), Some(out_dir)) = (a.scene, a.out_dir) else {
        unreachable!("clap requires both unless --dry-run");
    };
    let scene = load_bundle(&scene_path)?;
    create_dir(&out_dir)?;
    let mut table = String::from("| config | rotation (deg) | ATE | PSNR | SSIM |\n|---|---|---|---|---|\n");
    for (name, cfg) in &rows {
        let last = run_training(&scene, cfg, &out_dir.join(name), name)?;
        let pose = last.as_ref().and_then(|r| r.pose);
        let nv = last.as_ref().and_then(|r| r.novel_view.clone());
        table += &format!(
            "| {name} | {} | {} | {} | {} |\n",
            cell(pose.map(|p| p.rotation_error_deg), 4),
            cell(pose.map(|p| p.ate_rmse), 5),
            cell(nv.as_ref().map(|n| n.psnr), 2),
            cell(nv.as_ref().map(|n| n.ssim), 4),
        );
    }
    let table_path = out_dir.join("ablation.md");
    fs::write(&table_path, &table).map_err(|e| io_failure(&table_path, e))?;
    print!("{table}");
    Ok(())
}
