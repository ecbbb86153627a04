//! Command-line surface: synthesize datasets, train, render, evaluate, and
//! export learned blur fields.
//!
//! Every command is deterministic given its flags and seed. `train` writes
//! its full `RunConfig` to `<out>/config.json` before the first iteration,
//! and `train --config <that file>` reproduces the run bit-exactly.
//!
//! Exit codes: 0 success, 1 usage (bad flags), 2 runtime failure.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use desplat::autodiff::Tensor;
use desplat::blur_synth::{self, BlurKind, SynthConfig};
use desplat::bpn;
use desplat::io::{load_dataset, load_rgb_png, save_gray_png, save_rgb_png, Dataset};
use desplat::losses::{psnr, ssim_metric};
use desplat::rasterizer::{cloud_leaves, rasterize_on_tape, render_at_scale};
use desplat::trainer::{
    self, read_checkpoint, write_checkpoint, ScaleSchedule, Stage, TrainConfig, TrainState,
};
use desplat::Real;

#[derive(Parser)]
#[command(name = "desplat", version, about = "Deblurring Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset with a known degradation.
    Synth(SynthArgs),
    /// Optimize a Gaussian cloud (and blur network) against a dataset.
    Train(TrainArgs),
    /// Render clean views from a checkpoint; the blur network is bypassed.
    Render(RenderArgs),
    /// PSNR/SSIM of rendered images against the dataset's test views.
    Eval(EvalArgs),
    /// Export the learned per-pixel kernels and mask for one training view.
    ExportBlur(ExportBlurArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BlurArg {
    None,
    Motion,
    Defocus,
    Mixres,
}

#[derive(Parser)]
struct SynthArgs {
    /// Dataset directory to create (made if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    blur: BlurArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 24)]
    views: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 80)]
    gaussians: usize,
    /// Fix the motion-blur angle in radians (default: sampled per view).
    #[arg(long)]
    angle: Option<f64>,
    /// Fix the motion-blur length in pixels (default: sampled per view).
    #[arg(long)]
    length: Option<f64>,
    /// Fix the defocus focal depth (default: sampled per view).
    #[arg(long)]
    focus: Option<f64>,
    /// Fix the defocus gain (default: sampled per view).
    #[arg(long)]
    gain: Option<f64>,
}

#[derive(Parser)]
struct TrainArgs {
    /// Dataset directory (as written by `synth`).
    #[arg(long, required_unless_present = "config")]
    dataset: Option<PathBuf>,
    /// Output directory for config.json, loss.csv, checkpoint.bags.
    #[arg(long, required_unless_present = "config")]
    out: Option<PathBuf>,
    /// Full run configuration JSON; takes the place of all other
    /// run-defining flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-stage iteration counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    iters: Option<Vec<usize>>,
    /// Per-stage kernel sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    kernels: Option<Vec<usize>>,
    /// Per-stage scale levels, comma separated.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<u32>>,
    /// Scene-only warm-up iterations at each stage start.
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train the plain splatting baseline without any blur network.
    #[arg(long)]
    no_bpn: bool,
    /// Skip the scene-only warm-up (same as --warmup 0).
    #[arg(long)]
    no_warmup: bool,
    /// Disable adaptive density control.
    #[arg(long)]
    no_densify: bool,
    /// Stop blur-network feature gradients from reaching the scene.
    #[arg(long)]
    detach_bpn_inputs: bool,
    /// Continue from a checkpoint instead of initializing fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write the checkpoint every N iterations.
    #[arg(long)]
    save_every: Option<usize>,
}

#[derive(Parser)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory providing the cameras.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Camera split to render.
    #[arg(long, value_enum, default_value = "test")]
    set: SplitArg,
    /// View indices, comma separated (default: every view in the split).
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<usize>>,
    /// Scale level: 1 is full resolution, each level halves the dims.
    #[arg(long, default_value_t = 1)]
    scale: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Parser)]
struct EvalArgs {
    /// Directory of rendered `NNNN.png` images.
    #[arg(long)]
    renders: PathBuf,
    /// Dataset directory; renders are compared to its test images by id.
    #[arg(long)]
    dataset: PathBuf,
    /// Also write the metrics JSON here (always printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Parser)]
struct ExportBlurArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory providing the training cameras.
    #[arg(long)]
    dataset: PathBuf,
    /// Training view whose blur field to export.
    #[arg(long)]
    view: usize,
    #[arg(long)]
    out: PathBuf,
    /// Kernels are sampled on a grid x grid pixel lattice.
    #[arg(long, default_value_t = 6)]
    grid: usize,
}

/// Everything that defines a training run; the config.json schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunConfig {
    dataset: PathBuf,
    out: PathBuf,
    train: TrainConfig,
}

enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Render(args) => cmd_render(args),
        Command::Eval(args) => cmd_eval(args),
        Command::ExportBlur(args) => cmd_export_blur(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let blur = match args.blur {
        BlurArg::None => BlurKind::None,
        BlurArg::Motion => BlurKind::Motion,
        BlurArg::Defocus => BlurKind::Defocus,
        BlurArg::Mixres => BlurKind::Mixres,
    };
    if args.blur != BlurArg::Motion && (args.angle.is_some() || args.length.is_some()) {
        return Err(usage("--angle/--length only apply to --blur motion"));
    }
    if args.blur != BlurArg::Defocus && (args.focus.is_some() || args.gain.is_some()) {
        return Err(usage("--focus/--gain only apply to --blur defocus"));
    }
    let cfg = SynthConfig {
        seed: args.seed,
        n_gaussians: args.gaussians,
        views: args.views,
        width: args.size,
        height: args.size,
        blur,
        motion_angle: args.angle,
        motion_length: args.length,
        defocus_depth: args.focus,
        defocus_gain: args.gain,
    };
    blur_synth::write_dataset(&args.out, &cfg)?;
    println!(
        "wrote {} train + {} test views to {}",
        args.views,
        args.views,
        args.out.display()
    );
    Ok(())
}

fn build_run_config(args: &TrainArgs) -> Result<RunConfig, CliError> {
    if let Some(path) = &args.config {
        let overrides_given = args.dataset.is_some()
            || args.out.is_some()
            || args.iters.is_some()
            || args.kernels.is_some()
            || args.scales.is_some()
            || args.warmup.is_some()
            || args.seed.is_some()
            || args.no_bpn
            || args.no_warmup
            || args.no_densify
            || args.detach_bpn_inputs;
        if overrides_given {
            return Err(usage(
                "--config carries the full run definition; drop the other run flags",
            ));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        let run: RunConfig = serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        return Ok(run);
    }

    let mut train = TrainConfig::default();
    let defaults = ScaleSchedule::default();
    let n_stages = args
        .scales
        .as_ref()
        .map(Vec::len)
        .or(args.kernels.as_ref().map(Vec::len))
        .or(args.iters.as_ref().map(Vec::len))
        .unwrap_or(defaults.stages.len());
    let expect = |name: &str, got: usize| -> Result<(), CliError> {
        if got == n_stages {
            Ok(())
        } else {
            Err(usage(format!(
                "--{name} lists {got} stages but the schedule has {n_stages}; \
                 give --scales/--kernels/--iters the same length"
            )))
        }
    };
    let scales: Vec<u32> = match &args.scales {
        Some(s) => {
            expect("scales", s.len())?;
            s.clone()
        }
        None => defaults.stages.iter().map(|s| s.scale).collect(),
    };
    let kernels: Vec<usize> = match &args.kernels {
        Some(k) => {
            expect("kernels", k.len())?;
            k.clone()
        }
        None => defaults.stages.iter().map(|s| s.kernel).collect(),
    };
    let iters: Vec<usize> = match &args.iters {
        Some(i) => {
            expect("iters", i.len())?;
            i.clone()
        }
        None => defaults.stages.iter().map(|s| s.iters).collect(),
    };
    if scales.len() != n_stages || kernels.len() != n_stages {
        return Err(usage(
            "--scales/--kernels/--iters must describe the same number of stages",
        ));
    }
    train.schedule = ScaleSchedule {
        stages: scales
            .into_iter()
            .zip(kernels)
            .zip(iters)
            .map(|((scale, kernel), iters)| Stage { scale, kernel, iters })
            .collect(),
        warmup_iters: if args.no_warmup {
            0
        } else {
            args.warmup.unwrap_or(defaults.warmup_iters)
        },
    };
    if let Some(seed) = args.seed {
        train.seed = seed;
    }
    train.use_bpn = !args.no_bpn;
    train.densify_enabled = !args.no_densify;
    train.detach_bpn_inputs = args.detach_bpn_inputs;
    Ok(RunConfig {
        dataset: args.dataset.clone().expect("clap requires --dataset"),
        out: args.out.clone().expect("clap requires --out"),
        train,
    })
}

fn format_row(row: &trainer::LossRow) -> String {
    format!(
        "{},{},{},{},{},{}\n",
        row.iter, row.scale, row.l1, row.dssim, row.mask, row.total
    )
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let run = build_run_config(&args)?;
    run.train
        .schedule
        .validate()
        .map_err(|e| usage(e.to_string()))?;
    std::fs::create_dir_all(&run.out)
        .map_err(|e| anyhow::anyhow!("{}: {e}", run.out.display()))?;
    let config_path = run.out.join("config.json");
    let json = serde_json::to_string_pretty(&run).expect("config serializes");
    std::fs::write(&config_path, json + "\n")
        .map_err(|e| anyhow::anyhow!("{}: {e}", config_path.display()))?;

    let dataset: Dataset<f32> = load_dataset(&run.dataset)?;
    let mut state: TrainState<f32> = match &args.resume {
        Some(ckpt) => read_checkpoint(ckpt)?,
        None => trainer::init_state(&dataset, &run.train)?,
    };

    let csv_path = run.out.join("loss.csv");
    let resuming = args.resume.is_some() && csv_path.exists();
    let mut csv = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(resuming)
            .write(true)
            .truncate(!resuming)
            .open(&csv_path)
            .map_err(|e| anyhow::anyhow!("{}: {e}", csv_path.display()))?,
    );
    if !resuming {
        csv.write_all(b"iter,scale,l1,dssim,mask,total\n")
            .map_err(|e| anyhow::anyhow!("{}: {e}", csv_path.display()))?;
    }

    let total = run.train.schedule.total_iters();
    let ckpt_path = run.out.join("checkpoint.bags");
    eprintln!(
        "training {} iterations over {} stages ({} gaussians seed the cloud)",
        total,
        run.train.schedule.stages.len(),
        state.cloud.len()
    );
    loop {
        let until = match args.save_every {
            Some(k) if k > 0 => ((state.iter / k + 1) * k).min(total),
            _ => total,
        };
        let mut io_err = None;
        trainer::train(&mut state, &dataset, &run.train, Some(until), |row| {
            if let Err(e) = csv.write_all(format_row(row).as_bytes()) {
                io_err.get_or_insert(e);
            }
            if (row.iter + 1) % 500 == 0 || row.iter + 1 == total {
                eprintln!(
                    "iter {}/{} scale {} loss {:.5}",
                    row.iter + 1,
                    total,
                    row.scale,
                    row.total
                );
            }
        })?;
        if let Some(e) = io_err {
            return Err(anyhow::anyhow!("{}: {e}", csv_path.display()).into());
        }
        write_checkpoint(&ckpt_path, &state)?;
        if state.iter >= total {
            break;
        }
    }
    csv.flush()
        .map_err(|e| anyhow::anyhow!("{}: {e}", csv_path.display()))?;
    println!(
        "trained to iteration {} ({} gaussians); checkpoint at {}",
        state.iter,
        state.cloud.len(),
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<(), CliError> {
    if args.scale == 0 {
        return Err(usage("--scale is 1-based"));
    }
    let state: TrainState<f32> = read_checkpoint(&args.checkpoint)?;
    let dataset: Dataset<f32> = load_dataset(&args.dataset)?;
    let split = match args.set {
        SplitArg::Train => &dataset.train,
        SplitArg::Test => &dataset.test,
    };
    let views: Vec<usize> = match args.views {
        Some(v) => v,
        None => (0..split.len()).collect(),
    };
    let missing: Vec<usize> = views.iter().copied().filter(|&v| v >= split.len()).collect();
    if !missing.is_empty() {
        return Err(anyhow::anyhow!(
            "views {missing:?} do not exist; the {} split has {} views",
            match args.set {
                SplitArg::Train => "train",
                SplitArg::Test => "test",
            },
            split.len()
        )
        .into());
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| anyhow::anyhow!("{}: {e}", args.out.display()))?;
    let bg = blur_synth::BACKGROUND.map(|v| v as f32);
    for &v in &views {
        let cam = &split[v].camera;
        let image = render_at_scale(&state.cloud, cam, args.scale, bg)?;
        let scaled = cam.at_scale_level(args.scale);
        let path = args.out.join(format!("{v:04}.png"));
        save_rgb_png(&path, &image.color, scaled.height, scaled.width)?;
    }
    println!("rendered {} views into {}", views.len(), args.out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EvalRow {
    view: usize,
    /// Missing when the pair is identical (infinite PSNR).
    psnr: Option<f64>,
    ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EvalReport {
    views: Vec<EvalRow>,
    mean_psnr: Option<f64>,
    mean_ssim: f64,
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let dataset: Dataset<f32> = load_dataset(&args.dataset)?;
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(&args.renders)
        .map_err(|e| anyhow::anyhow!("{}: {e}", args.renders.display()))?
    {
        let path = entry
            .map_err(|e| anyhow::anyhow!("{}: {e}", args.renders.display()))?
            .path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let id: usize = stem.parse().map_err(|_| {
            anyhow::anyhow!(
                "{}: render names must be zero-padded view ids like 0003.png",
                path.display()
            )
        })?;
        ids.push((id, path));
    }
    if ids.is_empty() {
        return Err(anyhow::anyhow!("{}: no .png renders found", args.renders.display()).into());
    }
    ids.sort();
    let mut rows = Vec::with_capacity(ids.len());
    for (id, path) in ids {
        let gt = dataset.test.get(id).ok_or_else(|| {
            anyhow::anyhow!(
                "render {} has no matching test view (dataset has {})",
                path.display(),
                dataset.test.len()
            )
        })?;
        let (render, h, w) = load_rgb_png::<f32>(&path)?;
        if (h, w) != (dataset.height, dataset.width) {
            return Err(anyhow::anyhow!(
                "{}: {w}x{h} does not match the dataset's {}x{}",
                path.display(),
                dataset.width,
                dataset.height
            )
            .into());
        }
        let p = psnr(&render, &gt.image);
        let s = ssim_metric(
            &Tensor::new(vec![3, h, w], render),
            &Tensor::new(vec![3, h, w], gt.image.clone()),
        );
        rows.push(EvalRow {
            view: id,
            psnr: p.is_finite().then_some(p),
            ssim: s,
        });
    }
    let mean_psnr = if rows.iter().all(|r| r.psnr.is_some()) {
        Some(rows.iter().map(|r| r.psnr.unwrap()).sum::<f64>() / rows.len() as f64)
    } else {
        None
    };
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64;
    let report = EvalReport {
        views: rows,
        mean_psnr,
        mean_ssim,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(out) = &args.out {
        std::fs::write(out, json + "\n").map_err(|e| anyhow::anyhow!("{}: {e}", out.display()))?;
    }
    Ok(())
}

fn cmd_export_blur(args: ExportBlurArgs) -> Result<(), CliError> {
    if args.grid == 0 {
        return Err(usage("--grid must be at least 1"));
    }
    let state: TrainState<f32> = read_checkpoint(&args.checkpoint)?;
    let Some(bpn_params) = &state.bpn else {
        return Err(anyhow::anyhow!(
            "{}: trained without a blur network (--no-bpn); nothing to export",
            args.checkpoint.display()
        )
        .into());
    };
    let dataset: Dataset<f32> = load_dataset(&args.dataset)?;
    if dataset.train.len() != bpn_params.num_views {
        return Err(anyhow::anyhow!(
            "checkpoint expects {} training views but the dataset has {}",
            bpn_params.num_views,
            dataset.train.len()
        )
        .into());
    }
    let Some(view) = dataset.train.get(args.view) else {
        return Err(anyhow::anyhow!(
            "view {} does not exist; the train split has {}",
            args.view,
            dataset.train.len()
        )
        .into());
    };
    // Export at the finest trained scale.
    let head = bpn_params
        .heads
        .iter()
        .min_by_key(|h| h.scale)
        .expect("checkpoint heads are never empty");

    let mut tape = desplat::autodiff::Tape::<f32>::new();
    let cvars = cloud_leaves(&mut tape, &state.cloud);
    let cam = view.camera.at_scale_level(head.scale);
    let render = rasterize_on_tape(&mut tape, &cvars, &cam, blur_synth::BACKGROUND)?;
    let bvars = bpn::bpn_leaves(&mut tape, bpn_params);
    let field = bpn::propose(
        &mut tape,
        &bvars,
        render.color,
        render.depth,
        args.view,
        head.scale,
    )?;
    let (h, w, k) = (cam.height, cam.width, field.k);
    let kernels = tape.value(field.kernels).data();
    let mask = tape.value(field.mask).data().to_vec();

    // P x P lattice of kernels, each tile max-normalized for display.
    let p = args.grid;
    let mut sheet = vec![0.0f32; (p * k) * (p * k)];
    for gi in 0..p {
        let i = ((gi as f64 + 0.5) / p as f64 * h as f64) as usize;
        for gj in 0..p {
            let j = ((gj as f64 + 0.5) / p as f64 * w as f64) as usize;
            let row = &kernels[(i * w + j) * k * k..(i * w + j + 1) * k * k];
            let max = row.iter().copied().fold(f32::MIN, f32::max).max(1e-12);
            for ki in 0..k {
                for kj in 0..k {
                    sheet[(gi * k + ki) * p * k + gj * k + kj] = row[ki * k + kj] / max;
                }
            }
        }
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| anyhow::anyhow!("{}: {e}", args.out.display()))?;
    let kernel_path = args.out.join(format!("kernels_{:04}.png", args.view));
    let mask_path = args.out.join(format!("mask_{:04}.png", args.view));
    save_gray_png(&kernel_path, &sheet, p * k, p * k)?;
    save_gray_png(&mask_path, &mask, h, w)?;
    let mask_mean =
        mask.iter().map(|&v| Real::to_f64(v)).sum::<f64>() / mask.len() as f64;
    let mut note = String::new();
    let _ = write!(
        note,
        "exported {}x{} kernel grid (k={k}, scale {}) and {w}x{h} mask (mean {mask_mean:.3})",
        p, p, head.scale
    );
    println!("{note}");
    Ok(())
}
