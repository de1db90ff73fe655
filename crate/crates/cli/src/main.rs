use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dogs_core::metrics::{evaluate, training_views};
use dogs_core::render::render;
use dogs_core::report::{write_report, write_run, RunRecord};
use dogs_core::runtime::{join, run_local_sockets, run_simulated, serve, RunConfig};
use dogs_core::scene::{
    load_checkpoint, load_scene, save_checkpoint, GaussianCloud, Image, SceneDataset,
};
use dogs_core::split::{partition_scene, split_recursive, svg_diagram, PartitionManifest};
use dogs_core::synth::{generate_scene, SceneSpec};
use dogs_core::trainer::{initialize_gaussians, train_centralized};

#[derive(Parser)]
#[command(
    name = "dogs",
    version,
    about = "Distributed Gaussian-splat training with consensus ADMM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic scene with ground-truth images.
    Gen(GenArgs),
    /// Partition a scene into blocks and write the manifest.
    Split(SplitArgs),
    /// Train centrally or distributed.
    Train(TrainArgs),
    /// Render one view of a model.
    Render(RenderArgs),
    /// Score a model on the held-out views.
    Eval(EvalArgs),
    /// Build CSV tables and image strips from a directory of runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON scene spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gaussians: Option<usize>,
    #[arg(long)]
    cameras: Option<usize>,
    #[arg(long)]
    image_size: Option<u32>,
    #[arg(long)]
    extent: Option<f64>,
}

/// Overrides shared by `split` and `train`.
#[derive(Args)]
struct RunFlags {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "workers")]
    workers: Option<usize>,
    /// Bounding-box expansion factor `s`.
    #[arg(long)]
    expansion: Option<f64>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Simulated,
    Sockets,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Run directory for `run.json`, the model and diagnostics.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
    #[arg(long, value_enum, default_value = "simulated")]
    mode: Mode,
    #[arg(long)]
    consensus_interval: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Disable consensus: blocks train independently and merge at the end.
    #[arg(long)]
    no_consensus: bool,
    #[arg(long)]
    no_adapt: bool,
    #[arg(long)]
    no_relax: bool,
    /// Act as master and wait for workers on this address.
    #[arg(long, conflicts_with = "join")]
    listen: Option<String>,
    /// Act as the worker for `--block` and connect to this master.
    #[arg(long, requires = "block")]
    join: Option<String>,
    #[arg(long)]
    block: Option<u16>,
    /// Train one model on all training views.
    #[arg(long, conflicts_with_all = ["listen", "join"])]
    centralized: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Index into the scene's view list.
    #[arg(long)]
    view: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory whose subdirectories are runs.
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(serde_json::from_slice(&bytes)
                .with_context(|| format!("parsing {}", p.display()))?)
        }
        None => Ok(T::default()),
    }
}

fn load_dataset(scene: &Path) -> Result<(SceneDataset, Vec<Image>)> {
    let dataset = load_scene(scene).with_context(|| format!("loading {}", scene.display()))?;
    let images = dataset.load_images(scene.parent().unwrap_or(Path::new(".")))?;
    Ok((dataset, images))
}

fn run_config(flags: &RunFlags) -> Result<RunConfig> {
    let mut cfg: RunConfig = read_json(flags.config.as_deref())?;
    if let Some(k) = flags.workers {
        cfg.blocks = k;
    }
    if let Some(s) = flags.expansion {
        cfg.expansion = s;
    }
    Ok(cfg)
}

fn gen(a: GenArgs) -> Result<serde_json::Value> {
    let mut spec: SceneSpec = read_json(a.config.as_deref())?;
    spec.seed = a.seed.unwrap_or(spec.seed);
    spec.n_gaussians = a.gaussians.unwrap_or(spec.n_gaussians);
    spec.n_cameras = a.cameras.unwrap_or(spec.n_cameras);
    spec.image_size = a.image_size.unwrap_or(spec.image_size);
    spec.extent = a.extent.unwrap_or(spec.extent);
    let scene = generate_scene(&spec)?;
    let path = scene.save(&a.out)?;
    Ok(
        json!({ "scene": path, "views": scene.dataset.views.len(), "points": scene.dataset.points.len() }),
    )
}

fn split(a: SplitArgs) -> Result<serde_json::Value> {
    let cfg = run_config(&a.run)?;
    cfg.validate()?;
    let dataset = load_scene(&a.scene)?;
    let cameras: Vec<_> = training_views(dataset.views.len())
        .into_iter()
        .map(|v| dataset.views[v].clone())
        .collect();
    let points: Vec<[f64; 3]> = dataset.points.iter().map(|p| p.position_f64()).collect();
    let init = initialize_gaussians(&dataset.points, cfg.train.sh_degree, cfg.train.init_opacity);
    let gaussians: Vec<(u64, [f64; 3])> = init
        .ids
        .iter()
        .copied()
        .zip(init.positions.iter().copied())
        .collect();
    let partition = partition_scene(
        &points,
        &cameras,
        &gaussians,
        cfg.blocks,
        cfg.expansion,
        &cfg.split,
    )?;
    let cores = split_recursive(&points, cfg.blocks, &cfg.split)?;
    let manifest = PartitionManifest::new(&partition, &cores, &cameras);
    fs::write(&a.out, serde_json::to_vec_pretty(&manifest)?)?;
    if let Some(svg) = &a.svg {
        fs::write(svg, svg_diagram(&partition, &points, &cameras, &cfg.split))?;
    }
    Ok(
        json!({ "manifest": a.out, "blocks": partition.len(), "shared_gaussians": manifest.shared_gaussians }),
    )
}

fn train(a: TrainArgs) -> Result<serde_json::Value> {
    let mut cfg = run_config(&a.run)?;
    if let Some(n) = a.consensus_interval {
        cfg.consensus.interval = n;
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(alpha) = a.alpha {
        cfg.consensus.alpha = alpha;
    }
    cfg.consensus_enabled &= !a.no_consensus;
    cfg.consensus.adaptive &= !a.no_adapt;
    cfg.consensus.over_relaxation &= !a.no_relax;
    if a.centralized {
        cfg.blocks = 1;
    }
    cfg.validate()?;
    let (dataset, images) = load_dataset(&a.scene)?;

    if let Some(addr) = &a.join {
        let block = a.block.context("--join needs --block")?;
        let summary = join(&dataset, &images, &cfg, block, addr)?;
        return Ok(
            json!({ "block": summary.block_id, "gaussians": summary.gaussians, "rounds": summary.rounds }),
        );
    }
    let Some(out) = a.out else {
        bail!("--out is required unless joining as a worker")
    };
    fs::create_dir_all(&out)?;

    let start = Instant::now();
    let (model, mode, diagnostics): (GaussianCloud, &str, Option<Vec<_>>) = if a.centralized {
        let train = training_views(dataset.views.len());
        let m = train_centralized(&dataset.points, &dataset.views, &images, &train, &cfg.train)?;
        (m, "centralized", None)
    } else {
        let mut diag = BufWriter::new(File::create(out.join(dogs_core::report::DIAGNOSTICS_FILE))?);
        let result = match (&a.listen, a.mode) {
            (Some(addr), _) => serve(&dataset, &images, &cfg, addr, Some(&mut diag)),
            (None, Mode::Simulated) => run_simulated(&dataset, &images, &cfg, Some(&mut diag)),
            (None, Mode::Sockets) => run_local_sockets(&dataset, &images, &cfg, Some(&mut diag)),
        };
        diag.flush()?;
        let outcome = result?;
        let mode = if a.mode == Mode::Sockets || a.listen.is_some() {
            "sockets"
        } else {
            "simulated"
        };
        (outcome.model.export(), mode, Some(outcome.diagnostics))
    };
    let seconds = start.elapsed().as_secs_f64();
    let checkpoint = out.join(dogs_core::report::MODEL_FILE);
    save_checkpoint(&model, &checkpoint)?;
    let model = load_checkpoint(&checkpoint)?;

    let mut metrics = evaluate(&model, &dataset.views, &images, &cfg.train.render)?;
    metrics.train_seconds = seconds;
    metrics.config = serde_json::to_value(&cfg)?;
    let record = RunRecord {
        mode: mode.into(),
        blocks: cfg.blocks,
        expansion: cfg.expansion,
        alpha: cfg.consensus.effective_alpha(),
        adaptive: cfg.consensus.adaptive,
        consensus: cfg.consensus_enabled && cfg.blocks > 1,
        scene: fs::canonicalize(&a.scene)?,
        render: cfg.train.render.clone(),
        metrics,
    };
    write_run(&out, &record, &model, diagnostics.as_deref())?;
    Ok(json!({
        "run": out,
        "mode": mode,
        "psnr": record.metrics.mean_psnr,
        "ssim": record.metrics.mean_ssim,
        "gaussians": model.len(),
        "seconds": seconds,
    }))
}

fn render_view(a: RenderArgs) -> Result<serde_json::Value> {
    let dataset = load_scene(&a.scene)?;
    let model = load_checkpoint(&a.model)?;
    let Some(view) = dataset.views.get(a.view) else {
        bail!(
            "view {} out of range ({} views)",
            a.view,
            dataset.views.len()
        )
    };
    render(&model, view, &Default::default())
        .color
        .save(&a.out)?;
    Ok(json!({ "image": a.out, "view_id": view.view_id }))
}

fn eval(a: EvalArgs) -> Result<serde_json::Value> {
    let (dataset, images) = load_dataset(&a.scene)?;
    let model = load_checkpoint(&a.model)?;
    let report = evaluate(&model, &dataset.views, &images, &Default::default())?;
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(json!({ "psnr": report.mean_psnr, "ssim": report.mean_ssim, "views": report.views.len() }))
}

fn report(a: ReportArgs) -> Result<serde_json::Value> {
    let summary = write_report(&a.runs, &a.out)?;
    Ok(json!({ "runs": summary.runs, "files": summary.files }))
}

/// Variant name of a core error, or `other`.
fn error_kind(e: &anyhow::Error) -> String {
    match e.downcast_ref::<dogs_core::Error>() {
        Some(core) => {
            let dbg = format!("{core:?}");
            dbg.split(|c: char| !c.is_alphanumeric())
                .next()
                .unwrap_or("other")
                .to_string()
        }
        None => "other".into(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render_view(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::debug!("{e:?}");
            println!(
                "{}",
                json!({ "error": format!("{e:#}"), "kind": error_kind(&e) })
            );
            ExitCode::FAILURE
        }
    }
}
