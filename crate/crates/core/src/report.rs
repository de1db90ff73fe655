//! Run records and the report built from a directory of them.
//!
//! Every run lives in its own subdirectory holding `run.json`, the final
//! model as a checkpoint and, for distributed runs, the diagnostics stream.
//! [`write_report`] reads nothing else, so re-running it reproduces its output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::admm::RoundDiagnostics;
use crate::error::{Error, Result};
use crate::metrics::{holdout_views, MetricsReport};
use crate::render::{render, RenderConfig};
use crate::scene::{load_checkpoint, load_scene, save_checkpoint, GaussianCloud, Image};

pub const RUN_FILE: &str = "run.json";
pub const MODEL_FILE: &str = "model.gspl";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
pub const RUNS_CSV: &str = "runs.csv";

/// Held-out views shown per image strip.
pub const STRIP_VIEWS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// `centralized`, `simulated` or `sockets`.
    pub mode: String,
    pub blocks: usize,
    pub expansion: f64,
    pub alpha: f64,
    pub adaptive: bool,
    pub consensus: bool,
    pub metrics: MetricsReport,
    /// Scene container the run was trained on.
    pub scene: PathBuf,
    pub render: RenderConfig,
}

/// Writes `run.json`, the model and (when given) the diagnostics into `dir`.
pub fn write_run(
    dir: &Path,
    record: &RunRecord,
    model: &GaussianCloud,
    diagnostics: Option<&[RoundDiagnostics]>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RUN_FILE), serde_json::to_vec_pretty(record)?)?;
    save_checkpoint(model, &dir.join(MODEL_FILE))?;
    if let Some(d) = diagnostics {
        let mut text = String::new();
        for row in d {
            text.push_str(&serde_json::to_string(row)?);
            text.push('\n');
        }
        fs::write(dir.join(DIAGNOSTICS_FILE), text)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRun {
    pub name: String,
    pub dir: PathBuf,
    pub record: RunRecord,
    pub diagnostics: Vec<RoundDiagnostics>,
}

/// Parses a JSON-lines diagnostics stream, skipping abort lines.
pub fn parse_diagnostics(text: &str) -> Result<Vec<RoundDiagnostics>> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("aborted").is_none() {
            out.push(serde_json::from_value(v)?);
        }
    }
    Ok(out)
}

/// Every subdirectory of `root` that holds a `run.json`, sorted by name.
pub fn load_runs(root: &Path) -> Result<Vec<LoadedRun>> {
    let mut dirs: Vec<PathBuf> = match fs::read_dir(root) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(RUN_FILE).is_file())
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::NoRunsFound(root.display().to_string()));
    }
    dirs.into_iter()
        .map(|dir| {
            let record: RunRecord = serde_json::from_slice(&fs::read(dir.join(RUN_FILE))?)?;
            let diag_path = dir.join(DIAGNOSTICS_FILE);
            let diagnostics = if diag_path.is_file() {
                parse_diagnostics(&fs::read_to_string(diag_path)?)?
            } else {
                Vec::new()
            };
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(LoadedRun {
                name,
                dir,
                record,
                diagnostics,
            })
        })
        .collect()
}

pub fn runs_csv(runs: &[LoadedRun]) -> String {
    let mut s = String::from(
        "run,mode,blocks,expansion,alpha,adaptive,consensus,psnr,ssim,seconds,points\n",
    );
    for r in runs {
        let c = &r.record;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:.4},{:.5},{:.3},{}",
            r.name,
            c.mode,
            c.blocks,
            c.expansion,
            c.alpha,
            c.adaptive,
            c.consensus,
            c.metrics.mean_psnr,
            c.metrics.mean_ssim,
            c.metrics.train_seconds,
            c.metrics.gaussians
        );
    }
    s
}

pub fn residual_csv(diagnostics: &[RoundDiagnostics]) -> String {
    let mut s = String::from(
        "round,iteration,primal,dual,rho_p,max_disagreement,dual_mean_max,shared_ids,global_ids\n",
    );
    for d in diagnostics {
        let _ = writeln!(
            s,
            "{},{},{:e},{:e},{:e},{:e},{:e},{},{}",
            d.round,
            d.iteration,
            d.primal_norm,
            d.dual_norm,
            d.rho.rho_p,
            d.max_disagreement.max(),
            d.dual_mean_max,
            d.shared_ids,
            d.global_ids
        );
    }
    s
}

/// Rendered and ground-truth images of the first held-out views, side by side.
pub fn image_strip(
    model: &GaussianCloud,
    cameras: &[crate::scene::CameraView],
    images: &[Image],
    cfg: &RenderConfig,
) -> Result<Image> {
    let mut tiles = Vec::new();
    for v in holdout_views(cameras.len()).into_iter().take(STRIP_VIEWS) {
        tiles.push(render(model, &cameras[v], cfg).color);
        tiles.push(images[v].clone());
    }
    if tiles.is_empty() {
        return Err(Error::EmptyHoldout);
    }
    Image::hstack(&tiles.iter().collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub runs: usize,
    pub files: Vec<PathBuf>,
}

/// Writes `runs.csv`, one residual CSV per distributed run and one image
/// strip per run into `out`.
pub fn write_report(root: &Path, out: &Path) -> Result<ReportSummary> {
    let runs = load_runs(root)?;
    fs::create_dir_all(out)?;
    let mut files = vec![out.join(RUNS_CSV)];
    fs::write(&files[0], runs_csv(&runs))?;
    for r in &runs {
        if !r.diagnostics.is_empty() {
            let p = out.join(format!("residuals_{}.csv", r.name));
            fs::write(&p, residual_csv(&r.diagnostics))?;
            files.push(p);
        }
        let scene_path = if r.record.scene.is_absolute() {
            r.record.scene.clone()
        } else {
            r.dir.join(&r.record.scene)
        };
        let dataset = load_scene(&scene_path)?;
        let images = dataset.load_images(scene_path.parent().unwrap_or(Path::new(".")))?;
        let model = load_checkpoint(&r.dir.join(MODEL_FILE))?;
        let p = out.join(format!("strip_{}.png", r.name));
        image_strip(&model, &dataset.views, &images, &r.record.render)?.save(&p)?;
        files.push(p);
    }
    Ok(ReportSummary {
        runs: runs.len(),
        files,
    })
}
