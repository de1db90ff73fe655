//! Master/worker orchestration of distributed training.
//!
//! Both sides derive the same [`ClusterPlan`] from the dataset and the
//! [`RunConfig`]; a fingerprint exchanged at registration guards against
//! mismatched inputs. Workers train their block between consensus rounds and
//! block on the master's broadcast at every round boundary.

pub mod link;
mod master;
pub mod wire;
mod worker;

use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::admm::{ConsensusConfig, GlobalModel, RoundDiagnostics};
use crate::codec::{fnv1a, Precision, Writer};
use crate::error::{Error, Result};
use crate::metrics::training_views;
use crate::scene::{CameraView, GaussianCloud, Image, SceneDataset};
use crate::split::{partition_scene, BlockPartition, SplitConfig, DEFAULT_EXPANSION};
use crate::trainer::{initialize_gaussians, scene_extent, TrainConfig};

pub use link::{
    channel_hub, connect_with_retry, Acceptor, ChannelConnector, ChannelHub, Connection,
    TcpAcceptor,
};
pub use master::run_master;
pub use worker::{run_worker, WorkerSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    #[default]
    Simulated,
    Sockets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub blocks: usize,
    pub expansion: f64,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub consensus: ConsensusConfig,
    /// With consensus off, blocks train independently and meet once at the end.
    pub consensus_enabled: bool,
    /// Blocks render the latest global model's other Gaussians as a frozen backdrop.
    pub share_context: bool,
    pub precision: Precision,
    /// Single-owner Gaussians travel every this many rounds (and at the end).
    pub full_upload_every: u64,
    /// Allowance per consensus interval of training; longer rounds get proportionally more.
    pub round_timeout_secs: f64,
    pub connect_attempts: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            expansion: DEFAULT_EXPANSION,
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            consensus: ConsensusConfig::default(),
            consensus_enabled: true,
            share_context: true,
            precision: Precision::F64,
            full_upload_every: 1,
            round_timeout_secs: 120.0,
            connect_attempts: 3,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.blocks > usize::from(u16::MAX) {
            return Err(Error::Config(format!(
                "block count {} out of range",
                self.blocks
            )));
        }
        if self.full_upload_every == 0 {
            return Err(Error::Config("full_upload_every must be >= 1".into()));
        }
        if !(self.round_timeout_secs > 0.0) {
            return Err(Error::Config("round timeout must be positive".into()));
        }
        self.train.validate()?;
        self.consensus.validate()
    }

    pub fn round_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.round_timeout_secs)
    }

    /// Deadline for a round covering `span` training iterations.
    pub fn round_timeout_for(&self, span: u64) -> Duration {
        let intervals = span.div_ceil(self.consensus.interval.max(1)).max(1);
        self.round_timeout()
            .saturating_mul(u32::try_from(intervals).unwrap_or(u32::MAX))
    }

    /// Iterations at which consensus rounds close; the last one is `iterations`.
    pub fn schedule(&self) -> Vec<u64> {
        consensus_schedule(
            self.train.iterations,
            self.consensus.interval,
            self.consensus_enabled,
        )
    }
}

pub fn consensus_schedule(total: u64, interval: u64, enabled: bool) -> Vec<u64> {
    let mut out = Vec::new();
    if enabled && interval > 0 {
        let mut b = interval;
        while b < total {
            out.push(b);
            b += interval;
        }
    }
    out.push(total);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    pub block_id: u16,
    /// Indices into the dataset's view list.
    pub views: Vec<usize>,
    pub cloud: GaussianCloud,
    pub shared: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPlan {
    pub partition: BlockPartition,
    pub blocks: Vec<BlockPlan>,
    pub initial: GaussianCloud,
    pub extent: f64,
    pub first_free_id: u64,
    pub feature_dim: usize,
    pub schedule: Vec<u64>,
    pub fingerprint: u64,
}

/// Partitions the training views and the initial Gaussians into blocks.
pub fn plan_run(dataset: &SceneDataset, images: &[Image], cfg: &RunConfig) -> Result<ClusterPlan> {
    cfg.validate()?;
    dataset.validate_for_training()?;
    if images.len() != dataset.views.len() {
        return Err(Error::Config(format!(
            "{} images for {} views",
            images.len(),
            dataset.views.len()
        )));
    }
    let train = training_views(dataset.views.len());
    let cameras: Vec<CameraView> = train.iter().map(|&v| dataset.views[v].clone()).collect();
    let points: Vec<[f64; 3]> = dataset.points.iter().map(|p| p.position_f64()).collect();
    let initial =
        initialize_gaussians(&dataset.points, cfg.train.sh_degree, cfg.train.init_opacity);
    let gaussians: Vec<(u64, [f64; 3])> = initial
        .ids
        .iter()
        .copied()
        .zip(initial.positions.iter().copied())
        .collect();
    let partition = partition_scene(
        &points,
        &cameras,
        &gaussians,
        cfg.blocks,
        cfg.expansion,
        &cfg.split,
    )?;

    let mut blocks = Vec::with_capacity(partition.len());
    for (k, b) in partition.blocks.iter().enumerate() {
        if b.views.is_empty() {
            return Err(Error::Config(format!(
                "block {k} received no training views"
            )));
        }
        let idx: Vec<usize> = b
            .gaussians
            .iter()
            .map(|id| initial.index_of(*id).ok_or(Error::UnownedId(*id)))
            .collect::<Result<_>>()?;
        blocks.push(BlockPlan {
            block_id: k as u16,
            views: b.views.iter().map(|&i| train[i]).collect(),
            cloud: initial.select(&idx),
            shared: partition.shared_ids_of(k),
        });
    }
    Ok(ClusterPlan {
        blocks,
        extent: scene_extent(&points),
        first_free_id: initial.ids.last().map_or(0, |id| id + 1),
        feature_dim: initial.feature_dim(),
        schedule: cfg.schedule(),
        fingerprint: fingerprint(dataset, images, cfg)?,
        partition,
        initial,
    })
}

/// FNV-1a over the training-relevant configuration, the points, the cameras
/// and the image pixels.
pub fn fingerprint(dataset: &SceneDataset, images: &[Image], cfg: &RunConfig) -> Result<u64> {
    let relevant = serde_json::to_vec(&(
        cfg.blocks,
        cfg.expansion,
        &cfg.split,
        &cfg.train,
        &cfg.consensus,
        cfg.consensus_enabled,
        cfg.share_context,
        cfg.precision,
        cfg.full_upload_every,
    ))?;
    let mut w = Writer::new();
    w.bytes(&relevant);
    for p in &dataset.points {
        p.position.iter().for_each(|&v| w.f32(v));
        w.bytes(&p.rgb);
    }
    w.bytes(&serde_json::to_vec(&dataset.views)?);
    for img in images {
        img.data.iter().for_each(|&v| w.f64(v));
    }
    Ok(fnv1a(&w.into_inner()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block_id: u16,
    pub gaussians: u64,
    pub new_ids: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    /// Plain mean of the final shared copies plus every block's own Gaussians.
    pub model: GlobalModel,
    pub diagnostics: Vec<RoundDiagnostics>,
    pub blocks: Vec<BlockReport>,
}

/// Master and `K` workers on threads of this process, joined by `connect`.
fn run_in_process<A, C>(
    plan: &ClusterPlan,
    cfg: &RunConfig,
    cameras: &[CameraView],
    images: &[Image],
    mut acceptor: A,
    connect: C,
    diagnostics: Option<&mut dyn Write>,
) -> Result<RunOutcome>
where
    A: Acceptor,
    C: Fn() -> Result<Connection> + Sync,
{
    std::thread::scope(|scope| {
        let workers: Vec<_> = (0..plan.blocks.len())
            .map(|k| {
                let connect = &connect;
                scope.spawn(move || run_worker(plan, k as u16, cfg, cameras, images, connect()?))
            })
            .collect();
        let outcome = run_master(plan, cfg, &mut acceptor, diagnostics);
        let mut worker_error = None;
        for (k, h) in workers.into_iter().enumerate() {
            match h.join() {
                Ok(Ok(_)) => {}
                Ok(Err(e)) => {
                    log::error!("worker {k} failed: {e}");
                    worker_error.get_or_insert(e);
                }
                Err(_) => {
                    worker_error.get_or_insert(Error::Protocol(format!("worker {k} panicked")));
                }
            }
        }
        match (outcome, worker_error) {
            (Ok(o), None) => Ok(o),
            (Ok(_), Some(e)) => Err(e),
            (Err(e @ Error::WorkerTimeout(_)), _) => Err(e),
            (Err(e), Some(w)) => {
                log::error!("master failed: {e}");
                Err(w)
            }
            (Err(e), None) => Err(e),
        }
    })
}

/// Threads joined by in-process channels.
pub fn run_simulated(
    dataset: &SceneDataset,
    images: &[Image],
    cfg: &RunConfig,
    diagnostics: Option<&mut dyn Write>,
) -> Result<RunOutcome> {
    let plan = plan_run(dataset, images, cfg)?;
    let (hub, connector) = channel_hub();
    run_in_process(
        &plan,
        cfg,
        &dataset.views,
        images,
        hub,
        || connector.connect(),
        diagnostics,
    )
}

/// Threads joined by TCP streams over the loopback interface.
pub fn run_local_sockets(
    dataset: &SceneDataset,
    images: &[Image],
    cfg: &RunConfig,
    diagnostics: Option<&mut dyn Write>,
) -> Result<RunOutcome> {
    let plan = plan_run(dataset, images, cfg)?;
    let acceptor = TcpAcceptor::bind("127.0.0.1:0")?;
    let addr = acceptor.local_addr()?.to_string();
    let attempts = cfg.connect_attempts;
    run_in_process(
        &plan,
        cfg,
        &dataset.views,
        images,
        acceptor,
        || connect_with_retry(&addr, attempts, Duration::from_millis(100)),
        diagnostics,
    )
}

/// Master only, waiting for external workers on `listen`.
pub fn serve(
    dataset: &SceneDataset,
    images: &[Image],
    cfg: &RunConfig,
    listen: &str,
    diagnostics: Option<&mut dyn Write>,
) -> Result<RunOutcome> {
    let plan = plan_run(dataset, images, cfg)?;
    let mut acceptor = TcpAcceptor::bind(listen)?;
    log::info!("master listening on {}", acceptor.local_addr()?);
    run_master(&plan, cfg, &mut acceptor, diagnostics)
}

/// One worker process joining a master at `addr`.
pub fn join(
    dataset: &SceneDataset,
    images: &[Image],
    cfg: &RunConfig,
    block_id: u16,
    addr: &str,
) -> Result<WorkerSummary> {
    let plan = plan_run(dataset, images, cfg)?;
    if usize::from(block_id) >= plan.blocks.len() {
        return Err(Error::Config(format!(
            "block {block_id} does not exist (K = {})",
            plan.blocks.len()
        )));
    }
    let conn = connect_with_retry(addr, cfg.connect_attempts, Duration::from_millis(200))?;
    run_worker(&plan, block_id, cfg, &dataset.views, images, conn)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        assert_eq!(consensus_schedule(300, 100, true), vec![100, 200, 300]);
        assert_eq!(consensus_schedule(250, 100, true), vec![100, 200, 250]);
        assert_eq!(consensus_schedule(50, 100, true), vec![50]);
        assert_eq!(consensus_schedule(300, 100, false), vec![300]);
    }

    #[test]
    fn round_deadline_grows_with_round_length() {
        let cfg = RunConfig {
            round_timeout_secs: 2.0,
            ..Default::default()
        };
        assert_eq!(cfg.round_timeout_for(100), Duration::from_secs(2));
        assert_eq!(cfg.round_timeout_for(1), Duration::from_secs(2));
        assert_eq!(cfg.round_timeout_for(250), Duration::from_secs(6));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig {
            blocks: 3,
            precision: Precision::F32,
            ..Default::default()
        };
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"blocks": 2}"#).unwrap();
        assert_eq!(partial.blocks, 2);
        assert_eq!(partial.consensus.interval, 100);
    }
}
