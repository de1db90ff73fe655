use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::runtime::link::Connection;
use crate::runtime::wire::{decode_message, Frame, Message, WorkerMetrics};
use crate::runtime::{ClusterPlan, RunConfig};
use crate::scene::{CameraView, Image};
use crate::trainer::{BlockTrainer, ConsensusState};

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerSummary {
    pub block_id: u16,
    pub gaussians: usize,
    pub iterations: u64,
    pub rounds: usize,
}

struct Peer<'a> {
    conn: Connection,
    block_id: u16,
    cfg: &'a RunConfig,
    feature_dim: usize,
}

impl Peer<'_> {
    fn send(&mut self, message: &Message, iteration: u64) -> Result<()> {
        self.conn
            .sink
            .send_frame(&message.encode(self.block_id, iteration, self.cfg.precision))
    }

    fn recv(&mut self) -> Result<Frame> {
        let bytes = self.conn.source.recv_frame()?;
        decode_message(&bytes, self.feature_dim, self.cfg.precision)
    }
}

/// Trains block `block_id` and exchanges updates with the master at every
/// round boundary of the plan's schedule, until SHUTDOWN.
pub fn run_worker(
    plan: &ClusterPlan,
    block_id: u16,
    cfg: &RunConfig,
    cameras: &[CameraView],
    images: &[Image],
    conn: Connection,
) -> Result<WorkerSummary> {
    let bp = plan
        .blocks
        .get(usize::from(block_id))
        .ok_or_else(|| Error::Config(format!("block {block_id} does not exist")))?;
    let mut peer = Peer {
        conn,
        block_id,
        cfg,
        feature_dim: plan.feature_dim,
    };

    peer.send(
        &Message::Register {
            fingerprint: plan.fingerprint,
            precision: cfg.precision,
            feature_dim: plan.feature_dim as u32,
        },
        0,
    )?;
    match peer.recv()?.message {
        Message::Ack { accepted: true, .. } => {}
        Message::Ack {
            accepted: false,
            reason,
        } => return Err(Error::Protocol(format!("registration rejected: {reason}"))),
        other => {
            return Err(Error::Protocol(format!(
                "expected ACK, got {:?}",
                other.message_type()
            )))
        }
    }

    let mut trainer = BlockTrainer::new(
        block_id,
        bp.cloud.clone(),
        bp.views.clone(),
        cfg.train.clone(),
        plan.extent,
        plan.first_free_id,
    )?;
    trainer.consensus = Some(ConsensusState::new(
        &trainer.cloud,
        &bp.shared,
        cfg.consensus.penalties,
        cfg.consensus.effective_alpha(),
        cfg.consensus_enabled,
    )?);
    if cfg.share_context {
        trainer.set_context(&plan.initial);
    }
    let mut known: BTreeSet<u64> = trainer.cloud.ids.iter().copied().collect();

    for (r, &boundary) in plan.schedule.iter().enumerate() {
        let mut loss = 0.0;
        let mut steps = 0u64;
        while trainer.iteration < boundary {
            loss += trainer.train_step(cameras, images)?.loss;
            steps += 1;
        }
        let last = r + 1 == plan.schedule.len();

        let ids: Vec<u64> = trainer
            .cloud
            .ids
            .iter()
            .copied()
            .filter(|id| !known.contains(id))
            .collect();
        known = trainer.cloud.ids.iter().copied().collect();
        peer.send(&Message::NewIds { ids }, boundary)?;
        let full = last || (r as u64 + 1).is_multiple_of(cfg.full_upload_every);
        let shared = trainer.shared_snapshot();
        let owned = full.then(|| trainer.owned_snapshot());
        peer.send(&Message::LocalUpdate { shared, owned }, boundary)?;
        let duals = trainer.consensus.as_ref().map_or(0, |c| c.duals.checksum());
        let metrics = WorkerMetrics {
            loss_bits: if steps == 0 {
                0.0f64.to_bits()
            } else {
                (loss / steps as f64).to_bits()
            },
            gaussians: trainer.cloud.len() as u64,
            dual_checksum: duals,
        };
        peer.send(&Message::Metrics(metrics), boundary)?;

        let frame = peer.recv()?;
        match frame.message {
            Message::Shutdown if last => break,
            Message::Shutdown => {
                return Err(Error::Protocol(format!(
                    "master shut down early at iteration {boundary}"
                )))
            }
            Message::GlobalBroadcast { .. } if last => {
                return Err(Error::Protocol("broadcast after the final round".into()));
            }
            Message::GlobalBroadcast {
                penalties,
                z,
                model,
            } => {
                if frame.header.iteration != boundary {
                    return Err(Error::Protocol(format!(
                        "broadcast for iteration {} while waiting at {boundary}",
                        frame.header.iteration
                    )));
                }
                let mine = trainer
                    .consensus
                    .as_ref()
                    .map(|c| c.z.ids.clone())
                    .unwrap_or_default();
                let foreign = z
                    .ids
                    .iter()
                    .filter(|id| mine.binary_search(id).is_err())
                    .count();
                if foreign > 0 {
                    log::debug!("block {block_id}: ignoring {foreign} IDs outside this block");
                }
                let dropped = trainer.apply_consensus(&z, penalties)?;
                if !dropped.is_empty() {
                    log::debug!(
                        "block {block_id}: {} shared IDs pruned by the master",
                        dropped.len()
                    );
                }
                if let Some(m) = model.filter(|_| cfg.share_context) {
                    trainer.set_context(&m);
                }
            }
            other => {
                return Err(Error::Protocol(format!(
                    "unexpected {:?} while waiting for a broadcast",
                    other.message_type()
                )))
            }
        }
    }
    Ok(WorkerSummary {
        block_id,
        gaussians: trainer.cloud.len(),
        iterations: trainer.iteration,
        rounds: plan.schedule.len(),
    })
}
