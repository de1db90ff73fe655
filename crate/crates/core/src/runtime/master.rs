use std::collections::BTreeMap;
use std::io::Write;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use crate::admm::{
    adapt_penalties, consensus_average, dual_mean_max, dual_update, max_disagreement,
    relaxed_local, residuals, DualState, GlobalModel, PropertyPenalties, RoundDiagnostics,
};
use crate::codec::Precision;
use crate::error::{Error, Result};
use crate::runtime::link::{Acceptor, FrameSink, FrameSource};
use crate::runtime::wire::{decode_message, Message, WorkerMetrics};
use crate::runtime::{BlockReport, ClusterPlan, RunConfig, RunOutcome};
use crate::scene::{sigmoid, GaussianCloud};

const POLL: Duration = Duration::from_millis(10);

struct Inbound {
    conn: usize,
    frame: Result<Vec<u8>>,
}

fn spawn_reader(conn: usize, mut source: Box<dyn FrameSource>, tx: Sender<Inbound>) {
    std::thread::spawn(move || loop {
        let frame = source.recv_frame();
        let stop = frame.is_err();
        if tx.send(Inbound { conn, frame }).is_err() || stop {
            break;
        }
    });
}

#[derive(Default)]
struct Slot {
    new_ids: Option<Vec<u64>>,
    update: Option<(GaussianCloud, Option<GaussianCloud>)>,
    metrics: Option<WorkerMetrics>,
}

impl Slot {
    fn complete(&self) -> bool {
        self.new_ids.is_some() && self.update.is_some() && self.metrics.is_some()
    }

    fn status(&self) -> &'static str {
        match (
            self.new_ids.is_some(),
            self.update.is_some(),
            self.metrics.is_some(),
        ) {
            (true, true, true) => "complete",
            (false, false, false) => "silent",
            _ => "partial",
        }
    }
}

struct Master<'a, 'd> {
    plan: &'a ClusterPlan,
    cfg: &'a RunConfig,
    sinks: Vec<Option<Box<dyn FrameSink>>>,
    conn_block: BTreeMap<usize, u16>,
    block_conn: Vec<Option<usize>>,
    tx: Sender<Inbound>,
    rx: Receiver<Inbound>,
    diagnostics: Option<&'d mut dyn Write>,
}

impl Drop for Master<'_, '_> {
    fn drop(&mut self) {
        for s in self.sinks.iter_mut().flatten() {
            s.close();
        }
    }
}

impl Master<'_, '_> {
    fn k(&self) -> usize {
        self.plan.blocks.len()
    }

    fn accept_pending(&mut self, acceptor: &mut dyn Acceptor) -> Result<()> {
        while let Some(c) = acceptor.try_accept()? {
            let idx = self.sinks.len();
            self.sinks.push(Some(c.sink));
            spawn_reader(idx, c.source, self.tx.clone());
        }
        Ok(())
    }

    fn send_to(&mut self, conn: usize, frame: &[u8]) -> Result<()> {
        match self.sinks.get_mut(conn).and_then(Option::as_mut) {
            Some(s) => s.send_frame(frame),
            None => Err(Error::ChannelClosed),
        }
    }

    fn reject(&mut self, conn: usize, block: u16, reason: String) {
        log::warn!("rejecting connection {conn}: {reason}");
        let ack = Message::Ack {
            accepted: false,
            reason,
        }
        .encode(block, 0, self.cfg.precision);
        let _ = self.send_to(conn, &ack);
        if let Some(mut s) = self.sinks.get_mut(conn).and_then(Option::take) {
            s.close();
        }
    }

    fn register(&mut self, acceptor: &mut dyn Acceptor) -> Result<()> {
        let deadline = Instant::now() + self.cfg.round_timeout();
        while self.block_conn.iter().any(Option::is_none) {
            if Instant::now() >= deadline {
                let k = self
                    .block_conn
                    .iter()
                    .position(Option::is_none)
                    .unwrap_or(0) as u16;
                self.abort_line("registration", 0, 0, &[]);
                return Err(Error::WorkerTimeout(k));
            }
            self.accept_pending(acceptor)?;
            let inbound = match self.rx.recv_timeout(POLL) {
                Ok(i) => i,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => return Err(Error::ChannelClosed),
            };
            let Ok(bytes) = inbound.frame else {
                self.sinks[inbound.conn] = None;
                continue;
            };
            let frame = match decode_message(&bytes, self.plan.feature_dim, self.cfg.precision) {
                Ok(f) => f,
                Err(e) => {
                    self.reject(inbound.conn, 0, e.to_string());
                    continue;
                }
            };
            let b = frame.header.block_id;
            let reason = match frame.message {
                Message::Register {
                    fingerprint,
                    precision,
                    feature_dim,
                } => {
                    if usize::from(b) >= self.k() {
                        Some(format!("block {b} does not exist"))
                    } else if self.block_conn[usize::from(b)].is_some() {
                        Some(format!("block {b} is already registered"))
                    } else if fingerprint != self.plan.fingerprint {
                        Some(format!(
                            "fingerprint {fingerprint:016x} does not match {:016x}",
                            self.plan.fingerprint
                        ))
                    } else if precision != self.cfg.precision
                        || feature_dim as usize != self.plan.feature_dim
                    {
                        Some("payload layout mismatch".to_string())
                    } else {
                        None
                    }
                }
                other => Some(format!("expected REGISTER, got {:?}", other.message_type())),
            };
            match reason {
                Some(r) => self.reject(inbound.conn, b, r),
                None => {
                    let ack = Message::Ack {
                        accepted: true,
                        reason: String::new(),
                    }
                    .encode(b, 0, self.cfg.precision);
                    self.send_to(inbound.conn, &ack)?;
                    self.block_conn[usize::from(b)] = Some(inbound.conn);
                    self.conn_block.insert(inbound.conn, b);
                    log::info!("block {b} registered");
                }
            }
        }
        Ok(())
    }

    fn abort_line(&mut self, reason: &str, round: usize, iteration: u64, slots: &[Slot]) {
        let blocks: Vec<serde_json::Value> = (0..self.k())
            .map(|k| {
                let status = if self.block_conn[k].is_none() {
                    "unregistered"
                } else {
                    slots.get(k).map_or("registered", Slot::status)
                };
                serde_json::json!({ "block": k, "status": status })
            })
            .collect();
        let line = serde_json::json!({ "aborted": reason, "round": round, "iteration": iteration, "blocks": blocks });
        if let Some(w) = self.diagnostics.as_mut() {
            let _ = writeln!(w, "{line}");
            let _ = w.flush();
        }
    }

    fn collect_round(&mut self, round: usize, boundary: u64, span: u64) -> Result<Vec<Slot>> {
        let mut slots: Vec<Slot> = (0..self.k()).map(|_| Slot::default()).collect();
        let deadline = Instant::now() + self.cfg.round_timeout_for(span);
        while !slots.iter().all(Slot::complete) {
            let now = Instant::now();
            let inbound = if now >= deadline {
                Err(RecvTimeoutError::Timeout)
            } else {
                self.rx.recv_timeout(deadline - now)
            };
            let inbound = match inbound {
                Ok(i) => i,
                Err(RecvTimeoutError::Timeout) => {
                    let k = slots.iter().position(|s| !s.complete()).unwrap_or(0);
                    self.abort_line(&format!("worker {k} timed out"), round, boundary, &slots);
                    return Err(Error::WorkerTimeout(k as u16));
                }
                Err(RecvTimeoutError::Disconnected) => return Err(Error::ChannelClosed),
            };
            let Some(&b) = self.conn_block.get(&inbound.conn) else {
                continue;
            };
            let bytes = match inbound.frame {
                Ok(bytes) => bytes,
                Err(e) => {
                    self.abort_line(
                        &format!("worker {b} disconnected: {e}"),
                        round,
                        boundary,
                        &slots,
                    );
                    return Err(Error::Protocol(format!("worker {b} disconnected: {e}")));
                }
            };
            let frame = decode_message(&bytes, self.plan.feature_dim, self.cfg.precision)?;
            if frame.header.block_id != b {
                return Err(Error::Protocol(format!(
                    "connection of block {b} sent a frame for block {}",
                    frame.header.block_id
                )));
            }
            if frame.header.iteration != boundary {
                return Err(Error::Protocol(format!(
                    "block {b} sent iteration {} during the round ending at {boundary}",
                    frame.header.iteration
                )));
            }
            let slot = &mut slots[usize::from(b)];
            let duplicate = match frame.message {
                Message::NewIds { ids } => slot.new_ids.replace(ids).is_some(),
                Message::LocalUpdate { shared, owned } => {
                    slot.update.replace((shared, owned)).is_some()
                }
                Message::Metrics(m) => slot.metrics.replace(m).is_some(),
                other => {
                    return Err(Error::Protocol(format!(
                        "unexpected {:?} from block {b}",
                        other.message_type()
                    )))
                }
            };
            if duplicate {
                return Err(Error::Protocol(format!(
                    "block {b} sent a message twice in one round"
                )));
            }
        }
        Ok(slots)
    }

    fn broadcast(&mut self, message: &Message, iteration: u64) -> Result<()> {
        let frame = message.encode(u16::MAX, iteration, self.cfg.precision);
        for k in 0..self.k() {
            let conn = self.block_conn[k].ok_or(Error::ChannelClosed)?;
            self.send_to(conn, &frame)?;
        }
        Ok(())
    }

    fn emit(&mut self, d: &RoundDiagnostics) -> Result<()> {
        if let Some(w) = self.diagnostics.as_mut() {
            writeln!(w, "{}", serde_json::to_string(d)?)?;
            w.flush()?;
        }
        Ok(())
    }
}

fn assemble(z: &GaussianCloud, owned: &[Option<GaussianCloud>]) -> Result<GaussianCloud> {
    let mut model = z.clone();
    for (b, o) in owned.iter().enumerate() {
        let o = o
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("block {b} never sent its own Gaussians")))?;
        model.append(o);
    }
    model.sort_by_id();
    model.validate()?;
    Ok(model)
}

/// Registers `K` workers through `acceptor`, then runs every consensus round
/// of the plan. Diagnostics are written as one JSON line per round.
pub fn run_master(
    plan: &ClusterPlan,
    cfg: &RunConfig,
    acceptor: &mut dyn Acceptor,
    diagnostics: Option<&mut dyn Write>,
) -> Result<RunOutcome> {
    let (tx, rx) = mpsc::channel();
    let k = plan.blocks.len();
    let mut m = Master {
        plan,
        cfg,
        sinks: Vec::new(),
        conn_block: BTreeMap::new(),
        block_conn: vec![None; k],
        tx,
        rx,
        diagnostics,
    };
    m.register(acceptor)?;

    let fd = plan.feature_dim;
    let alpha = cfg.consensus.effective_alpha();
    let mut penalties: PropertyPenalties = cfg.consensus.penalties;
    let shared_ids: Vec<u64> = plan.partition.shared.keys().copied().collect();
    let idx: Vec<usize> = shared_ids
        .iter()
        .map(|id| plan.initial.index_of(*id).ok_or(Error::UnownedId(*id)))
        .collect::<Result<_>>()?;
    let mut z = plan.initial.select(&idx);
    let mut mirrors: Vec<DualState> = plan
        .blocks
        .iter()
        .map(|b| DualState::zeros(&b.shared, fd))
        .collect();
    let mut owner: BTreeMap<u64, u16> = BTreeMap::new();
    for b in &plan.blocks {
        for id in b
            .cloud
            .ids
            .iter()
            .filter(|id| !plan.partition.is_shared(**id))
        {
            owner.insert(*id, b.block_id);
        }
    }
    let mut owned: Vec<Option<GaussianCloud>> = vec![None; k];
    let mut reports: Vec<BlockReport> = (0..k)
        .map(|b| BlockReport {
            block_id: b as u16,
            gaussians: 0,
            new_ids: 0,
            final_loss: 0.0,
        })
        .collect();
    let mut history = Vec::with_capacity(plan.schedule.len());
    let densify_stop = cfg.train.densify.stop(cfg.train.iterations);

    for (r, &boundary) in plan.schedule.iter().enumerate() {
        let last = r + 1 == plan.schedule.len();
        let start = if r == 0 { 0 } else { plan.schedule[r - 1] };
        let slots = m.collect_round(r + 1, boundary, boundary - start)?;

        let mut uploads: Vec<GaussianCloud> = Vec::with_capacity(k);
        let mut full_round = true;
        for (b, slot) in slots.into_iter().enumerate() {
            let (Some(ids), Some((shared, own)), Some(metrics)) =
                (slot.new_ids, slot.update, slot.metrics)
            else {
                unreachable!("collect_round returns complete slots");
            };
            for id in &ids {
                if let Some(prev) = owner.insert(*id, b as u16) {
                    if usize::from(prev) != b {
                        return Err(Error::IdMisalignment(format!(
                            "ID {id} claimed by blocks {prev} and {b}"
                        )));
                    }
                }
            }
            if shared.ids != mirrors[b].ids() {
                return Err(Error::IdMisalignment(format!(
                    "block {b} uploaded an unexpected shared ID set"
                )));
            }
            full_round &= own.is_some();
            if let Some(o) = own {
                if let Some(id) = o.ids.iter().find(|id| owner.get(id) != Some(&(b as u16))) {
                    return Err(Error::UnownedId(*id));
                }
                owned[b] = Some(o);
            }
            if cfg.precision == Precision::F64 && metrics.dual_checksum != mirrors[b].checksum() {
                return Err(Error::Protocol(format!(
                    "dual state of block {b} diverged from the master's mirror"
                )));
            }
            reports[b].gaussians = metrics.gaussians;
            reports[b].new_ids += ids.len();
            reports[b].final_loss = metrics.loss();
            uploads.push(shared);
        }
        let locals: Vec<(u16, &GaussianCloud)> = uploads
            .iter()
            .enumerate()
            .map(|(b, c)| (b as u16, c))
            .collect();

        let mut z_new =
            consensus_average(&locals, &z, alpha, !last && cfg.consensus.over_relaxation)?.cloud;
        let (primal, dual) = residuals(&locals, &z_new, &z, &penalties)?;
        let disagreement = max_disagreement(&locals, &z_new);

        if !last {
            if cfg.train.densify.enabled && boundary < densify_stop {
                let floor = cfg.train.densify.prune_opacity;
                let keep: Vec<bool> = z_new
                    .opacity_logits
                    .iter()
                    .map(|&o| sigmoid(o) >= floor)
                    .collect();
                z_new.retain(|i| keep[i]);
            }
            for (b, x) in uploads.iter().enumerate() {
                let x_hat = relaxed_local(x, &z, alpha);
                let live: Vec<usize> = (0..x_hat.len())
                    .filter(|&i| z_new.index_of(x_hat.ids[i]).is_some())
                    .collect();
                mirrors[b].retain_ids(|id| z_new.index_of(id).is_some());
                dual_update(&mut mirrors[b], &x_hat.select(&live), &z_new)?;
            }
        }
        let mirror_refs: Vec<&DualState> = mirrors.iter().collect();
        let own_total: u64 = reports
            .iter()
            .zip(&uploads)
            .map(|(rep, up)| rep.gaussians - up.len() as u64)
            .sum();
        let diag = RoundDiagnostics {
            round: r as u64 + 1,
            iteration: boundary,
            primal_norm: primal,
            dual_norm: dual,
            rho: penalties,
            max_disagreement: disagreement,
            dual_mean_max: dual_mean_max(&mirror_refs),
            shared_ids: z_new.len(),
            global_ids: z_new.len() + own_total as usize,
        };
        m.emit(&diag)?;
        history.push(diag);
        log::info!(
            "round {} (iteration {boundary}): primal {primal:.3e}, dual {dual:.3e}",
            r + 1
        );

        if last {
            let model = assemble(&z_new, &owned)?;
            m.broadcast(&Message::Shutdown, boundary)?;
            return Ok(RunOutcome {
                model: GlobalModel { cloud: model },
                diagnostics: history,
                blocks: reports,
            });
        }
        penalties = adapt_penalties(&penalties, primal, dual, &cfg.consensus, boundary);
        let model = if cfg.share_context && full_round {
            Some(assemble(&z_new, &owned)?)
        } else {
            None
        };
        m.broadcast(
            &Message::GlobalBroadcast {
                penalties,
                z: z_new.clone(),
                model,
            },
            boundary,
        )?;
        z = z_new;
    }
    Err(Error::Config("empty consensus schedule".into()))
}
