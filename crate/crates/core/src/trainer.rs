//! Per-block optimization: Adam steps on the rendering loss plus the ADMM
//! penalty, densification and pruning with block-disjoint ID allocation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::admm::{accumulate_penalty, dual_update, relaxed_local, DualState, PropertyPenalties};
use crate::error::{Error, Result};
use crate::par;
use crate::render::{render_backward, LossConfig, ParamGradients, RenderConfig};
use crate::scene::{
    logit, rgb_to_sh0, sigmoid, CameraView, GaussianCloud, GaussianPrimitive, Image, ScenePoint,
    ShDegree,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Initial position rate, multiplied by the scene extent.
    pub position: f64,
    /// Final position rate (exponential decay over the run), times extent.
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub features: f64,
    pub opacity: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1e-3,
            scale: 5e-3,
            features: 2.5e-3,
            opacity: 5e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub interval: u64,
    /// Last iteration that may densify; defaults to 60% of the run.
    pub stop_iteration: Option<u64>,
    /// Mean screen-space (NDC) positional gradient norm that triggers densification.
    pub grad_threshold: f64,
    pub prune_opacity: f64,
    /// Clone below, split above this largest scale, as a fraction of scene extent.
    pub scale_threshold: f64,
    /// Prune Gaussians whose largest scale exceeds this fraction of the scene extent.
    pub max_scale: Option<f64>,
    /// No densification once a block holds this many Gaussians.
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            interval: 200,
            stop_iteration: None,
            grad_threshold: 2e-3,
            prune_opacity: 0.005,
            scale_threshold: 0.01,
            max_scale: None,
            max_gaussians: 20_000,
        }
    }
}

impl DensifyConfig {
    pub fn stop(&self, total_iterations: u64) -> u64 {
        self.stop_iteration.unwrap_or(total_iterations * 3 / 5)
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::Config("densify interval must be >= 1".into()));
        }
        if !(self.prune_opacity > 0.0 && self.prune_opacity < 1.0) {
            return Err(Error::Config("prune opacity must lie in (0, 1)".into()));
        }
        if self.grad_threshold <= 0.0
            || self.scale_threshold <= 0.0
            || self.max_scale.is_some_and(|f| !(f > 0.0))
        {
            return Err(Error::Config("densify thresholds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub seed: u64,
    pub sh_degree: ShDegree,
    pub init_opacity: f64,
    pub lr: LearningRates,
    pub adam: AdamConfig,
    pub densify: DensifyConfig,
    pub loss: LossConfig,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            seed: 0,
            sh_degree: ShDegree::Zero,
            init_opacity: 0.1,
            lr: LearningRates::default(),
            adam: AdamConfig::default(),
            densify: DensifyConfig::default(),
            loss: LossConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return Err(Error::Config("initial opacity must lie in (0, 1)".into()));
        }
        self.densify.validate()
    }
}

/// Hands out IDs from `[k * 2^48, (k + 1) * 2^48)` for block `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdAllocator {
    block: u16,
    next: u64,
    end: u64,
}

pub const ID_RANGE_BITS: u32 = 48;

impl IdAllocator {
    /// Allocator for `block`; IDs below `first_free` are never returned.
    pub fn for_block(block: u16, first_free: u64) -> Self {
        let start = u64::from(block) << ID_RANGE_BITS;
        let end = if block == u16::MAX {
            u64::MAX
        } else {
            (u64::from(block) + 1) << ID_RANGE_BITS
        };
        Self {
            block,
            next: start.max(first_free),
            end,
        }
    }

    pub fn next_id(&mut self) -> Result<u64> {
        if self.next >= self.end {
            return Err(Error::AllocatorExhausted(self.block));
        }
        let id = self.next;
        self.next += 1;
        Ok(id)
    }

    pub fn peek(&self) -> u64 {
        self.next
    }
}

/// Largest side of the points' bounding box.
pub fn scene_extent(points: &[[f64; 3]]) -> f64 {
    match crate::split::tight_aabb(points) {
        Ok(b) => b.extent().into_iter().fold(0.0, f64::max).max(1e-6),
        Err(_) => 1.0,
    }
}

/// One isotropic Gaussian per point, IDs `0..n` in point order.
pub fn initialize_gaussians(
    points: &[ScenePoint],
    degree: ShDegree,
    init_opacity: f64,
) -> GaussianCloud {
    let pos: Vec<[f64; 3]> = points.iter().map(ScenePoint::position_f64).collect();
    let floor = 1e-7 * scene_extent(&pos);
    let scales = par::map_indexed(pos.len(), true, |i| {
        let mut best = [f64::INFINITY; 3];
        for (j, q) in pos.iter().enumerate() {
            if j == i {
                continue;
            }
            let d = (0..3)
                .map(|a| (pos[i][a] - q[a]).powi(2))
                .sum::<f64>()
                .sqrt();
            if d < best[2] {
                best[2] = d;
                best.sort_by(f64::total_cmp);
            }
        }
        let found: Vec<f64> = best.into_iter().filter(|d| d.is_finite()).collect();
        let mean = if found.is_empty() {
            0.01
        } else {
            found.iter().sum::<f64>() / found.len() as f64
        };
        mean.max(floor).ln()
    });
    let mut cloud = GaussianCloud::new(degree);
    for (i, p) in points.iter().enumerate() {
        let mut features = vec![0.0; degree.feature_dim()];
        for c in 0..3 {
            features[c] = rgb_to_sh0(f64::from(p.rgb[c]) / 255.0);
        }
        cloud.push(&GaussianPrimitive {
            id: i as u64,
            position: pos[i],
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [scales[i]; 3],
            features,
            opacity_logit: logit(init_opacity),
        });
    }
    cloud
}

/// Adam moments, one row of `11 + k` values per Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    dim: usize,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize, feature_dim: usize) -> Self {
        let dim = 11 + feature_dim;
        Self {
            m: vec![0.0; n * dim],
            v: vec![0.0; n * dim],
            dim,
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn retain(&mut self, keep: &[bool]) {
        let dim = self.dim;
        let filter = |buf: &[f64]| -> Vec<f64> {
            buf.chunks(dim)
                .zip(keep)
                .filter(|(_, k)| **k)
                .flat_map(|(c, _)| c.to_vec())
                .collect()
        };
        self.m = filter(&self.m);
        self.v = filter(&self.v);
    }

    pub fn push_zeros(&mut self, n: usize) {
        self.m.extend(std::iter::repeat_n(0.0, n * self.dim));
        self.v.extend(std::iter::repeat_n(0.0, n * self.dim));
    }

    /// Second moments are never negative.
    pub fn is_valid(&self) -> bool {
        self.v.iter().all(|v| *v >= 0.0)
    }

    /// One Adam update of `cloud` against `grads`.
    pub fn apply(
        &mut self,
        cloud: &mut GaussianCloud,
        grads: &ParamGradients,
        rates: &[f64],
        adam: &AdamConfig,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - adam.beta1.powi(t);
        let bc2 = 1.0 - adam.beta2.powi(t);
        let fd = cloud.feature_dim();
        let dim = self.dim;
        let mut g = vec![0.0; dim];
        let mut x = vec![0.0; dim];
        for i in 0..cloud.len() {
            g[0..3].copy_from_slice(&grads.positions[i]);
            g[3..7].copy_from_slice(&grads.rotations[i]);
            g[7..10].copy_from_slice(&grads.log_scales[i]);
            g[10..10 + fd].copy_from_slice(&grads.features[i * fd..(i + 1) * fd]);
            g[10 + fd] = grads.opacity_logits[i];
            x[0..3].copy_from_slice(&cloud.positions[i]);
            x[3..7].copy_from_slice(&cloud.rotations[i]);
            x[7..10].copy_from_slice(&cloud.log_scales[i]);
            x[10..10 + fd].copy_from_slice(cloud.features_of(i));
            x[10 + fd] = cloud.opacity_logits[i];
            let m = &mut self.m[i * dim..(i + 1) * dim];
            let v = &mut self.v[i * dim..(i + 1) * dim];
            for c in 0..dim {
                m[c] = adam.beta1 * m[c] + (1.0 - adam.beta1) * g[c];
                v[c] = adam.beta2 * v[c] + (1.0 - adam.beta2) * g[c] * g[c];
                x[c] -= rates[c] * (m[c] / bc1) / ((v[c] / bc2).sqrt() + adam.epsilon);
            }
            cloud.positions[i].copy_from_slice(&x[0..3]);
            cloud.rotations[i].copy_from_slice(&x[3..7]);
            cloud.log_scales[i].copy_from_slice(&x[7..10]);
            cloud.features_of_mut(i).copy_from_slice(&x[10..10 + fd]);
            cloud.opacity_logits[i] = x[10 + fd];
        }
    }
}

/// ADMM state a block carries between consensus rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusState {
    /// Consensus values of this block's shared IDs.
    pub z: GaussianCloud,
    pub duals: DualState,
    pub penalties: PropertyPenalties,
    pub alpha: f64,
    /// Apply the penalty during training (off for the no-consensus ablation).
    pub active: bool,
}

impl ConsensusState {
    /// Initial state: `z` is the current value of every shared ID, duals zero.
    pub fn new(
        cloud: &GaussianCloud,
        shared: &[u64],
        penalties: PropertyPenalties,
        alpha: f64,
        active: bool,
    ) -> Result<Self> {
        let idx = shared
            .iter()
            .map(|id| cloud.index_of(*id).ok_or(Error::UnownedId(*id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            z: cloud.select(&idx),
            duals: DualState::zeros(shared, cloud.feature_dim()),
            penalties,
            alpha,
            active,
        })
    }

    pub fn shared_ids(&self) -> &[u64] {
        &self.z.ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub loss: f64,
    pub penalty: f64,
    pub view: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DensifyOutcome {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Accumulated screen-space gradient norms since the last densification.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradStats {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn record(&mut self, grads: &ParamGradients, camera: &CameraView) {
        let (hw, hh) = (0.5 * camera.width as f64, 0.5 * camera.height as f64);
        for i in 0..grads.len() {
            if grads.visible[i] {
                let [gx, gy] = grads.mean2d[i];
                self.sum[i] += ((gx * hw).powi(2) + (gy * hh).powi(2)).sqrt();
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / f64::from(self.count[i])
        }
    }
}

/// Clones or splits Gaussians whose mean positional gradient exceeds the
/// threshold and removes those below the prune opacity or above the size cap. IDs for which
/// `protected` holds are never pruned or split; new Gaussians are appended
/// with fresh IDs and zero optimizer moments.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    optimizer: &mut OptimizerState,
    stats: &GradStats,
    cfg: &DensifyConfig,
    extent: f64,
    protected: &dyn Fn(u64) -> bool,
    allocator: &mut IdAllocator,
) -> Result<DensifyOutcome> {
    let n = cloud.len();
    let mut out = DensifyOutcome::default();
    let mut keep = vec![true; n];
    let mut born: Vec<GaussianPrimitive> = Vec::new();
    let threshold_scale = cfg.scale_threshold * extent;
    let room = cloud.len() < cfg.max_gaussians;
    for i in 0..n {
        let id = cloud.ids[i];
        let shielded = protected(id);
        if room && stats.mean(i) > cfg.grad_threshold {
            let g = cloud.get(i);
            let (axis, max_log) =
                g.log_scale
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (a, &s)| if s > acc.1 { (a, s) } else { acc },
                    );
            if max_log.exp() <= threshold_scale {
                born.push(GaussianPrimitive {
                    id: allocator.next_id()?,
                    ..g
                });
                out.cloned += 1;
            } else if !shielded {
                let r = crate::scene::rotation_matrix(g.rotation);
                let offset = 0.5 * max_log.exp();
                let mut log_scale = g.log_scale;
                log_scale.iter_mut().for_each(|s| *s -= 1.6f64.ln());
                for sign in [-1.0, 1.0] {
                    let position =
                        std::array::from_fn(|c| g.position[c] + sign * offset * r[(c, axis)]);
                    born.push(GaussianPrimitive {
                        id: allocator.next_id()?,
                        position,
                        log_scale,
                        ..g.clone()
                    });
                }
                keep[i] = false;
                out.split += 1;
            }
        }
        let oversized = cfg
            .max_scale
            .is_some_and(|f| cloud.log_scales[i].iter().any(|s| s.exp() > f * extent));
        if keep[i]
            && !shielded
            && (oversized || sigmoid(cloud.opacity_logits[i]) < cfg.prune_opacity)
        {
            keep[i] = false;
            out.pruned += 1;
        }
    }
    let before = cloud.ids.clone();
    cloud.retain(|i| keep[i]);
    optimizer.retain(&keep);
    for g in &born {
        cloud.push(g);
    }
    optimizer.push_zeros(born.len());
    debug_assert!(
        cloud.ids.windows(2).all(|w| w[0] < w[1]),
        "allocated IDs exceed existing ones"
    );
    debug_assert!(before.len() + born.len() >= cloud.len());
    Ok(out)
}

/// Trainer for one block: owns its cloud, optimizer, RNG and allocator.
#[derive(Debug, Clone)]
pub struct BlockTrainer {
    pub block_id: u16,
    pub cloud: GaussianCloud,
    pub optimizer: OptimizerState,
    pub iteration: u64,
    pub consensus: Option<ConsensusState>,
    pub extent: f64,
    /// Frozen Gaussians of other blocks, rendered alongside the local cloud.
    pub context: GaussianCloud,
    views: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    allocator: IdAllocator,
    stats: GradStats,
    cfg: TrainConfig,
    pub densified: DensifyOutcome,
}

impl BlockTrainer {
    /// `views` index the caller's view list; `first_free_id` is one past the
    /// largest initial ID.
    pub fn new(
        block_id: u16,
        cloud: GaussianCloud,
        views: Vec<usize>,
        cfg: TrainConfig,
        extent: f64,
        first_free_id: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if views.is_empty() {
            return Err(Error::Config(format!(
                "block {block_id} has no training views"
            )));
        }
        cloud.validate()?;
        let n = cloud.len();
        let fd = cloud.feature_dim();
        Ok(Self {
            block_id,
            optimizer: OptimizerState::new(n, fd),
            cloud,
            iteration: 0,
            consensus: None,
            extent,
            context: GaussianCloud::with_feature_dim(fd),
            order: Vec::new(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(u64::from(block_id))),
            allocator: IdAllocator::for_block(block_id, first_free_id),
            stats: GradStats::new(n),
            views,
            cfg,
            densified: DensifyOutcome::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn views(&self) -> &[usize] {
        &self.views
    }

    /// Gradient statistics accumulated since the last densification.
    pub fn grad_stats(&self) -> &GradStats {
        &self.stats
    }

    fn next_view(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order = self.views.clone();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    fn rates(&self) -> Vec<f64> {
        let lr = &self.cfg.lr;
        let t = if self.cfg.iterations == 0 {
            0.0
        } else {
            (self.iteration as f64 / self.cfg.iterations as f64).min(1.0)
        };
        let pos = (lr.position.ln() * (1.0 - t) + lr.position_final.ln() * t).exp() * self.extent;
        let fd = self.cloud.feature_dim();
        let mut r = vec![pos; 3];
        r.extend([lr.rotation; 4]);
        r.extend([lr.scale; 3]);
        r.extend(std::iter::repeat_n(lr.features, fd));
        r.push(lr.opacity);
        r
    }

    fn is_shared(&self, id: u64) -> bool {
        self.consensus
            .as_ref()
            .is_some_and(|c| c.z.index_of(id).is_some())
    }

    /// One stochastic step on a view of this block, then densification at
    /// interval boundaries.
    pub fn train_step(&mut self, cameras: &[CameraView], images: &[Image]) -> Result<StepStats> {
        let view = self.next_view();
        let camera = &cameras[view];
        let mut back = if self.context.is_empty() {
            render_backward(
                &self.cloud,
                camera,
                &images[view],
                &self.cfg.loss,
                &self.cfg.render,
            )?
        } else {
            let mut scene = self.cloud.clone();
            scene.append(&self.context);
            let mut b = render_backward(
                &scene,
                camera,
                &images[view],
                &self.cfg.loss,
                &self.cfg.render,
            )?;
            b.grads.truncate(self.cloud.len(), self.cloud.feature_dim());
            b
        };
        let mut penalty = 0.0;
        if let Some(c) = self.consensus.as_ref().filter(|c| c.active) {
            penalty =
                accumulate_penalty(&self.cloud, &mut back.grads, &c.z, &c.duals, &c.penalties)?;
        }
        self.stats.record(&back.grads, camera);
        let rates = self.rates();
        self.optimizer
            .apply(&mut self.cloud, &back.grads, &rates, &self.cfg.adam);
        self.cloud.normalize_rotations();
        self.iteration += 1;

        let d = &self.cfg.densify;
        if d.enabled
            && self.iteration % d.interval == 0
            && self.iteration < d.stop(self.cfg.iterations)
        {
            let shared: BTreeSet<u64> = self
                .consensus
                .as_ref()
                .map(|c| c.z.ids.iter().copied().collect())
                .unwrap_or_default();
            let outcome = densify_and_prune(
                &mut self.cloud,
                &mut self.optimizer,
                &self.stats,
                d,
                self.extent,
                &|id| shared.contains(&id),
                &mut self.allocator,
            )?;
            self.densified.cloned += outcome.cloned;
            self.densified.split += outcome.split;
            self.densified.pruned += outcome.pruned;
            self.stats = GradStats::new(self.cloud.len());
        }
        Ok(StepStats {
            loss: back.loss,
            penalty,
            view,
        })
    }

    /// Replaces the context with every Gaussian of `global` this block does not hold.
    pub fn set_context(&mut self, global: &GaussianCloud) {
        let idx: Vec<usize> = (0..global.len())
            .filter(|&i| self.cloud.index_of(global.ids[i]).is_none())
            .collect();
        self.context = global.select(&idx);
    }

    /// Current values of the shared IDs, in ID order.
    pub fn shared_snapshot(&self) -> GaussianCloud {
        match &self.consensus {
            Some(c) => {
                let idx: Vec<usize> =
                    c.z.ids
                        .iter()
                        .filter_map(|id| self.cloud.index_of(*id))
                        .collect();
                self.cloud.select(&idx)
            }
            None => GaussianCloud::with_feature_dim(self.cloud.feature_dim()),
        }
    }

    /// Gaussians owned by this block alone.
    pub fn owned_snapshot(&self) -> GaussianCloud {
        let idx: Vec<usize> = (0..self.cloud.len())
            .filter(|&i| !self.is_shared(self.cloud.ids[i]))
            .collect();
        self.cloud.select(&idx)
    }

    /// Applies a consensus broadcast: duals step against the relaxed copy of
    /// the values just uploaded, then `z` moves to the broadcast values.
    /// Shared IDs missing from the broadcast were pruned by the master and are
    /// dropped here too. Returns the IDs dropped.
    pub fn apply_consensus(
        &mut self,
        z_new: &GaussianCloud,
        penalties: PropertyPenalties,
    ) -> Result<Vec<u64>> {
        let snapshot = self.shared_snapshot();
        let Some(c) = self.consensus.as_mut() else {
            return Ok(Vec::new());
        };
        let dropped: Vec<u64> =
            c.z.ids
                .iter()
                .copied()
                .filter(|id| z_new.index_of(*id).is_none())
                .collect();
        let x_hat = relaxed_local(&snapshot, &c.z, c.alpha);
        let live: Vec<usize> = (0..x_hat.len())
            .filter(|&i| z_new.index_of(x_hat.ids[i]).is_some())
            .collect();
        let x_hat = x_hat.select(&live);
        c.duals.retain_ids(|id| z_new.index_of(id).is_some());
        dual_update(&mut c.duals, &x_hat, z_new)?;
        let idx: Vec<usize> = c
            .duals
            .ids()
            .iter()
            .map(|id| z_new.index_of(*id).expect("checked above"))
            .collect();
        c.z = z_new.select(&idx);
        c.penalties = penalties;
        if !dropped.is_empty() {
            let gone: BTreeSet<u64> = dropped.iter().copied().collect();
            let keep: Vec<bool> = self.cloud.ids.iter().map(|id| !gone.contains(id)).collect();
            self.cloud.retain(|i| keep[i]);
            self.optimizer.retain(&keep);
            self.stats = GradStats::new(self.cloud.len());
        }
        Ok(dropped)
    }
}

/// Single-block training on every given view with no penalty term.
pub fn train_centralized(
    points: &[ScenePoint],
    cameras: &[CameraView],
    images: &[Image],
    train_views: &[usize],
    cfg: &TrainConfig,
) -> Result<GaussianCloud> {
    let cloud = initialize_gaussians(points, cfg.sh_degree, cfg.init_opacity);
    let pos: Vec<[f64; 3]> = points.iter().map(ScenePoint::position_f64).collect();
    let first_free = cloud.len() as u64;
    let mut trainer = BlockTrainer::new(
        0,
        cloud,
        train_views.to_vec(),
        cfg.clone(),
        scene_extent(&pos),
        first_free,
    )?;
    for _ in 0..cfg.iterations {
        trainer.train_step(cameras, images)?;
    }
    Ok(trainer.cloud)
}
