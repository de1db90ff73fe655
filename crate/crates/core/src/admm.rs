//! Scaled consensus ADMM over per-block copies of shared Gaussians.
//!
//! All consensus arithmetic happens in the optimization parameterization
//! (log-scale, logit-opacity, raw quaternion). The consensus quaternion is
//! the sign-aligned arithmetic mean; it is renormalized only when the global
//! model is exported, so the scaled duals keep a zero mean over owners.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::cloud_checksum;
use crate::error::{Error, Result};
use crate::render::ParamGradients;
use crate::scene::GaussianCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Property {
    Position,
    Rotation,
    Scale,
    Features,
    Opacity,
}

pub const PROPERTIES: [Property; 5] = [
    Property::Position,
    Property::Rotation,
    Property::Scale,
    Property::Features,
    Property::Opacity,
];

fn prop(c: &GaussianCloud, i: usize, p: Property) -> &[f64] {
    match p {
        Property::Position => &c.positions[i],
        Property::Rotation => &c.rotations[i],
        Property::Scale => &c.log_scales[i],
        Property::Features => c.features_of(i),
        Property::Opacity => std::slice::from_ref(&c.opacity_logits[i]),
    }
}

fn prop_mut(c: &mut GaussianCloud, i: usize, p: Property) -> &mut [f64] {
    match p {
        Property::Position => &mut c.positions[i],
        Property::Rotation => &mut c.rotations[i],
        Property::Scale => &mut c.log_scales[i],
        Property::Features => c.features_of_mut(i),
        Property::Opacity => std::slice::from_mut(&mut c.opacity_logits[i]),
    }
}

fn grad_mut(g: &mut ParamGradients, i: usize, p: Property, feature_dim: usize) -> &mut [f64] {
    match p {
        Property::Position => &mut g.positions[i],
        Property::Rotation => &mut g.rotations[i],
        Property::Scale => &mut g.log_scales[i],
        Property::Features => &mut g.features[i * feature_dim..(i + 1) * feature_dim],
        Property::Opacity => std::slice::from_mut(&mut g.opacity_logits[i]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropertyPenalties {
    pub rho_p: f64,
    pub rho_q: f64,
    pub rho_s: f64,
    pub rho_f: f64,
    pub rho_o: f64,
}

impl Default for PropertyPenalties {
    fn default() -> Self {
        Self {
            rho_p: 1e4,
            rho_q: 1e4,
            rho_s: 1e4,
            rho_f: 1e3,
            rho_o: 1e4,
        }
    }
}

impl PropertyPenalties {
    pub fn uniform(rho: f64) -> Self {
        Self {
            rho_p: rho,
            rho_q: rho,
            rho_s: rho,
            rho_f: rho,
            rho_o: rho,
        }
    }

    pub fn get(&self, p: Property) -> f64 {
        match p {
            Property::Position => self.rho_p,
            Property::Rotation => self.rho_q,
            Property::Scale => self.rho_s,
            Property::Features => self.rho_f,
            Property::Opacity => self.rho_o,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rho_p: self.rho_p * factor,
            rho_q: self.rho_q * factor,
            rho_s: self.rho_s * factor,
            rho_f: self.rho_f * factor,
            rho_o: self.rho_o * factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if PROPERTIES
            .iter()
            .all(|&p| self.get(p) > 0.0 && self.get(p).is_finite())
        {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "penalties must be positive: {self:?}"
            )))
        }
    }
}

/// One value per property.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerProperty {
    pub p: f64,
    pub q: f64,
    pub s: f64,
    pub f: f64,
    pub o: f64,
}

impl PerProperty {
    fn slot(&mut self, p: Property) -> &mut f64 {
        match p {
            Property::Position => &mut self.p,
            Property::Rotation => &mut self.q,
            Property::Scale => &mut self.s,
            Property::Features => &mut self.f,
            Property::Opacity => &mut self.o,
        }
    }

    pub fn get(&self, p: Property) -> f64 {
        match p {
            Property::Position => self.p,
            Property::Rotation => self.q,
            Property::Scale => self.s,
            Property::Features => self.f,
            Property::Opacity => self.o,
        }
    }

    pub fn max(&self) -> f64 {
        PROPERTIES.iter().map(|&p| self.get(p)).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsensusConfig {
    /// Training iterations between consensus rounds.
    pub interval: u64,
    pub mu: f64,
    pub tau_inc: f64,
    pub tau_dec: f64,
    pub alpha: f64,
    pub over_relaxation: bool,
    pub adaptive: bool,
    pub freeze_iteration: u64,
    pub penalties: PropertyPenalties,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            mu: 10.0,
            tau_inc: 2.0,
            tau_dec: 2.0,
            alpha: 1.6,
            over_relaxation: true,
            adaptive: true,
            freeze_iteration: 2000,
            penalties: PropertyPenalties::default(),
        }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.interval == 0 {
            return bad("consensus interval must be >= 1");
        }
        if self.mu <= 1.0 || self.tau_inc <= 1.0 || self.tau_dec <= 1.0 {
            return bad("mu, tau_inc and tau_dec must exceed 1");
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return bad("alpha must lie in (0, 2)");
        }
        self.penalties.validate()
    }

    /// The relaxation factor actually applied.
    pub fn effective_alpha(&self) -> f64 {
        if self.over_relaxation {
            self.alpha
        } else {
            1.0
        }
    }
}

/// Consensus model `z`: every live global ID, sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub cloud: GaussianCloud,
}

impl GlobalModel {
    pub fn checksum(&self) -> u64 {
        cloud_checksum(&self.cloud)
    }

    /// Copy with unit, canonical quaternions.
    pub fn export(&self) -> GaussianCloud {
        let mut c = self.cloud.clone();
        c.normalize_rotations();
        c
    }
}

/// Scaled duals of one block, stored with the cloud layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub values: GaussianCloud,
}

impl DualState {
    pub fn zeros(ids: &[u64], feature_dim: usize) -> Self {
        let mut values = GaussianCloud::with_feature_dim(feature_dim);
        values.ids = ids.to_vec();
        values.positions = vec![[0.0; 3]; ids.len()];
        values.rotations = vec![[0.0; 4]; ids.len()];
        values.log_scales = vec![[0.0; 3]; ids.len()];
        values.features = vec![0.0; ids.len() * feature_dim];
        values.opacity_logits = vec![0.0; ids.len()];
        Self { values }
    }

    pub fn ids(&self) -> &[u64] {
        &self.values.ids
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Drops duals whose ID fails `keep`.
    pub fn retain_ids(&mut self, mut keep: impl FnMut(u64) -> bool) {
        let ids = self.values.ids.clone();
        self.values.retain(|i| keep(ids[i]));
    }

    pub fn checksum(&self) -> u64 {
        cloud_checksum(&self.values)
    }
}

/// `alpha * x + (1 - alpha) * z_prev`.
pub fn relax_vector(x: &[f64], z_prev: &[f64], alpha: f64) -> Vec<f64> {
    if alpha == 1.0 {
        return x.to_vec();
    }
    x.iter()
        .zip(z_prev)
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect()
}

/// Componentwise mean, summed in slice order.
pub fn average_vectors(vectors: &[&[f64]]) -> Vec<f64> {
    let Some(first) = vectors.first() else {
        return Vec::new();
    };
    let mut acc = first.to_vec();
    for v in &vectors[1..] {
        for (a, b) in acc.iter_mut().zip(v.iter()) {
            *a += b;
        }
    }
    let n = vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// `u += x_hat - z`.
pub fn dual_step(u: &mut [f64], x_hat: &[f64], z: &[f64]) {
    for ((u, x), z) in u.iter_mut().zip(x_hat).zip(z) {
        *u += x - z;
    }
}

/// `q` or `-q`, whichever points into the hemisphere of `reference`.
pub fn align_quaternion(q: [f64; 4], reference: [f64; 4]) -> [f64; 4] {
    let dot: f64 = q.iter().zip(&reference).map(|(a, b)| a * b).sum();
    if dot < 0.0 {
        q.map(|v| -v)
    } else {
        q
    }
}

fn push_relaxed(
    out: &mut GaussianCloud,
    x: &GaussianCloud,
    i: usize,
    z_prev: Option<(&GaussianCloud, usize)>,
    alpha: f64,
) {
    out.ids.push(x.ids[i]);
    out.positions.push([0.0; 3]);
    out.rotations.push([0.0; 4]);
    out.log_scales.push([0.0; 3]);
    out.features
        .extend(std::iter::repeat_n(0.0, x.feature_dim()));
    out.opacity_logits.push(0.0);
    let j = out.len() - 1;
    for p in PROPERTIES {
        let mut v = prop(x, i, p).to_vec();
        if let Some((z, zi)) = z_prev {
            let zp = prop(z, zi, p);
            if p == Property::Rotation {
                let q = align_quaternion([v[0], v[1], v[2], v[3]], z.rotations[zi]);
                v = q.to_vec();
            }
            v = relax_vector(&v, zp, alpha);
        }
        prop_mut(out, j, p).copy_from_slice(&v);
    }
}

/// Over-relaxed local copies `x_hat` of every Gaussian in `x`, quaternions
/// first sign-aligned to `z_prev`. IDs missing from `z_prev` pass through.
pub fn relaxed_local(x: &GaussianCloud, z_prev: &GaussianCloud, alpha: f64) -> GaussianCloud {
    let mut out = GaussianCloud::with_feature_dim(x.feature_dim());
    for i in 0..x.len() {
        let zp = z_prev.index_of(x.ids[i]).map(|j| (z_prev, j));
        push_relaxed(&mut out, x, i, zp, alpha);
    }
    out
}

/// Averages every ID over the blocks whose payload contains it. IDs sent by
/// two or more blocks are relaxed against `z_prev` first; an ID sent by a
/// single block is copied verbatim. Blocks are reduced in ascending ID order
/// whatever order `locals` arrives in.
pub fn consensus_average(
    locals: &[(u16, &GaussianCloud)],
    z_prev: &GaussianCloud,
    alpha: f64,
    over_relaxed: bool,
) -> Result<GlobalModel> {
    let mut order: Vec<(u16, &GaussianCloud)> = locals.to_vec();
    order.sort_by_key(|(b, _)| *b);
    let feature_dim = order
        .first()
        .map_or(z_prev.feature_dim(), |(_, c)| c.feature_dim());
    if let Some((b, _)) = order.iter().find(|(_, c)| c.feature_dim() != feature_dim) {
        return Err(Error::IdMisalignment(format!(
            "block {b} has a different feature dimension"
        )));
    }
    let alpha = if over_relaxed { alpha } else { 1.0 };

    let mut owners: BTreeMap<u64, Vec<(usize, usize)>> = BTreeMap::new();
    for (k, (_, c)) in order.iter().enumerate() {
        for (i, id) in c.ids.iter().enumerate() {
            owners.entry(*id).or_default().push((k, i));
        }
    }

    let mut z = GaussianCloud::with_feature_dim(feature_dim);
    for (id, contributors) in &owners {
        if let [(k, i)] = contributors[..] {
            z.push(&order[k].1.get(i));
            continue;
        }
        let zp = z_prev.index_of(*id).map(|j| (z_prev, j));
        let zp = match zp {
            Some(zp) => zp,
            None => {
                // No previous consensus: align to the first contributor, no relaxation.
                let (k, i) = contributors[0];
                (order[k].1, i)
            }
        };
        let a = if z_prev.index_of(*id).is_some() {
            alpha
        } else {
            1.0
        };
        let mut scratch = GaussianCloud::with_feature_dim(feature_dim);
        for &(k, i) in contributors {
            push_relaxed(&mut scratch, order[k].1, i, Some(zp), a);
        }
        let mut g = scratch.get(0);
        for p in PROPERTIES {
            let vs: Vec<&[f64]> = (0..scratch.len()).map(|r| prop(&scratch, r, p)).collect();
            let mean = average_vectors(&vs);
            match p {
                Property::Position => g.position.copy_from_slice(&mean),
                Property::Rotation => g.rotation.copy_from_slice(&mean),
                Property::Scale => g.log_scale.copy_from_slice(&mean),
                Property::Features => g.features.copy_from_slice(&mean),
                Property::Opacity => g.opacity_logit = mean[0],
            }
        }
        z.push(&g);
    }
    Ok(GlobalModel { cloud: z })
}

/// `u += x_hat - z` for every ID in `u`; `x_hat` must carry exactly the IDs
/// of `u`, and `z` must contain them all.
pub fn dual_update(u: &mut DualState, x_hat: &GaussianCloud, z: &GaussianCloud) -> Result<()> {
    if u.values.ids != x_hat.ids {
        return Err(Error::IdMisalignment(
            "dual and local ID lists differ".into(),
        ));
    }
    for i in 0..u.len() {
        let id = u.values.ids[i];
        let j = z.index_of(id).ok_or(Error::UnownedId(id))?;
        for p in PROPERTIES {
            let x = prop(x_hat, i, p).to_vec();
            dual_step(prop_mut(&mut u.values, i, p), &x, prop(z, j, p));
        }
    }
    Ok(())
}

/// Adds the penalty gradient of every ID in `u` to `grads` (indexed like
/// `cloud`) and returns the penalty value.
pub fn accumulate_penalty(
    cloud: &GaussianCloud,
    grads: &mut ParamGradients,
    z: &GaussianCloud,
    u: &DualState,
    penalties: &PropertyPenalties,
) -> Result<f64> {
    let fd = cloud.feature_dim();
    let mut total = 0.0;
    for (r, &id) in u.values.ids.iter().enumerate() {
        let i = cloud.index_of(id).ok_or(Error::UnownedId(id))?;
        let j = z.index_of(id).ok_or(Error::UnownedId(id))?;
        for p in PROPERTIES {
            let rho = penalties.get(p);
            let mut x = prop(cloud, i, p).to_vec();
            let mut sign = 1.0;
            if p == Property::Rotation
                && align_quaternion(cloud.rotations[i], z.rotations[j]) != cloud.rotations[i]
            {
                x.iter_mut().for_each(|v| *v = -*v);
                sign = -1.0;
            }
            let zv = prop(z, j, p);
            let uv = prop(&u.values, r, p);
            let g = grad_mut(grads, i, p, fd);
            for c in 0..x.len() {
                let d = x[c] - zv[c] + uv[c];
                total += 0.5 * rho * d * d;
                g[c] += sign * rho * d;
            }
        }
    }
    Ok(total)
}

/// `sum_p rho_p / 2 * |x_p - z_p + u_p|^2` and its gradient with respect to
/// `x`. `x` and `u` must carry the same IDs.
pub fn penalty_loss_and_grad(
    x: &GaussianCloud,
    z: &GaussianCloud,
    u: &DualState,
    penalties: &PropertyPenalties,
) -> Result<(f64, ParamGradients)> {
    if x.ids != u.values.ids {
        return Err(Error::IdMisalignment(
            "local and dual ID lists differ".into(),
        ));
    }
    let mut grads = ParamGradients::zeros(x.len(), x.feature_dim());
    let value = accumulate_penalty(x, &mut grads, z, u, penalties)?;
    Ok((value, grads))
}

/// Primal `|x - z_new|` stacked over every (block, ID) pair, and dual
/// `|rho (z_new - z_prev)|` stacked over the same pairs.
pub fn residuals(
    locals: &[(u16, &GaussianCloud)],
    z_new: &GaussianCloud,
    z_prev: &GaussianCloud,
    penalties: &PropertyPenalties,
) -> Result<(f64, f64)> {
    let mut primal = 0.0;
    let mut dual = 0.0;
    for (_, x) in locals {
        for i in 0..x.len() {
            let id = x.ids[i];
            let j = z_new.index_of(id).ok_or(Error::UnownedId(id))?;
            let zp = z_prev.index_of(id);
            for p in PROPERTIES {
                let mut xv = prop(x, i, p).to_vec();
                if p == Property::Rotation {
                    xv = align_quaternion(x.rotations[i], z_new.rotations[j]).to_vec();
                }
                let zv = prop(z_new, j, p);
                primal += xv.iter().zip(zv).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                if let Some(k) = zp {
                    let rho = penalties.get(p);
                    dual += zv
                        .iter()
                        .zip(prop(z_prev, k, p))
                        .map(|(a, b)| (rho * (a - b)).powi(2))
                        .sum::<f64>();
                }
            }
        }
    }
    Ok((primal.sqrt(), dual.sqrt()))
}

/// Residual balancing with a freeze after `freeze_iteration`.
pub fn adapt_penalties(
    penalties: &PropertyPenalties,
    primal_norm: f64,
    dual_norm: f64,
    cfg: &ConsensusConfig,
    iteration: u64,
) -> PropertyPenalties {
    if !cfg.adaptive || iteration > cfg.freeze_iteration {
        *penalties
    } else if primal_norm > cfg.mu * dual_norm {
        penalties.scaled(cfg.tau_inc)
    } else if dual_norm > cfg.mu * primal_norm {
        penalties.scaled(1.0 / cfg.tau_dec)
    } else {
        *penalties
    }
}

/// Largest componentwise spread (max minus min over owners) of any ID
/// present in two or more payloads, per property.
pub fn max_disagreement(
    locals: &[(u16, &GaussianCloud)],
    reference: &GaussianCloud,
) -> PerProperty {
    let mut lo: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut hi: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut count: BTreeMap<u64, usize> = BTreeMap::new();
    for (_, x) in locals {
        for i in 0..x.len() {
            let id = x.ids[i];
            let mut flat = Vec::new();
            for p in PROPERTIES {
                if p == Property::Rotation {
                    let r = reference
                        .index_of(id)
                        .map_or(x.rotations[i], |j| reference.rotations[j]);
                    flat.extend(align_quaternion(x.rotations[i], r));
                } else {
                    flat.extend_from_slice(prop(x, i, p));
                }
            }
            *count.entry(id).or_default() += 1;
            let l = lo.entry(id).or_insert_with(|| flat.clone());
            l.iter_mut().zip(&flat).for_each(|(a, b)| *a = a.min(*b));
            let h = hi.entry(id).or_insert_with(|| flat.clone());
            h.iter_mut().zip(&flat).for_each(|(a, b)| *a = a.max(*b));
        }
    }
    let mut out = PerProperty::default();
    for (id, n) in count {
        if n < 2 {
            continue;
        }
        let (l, h) = (&lo[&id], &hi[&id]);
        let mut offset = 0;
        for p in PROPERTIES {
            let width = match p {
                Property::Position | Property::Scale => 3,
                Property::Rotation => 4,
                Property::Features => l.len() - 11,
                Property::Opacity => 1,
            };
            let spread = (offset..offset + width)
                .map(|c| h[c] - l[c])
                .fold(0.0, f64::max);
            let slot = out.slot(p);
            *slot = slot.max(spread);
            offset += width;
        }
    }
    out
}

/// L-infinity norm of the per-ID dual mean over the blocks holding that ID.
pub fn dual_mean_max(duals: &[&DualState]) -> f64 {
    let mut sums: BTreeMap<u64, (Vec<f64>, usize)> = BTreeMap::new();
    for u in duals {
        for i in 0..u.len() {
            let mut flat = Vec::new();
            for p in PROPERTIES {
                flat.extend_from_slice(prop(&u.values, i, p));
            }
            let e = sums
                .entry(u.values.ids[i])
                .or_insert_with(|| (vec![0.0; flat.len()], 0));
            e.0.iter_mut().zip(&flat).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
    }
    sums.values()
        .flat_map(|(s, n)| s.iter().map(move |v| (v / *n as f64).abs()))
        .fold(0.0, f64::max)
}

/// One JSON line per consensus round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub round: u64,
    pub iteration: u64,
    pub primal_norm: f64,
    pub dual_norm: f64,
    pub rho: PropertyPenalties,
    pub max_disagreement: PerProperty,
    pub dual_mean_max: f64,
    pub shared_ids: usize,
    pub global_ids: usize,
}
