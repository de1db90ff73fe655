//! Recursive balanced bipartition of a scene into overlapping blocks.
//!
//! Cells are split along the longer ground-plane axis of their tight bounding
//! box; the vertical axis is never split. Each child box is re-tightened
//! around its points before it is split again. The split plane sits at the
//! point quantile that gives each child a share of points proportional to
//! the number of blocks it will still be divided into, which is the median
//! whenever the block count is a power of two.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::scene::CameraView;

/// Default bounding-box expansion factor.
pub const DEFAULT_EXPANSION: f64 = 1.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    /// Closed containment test (`min <= p <= max`).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(other.min) && self.contains(other.max)
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|a| 0.5 * (self.min[a] + self.max[a]))
    }

    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.max[a] - self.min[a])
    }
}

/// Componentwise min/max of `points`.
pub fn tight_aabb(points: &[[f64; 3]]) -> Result<Aabb> {
    let first = *points.first().ok_or(Error::EmptyPointSet)?;
    let mut b = Aabb {
        min: first,
        max: first,
    };
    for p in &points[1..] {
        for a in 0..3 {
            b.min[a] = b.min[a].min(p[a]);
            b.max[a] = b.max[a].max(p[a]);
        }
    }
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPlane {
    /// Point quantile (median for two equal halves).
    #[default]
    Median,
    /// Geometric midpoint of the cell's bounding box.
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Index of the vertical axis (never split).
    pub vertical_axis: usize,
    pub plane: SplitPlane,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            vertical_axis: 1,
            plane: SplitPlane::Median,
        }
    }
}

impl SplitConfig {
    pub fn ground_axes(&self) -> [usize; 2] {
        match self.vertical_axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }
}

/// A leaf cell of the recursive split.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreBlock {
    pub aabb: Aabb,
    /// Sorted point indices.
    pub points: Vec<usize>,
}

struct Cell {
    points: Vec<usize>,
    aabb: Aabb,
    blocks: usize,
}

fn tighten(points: &[[f64; 3]], idx: &[usize]) -> Aabb {
    let sub: Vec<[f64; 3]> = idx.iter().map(|&i| points[i]).collect();
    tight_aabb(&sub).expect("cells are never empty")
}

/// Splits `points` into exactly `blocks` core cells.
pub fn split_recursive(
    points: &[[f64; 3]],
    blocks: usize,
    cfg: &SplitConfig,
) -> Result<Vec<CoreBlock>> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    if blocks == 0 || blocks > points.len() {
        return Err(Error::OverPartitioned {
            blocks,
            points: points.len(),
        });
    }
    let all: Vec<usize> = (0..points.len()).collect();
    let mut cells = vec![Cell {
        aabb: tighten(points, &all),
        points: all,
        blocks,
    }];
    // Level by level: every cell that still has to be divided is split once.
    while cells.iter().any(|c| c.blocks > 1) {
        let mut next = Vec::with_capacity(cells.len() * 2);
        for cell in cells {
            if cell.blocks == 1 {
                next.push(cell);
                continue;
            }
            let (a, b) = bipartition(points, cell, cfg);
            next.push(a);
            next.push(b);
        }
        cells = next;
    }
    Ok(cells
        .into_iter()
        .map(|mut c| {
            c.points.sort_unstable();
            CoreBlock {
                aabb: c.aabb,
                points: c.points,
            }
        })
        .collect())
}

fn bipartition(points: &[[f64; 3]], cell: Cell, cfg: &SplitConfig) -> (Cell, Cell) {
    let [g0, g1] = cfg.ground_axes();
    let ext = cell.aabb.extent();
    let axis = if ext[g1] > ext[g0] { g1 } else { g0 };

    let mut order = cell.points;
    order.sort_by(|&i, &j| points[i][axis].total_cmp(&points[j][axis]).then(i.cmp(&j)));

    let left_blocks = cell.blocks.div_ceil(2);
    let right_blocks = cell.blocks - left_blocks;
    let n = order.len();
    let quantile = ((n * left_blocks) as f64 / cell.blocks as f64).round() as usize;
    let quantile = quantile.clamp(left_blocks, n - right_blocks);
    let cut = match cfg.plane {
        SplitPlane::Median => quantile,
        SplitPlane::Midpoint => {
            let mid = 0.5 * (cell.aabb.min[axis] + cell.aabb.max[axis]);
            let c = order.partition_point(|&i| points[i][axis] <= mid);
            // Each side needs at least one point per block it will hold.
            if c < left_blocks || n - c < right_blocks {
                quantile
            } else {
                c
            }
        }
    };
    let right = order.split_off(cut);
    let left = order;
    (
        Cell {
            aabb: tighten(points, &left),
            points: left,
            blocks: left_blocks,
        },
        Cell {
            aabb: tighten(points, &right),
            points: right,
            blocks: right_blocks,
        },
    )
}

/// Blocks with their overlapping expanded boxes and assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    pub blocks: Vec<Block>,
    /// Gaussian ID -> owning blocks (ascending), for IDs owned by two or more blocks.
    pub shared: BTreeMap<u64, Vec<usize>>,
    pub expansion: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub core: Aabb,
    pub expanded: Aabb,
    pub points: Vec<usize>,
    pub views: Vec<usize>,
    /// Sorted Gaussian IDs.
    pub gaussians: Vec<u64>,
}

impl BlockPartition {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Shared IDs owned by `block`, ascending.
    pub fn shared_ids_of(&self, block: usize) -> Vec<u64> {
        self.shared
            .iter()
            .filter(|(_, owners)| owners.contains(&block))
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn is_shared(&self, id: u64) -> bool {
        self.shared.contains_key(&id)
    }
}

fn expand(core: &Aabb, s: f64, vertical: usize, vrange: (f64, f64)) -> Aabb {
    let c = core.center();
    let mut out = *core;
    for a in 0..3 {
        if a == vertical {
            out.min[a] = vrange.0.min(core.min[a]);
            out.max[a] = vrange.1.max(core.max[a]);
        } else {
            let half = 0.5 * (core.max[a] - core.min[a]) * s;
            out.min[a] = (c[a] - half).min(core.min[a]);
            out.max[a] = (c[a] + half).max(core.max[a]);
        }
    }
    out
}

fn nearest_block(cores: &[CoreBlock], p: [f64; 3], ground: [usize; 2]) -> usize {
    let dist = |b: &CoreBlock| {
        let c = b.aabb.center();
        ground.iter().map(|&a| (p[a] - c[a]).powi(2)).sum::<f64>()
    };
    (0..cores.len())
        .min_by(|&i, &j| dist(&cores[i]).total_cmp(&dist(&cores[j])).then(i.cmp(&j)))
        .unwrap_or(0)
}

/// Expands each core box by `s` on the ground axes (the vertical axis spans
/// the whole scene, camera centers included) and assigns points, views and
/// Gaussians to every block whose expanded box contains them. Views and
/// Gaussians outside every box fall back to the nearest block center.
pub fn expand_and_assign(
    cores: &[CoreBlock],
    points: &[[f64; 3]],
    views: &[CameraView],
    gaussians: &[(u64, [f64; 3])],
    s: f64,
    cfg: &SplitConfig,
) -> Result<BlockPartition> {
    if s < 1.0 || !s.is_finite() {
        return Err(Error::Config(format!(
            "expansion factor must be >= 1, got {s}"
        )));
    }
    let v = cfg.vertical_axis;
    let ground = cfg.ground_axes();
    let centers: Vec<[f64; 3]> = views.iter().map(CameraView::center).collect();
    let mut vrange = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points
        .iter()
        .chain(&centers)
        .chain(gaussians.iter().map(|(_, p)| p))
    {
        vrange.0 = vrange.0.min(p[v]);
        vrange.1 = vrange.1.max(p[v]);
    }
    let expanded: Vec<Aabb> = cores
        .iter()
        .map(|c| expand(&c.aabb, s, v, vrange))
        .collect();

    let assign = |p: [f64; 3], fallback: bool| -> Vec<usize> {
        let owners: Vec<usize> = (0..expanded.len())
            .filter(|&k| expanded[k].contains(p))
            .collect();
        if owners.is_empty() && fallback {
            vec![nearest_block(cores, p, ground)]
        } else {
            owners
        }
    };

    let point_owners = par::map_indexed(points.len(), true, |i| assign(points[i], true));
    let view_owners: Vec<Vec<usize>> = centers.iter().map(|&c| assign(c, true)).collect();
    let gauss_owners = par::map_indexed(gaussians.len(), true, |i| assign(gaussians[i].1, true));

    let mut blocks: Vec<Block> = cores
        .iter()
        .zip(&expanded)
        .map(|(c, e)| Block {
            core: c.aabb,
            expanded: *e,
            points: vec![],
            views: vec![],
            gaussians: vec![],
        })
        .collect();
    for (i, owners) in point_owners.iter().enumerate() {
        for &k in owners {
            blocks[k].points.push(i);
        }
    }
    for (i, owners) in view_owners.iter().enumerate() {
        for &k in owners {
            blocks[k].views.push(i);
        }
    }
    let mut shared = BTreeMap::new();
    for ((id, _), owners) in gaussians.iter().zip(&gauss_owners) {
        for &k in owners {
            blocks[k].gaussians.push(*id);
        }
        if owners.len() >= 2 {
            shared.insert(*id, owners.clone());
        }
    }
    for b in &mut blocks {
        b.gaussians.sort_unstable();
    }
    Ok(BlockPartition {
        blocks,
        shared,
        expansion: s,
    })
}

/// Convenience wrapper: split, expand and assign in one go.
pub fn partition_scene(
    points: &[[f64; 3]],
    views: &[CameraView],
    gaussians: &[(u64, [f64; 3])],
    blocks: usize,
    s: f64,
    cfg: &SplitConfig,
) -> Result<BlockPartition> {
    let cores = split_recursive(points, blocks, cfg)?;
    expand_and_assign(&cores, points, views, gaussians, s, cfg)
}

/// JSON partition manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub blocks: Vec<BlockManifest>,
    pub expansion: f64,
    pub shared_gaussians: usize,
    /// Histogram: number of owners -> number of shared IDs.
    pub shared_owner_histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockManifest {
    pub block: usize,
    pub core: Aabb,
    pub expanded: Aabb,
    pub core_points: usize,
    pub points: usize,
    pub view_ids: Vec<u64>,
    pub gaussians: usize,
    pub shared_gaussians: usize,
}

impl PartitionManifest {
    pub fn new(partition: &BlockPartition, cores: &[CoreBlock], views: &[CameraView]) -> Self {
        let mut hist = BTreeMap::new();
        for owners in partition.shared.values() {
            *hist.entry(owners.len()).or_insert(0) += 1;
        }
        let blocks = partition
            .blocks
            .iter()
            .enumerate()
            .map(|(k, b)| BlockManifest {
                block: k,
                core: b.core,
                expanded: b.expanded,
                core_points: cores.get(k).map_or(0, |c| c.points.len()),
                points: b.points.len(),
                view_ids: b.views.iter().map(|&v| views[v].view_id).collect(),
                gaussians: b.gaussians.len(),
                shared_gaussians: b
                    .gaussians
                    .iter()
                    .filter(|id| partition.is_shared(**id))
                    .count(),
            })
            .collect();
        Self {
            blocks,
            expansion: partition.expansion,
            shared_gaussians: partition.shared.len(),
            shared_owner_histogram: hist,
        }
    }
}

/// Top-down SVG of core boxes (solid), expanded boxes (dashed), points and
/// camera centers.
pub fn svg_diagram(
    partition: &BlockPartition,
    points: &[[f64; 3]],
    views: &[CameraView],
    cfg: &SplitConfig,
) -> String {
    const PALETTE: [&str; 8] = [
        "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#9a6324",
    ];
    let [ga, gb] = cfg.ground_axes();
    let centers: Vec<[f64; 3]> = views.iter().map(CameraView::center).collect();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut grow = |p: [f64; 3]| {
        for (k, a) in [ga, gb].into_iter().enumerate() {
            lo[k] = lo[k].min(p[a]);
            hi[k] = hi[k].max(p[a]);
        }
    };
    for b in &partition.blocks {
        grow(b.expanded.min);
        grow(b.expanded.max);
    }
    centers.iter().for_each(|&c| grow(c));
    let size = 800.0;
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let sx = |v: f64| 20.0 + (v - lo[0]) / span * (size - 40.0);
    let sy = |v: f64| 20.0 + (v - lo[1]) / span * (size - 40.0);

    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    svg.push_str("\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let stride = (points.len() / 5000).max(1);
    for (k, b) in partition.blocks.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for &i in b.points.iter().step_by(stride) {
            let p = points[i];
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1" fill="{color}" fill-opacity="0.4"/>"#,
                sx(p[ga]),
                sy(p[gb])
            );
        }
    }
    for (k, b) in partition.blocks.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for (bx, dash) in [(&b.core, ""), (&b.expanded, r#" stroke-dasharray="6 4""#)] {
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
                sx(bx.min[ga]),
                sy(bx.min[gb]),
                sx(bx.max[ga]) - sx(bx.min[ga]),
                sy(bx.max[gb]) - sy(bx.min[gb]),
            );
        }
    }
    for c in &centers {
        let _ = writeln!(
            svg,
            r#"<rect x="{:.2}" y="{:.2}" width="6" height="6" fill="black"/>"#,
            sx(c[ga]) - 3.0,
            sy(c[gb]) - 3.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeSet;

    fn cube_corners() -> Vec<[f64; 3]> {
        (0..8)
            .map(|i| [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64])
            .collect()
    }

    #[test]
    fn tight_box_of_single_point() {
        let b = tight_aabb(&[[1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(b.min, b.max);
    }

    #[test]
    fn tight_box_of_cube() {
        let b = tight_aabb(&cube_corners()).unwrap();
        assert_eq!(
            b,
            Aabb {
                min: [0.0; 3],
                max: [1.0; 3]
            }
        );
    }

    #[test]
    fn tight_box_matches_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<[f64; 3]> = (0..1000)
            .map(|_| std::array::from_fn(|_| rng.random_range(-5.0..5.0)))
            .collect();
        let b = tight_aabb(&pts).unwrap();
        for a in 0..3 {
            let mut lo = f64::MAX;
            let mut hi = f64::MIN;
            for p in &pts {
                if p[a] < lo {
                    lo = p[a];
                }
                if p[a] > hi {
                    hi = p[a];
                }
            }
            assert_eq!((b.min[a], b.max[a]), (lo, hi));
        }
    }

    #[test]
    fn empty_point_set_is_an_error() {
        assert!(matches!(tight_aabb(&[]), Err(Error::EmptyPointSet)));
        assert!(matches!(
            split_recursive(&[], 1, &SplitConfig::default()),
            Err(Error::EmptyPointSet)
        ));
    }

    #[test]
    fn single_block_holds_everything() {
        let pts = cube_corners();
        let b = split_recursive(&pts, 1, &SplitConfig::default()).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].points, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn over_partitioned() {
        assert!(matches!(
            split_recursive(&cube_corners(), 9, &SplitConfig::default()),
            Err(Error::OverPartitioned {
                blocks: 9,
                points: 8
            })
        ));
    }

    #[test]
    fn two_blocks_split_the_long_axis_at_the_median() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        // 2 x 1 ground rectangle in x/z, y vertical.
        let pts: Vec<[f64; 3]> = (0..100)
            .map(|_| {
                [
                    rng.random_range(0.0..2.0),
                    rng.random_range(0.0..0.1),
                    rng.random_range(0.0..1.0),
                ]
            })
            .collect();
        let b = split_recursive(&pts, 2, &SplitConfig::default()).unwrap();
        assert_eq!((b[0].points.len(), b[1].points.len()), (50, 50));
        // Median oracle on the sorted x coordinates.
        let mut xs: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, p)| (p[0], i)).collect();
        xs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let lower: BTreeSet<usize> = xs[..50].iter().map(|x| x.1).collect();
        assert_eq!(b[0].points.iter().copied().collect::<BTreeSet<_>>(), lower);
        assert!(b[0].aabb.max[0] <= b[1].aabb.min[0]);
    }

    #[test]
    fn four_clusters_become_four_blocks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
        let mut pts = Vec::new();
        let mut label = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..25 {
                pts.push([
                    center[0] + rng.random_range(-1.0..1.0),
                    rng.random_range(0.0..0.5),
                    center[1] + rng.random_range(-1.0..1.0),
                ]);
                label.push(c);
            }
        }
        let blocks = split_recursive(&pts, 4, &SplitConfig::default()).unwrap();
        for b in &blocks {
            assert_eq!(b.points.len(), 25);
            let first = label[b.points[0]];
            assert!(b.points.iter().all(|&i| label[i] == first));
        }
    }

    #[test]
    fn vertical_axis_is_never_split() {
        // Tall in y, short in x/z: splits still happen in the ground plane.
        let pts: Vec<[f64; 3]> = (0..64)
            .map(|i| [(i % 8) as f64 * 0.01, i as f64, (i / 8) as f64 * 0.02])
            .collect();
        let blocks = split_recursive(&pts, 4, &SplitConfig::default()).unwrap();
        for b in &blocks {
            assert_eq!(b.aabb.extent()[1] > 0.0, true);
        }
        let total_y: f64 = blocks.iter().map(|b| b.aabb.extent()[1]).sum();
        assert!(total_y > 100.0);
    }

    fn grid_points() -> Vec<[f64; 3]> {
        let mut pts = Vec::new();
        for i in 0..20 {
            for j in 0..10 {
                pts.push([i as f64 * 0.1, 0.0, j as f64 * 0.1]);
            }
        }
        pts
    }

    #[test]
    fn expansion_one_shares_only_the_boundary() {
        let pts = grid_points();
        let cores = split_recursive(&pts, 2, &SplitConfig::default()).unwrap();
        let gauss: Vec<(u64, [f64; 3])> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (i as u64, *p))
            .collect();
        let part =
            expand_and_assign(&cores, &pts, &[], &gauss, 1.0, &SplitConfig::default()).unwrap();
        assert_eq!(
            part.blocks[0].points.len() + part.blocks[1].points.len(),
            pts.len()
        );
        // A point exactly on a shared face lands in both blocks.
        let mut pts2 = pts.clone();
        let face = cores[0].aabb.max[0];
        pts2.push([face, 0.0, 0.5]);
        let cores2 = vec![
            CoreBlock {
                aabb: Aabb {
                    min: [0.0, 0.0, 0.0],
                    max: [face, 0.0, 0.9],
                },
                points: vec![],
            },
            CoreBlock {
                aabb: Aabb {
                    min: [face, 0.0, 0.0],
                    max: [1.9, 0.0, 0.9],
                },
                points: vec![],
            },
        ];
        let part2 = expand_and_assign(
            &cores2,
            &pts2,
            &[],
            &[(7, [face, 0.0, 0.5])],
            1.0,
            &SplitConfig::default(),
        )
        .unwrap();
        let last = pts2.len() - 1;
        assert!(part2.blocks.iter().all(|b| b.points.contains(&last)));
        assert_eq!(part2.shared.get(&7), Some(&vec![0, 1]));
    }

    #[test]
    fn default_expansion_multi_assigns_the_margin() {
        let pts = grid_points();
        let cfg = SplitConfig::default();
        let cores = split_recursive(&pts, 2, &cfg).unwrap();
        let gauss: Vec<(u64, [f64; 3])> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (i as u64, *p))
            .collect();
        let part = expand_and_assign(&cores, &pts, &[], &gauss, DEFAULT_EXPANSION, &cfg).unwrap();
        let c0 = &cores[0].aabb;
        let margin = 0.5 * (c0.max[0] - c0.min[0]) * (DEFAULT_EXPANSION - 1.0);
        for (i, p) in pts.iter().enumerate() {
            let near =
                (p[0] - c0.max[0]).abs() <= margin || (p[0] - cores[1].aabb.min[0]).abs() <= margin;
            let both = part.blocks.iter().all(|b| b.points.contains(&i));
            if both {
                assert!(near);
            }
        }
        assert_eq!(part.shared.len(), 20);
        assert!(part.blocks.iter().all(|b| b.expanded.contains_box(&b.core)));
    }

    #[test]
    fn views_fall_back_to_the_nearest_block() {
        let pts = grid_points();
        let cfg = SplitConfig::default();
        let cores = split_recursive(&pts, 2, &cfg).unwrap();
        // Far outside in x, well past the right block.
        let cam = CameraView::look_at(
            3,
            [50.0, 1.0, 0.5],
            [1.0, 0.0, 0.5],
            [0.0, 1.0, 0.0],
            10.0,
            10.0,
            8,
            8,
        );
        let part = expand_and_assign(&cores, &pts, &[cam], &[], 1.4, &cfg).unwrap();
        assert_eq!(part.blocks[1].views, vec![0]);
        assert!(part.blocks[0].views.is_empty());
    }

    #[test]
    fn rejects_shrinking_expansion() {
        let pts = grid_points();
        let cores = split_recursive(&pts, 2, &SplitConfig::default()).unwrap();
        assert!(expand_and_assign(&cores, &pts, &[], &[], 0.9, &SplitConfig::default()).is_err());
    }

    #[test]
    fn midpoint_mode_is_unbalanced_on_skewed_data() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        // Most points crowd one end of the x range.
        let pts: Vec<[f64; 3]> = (0..1000)
            .map(|_| {
                [
                    rng.random::<f64>().powi(4) * 10.0,
                    0.0,
                    rng.random_range(0.0..1.0),
                ]
            })
            .collect();
        let median = split_recursive(&pts, 2, &SplitConfig::default()).unwrap();
        let mid = split_recursive(
            &pts,
            2,
            &SplitConfig {
                plane: SplitPlane::Midpoint,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(median[0].points.len(), 500);
        assert!(mid[0].points.len() > 700);
    }

    #[test]
    fn manifest_and_svg() {
        let pts = grid_points();
        let cfg = SplitConfig::default();
        let cores = split_recursive(&pts, 2, &cfg).unwrap();
        let cam = CameraView::look_at(
            42,
            [0.5, 3.0, 0.5],
            [0.5, 0.0, 0.5],
            [0.0, 0.0, 1.0],
            10.0,
            10.0,
            8,
            8,
        );
        let gauss: Vec<(u64, [f64; 3])> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (i as u64, *p))
            .collect();
        let part =
            expand_and_assign(&cores, &pts, std::slice::from_ref(&cam), &gauss, 1.4, &cfg).unwrap();
        let m = PartitionManifest::new(&part, &cores, &[cam.clone()]);
        assert_eq!(m.blocks[0].view_ids, vec![42]);
        let json = serde_json::to_string(&m).unwrap();
        let back: PartitionManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        let svg = svg_diagram(&part, &pts, &[cam], &cfg);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn balanced_covering_and_deterministic(seed in 0u64..1000, n in 20usize..400, k in 1usize..9) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(0.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let cfg = SplitConfig::default();
            let cores = split_recursive(&pts, k, &cfg).unwrap();
            prop_assert_eq!(cores.len(), k);
            let max = cores.iter().map(|c| c.points.len()).max().unwrap();
            prop_assert!(max <= n.div_ceil(k) + k);
            let union: BTreeSet<usize> = cores.iter().flat_map(|c| c.points.iter().copied()).collect();
            prop_assert_eq!(union.len(), n);
            prop_assert_eq!(&cores, &split_recursive(&pts, k, &cfg).unwrap());

            let gauss: Vec<(u64, [f64; 3])> = pts.iter().enumerate().map(|(i, p)| (i as u64, *p)).collect();
            let small = expand_and_assign(&cores, &pts, &[], &gauss, 1.1, &cfg).unwrap();
            let large = expand_and_assign(&cores, &pts, &[], &gauss, 1.5, &cfg).unwrap();
            for (id, owners) in &small.shared {
                let big = large.shared.get(id).expect("shared set grows with s");
                prop_assert!(owners.iter().all(|o| big.contains(o)));
            }
            let covered: BTreeSet<usize> = small.blocks.iter().flat_map(|b| b.points.iter().copied()).collect();
            prop_assert_eq!(covered.len(), n);
        }
    }
}
