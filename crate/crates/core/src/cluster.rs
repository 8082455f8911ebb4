//! Instance extraction at inference time.
//!
//! Per block, instance embeddings are grouped with flat-kernel mean-shift.
//! Block-local instances are then stitched into scene instances with a voxel
//! registry that remembers which scene instance owns each occupied cell.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gradcore::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct MeanShiftOptions {
    pub bandwidth: f64,
    /// Stop a seed once its shift is below `tol_factor * bandwidth`.
    pub tol_factor: f64,
    pub max_iter: usize,
    /// Use at most this many evenly strided seeds. `None` seeds from every point.
    pub max_seeds: Option<usize>,
}

impl Default for MeanShiftOptions {
    fn default() -> Self {
        MeanShiftOptions {
            bandwidth: 0.8,
            tol_factor: 1e-3,
            max_iter: 300,
            max_seeds: None,
        }
    }
}

impl MeanShiftOptions {
    pub fn with_bandwidth(bandwidth: f64) -> Self {
        MeanShiftOptions {
            bandwidth,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    /// Row `k` is the center of cluster `k`.
    pub modes: Matrix,
    pub bandwidth: f64,
}

impl ClusterResult {
    pub fn num_clusters(&self) -> usize {
        self.modes.rows()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Runs one seed to convergence and returns the mode and its support
/// (number of points within the bandwidth of the mode).
fn climb(emb: &Matrix, start: &[f64], opts: &MeanShiftOptions) -> (Vec<f64>, usize) {
    let d = emb.cols();
    let bw2 = opts.bandwidth * opts.bandwidth;
    let tol2 = (opts.tol_factor * opts.bandwidth).powi(2);
    let mut x = start.to_vec();
    let mut next = vec![0.0; d];
    let mut support = 0;
    for _ in 0..opts.max_iter {
        next.fill(0.0);
        let mut count = 0usize;
        for i in 0..emb.rows() {
            let p = emb.row(i);
            if sq_dist(p, &x) <= bw2 {
                for (n, v) in next.iter_mut().zip(p) {
                    *n += v;
                }
                count += 1;
            }
        }
        support = count;
        if count == 0 {
            break;
        }
        let inv = 1.0 / count as f64;
        next.iter_mut().for_each(|v| *v *= inv);
        let shift = sq_dist(&next, &x);
        std::mem::swap(&mut x, &mut next);
        if shift < tol2 {
            break;
        }
    }
    let support = if support == 0 {
        0
    } else {
        (0..emb.rows()).filter(|&i| sq_dist(emb.row(i), &x) <= bw2).count()
    };
    (x, support)
}

pub fn mean_shift(emb: &Matrix, opts: &MeanShiftOptions) -> Result<ClusterResult> {
    if !(opts.bandwidth > 0.0 && opts.bandwidth.is_finite()) {
        return Err(Error::Config(format!(
            "mean-shift bandwidth must be positive, got {}",
            opts.bandwidth
        )));
    }
    let n = emb.rows();
    if n == 0 {
        return Err(Error::Contract("mean-shift on an empty point set".into()));
    }
    if !emb.is_finite() {
        return Err(Error::Data("non-finite embedding passed to mean-shift".into()));
    }
    let seeds: Vec<usize> = match opts.max_seeds {
        Some(m) if m > 0 && m < n => (0..m).map(|k| k * n / m).collect(),
        _ => (0..n).collect(),
    };
    let climbed: Vec<(Vec<f64>, usize)> = seeds
        .par_iter()
        .map(|&s| climb(emb, emb.row(s), opts))
        .collect();

    // Strongest modes first. Ties are broken by the coordinates rather than
    // the seed index so the result does not depend on point order.
    let mut order: Vec<usize> = (0..climbed.len()).collect();
    order.sort_by(|&a, &b| {
        climbed[b]
            .1
            .cmp(&climbed[a].1)
            .then_with(|| {
                climbed[a]
                    .0
                    .iter()
                    .zip(&climbed[b].0)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then(a.cmp(&b))
    });
    let merge2 = (opts.bandwidth / 2.0).powi(2);
    let mut kept: Vec<&[f64]> = Vec::new();
    for &k in &order {
        let m = &climbed[k].0;
        if kept.iter().all(|q| sq_dist(q, m) >= merge2) {
            kept.push(m);
        }
    }

    let mut labels: Vec<usize> = (0..n)
        .map(|i| {
            let p = emb.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, m) in kept.iter().enumerate() {
                let d = sq_dist(p, m);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect();

    let mut used = vec![false; kept.len()];
    labels.iter().for_each(|&l| used[l] = true);
    let mut remap = vec![usize::MAX; kept.len()];
    let mut data = Vec::new();
    let mut next = 0;
    for (k, m) in kept.iter().enumerate() {
        if used[k] {
            remap[k] = next;
            data.extend_from_slice(m);
            next += 1;
        }
    }
    labels.iter_mut().for_each(|l| *l = remap[*l]);
    Ok(ClusterResult {
        labels,
        modes: Matrix::from_vec(next, emb.cols(), data)?,
        bandwidth: opts.bandwidth,
    })
}

/// Majority vote over `ids[i]` for each group; ties go to the lowest id.
pub fn majority_label(groups: &[usize], ids: &[usize], num_groups: usize) -> Vec<usize> {
    let mut counts: Vec<HashMap<usize, usize>> = vec![HashMap::new(); num_groups];
    for (&g, &id) in groups.iter().zip(ids) {
        *counts[g].entry(id).or_default() += 1;
    }
    counts
        .iter()
        .map(|c| {
            c.iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&id, _)| id)
                .unwrap_or(0)
        })
        .collect()
}

pub type VoxelKey = (i64, i64, i64);

#[derive(Clone, Debug)]
pub struct VoxelRegistry {
    cell: f64,
    /// Owner per voxel and semantic class, so classes sharing a voxel do
    /// not hide each other.
    owners: HashMap<(VoxelKey, usize), usize>,
    /// Semantic class of each scene instance, indexed by global id.
    classes: Vec<usize>,
}

impl VoxelRegistry {
    pub fn new(cell: f64) -> Result<Self> {
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(Error::Config(format!("voxel cell size must be positive, got {cell}")));
        }
        Ok(VoxelRegistry {
            cell,
            owners: HashMap::new(),
            classes: Vec::new(),
        })
    }

    pub fn cell(&self) -> f64 {
        self.cell
    }

    pub fn num_instances(&self) -> usize {
        self.classes.len()
    }

    pub fn class_of(&self, id: usize) -> Option<usize> {
        self.classes.get(id).copied()
    }

    pub fn owner(&self, key: VoxelKey, class: usize) -> Option<usize> {
        self.owners.get(&(key, class)).copied()
    }

    pub fn key(&self, p: [f64; 3]) -> VoxelKey {
        (
            (p[0] / self.cell).floor() as i64,
            (p[1] / self.cell).floor() as i64,
            (p[2] / self.cell).floor() as i64,
        )
    }

    /// Maps the block-local instances of one block onto scene instances and
    /// returns the global id of every point in the block.
    ///
    /// Every local instance is matched against the registry as it stood
    /// before this block, so two instances of the same block never merge
    /// with each other.
    pub fn merge_block(
        &mut self,
        coords: &[[f64; 3]],
        local_ins: &[usize],
        sem: &[usize],
        overlap_thresh: f64,
    ) -> Result<Vec<usize>> {
        if coords.len() != local_ins.len() || coords.len() != sem.len() {
            return Err(Error::Contract(format!(
                "block with {} coordinates, {} instance ids and {} semantic ids",
                coords.len(),
                local_ins.len(),
                sem.len()
            )));
        }
        if !(overlap_thresh > 0.0 && overlap_thresh <= 1.0) {
            return Err(Error::Config(format!(
                "overlap threshold must lie in (0, 1], got {overlap_thresh}"
            )));
        }
        if let Some(i) = coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data(format!("non-finite coordinate at block point {i}")));
        }
        if coords.is_empty() {
            return Ok(Vec::new());
        }

        let mut local_ids: Vec<usize> = local_ins.to_vec();
        local_ids.sort_unstable();
        local_ids.dedup();
        let slot: HashMap<usize, usize> = local_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        let groups: Vec<usize> = local_ins.iter().map(|id| slot[id]).collect();
        let classes = majority_label(&groups, sem, local_ids.len());
        let keys: Vec<VoxelKey> = coords.iter().map(|&p| self.key(p)).collect();

        let mut sizes = vec![0usize; local_ids.len()];
        let mut votes: Vec<HashMap<usize, usize>> = vec![HashMap::new(); local_ids.len()];
        for (i, &g) in groups.iter().enumerate() {
            sizes[g] += 1;
            if let Some(&owner) = self.owners.get(&(keys[i], classes[g])) {
                *votes[g].entry(owner).or_default() += 1;
            }
        }

        let mut chosen = vec![0usize; local_ids.len()];
        for g in 0..local_ids.len() {
            let hits: usize = votes[g].values().sum();
            chosen[g] = if hits as f64 >= overlap_thresh * sizes[g] as f64 && hits > 0 {
                votes[g]
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                    .map(|(&id, _)| id)
                    .unwrap()
            } else {
                self.classes.push(classes[g]);
                self.classes.len() - 1
            };
        }
        for (i, &g) in groups.iter().enumerate() {
            self.owners.insert((keys[i], classes[g]), chosen[g]);
        }
        Ok(groups.iter().map(|&g| chosen[g]).collect())
    }
}

/// Per-block inference output, in scene coordinates.
#[derive(Clone, Debug)]
pub struct BlockPrediction {
    /// Indices of the block's points in the scene point list.
    pub points: Vec<usize>,
    pub center: [f64; 2],
    pub local_ins: Vec<usize>,
    pub sem: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeOptions {
    pub cell: f64,
    pub overlap_thresh: f64,
}

impl Default for MergeOptions {
    fn default() -> Self {
        MergeOptions {
            cell: 0.5,
            overlap_thresh: 0.3,
        }
    }
}

/// Scene-level instance and semantic ids for every point.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLabels {
    pub sem: Vec<usize>,
    pub ins: Vec<usize>,
}

/// Merges block predictions in the given order. A point seen by several
/// overlapping blocks takes its labels from the block whose center is
/// nearest in the horizontal plane (first block on ties). Points no block
/// covers are a contract error. Instance ids are compacted in point order.
pub fn merge_blocks(
    coords: &[[f64; 3]],
    blocks: &[BlockPrediction],
    opts: &MergeOptions,
) -> Result<SceneLabels> {
    let mut registry = VoxelRegistry::new(opts.cell)?;
    let n = coords.len();
    let mut best = vec![(f64::INFINITY, usize::MAX, usize::MAX); n];
    for block in blocks {
        if block.points.iter().any(|&p| p >= n) {
            return Err(Error::Contract("block references a point outside the scene".into()));
        }
        let pts: Vec<[f64; 3]> = block.points.iter().map(|&p| coords[p]).collect();
        let global = registry.merge_block(&pts, &block.local_ins, &block.sem, opts.overlap_thresh)?;
        for (k, &p) in block.points.iter().enumerate() {
            let dx = coords[p][0] - block.center[0];
            let dy = coords[p][1] - block.center[1];
            let d = dx * dx + dy * dy;
            if d < best[p].0 {
                best[p] = (d, global[k], block.sem[k]);
            }
        }
    }
    if let Some(p) = best.iter().position(|b| b.1 == usize::MAX) {
        return Err(Error::Contract(format!("point {p} is not covered by any block")));
    }
    let raw: Vec<usize> = best.iter().map(|b| b.1).collect();
    let mut remap = HashMap::new();
    let ins = raw
        .iter()
        .map(|&id| {
            let next = remap.len();
            *remap.entry(id).or_insert(next)
        })
        .collect();
    Ok(SceneLabels {
        sem: best.iter().map(|b| b.2).collect(),
        ins,
    })
}
