//! Patch-wise ground segmentation.
//!
//! The crop volume is cut into square BEV patches. Within each patch, plane
//! hypotheses are drawn only from the lowest occupied voxel of every (x, y)
//! voxel column, and a hypothesis is admissible only if it satisfies all of:
//!
//! - tilt against the xy-plane below `max_tilt_deg`;
//! - at least `min_plane_points` inliers;
//! - points below the inlier band fewer than `max_below_fraction` × inliers;
//! - mean depth of those below-band points under `max_below_mean_dist`.
//!
//! Once a patch yields an admissible plane, the constrained fit is repeated
//! `confirm_reruns` more times and every admissible result's inliers join
//! the patch ground.

use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::geometry::{DetectionRange, PointCloud, Vec3};
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub range: DetectionRange,
    pub patch_size: f64,
    pub voxel_size: [f64; 3],
    pub inlier_threshold: f64,
    pub min_plane_points: usize,
    pub max_below_fraction: f64,
    pub max_below_mean_dist: f64,
    pub max_tilt_deg: f64,
    pub confirm_reruns: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            range: DetectionRange::default(),
            patch_size: 5.0,
            voxel_size: [0.1, 0.1, 0.05],
            inlier_threshold: 0.06,
            min_plane_points: 50,
            max_below_fraction: 0.20,
            max_below_mean_dist: 0.15,
            max_tilt_deg: 25.0,
            confirm_reruns: 6,
            iterations: 200,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        let positive = self.patch_size > 0.0
            && self.voxel_size.iter().all(|&v| v > 0.0)
            && self.inlier_threshold > 0.0
            && self.min_plane_points > 0
            && self.max_below_fraction > 0.0
            && self.max_below_mean_dist > 0.0
            && self.max_tilt_deg > 0.0
            && self.iterations > 0;
        if positive {
            Ok(())
        } else {
            Err(Error::invalid("ransac config", "all thresholds must be positive"))
        }
    }
}

/// Plane `normal · p = offset` with unit normal pointing up (`normal.z ≥ 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    /// Plane through three points; `None` if they are collinear within 1e-9.
    pub fn through(a: &Vec3, b: &Vec3, c: &Vec3) -> Option<Plane> {
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len < 1e-9 {
            return None;
        }
        let mut n = n / len;
        if n.z < 0.0 {
            n = -n;
        }
        Some(Plane {
            normal: n,
            offset: n.dot(a),
        })
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }

    /// Angle between the plane and the xy-plane, degrees.
    pub fn tilt_deg(&self) -> f64 {
        self.normal.z.abs().min(1.0).acos().to_degrees()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.normal.x, self.normal.y, self.normal.z, self.offset]
    }
}

/// One BEV patch of the crop volume and the point indices it owns.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub ix: usize,
    pub iy: usize,
    pub x_bounds: [f64; 2],
    pub y_bounds: [f64; 2],
    pub indices: Vec<usize>,
}

/// Quantities checked by the admissibility constraints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneStats {
    pub inliers: usize,
    pub below: usize,
    pub below_mean_dist: f64,
    pub tilt_deg: f64,
}

impl PlaneStats {
    pub fn admissible(&self, cfg: &RansacConfig) -> bool {
        self.tilt_deg < cfg.max_tilt_deg
            && self.inliers >= cfg.min_plane_points
            && (self.below as f64) < cfg.max_below_fraction * self.inliers as f64
            && self.below_mean_dist < cfg.max_below_mean_dist
    }
}

/// Evaluate a plane against a set of points. "Below" means beneath the
/// inlier band, i.e. signed distance `< -threshold`.
pub fn plane_stats(plane: &Plane, points: &[Vec3], indices: &[usize], threshold: f64) -> PlaneStats {
    let mut inliers = 0usize;
    let mut below = 0usize;
    let mut below_sum = 0.0;
    for &i in indices {
        let d = plane.signed_distance(&points[i]);
        if d.abs() <= threshold {
            inliers += 1;
        } else if d < -threshold {
            below += 1;
            below_sum += -d;
        }
    }
    PlaneStats {
        inliers,
        below,
        below_mean_dist: if below > 0 { below_sum / below as f64 } else { 0.0 },
        tilt_deg: plane.tilt_deg(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit {
    pub plane: Plane,
    pub stats: PlaneStats,
    /// Cloud indices within `inlier_threshold` of `plane`.
    pub inliers: Vec<usize>,
}

/// Admissible fits of one patch: the initial fit followed by the confirmed
/// reruns that were also admissible.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGround {
    pub ix: usize,
    pub iy: usize,
    pub fits: Vec<PlaneFit>,
}

/// Index of `v` in bins of width `size` starting at `lo`; values on an
/// interior edge go to the lower bin, `lo` itself to bin 0.
fn lower_edge_bin(v: f64, lo: f64, size: f64, n: usize) -> usize {
    let k = ((v - lo) / size).ceil() as isize - 1;
    k.clamp(0, n as isize - 1) as usize
}

pub fn patch_grid_dims(cfg: &RansacConfig) -> (usize, usize) {
    let r = &cfg.range;
    let nx = (((r.x[1] - r.x[0]) / cfg.patch_size).ceil() as usize).max(1);
    let ny = (((r.y[1] - r.y[0]) / cfg.patch_size).ceil() as usize).max(1);
    (nx, ny)
}

/// Assign every in-range point to one BEV patch; only nonempty patches are
/// returned, ordered by `(ix, iy)`.
pub fn partition_patches(cloud: &PointCloud, cfg: &RansacConfig) -> Vec<Patch> {
    let r = &cfg.range;
    let (nx, ny) = patch_grid_dims(cfg);
    let mut buckets: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points().iter().enumerate() {
        if !r.contains(p) {
            continue;
        }
        let ix = lower_edge_bin(p.x, r.x[0], cfg.patch_size, nx);
        let iy = lower_edge_bin(p.y, r.y[0], cfg.patch_size, ny);
        buckets.entry((ix, iy)).or_default().push(i);
    }
    buckets
        .into_iter()
        .map(|((ix, iy), indices)| {
            let x0 = r.x[0] + ix as f64 * cfg.patch_size;
            let y0 = r.y[0] + iy as f64 * cfg.patch_size;
            Patch {
                ix,
                iy,
                x_bounds: [x0, (x0 + cfg.patch_size).min(r.x[1])],
                y_bounds: [y0, (y0 + cfg.patch_size).min(r.y[1])],
                indices,
            }
        })
        .collect()
}

/// Cloud indices of the points in the lowest occupied voxel of each (x, y)
/// voxel column of the patch.
pub fn lowest_voxel_seeds(points: &[Vec3], patch: &Patch, voxel: [f64; 3]) -> Vec<usize> {
    let key = |p: &Vec3| {
        (
            (p.x / voxel[0]).floor() as i64,
            (p.y / voxel[1]).floor() as i64,
            (p.z / voxel[2]).floor() as i64,
        )
    };
    let mut lowest: HashMap<(i64, i64), i64> = HashMap::new();
    for &i in &patch.indices {
        let (vx, vy, vz) = key(&points[i]);
        lowest
            .entry((vx, vy))
            .and_modify(|z| *z = (*z).min(vz))
            .or_insert(vz);
    }
    patch
        .indices
        .iter()
        .copied()
        .filter(|&i| {
            let (vx, vy, vz) = key(&points[i]);
            lowest[&(vx, vy)] == vz
        })
        .collect()
}

const MAX_DEGENERATE_REDRAWS: usize = 16;

fn sample_plane(points: &[Vec3], seeds: &[usize], rng: &mut Rng) -> Option<Plane> {
    for _ in 0..MAX_DEGENERATE_REDRAWS {
        let picked: Vec<&usize> = seeds.choose_multiple(rng, 3).collect();
        if let Some(p) = Plane::through(&points[*picked[0]], &points[*picked[1]], &points[*picked[2]]) {
            return Some(p);
        }
    }
    None
}

/// One constrained RANSAC run: best admissible hypothesis by inlier count.
fn constrained_run(points: &[Vec3], patch: &Patch, seeds: &[usize], cfg: &RansacConfig, rng: &mut Rng) -> Option<PlaneFit> {
    let mut best: Option<(Plane, PlaneStats)> = None;
    for _ in 0..cfg.iterations {
        let Some(plane) = sample_plane(points, seeds, rng) else {
            continue;
        };
        if plane.tilt_deg() >= cfg.max_tilt_deg {
            continue;
        }
        let stats = plane_stats(&plane, points, &patch.indices, cfg.inlier_threshold);
        if !stats.admissible(cfg) {
            continue;
        }
        if best.as_ref().is_none_or(|(_, b)| stats.inliers > b.inliers) {
            best = Some((plane, stats));
        }
    }
    best.map(|(plane, stats)| PlaneFit {
        inliers: patch
            .indices
            .iter()
            .copied()
            .filter(|&i| plane.signed_distance(&points[i]).abs() <= cfg.inlier_threshold)
            .collect(),
        plane,
        stats,
    })
}

/// Fit the ground of one patch, or `None` if no admissible plane exists.
pub fn fit_patch_ground(cloud: &PointCloud, patch: &Patch, cfg: &RansacConfig, rng: &mut Rng) -> Option<PatchGround> {
    let points = cloud.points();
    if patch.indices.len() < cfg.min_plane_points {
        return None;
    }
    let seeds = lowest_voxel_seeds(points, patch, cfg.voxel_size);
    if seeds.len() < 3 {
        return None;
    }
    let first = constrained_run(points, patch, &seeds, cfg, rng)?;
    let mut fits = vec![first];
    for _ in 0..cfg.confirm_reruns {
        if let Some(f) = constrained_run(points, patch, &seeds, cfg, rng) {
            fits.push(f);
        }
    }
    Some(PatchGround {
        ix: patch.ix,
        iy: patch.iy,
        fits,
    })
}

/// Serialized per-fit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch: [usize; 2],
    pub plane: [f64; 4],
    pub inliers: Vec<usize>,
}

/// Frame ground: every admissible patch fit plus the union of their inliers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundModel {
    pub patches: Vec<PatchRecord>,
    indices: Vec<usize>,
    points: Vec<Vec3>,
}

#[derive(Serialize, Deserialize)]
struct GroundJson {
    patches: Vec<PatchRecord>,
    ground_indices: Vec<usize>,
}

impl GroundModel {
    pub fn from_patches(cloud: &PointCloud, patches: &[PatchGround]) -> GroundModel {
        let mut records = Vec::new();
        let mut all = Vec::new();
        for pg in patches {
            for f in &pg.fits {
                all.extend_from_slice(&f.inliers);
                records.push(PatchRecord {
                    patch: [pg.ix, pg.iy],
                    plane: f.plane.to_array(),
                    inliers: f.inliers.clone(),
                });
            }
        }
        all.sort_unstable();
        all.dedup();
        let points = all.iter().map(|&i| cloud.points()[i]).collect();
        GroundModel {
            patches: records,
            indices: all,
            points,
        }
    }

    /// Sorted, unique cloud indices of ground points.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Ground point coordinates, aligned with [`GroundModel::indices`].
    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    /// A representative ground height: the median z of the ground points.
    pub fn median_height(&self) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let mut zs: Vec<f64> = self.points.iter().map(|p| p.z).collect();
        zs.sort_by(f64::total_cmp);
        Some(zs[zs.len() / 2])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&GroundJson {
            patches: self.patches.clone(),
            ground_indices: self.indices.clone(),
        })?)
    }

    /// Rebuild from JSON; point coordinates are looked up in `cloud`.
    pub fn from_json(text: &str, cloud: &PointCloud) -> Result<GroundModel> {
        let g: GroundJson = serde_json::from_str(text)?;
        let n = cloud.len();
        if let Some(&bad) = g.ground_indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid("ground model", format!("index {bad} past {n} points")));
        }
        let mut indices = g.ground_indices;
        indices.sort_unstable();
        indices.dedup();
        let points = indices.iter().map(|&i| cloud.points()[i]).collect();
        Ok(GroundModel {
            patches: g.patches,
            indices,
            points,
        })
    }
}

pub fn segment_ground(cloud: &PointCloud, cfg: &RansacConfig) -> GroundModel {
    segment_ground_with(cloud, cfg, Execution::default())
}

/// Per-patch fits run independently; each patch draws from its own stream
/// derived from `cfg.seed` and the patch position.
pub fn segment_ground_with(cloud: &PointCloud, cfg: &RansacConfig, exec: Execution) -> GroundModel {
    let patches = partition_patches(cloud, cfg);
    let fits: Vec<Option<PatchGround>> = exec.map_slice(&patches, |p| {
        let mut r = rng::rng_for(cfg.seed, &[p.ix as u64, p.iy as u64]);
        fit_patch_ground(cloud, p, cfg, &mut r)
    });
    let fits: Vec<PatchGround> = fits.into_iter().flatten().collect();
    GroundModel::from_patches(cloud, &fits)
}

/// Width of the range band used when picking a point at a drawn distance.
pub const RANGE_BAND: f64 = 0.5;
const MAX_RANGE_REDRAWS: usize = 64;

/// Two-stage insertion sampler: a distance uniform over the ground's planar
/// range span, then a point uniformly among those within the band around
/// it. Empty bands trigger a redraw; after repeated misses the nearest
/// point is used.
#[derive(Debug, Clone)]
pub struct GroundSampler {
    /// (planar range, point), sorted by range.
    by_range: Vec<(f64, Vec3)>,
}

impl GroundSampler {
    pub fn new(ground: &GroundModel, origin: Vec3) -> Self {
        Self::from_points(ground.points(), origin)
    }

    pub fn from_points(points: &[Vec3], origin: Vec3) -> Self {
        let mut by_range: Vec<(f64, Vec3)> = points
            .iter()
            .map(|p| ((p.xy() - origin.xy()).norm(), *p))
            .collect();
        by_range.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self { by_range }
    }

    pub fn is_empty(&self) -> bool {
        self.by_range.is_empty()
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<Vec3> {
        let (lo, hi) = match (self.by_range.first(), self.by_range.last()) {
            (Some(a), Some(b)) => (a.0, b.0),
            _ => return Err(Error::NoGround),
        };
        let half = RANGE_BAND / 2.0;
        let mut target = lo;
        for _ in 0..MAX_RANGE_REDRAWS {
            target = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let a = self.by_range.partition_point(|e| e.0 < target - half);
            let b = self.by_range.partition_point(|e| e.0 <= target + half);
            if b > a {
                return Ok(self.by_range[rng.random_range(a..b)].1);
            }
        }
        let k = self.by_range.partition_point(|e| e.0 < target);
        let nearest = match (k.checked_sub(1), self.by_range.get(k)) {
            (Some(j), Some(e)) if target - self.by_range[j].0 <= e.0 - target => j,
            (Some(j), None) => j,
            _ => k,
        };
        Ok(self.by_range[nearest].1)
    }
}

pub fn sample_insertion_point(ground: &GroundModel, rng: &mut Rng) -> Result<Vec3> {
    GroundSampler::new(ground, Vec3::zeros()).sample(rng)
}
