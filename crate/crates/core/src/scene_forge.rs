//! Occlusion-aware insertion of simulated humans into real scans.
//!
//! One insertion attempt samples a ground point, drops a randomly rotated
//! asset onto it, raycasts the posed mesh and merges the returns into the
//! frame's evolving range image. The attempt is kept only if
//!
//! 1. the new instance keeps more than `1 - max_occlusion` of its returns,
//! 2. its box overlaps no earlier label (BEV IoU and center distance), and
//! 3. every earlier instance is still sufficiently visible.
//!
//! Each rejected attempt consumes one unit of the frame's failure budget.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::geometry::{bev_iou, center_distance, fit_bbox, place_on_ground, BBox3D, PointCloud, RigidTransform, Source, Vec3};
use crate::ground_seg::{segment_ground_with, GroundModel, GroundSampler, RansacConfig};
use crate::lidar_sim::{raycast_with, HumanAsset, Joint, SimOptions};
use crate::range_view::{Cell, LidarSpec, RangeImage};
use crate::rng::{self, Rng};
use crate::supervision::{visible_joints, JointSet, MaskConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InsertionConfig {
    pub max_occlusion: f64,
    pub max_iou: f64,
    pub max_failures: usize,
    pub min_center_distance: f64,
    /// Inclusive range of the per-frame wanted count.
    pub target_count: [usize; 2],
    pub seed: u64,
}

impl Default for InsertionConfig {
    fn default() -> Self {
        Self {
            max_occlusion: 0.70,
            max_iou: 0.35,
            max_failures: 10,
            min_center_distance: 0.5,
            target_count: [1, 8],
            seed: 0,
        }
    }
}

impl InsertionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_occlusion > 0.0
            && self.max_occlusion <= 1.0
            && (0.0..=1.0).contains(&self.max_iou)
            && self.max_failures >= 1
            && self.min_center_distance >= 0.0
            && self.target_count[0] <= self.target_count[1];
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("insertion config", "thresholds out of range"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rejection {
    /// The raycast produced no returns.
    Empty,
    Occlusion,
    Iou,
    CenterDistance,
    /// An earlier instance would become too occluded.
    PriorOcclusion,
}

impl Rejection {
    pub fn reason(self) -> &'static str {
        match self {
            Rejection::Empty => "empty",
            Rejection::Occlusion => "occlusion",
            Rejection::Iou => "iou",
            Rejection::CenterDistance => "center-distance",
            Rejection::PriorOcclusion => "prior-occlusion",
        }
    }
}

/// An accepted instance. Tags are 1-based instance ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: u32,
    pub asset: usize,
    pub pose: RigidTransform,
    pub bbox: BBox3D,
    pub joints: [Joint; 6],
    /// Cells the instance's own raycast occupied.
    pub cells: usize,
    /// Occlusion rate at acceptance time.
    pub occlusion_at_insert: f64,
}

/// A base scan with everything insertion needs, computed once.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub id: String,
    pub cloud: PointCloud,
    pub ground: GroundModel,
    pub sampler: GroundSampler,
    pub image: RangeImage,
}

/// The running state of one frame's insertion loop.
#[derive(Debug, Clone)]
pub struct FrameState {
    pub merged: RangeImage,
    pub instances: Vec<Instance>,
}

impl FrameState {
    pub fn new(scene: &PreparedScene) -> Self {
        Self {
            merged: scene.image.clone(),
            instances: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InsertOutcome {
    Accepted(u32),
    Rejected(Rejection),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub id: u32,
    pub bbox: BBox3D,
    pub joints: JointSet,
    pub asset: usize,
    pub cells: usize,
    /// Points of this instance in the final merged cloud.
    pub visible_points: usize,
}

impl Label {
    pub fn occlusion(&self) -> f64 {
        1.0 - self.visible_points as f64 / self.cells as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scene: String,
    pub seed: u64,
    pub target: usize,
    pub failures: usize,
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFrame {
    /// Scene points not hidden by an instance, then the surviving
    /// synthetic returns; sources carry instance ids.
    pub cloud: PointCloud,
    pub labels: Vec<Label>,
    pub provenance: Provenance,
}

impl SynthFrame {
    pub fn boxes(&self) -> Vec<BBox3D> {
        self.labels.iter().map(|l| l.bbox).collect()
    }
}

/// Everything the forge needs besides the scene and the assets.
#[derive(Debug, Clone, PartialEq)]
pub struct Forge {
    pub spec: LidarSpec,
    pub insertion: InsertionConfig,
    pub ransac: RansacConfig,
    pub mask: MaskConfig,
    pub sim: SimOptions,
}

impl Forge {
    pub fn new(spec: LidarSpec, insertion: InsertionConfig, ransac: RansacConfig, mask: MaskConfig) -> Self {
        Self {
            spec,
            insertion,
            ransac,
            mask,
            sim: SimOptions {
                exec: Execution::Sequential,
                ..SimOptions::default()
            },
        }
    }

    /// Segment ground, build the sampler and project the scene.
    pub fn prepare_scene(&self, id: impl Into<String>, cloud: PointCloud, exec: Execution) -> PreparedScene {
        let ground = segment_ground_with(&cloud, &self.ransac, exec);
        self.prepare_with_ground(id, cloud, ground)
    }

    pub fn prepare_with_ground(&self, id: impl Into<String>, cloud: PointCloud, ground: GroundModel) -> PreparedScene {
        let scene = PointCloud::new(cloud.points().to_vec()).expect("finite");
        let image = RangeImage::project(&scene, &self.spec);
        PreparedScene {
            id: id.into(),
            sampler: GroundSampler::new(&ground, self.spec.origin()),
            cloud,
            ground,
            image,
        }
    }

    /// One insertion attempt; on acceptance `state` is updated.
    pub fn try_insert(&self, state: &mut FrameState, scene: &PreparedScene, asset: &HumanAsset, asset_index: usize, rng: &mut Rng) -> Result<InsertOutcome> {
        let cfg = &self.insertion;
        let ground_point = scene.sampler.sample(rng)?;
        let yaw = rng.random_range(-PI..PI);
        let spin = RigidTransform::from_yaw_translation(yaw, Vec3::zeros());
        let rotated: Vec<Vec3> = asset.vertices().iter().map(|v| spin.apply(v)).collect();
        let lift = place_on_ground(&rotated, ground_point)?;
        let pose = lift.compose(&spin);

        let hits = raycast_with(asset, &pose, &self.spec, &self.sim);
        if hits.is_empty() {
            return Ok(InsertOutcome::Rejected(Rejection::Empty));
        }
        let id = state.instances.len() as u32 + 1;
        let inst = RangeImage::project_points(hits.points(), &self.spec, id);
        let cells = inst.occupied_count();

        // Judgment 1, evaluated sparsely against the current merged image.
        let mut survived = 0usize;
        let mut lost = vec![0usize; id as usize];
        for (idx, cell) in inst.occupied() {
            if state.merged.instance_wins(idx, cell.range) {
                survived += 1;
                if let Some(prev) = state.merged.cells()[idx] {
                    lost[prev.tag as usize] += 1;
                }
            }
        }
        let occlusion = 1.0 - survived as f64 / cells as f64;
        if !(occlusion < cfg.max_occlusion) {
            return Ok(InsertOutcome::Rejected(Rejection::Occlusion));
        }

        // Judgment 2: overlap with earlier labels.
        let bbox = fit_bbox(hits.points(), asset.yaw() + yaw)?;
        if state.instances.iter().any(|o| !(bev_iou(&bbox, &o.bbox) < cfg.max_iou)) {
            return Ok(InsertOutcome::Rejected(Rejection::Iou));
        }
        if state
            .instances
            .iter()
            .any(|o| center_distance(&bbox, &o.bbox) < cfg.min_center_distance)
        {
            return Ok(InsertOutcome::Rejected(Rejection::CenterDistance));
        }

        // Judgment 3: earlier instances after this merge.
        let hist = state.merged.tag_histogram(id - 1);
        for o in &state.instances {
            let remaining = hist[o.id as usize] - lost[o.id as usize];
            let occ = 1.0 - remaining as f64 / o.cells as f64;
            if !(occ < cfg.max_occlusion) {
                return Ok(InsertOutcome::Rejected(Rejection::PriorOcclusion));
            }
        }

        for (idx, cell) in inst.occupied() {
            if state.merged.instance_wins(idx, cell.range) {
                state.merged.overwrite(idx, *cell);
            }
        }
        state.instances.push(Instance {
            id,
            asset: asset_index,
            pose,
            bbox,
            joints: asset.posed_joints(&pose),
            cells,
            occlusion_at_insert: occlusion,
        });
        Ok(InsertOutcome::Accepted(id))
    }

    /// Insert until the wanted count is reached or the failure budget is
    /// spent. `seed` is recorded in the provenance.
    pub fn synthesize_frame(&self, scene: &PreparedScene, pool: &[HumanAsset], seed: u64, rng: &mut Rng) -> Result<SynthFrame> {
        if pool.is_empty() {
            return Err(Error::invalid("asset pool", "no assets"));
        }
        let cfg = &self.insertion;
        let target = rng.random_range(cfg.target_count[0]..=cfg.target_count[1]);
        let mut state = FrameState::new(scene);
        let mut failures = 0usize;
        let mut rejections = Vec::new();
        while state.instances.len() < target && failures < cfg.max_failures && !scene.sampler.is_empty() {
            let k = rng.random_range(0..pool.len());
            match self.try_insert(&mut state, scene, &pool[k], k, rng)? {
                InsertOutcome::Accepted(_) => {}
                InsertOutcome::Rejected(r) => {
                    failures += 1;
                    rejections.push(r);
                }
            }
        }
        Ok(self.finish(scene, state, Provenance {
            scene: scene.id.clone(),
            seed,
            target,
            failures,
            rejections,
        }))
    }

    fn finish(&self, scene: &PreparedScene, state: FrameState, provenance: Provenance) -> SynthFrame {
        let merged = &state.merged;
        let mut points = Vec::with_capacity(scene.cloud.len());
        let mut sources = Vec::with_capacity(scene.cloud.len());
        for p in scene.cloud.points() {
            let hidden = self
                .spec
                .locate(p)
                .and_then(|(r, c, _)| merged.get(r, c))
                .is_some_and(|cell| cell.tag != 0);
            if !hidden {
                points.push(*p);
                sources.push(Source::Scene);
            }
        }
        let mut per_instance: Vec<Vec<Vec3>> = vec![Vec::new(); state.instances.len()];
        for (_, Cell { point, tag, .. }) in merged.occupied() {
            if *tag != 0 {
                points.push(*point);
                sources.push(Source::Synthetic(*tag));
                per_instance[*tag as usize - 1].push(*point);
            }
        }
        let labels = state
            .instances
            .iter()
            .zip(&per_instance)
            .map(|(inst, pts)| Label {
                id: inst.id,
                bbox: inst.bbox,
                joints: visible_joints(&inst.joints, pts, &self.mask),
                asset: inst.asset,
                cells: inst.cells,
                visible_points: pts.len(),
            })
            .collect();
        let cloud = PointCloud::new(points)
            .and_then(|c| c.with_sources(sources))
            .expect("points are finite and fully tagged");
        SynthFrame {
            cloud,
            labels,
            provenance,
        }
    }
}

/// Base frame chosen for each output frame: a uniform sequence, then a
/// uniform frame within it. Output frame `k` draws from its own stream.
pub fn corpus_plan(sequence_lengths: &[usize], n_frames: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n_frames > 0 && (sequence_lengths.is_empty() || sequence_lengths.contains(&0)) {
        return Err(Error::invalid("manifest", "every sequence needs at least one frame"));
    }
    Ok((0..n_frames)
        .map(|k| {
            let mut r = frame_rng(seed, k);
            let s = r.random_range(0..sequence_lengths.len());
            let f = r.random_range(0..sequence_lengths[s]);
            (s, f)
        })
        .collect())
}

/// Stream for output frame `k`; the plan draws come first, then insertion.
pub fn frame_rng(seed: u64, k: usize) -> Rng {
    rng::rng_for(seed, &[k as u64])
}

/// Synthesize output frame `k` from its planned base scene.
pub fn synthesize_planned(forge: &Forge, scene: &PreparedScene, pool: &[HumanAsset], seed: u64, k: usize, n_sequences: usize, sequence_len: usize) -> Result<SynthFrame> {
    let mut r = frame_rng(seed, k);
    // Replay the plan draws so insertion continues the same stream.
    let _ = r.random_range(0..n_sequences);
    let _ = r.random_range(0..sequence_len);
    forge.synthesize_frame(scene, pool, rng::derive_seed(seed, &[k as u64]), &mut r)
}

/// A problem found by [`validate_frame`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub label: Option<u32>,
    pub what: String,
}

/// Box containment tolerance for frames held in memory.
pub const CONTAINMENT_TOL: f64 = 1e-6;
/// Containment tolerance for frames read back from `f32` files.
pub const STORED_CONTAINMENT_TOL: f64 = 1e-4;

/// Re-check a forged frame from its stored data alone; `tol` loosens box
/// containment.
pub fn validate_frame(frame: &SynthFrame, cfg: &InsertionConfig, tol: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |label, what: String| out.push(Violation { label, what });
    let p = &frame.provenance;
    if p.failures > cfg.max_failures {
        push(None, format!("{} failures exceed budget {}", p.failures, cfg.max_failures));
    }
    if frame.labels.len() > p.target {
        push(None, format!("{} labels exceed target {}", frame.labels.len(), p.target));
    }
    let mut counts = vec![0usize; frame.labels.len() + 1];
    for (i, pt) in frame.cloud.points().iter().enumerate() {
        if let Source::Synthetic(tag) = frame.cloud.source_of(i) {
            let Some(label) = frame.labels.iter().find(|l| l.id == tag) else {
                push(Some(tag), "synthetic point without a label".into());
                continue;
            };
            counts[tag as usize] += 1;
            if !label.bbox.contains(pt, tol) {
                push(Some(tag), "synthetic point outside its box".into());
            }
        }
    }
    for (k, l) in frame.labels.iter().enumerate() {
        if l.id as usize != k + 1 {
            push(Some(l.id), "ids are not 1..n".into());
            continue;
        }
        let n = counts[l.id as usize];
        if n == 0 {
            push(Some(l.id), "box holds no synthetic point".into());
        }
        if n != l.visible_points {
            push(Some(l.id), format!("{n} tagged points, label records {}", l.visible_points));
        }
        let occ = 1.0 - n as f64 / l.cells as f64;
        if !(occ < cfg.max_occlusion) {
            push(Some(l.id), format!("occlusion {occ:.4} not below {}", cfg.max_occlusion));
        }
        for o in &frame.labels[..k] {
            let iou = bev_iou(&l.bbox, &o.bbox);
            if !(iou < cfg.max_iou) {
                push(Some(l.id), format!("IoU {iou:.4} with label {}", o.id));
            }
            if center_distance(&l.bbox, &o.bbox) < cfg.min_center_distance {
                push(Some(l.id), format!("center within {} m of label {}", cfg.min_center_distance, o.id));
            }
        }
    }
    out
}
