//! Procedural toy dataset: a stationary sensor over flat ground with boxes,
//! pillars and walking humans, rendered by raycasting. Ground truth boxes
//! come from the walkers; a detection simulator adds localization noise,
//! misses, one- and two-frame flickers and static phantoms on clutter.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::geometry::{fit_bbox, BBox3D, Detection, PointCloud, RigidTransform, Vec3};
use crate::io::{self, DetectionLine};
use crate::lidar_sim::{cast_rays, random_humanoid, save_asset, HumanAsset, SimOptions, TriMesh};
use crate::range_view::LidarSpec;
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub sequences: usize,
    pub frames: usize,
    pub lidar: LidarSpec,
    pub ground_z: f64,
    pub boxes: usize,
    pub pillars: usize,
    pub walkers: [usize; 2],
    /// Seconds between frames.
    pub dt: f64,
    /// Walking speed range, m/s.
    pub speed: [f64; 2],
    pub assets: usize,
    pub range_noise_std: f64,
    /// Half extents of the area objects are placed in, meters.
    pub area: [f64; 2],
    pub detections: DetectionSim,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            sequences: 3,
            frames: 30,
            lidar: toy_lidar(),
            ground_z: -1.7,
            boxes: 6,
            pillars: 4,
            walkers: [2, 4],
            dt: 0.1,
            speed: [1.2, 1.6],
            assets: 4,
            range_noise_std: 0.01,
            area: [11.0, 22.0],
            detections: DetectionSim::default(),
            seed: 2024,
        }
    }
}

pub fn toy_lidar() -> LidarSpec {
    LidarSpec::new(64, 512, -22.5, 22.5, 50.0).expect("valid toy spec")
}

/// Knobs of the detection simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionSim {
    pub hit_rate: f64,
    pub center_noise: f64,
    pub score: [f64; 2],
    /// Probability that a frame starts a flicker.
    pub flicker_rate: f64,
    pub phantoms: usize,
    /// Low-score clutter per frame.
    pub low_score: usize,
}

impl Default for DetectionSim {
    fn default() -> Self {
        Self {
            hit_rate: 0.97,
            center_noise: 0.04,
            score: [0.55, 0.95],
            flicker_rate: 0.3,
            phantoms: 2,
            low_score: 2,
        }
    }
}

/// A walker: asset, start position on the ground, heading and speed.
#[derive(Debug, Clone)]
pub struct Walker {
    pub asset: HumanAsset,
    pub start: Vec3,
    pub heading: f64,
    pub speed: f64,
}

impl Walker {
    pub fn pose(&self, t: f64) -> RigidTransform {
        let dir = Vec3::new(self.heading.cos(), self.heading.sin(), 0.0);
        let spin = RigidTransform::from_yaw_translation(self.heading - self.asset.yaw(), Vec3::zeros());
        RigidTransform::from_translation(self.start + dir * (self.speed * t)).compose(&spin)
    }
}

#[derive(Debug, Clone)]
pub struct ToyLayout {
    pub obstacles: Vec<BBox3D>,
    pub pillars: Vec<(Vec3, f64, f64)>,
    pub walkers: Vec<Walker>,
}

#[derive(Debug, Clone)]
pub struct ToyFrame {
    pub cloud: PointCloud,
    pub gt: Vec<BBox3D>,
}

pub fn box_mesh(b: &BBox3D) -> TriMesh {
    let vertices = b.corners().to_vec();
    // Corners 0..4 bottom (CCW), 4..8 top.
    let mut triangles = vec![[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7]];
    for k in 0..4u32 {
        let n = (k + 1) % 4;
        triangles.push([k, n, n + 4]);
        triangles.push([k, n + 4, k + 4]);
    }
    TriMesh { vertices, triangles }
}

pub fn prism_mesh(base: Vec3, radius: f64, height: f64, sides: usize) -> TriMesh {
    let mut m = TriMesh::default();
    for k in 0..sides {
        let a = 2.0 * PI * k as f64 / sides as f64;
        let off = Vec3::new(radius * a.cos(), radius * a.sin(), 0.0);
        m.vertices.push(base + off);
        m.vertices.push(base + off + Vec3::new(0.0, 0.0, height));
    }
    let s = sides as u32;
    for k in 0..s {
        let n = (k + 1) % s;
        let (b0, t0, b1, t1) = (2 * k, 2 * k + 1, 2 * n, 2 * n + 1);
        m.triangles.push([b0, b1, t1]);
        m.triangles.push([b0, t1, t0]);
    }
    m
}

pub fn ground_mesh(z: f64, half: f64) -> TriMesh {
    TriMesh {
        vertices: vec![
            Vec3::new(-half, -half, z),
            Vec3::new(half, -half, z),
            Vec3::new(half, half, z),
            Vec3::new(-half, half, z),
        ],
        triangles: vec![[0, 1, 2], [0, 2, 3]],
    }
}

fn clear_of(p: Vec3, others: &[Vec3], gap: f64) -> bool {
    p.xy().norm() > 4.0 && others.iter().all(|o| (o.xy() - p.xy()).norm() > gap)
}

fn random_spot(r: &mut Rng, area: [f64; 2], z: f64) -> Vec3 {
    Vec3::new(r.random_range(-area[0]..area[0]), r.random_range(-area[1]..area[1]), z)
}

/// Asset pool shared by the toy scenes and the forge.
pub fn toy_assets(cfg: &ToyConfig) -> Vec<HumanAsset> {
    let mut r = rng::rng_for(cfg.seed, &[u64::MAX]);
    (0..cfg.assets).map(|_| random_humanoid(&mut r)).collect()
}

pub fn layout(cfg: &ToyConfig, sequence: usize) -> ToyLayout {
    let mut r = rng::rng_for(cfg.seed, &[sequence as u64]);
    let z = cfg.ground_z;
    let mut taken: Vec<Vec3> = Vec::new();
    let pick = |r: &mut Rng, taken: &mut Vec<Vec3>, gap: f64| loop {
        let p = random_spot(r, cfg.area, z);
        if clear_of(p, taken, gap) {
            taken.push(p);
            return p;
        }
    };
    let obstacles = (0..cfg.boxes)
        .map(|_| {
            let p = pick(&mut r, &mut taken, 3.0);
            let dims = Vec3::new(r.random_range(0.6..2.0), r.random_range(0.6..2.0), r.random_range(0.5..2.2));
            BBox3D::new(p + Vec3::new(0.0, 0.0, dims.z / 2.0), dims, r.random_range(-PI..PI)).expect("positive dims")
        })
        .collect();
    let pillars = (0..cfg.pillars)
        .map(|_| (pick(&mut r, &mut taken, 3.0), r.random_range(0.15..0.35), r.random_range(2.5..4.0)))
        .collect();
    let n_walkers = r.random_range(cfg.walkers[0]..=cfg.walkers[1]);
    let span = cfg.frames as f64 * cfg.dt;
    let mut walkers = Vec::with_capacity(n_walkers);
    let mut tries = 0;
    while walkers.len() < n_walkers && tries < 1000 {
        tries += 1;
        let start = random_spot(&mut r, cfg.area, z);
        let heading = r.random_range(-PI..PI);
        let speed = r.random_range(cfg.speed[0]..cfg.speed[1]);
        let end = start + Vec3::new(heading.cos(), heading.sin(), 0.0) * speed * span;
        let mid = (start + end) / 2.0;
        let inside = end.x.abs() < cfg.area[0] && end.y.abs() < cfg.area[1];
        if inside && [start, mid, end].iter().all(|p| clear_of(*p, &taken, 2.0)) {
            taken.extend([start, mid, end]);
            let asset = random_humanoid(&mut r);
            walkers.push(Walker {
                asset,
                start,
                heading,
                speed,
            });
        }
    }
    ToyLayout {
        obstacles,
        pillars,
        walkers,
    }
}

impl ToyLayout {
    fn static_meshes(&self, cfg: &ToyConfig) -> Vec<TriMesh> {
        let mut out = vec![ground_mesh(cfg.ground_z, 2.0 * cfg.lidar.max_range)];
        out.extend(self.obstacles.iter().map(box_mesh));
        out.extend(self.pillars.iter().map(|(p, r, h)| prism_mesh(*p, *r, *h, 8)));
        out
    }

    /// Static clutter footprints, where phantoms are planted.
    pub fn clutter_boxes(&self) -> Vec<BBox3D> {
        let mut v = self.obstacles.clone();
        for (p, r, h) in &self.pillars {
            v.push(BBox3D::new(*p + Vec3::new(0.0, 0.0, h / 2.0), Vec3::new(2.0 * r, 2.0 * r, *h), 0.0).expect("positive"));
        }
        v
    }
}

pub fn render_frame(cfg: &ToyConfig, lay: &ToyLayout, sequence: usize, frame: usize, exec: Execution) -> ToyFrame {
    let t = frame as f64 * cfg.dt;
    let mut meshes = lay.static_meshes(cfg);
    let mut gt = Vec::with_capacity(lay.walkers.len());
    for w in &lay.walkers {
        let pose = w.pose(t);
        let m = w.asset.mesh().transformed(&pose);
        gt.push(fit_bbox(&m.vertices, w.heading).expect("nonempty mesh"));
        meshes.push(m);
    }
    let opts = SimOptions {
        range_noise_std: cfg.range_noise_std,
        noise_seed: rng::derive_seed(cfg.seed, &[sequence as u64, frame as u64]),
        exec,
    };
    let hits = cast_rays(&meshes, &cfg.lidar, &opts);
    ToyFrame {
        cloud: PointCloud::new(hits.into_iter().map(|h| h.point).collect()).expect("finite hits"),
        gt,
    }
}

/// Simulated detector output for one sequence.
pub fn simulate_detections(cfg: &ToyConfig, lay: &ToyLayout, gts: &[Vec<BBox3D>], sequence: usize) -> Vec<Vec<Detection>> {
    let sim = &cfg.detections;
    let mut r = rng::rng_for(cfg.seed, &[sequence as u64, 0xD7]);
    let noise = Normal::new(0.0, sim.center_noise).expect("finite std");
    let clutter = lay.clutter_boxes();
    let phantoms: Vec<BBox3D> = (0..sim.phantoms.min(clutter.len()))
        .map(|k| {
            let c = clutter[k].center();
            BBox3D::new(Vec3::new(c.x, c.y, cfg.ground_z + 0.85), Vec3::new(0.6, 0.6, 1.7), 0.0).expect("positive")
        })
        .collect();
    let mut frames: Vec<Vec<Detection>> = vec![Vec::new(); gts.len()];
    for (f, gt) in gts.iter().enumerate() {
        for b in gt {
            if r.random::<f64>() < sim.hit_rate {
                let c = b.center() + Vec3::new(noise.sample(&mut r), noise.sample(&mut r), noise.sample(&mut r));
                let bb = BBox3D::new(c, b.dims(), b.yaw()).expect("valid");
                frames[f].push(Detection::new(f, bb, r.random_range(sim.score[0]..sim.score[1])).expect("score"));
            }
        }
        for p in &phantoms {
            let c = p.center() + Vec3::new(noise.sample(&mut r), noise.sample(&mut r), 0.0);
            let bb = BBox3D::new(c, p.dims(), 0.0).expect("valid");
            frames[f].push(Detection::new(f, bb, r.random_range(0.6..0.9)).expect("score"));
        }
        for _ in 0..sim.low_score {
            let c = random_spot(&mut r, cfg.area, cfg.ground_z + 0.85);
            let bb = BBox3D::new(c, Vec3::new(0.6, 0.6, 1.7), 0.0).expect("valid");
            frames[f].push(Detection::new(f, bb, r.random_range(0.05..0.45)).expect("score"));
        }
    }
    let n = gts.len();
    for f in 0..n {
        if r.random::<f64>() < sim.flicker_rate {
            let len = r.random_range(1..=2usize);
            let c = random_spot(&mut r, cfg.area, cfg.ground_z + 0.85);
            for (k, frame) in frames.iter_mut().enumerate().skip(f).take(len) {
                let bb = BBox3D::new(c, Vec3::new(0.6, 0.6, 1.7), 0.0).expect("valid");
                frame.push(Detection::new(k, bb, r.random_range(0.5..0.9)).expect("score"));
            }
        }
    }
    frames
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToySummary {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub config: PathBuf,
    pub frames: usize,
    pub gt_boxes: usize,
}

pub const SEQUENCE_PREFIX: &str = "seq";

/// Write the toy dataset under `root`.
pub fn write_toy_dataset(root: &Path, cfg: &ToyConfig, exec: Execution) -> Result<ToySummary> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(root)?;
    let assets_dir = root.join("assets");
    mkdir(&assets_dir)?;
    for (k, a) in toy_assets(cfg).iter().enumerate() {
        save_asset(a, &assets_dir.join(format!("human_{k:02}.obj")), &assets_dir.join(format!("human_{k:02}.json")))?;
    }
    let mut sequences = Vec::new();
    let mut gt_lines = Vec::new();
    let mut det_lines = Vec::new();
    let mut gt_boxes = 0;
    for s in 0..cfg.sequences {
        let name = format!("{SEQUENCE_PREFIX}{s}");
        let dir = root.join("frames").join(&name);
        mkdir(&dir)?;
        let lay = layout(cfg, s);
        let frames: Vec<ToyFrame> = exec.map_range(cfg.frames, |f| render_frame(cfg, &lay, s, f, Execution::Sequential));
        let mut paths = Vec::new();
        for (f, fr) in frames.iter().enumerate() {
            let rel = format!("frames/{name}/{f:04}.bin");
            io::write_bin_cloud(&root.join(&rel), fr.cloud.points())?;
            paths.push(serde_json::Value::String(rel));
        }
        let gts: Vec<Vec<BBox3D>> = frames.iter().map(|f| f.gt.clone()).collect();
        let dets = simulate_detections(cfg, &lay, &gts, s);
        for (f, (g, d)) in gts.iter().zip(&dets).enumerate() {
            gt_boxes += g.len();
            gt_lines.push(DetectionLine {
                sequence: Some(name.clone()),
                frame: f,
                boxes: g.iter().map(|b| b.to_array().to_vec()).collect(),
            });
            det_lines.push(DetectionLine::from_detections(Some(name.clone()), f, d));
        }
        sequences.push(serde_json::json!({ "name": name, "frames": paths }));
    }
    let manifest = root.join("manifest.json");
    io::write_json(&manifest, &serde_json::json!({ "dataset": "toy", "sequences": sequences }))?;
    io::write_detection_lines(&root.join("gt.jsonl"), &gt_lines)?;
    io::write_detection_lines(&root.join("detections.jsonl"), &det_lines)?;

    let pcfg = crate::pipeline::PipelineConfig::for_toy(cfg);
    let config = root.join("config.toml");
    let text = toml::to_string(&pcfg).map_err(|e| Error::invalid("config", e.to_string()))?;
    fs::write(&config, text).map_err(|e| Error::io(&config, e))?;
    Ok(ToySummary {
        root: root.to_path_buf(),
        manifest,
        config,
        frames: cfg.sequences * cfg.frames,
        gt_boxes,
    })
}
