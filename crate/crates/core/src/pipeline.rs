//! Configuration and the staged commands: ground segmentation, corpus
//! forging, pseudo-label filtering, mask update, evaluation and loss dumps.
//!
//! Commands return an [`Outcome`] listing non-fatal warnings; a command
//! that cannot proceed at all returns an error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval_metrics::{evaluate_frames, format_table, EvalConfig, EvalFrame, MetricsReport};
use crate::exec::Execution;
use crate::geometry::{BBox3D, DetectionRange, PointCloud};
use crate::ground_seg::{segment_ground_with, GroundModel, RansacConfig};
use crate::io::{self, DetectionLine, Manifest};
use crate::lidar_sim::{load_asset, HumanAsset, SimOptions};
use crate::loss_kernels::{align_loss, bbox_loss, heatmap_loss_raw, total_loss, AlignLoss, FeatureBatch, FeatureRole, LossConfig, LossResult};
use crate::range_view::LidarSpec;
use crate::scene_forge::{corpus_plan, synthesize_planned, Forge, InsertionConfig, Label, PreparedScene, Provenance, SynthFrame};
use crate::supervision::{compose_training_mask, render_heatmap, update_mask, vacant_ground_mask, BevGrid, Mask, MaskConfig};
use crate::toy::{toy_lidar, ToyConfig};
use crate::track_filter::{filter_labels, FilterConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetPreset {
    #[default]
    Hucenlife,
    Stcrowd,
}

impl DatasetPreset {
    pub fn range(self) -> DetectionRange {
        match self {
            DatasetPreset::Hucenlife => DetectionRange::hucenlife(),
            DatasetPreset::Stcrowd => DetectionRange::stcrowd(),
        }
    }

    /// Detector voxel size, meters.
    pub fn voxel_size(self) -> [f64; 3] {
        match self {
            DatasetPreset::Hucenlife => [0.025, 0.05, 0.25],
            DatasetPreset::Stcrowd => [0.03, 0.04, 0.125],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub preset: DatasetPreset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assets: Option<PathBuf>,
    /// Overrides the preset's detection range.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub range: Option<DetectionRange>,
    /// Overrides the preset's detector voxel size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voxel_size: Option<[f64; 3]>,
    /// BEV raster cell, meters.
    pub bev_cell: f64,
    /// Output frames synthesized per batch by `forge`.
    pub forge_batch: usize,
    pub lidar: LidarSpec,
    pub sim: SimOptions,
    pub ransac: RansacConfig,
    pub insertion: InsertionConfig,
    pub mask: MaskConfig,
    pub loss: LossConfig,
    pub filter: FilterConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: DatasetPreset::default(),
            manifest: None,
            assets: None,
            range: None,
            voxel_size: None,
            bev_cell: 0.2,
            forge_batch: 64,
            lidar: toy_lidar(),
            sim: SimOptions::default(),
            ransac: RansacConfig::default(),
            insertion: InsertionConfig::default(),
            mask: MaskConfig::default(),
            loss: LossConfig::default(),
            filter: FilterConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn for_toy(toy: &ToyConfig) -> Self {
        Self {
            seed: toy.seed,
            manifest: Some("manifest.json".into()),
            assets: Some("assets".into()),
            lidar: toy.lidar,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid("config", e.to_string()))
    }

    /// Load a TOML config; relative paths resolve against its folder.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.assets].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Fill the derived fields: one detection range, seeds everywhere.
    pub fn effective(&self, seed: Option<u64>) -> Result<PipelineConfig> {
        let mut c = self.clone();
        if let Some(s) = seed {
            c.seed = s;
        }
        let range = c.range.unwrap_or_else(|| c.preset.range());
        range.validate()?;
        c.range = Some(range);
        c.voxel_size = Some(c.voxel_size.unwrap_or_else(|| c.preset.voxel_size()));
        c.ransac.range = range;
        c.eval.range = range;
        c.ransac.seed = c.seed;
        c.insertion.seed = c.seed;
        c.sim.noise_seed = c.seed;
        c.lidar.validate()?;
        c.ransac.validate()?;
        c.insertion.validate()?;
        c.mask.validate()?;
        c.loss.validate()?;
        c.eval.validate()?;
        if !(c.bev_cell > 0.0) || c.forge_batch == 0 {
            return Err(Error::invalid("config", "bev_cell and forge_batch must be positive"));
        }
        Ok(c)
    }

    pub fn detection_range(&self) -> DetectionRange {
        self.range.unwrap_or_else(|| self.preset.range())
    }

    pub fn grid(&self) -> Result<BevGrid> {
        BevGrid::from_range(&self.detection_range(), self.bev_cell)
    }

    pub fn forge(&self) -> Forge {
        let mut f = Forge::new(self.lidar, self.insertion.clone(), self.ransac.clone(), self.mask.clone());
        f.sim.range_noise_std = self.sim.range_noise_std;
        f.sim.noise_seed = self.sim.noise_seed;
        f
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn require_manifest(&self) -> Result<Manifest> {
        let p = self
            .manifest
            .as_ref()
            .ok_or_else(|| Error::invalid("config", "no manifest configured"))?;
        Manifest::load(p)
    }
}

/// Result of a command: what was written and what went wrong along the way.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub warnings: Vec<String>,
    /// Human-readable summary for the terminal.
    #[serde(skip)]
    pub message: String,
}

impl Outcome {
    pub fn is_partial(&self) -> bool {
        !self.warnings.is_empty()
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_bytes(p: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

fn mask_bytes(m: &Mask) -> Vec<u8> {
    let mut b = Vec::new();
    m.write_to(&mut b).expect("in-memory write");
    b
}

fn meta(cfg: &PipelineConfig, command: &str, extra: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_json(),
        "summary": extra,
    })
}

/// Height the vacancy columns start from.
fn reference_height(ground: &GroundModel, cloud: &PointCloud, range: &DetectionRange) -> f64 {
    ground.median_height().unwrap_or_else(|| {
        cloud
            .points()
            .iter()
            .filter(|p| range.contains(p))
            .map(|p| p.z)
            .fold(f64::INFINITY, f64::min)
            .min(range.z[1])
            .max(range.z[0])
    })
}

/// Ground JSON plus vacant-ground mask for every manifest frame.
pub fn cmd_segment_ground(cfg: &PipelineConfig, out: &Path, exec: Execution) -> Result<Outcome> {
    let manifest = cfg.require_manifest()?;
    let grid = cfg.grid()?;
    let (gdir, mdir) = (out.join("ground"), out.join("masks"));
    mkdir(&gdir)?;
    mkdir(&mdir)?;
    let records: Vec<_> = manifest.frames().map(|(_, _, f)| f.clone()).collect();
    let results = exec.map_slice(&records, |f| -> Result<Vec<PathBuf>> {
        let cloud = io::read_cloud(&f.cloud)?;
        let ground = segment_ground_with(&cloud, &cfg.ransac, Execution::Sequential);
        let gp = gdir.join(format!("{}.json", f.id));
        write_bytes(&gp, ground.to_json()?.as_bytes())?;
        let z = reference_height(&ground, &cloud, &cfg.detection_range());
        let m = vacant_ground_mask(&cloud, &grid, z, &cfg.mask);
        let mp = mdir.join(format!("{}.mask", f.id));
        write_bytes(&mp, &mask_bytes(&m))?;
        Ok(vec![gp, mp])
    });
    let mut outcome = Outcome::default();
    for (f, r) in records.iter().zip(results) {
        match r {
            Ok(p) => outcome.outputs.extend(p),
            Err(e) => {
                log::warn!("skipping frame {}: {e}", f.id);
                outcome.warnings.push(format!("{}: {e}", f.id));
            }
        }
    }
    let metap = out.join("segment-ground.meta.json");
    io::write_json(
        &metap,
        &meta(cfg, "segment-ground", serde_json::json!({ "frames": records.len(), "warnings": outcome.warnings })),
    )?;
    outcome.outputs.push(metap);
    outcome.message = format!("segmented {} of {} frames", records.len() - outcome.warnings.len(), records.len());
    Ok(outcome)
}

/// Assets are `<name>.obj` files with a `<name>.json` joint sidecar, loaded
/// in name order.
pub fn load_asset_pool(dir: &Path) -> Result<Vec<HumanAsset>> {
    let mut objs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "obj"))
        .collect();
    objs.sort();
    objs.iter().map(|o| load_asset(o, &o.with_extension("json"))).collect()
}

/// Everything written for one forged frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabels {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub ids: Vec<u32>,
    pub labels: Vec<Label>,
}

pub fn frame_stem(k: usize) -> String {
    format!("{k:06}")
}

/// Reload a forged frame from a corpus directory.
pub fn load_forged_frame(corpus: &Path, k: usize) -> Result<SynthFrame> {
    let stem = frame_stem(k);
    let cloud = io::read_tagged_cloud(&corpus.join("frames").join(format!("{stem}.bin")))?;
    let labels: FrameLabels = io::read_json(&corpus.join("labels").join(format!("{stem}.json")))?;
    Ok(SynthFrame {
        cloud,
        labels: labels.labels,
        provenance: labels.provenance,
    })
}

fn write_forged_frame(dir: &Path, k: usize, frame: &SynthFrame, grid: &BevGrid, ground_z: f64, mask: &MaskConfig) -> Result<()> {
    let stem = frame_stem(k);
    write_bytes(&dir.join("frames").join(format!("{stem}.bin")), &io::encode_tagged_cloud(&frame.cloud))?;
    let labels = FrameLabels {
        provenance: frame.provenance.clone(),
        ids: frame.labels.iter().map(|l| l.id).collect(),
        labels: frame.labels.clone(),
    };
    let text = serde_json::to_string(&labels)?;
    write_bytes(&dir.join("labels").join(format!("{stem}.json")), text.as_bytes())?;
    let boxes: Vec<BBox3D> = frame.boxes();
    let m = vacant_ground_mask(&frame.cloud, grid, ground_z, mask);
    let y = render_heatmap(&boxes, grid, mask);
    let ms = compose_training_mask(&m, &y)?;
    write_bytes(&dir.join("masks").join(format!("{stem}.m.mask")), &mask_bytes(&m))?;
    write_bytes(&dir.join("masks").join(format!("{stem}.mstar.mask")), &mask_bytes(&ms))?;
    let mut hb = Vec::new();
    y.write_to(&mut hb).expect("in-memory write");
    write_bytes(&dir.join("heatmaps").join(format!("{stem}.hm")), &hb)
}

/// SHA-256 over every file below `dir`, in sorted relative-path order,
/// hashing each path and length before the contents.
pub fn directory_digest(dir: &Path) -> Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                out.push(p.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = fs::read(dir.join(&rel)).map_err(|e| Error::io(dir.join(&rel), e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Forge `n_frames` synthetic frames into `<out>/<digest>`; the digest is the
/// first 16 hex digits of [`directory_digest`]. `outputs[0]` is that folder.
pub fn cmd_forge(cfg: &PipelineConfig, n_frames: usize, out: &Path, exec: Execution) -> Result<Outcome> {
    let manifest = cfg.require_manifest()?;
    let assets_dir = cfg
        .assets
        .as_ref()
        .ok_or_else(|| Error::invalid("config", "no asset folder configured"))?;
    let pool = load_asset_pool(assets_dir)?;
    if pool.is_empty() {
        return Err(Error::invalid("asset pool", format!("no assets in {}", assets_dir.display())));
    }
    let grid = cfg.grid()?;
    let forge = cfg.forge();
    let lens: Vec<usize> = manifest.sequences.iter().map(|s| s.frames.len()).collect();
    let plan = corpus_plan(&lens, n_frames, cfg.seed)?;

    let mut needed: Vec<(usize, usize)> = plan.clone();
    needed.sort_unstable();
    needed.dedup();
    let prepared: Vec<Result<PreparedScene>> = exec.map_slice(&needed, |&(s, f)| {
        let rec = &manifest.sequences[s].frames[f];
        let cloud = io::read_cloud(&rec.cloud)?;
        Ok(forge.prepare_scene(rec.id.clone(), cloud, Execution::Sequential))
    });
    let mut outcome = Outcome::default();
    let mut scenes: BTreeMap<(usize, usize), (PreparedScene, f64)> = BTreeMap::new();
    for (key, r) in needed.iter().zip(prepared) {
        match r {
            Ok(p) => {
                let z = reference_height(&p.ground, &p.cloud, &cfg.detection_range());
                scenes.insert(*key, (p, z));
            }
            Err(e) => {
                let id = &manifest.sequences[key.0].frames[key.1].id;
                log::warn!("skipping base frame {id}: {e}");
                outcome.warnings.push(format!("{id}: {e}"));
            }
        }
    }

    mkdir(out)?;
    let tmp = out.join(format!(".forge-{}-{}", cfg.seed, std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    for sub in ["frames", "labels", "masks", "heatmaps"] {
        mkdir(&tmp.join(sub))?;
    }
    let mut written = 0usize;
    let mut skipped = 0usize;
    for chunk_start in (0..n_frames).step_by(cfg.forge_batch) {
        let ks: Vec<usize> = (chunk_start..(chunk_start + cfg.forge_batch).min(n_frames)).collect();
        let results = exec.map_slice(&ks, |&k| -> Option<Result<()>> {
            let (s, f) = plan[k];
            let (scene, z) = scenes.get(&(s, f))?;
            Some(
                synthesize_planned(&forge, scene, &pool, cfg.seed, k, lens.len(), lens[s])
                    .and_then(|fr| write_forged_frame(&tmp, k, &fr, &grid, *z, &cfg.mask)),
            )
        });
        for r in results {
            match r {
                Some(Ok(())) => written += 1,
                Some(Err(e)) => return Err(e),
                None => skipped += 1,
            }
        }
    }
    let mut corpus_meta = meta(
        cfg,
        "forge",
        serde_json::json!({
            "requested_frames": n_frames,
            "written_frames": written,
            "skipped_frames": skipped,
            "assets": pool.len(),
            "asset_digest": directory_digest(assets_dir)?,
            "base_frames": scenes.values().map(|(p, _)| p.id.clone()).collect::<Vec<_>>(),
        }),
    );
    // Input locations would tie the digest to where the inputs live.
    if let Some(c) = corpus_meta["config"].as_object_mut() {
        c.remove("manifest");
        c.remove("assets");
    }
    io::write_json(&tmp.join("corpus.json"), &corpus_meta)?;
    let digest = directory_digest(&tmp)?;
    let dest = out.join(&digest[..16]);
    if dest.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    } else {
        fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))?;
    }
    outcome.message = format!("forged {written} frames into {}", dest.display());
    outcome.outputs.insert(0, dest);
    Ok(outcome)
}

fn sequence_of(name: &str) -> Option<String> {
    (!name.is_empty()).then(|| name.to_string())
}

/// Bi-directional filtering of a detections file, sequence by sequence.
pub fn cmd_filter(cfg: &PipelineConfig, detections: &Path, out: &Path, exec: Execution) -> Result<Outcome> {
    let lines = io::read_detection_lines(detections)?;
    let grouped: Vec<(String, Vec<Vec<crate::geometry::Detection>>)> = io::group_by_sequence(&lines)?.into_iter().collect();
    let filtered = exec.map_slice(&grouped, |(_, frames)| filter_labels(frames, &cfg.filter));
    let mut out_lines = Vec::new();
    let (mut n_in, mut n_out) = (0usize, 0usize);
    for ((name, frames), kept) in grouped.iter().zip(&filtered) {
        for (f, dets) in kept.iter().enumerate() {
            n_in += frames[f].len();
            n_out += dets.len();
            out_lines.push(DetectionLine::from_detections(sequence_of(name), f, dets));
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    io::write_detection_lines(out, &out_lines)?;
    let sidecar = PathBuf::from(format!("{}.meta.json", out.display()));
    io::write_json(
        &sidecar,
        &meta(cfg, "filter", serde_json::json!({ "input_detections": n_in, "output_detections": n_out, "sequences": grouped.len() })),
    )?;
    Ok(Outcome {
        outputs: vec![out.to_path_buf(), sidecar],
        warnings: vec![],
        message: format!("kept {n_out} of {n_in} detections"),
    })
}

/// Expand each frame's mask around its pseudo-labels.
pub fn cmd_update_mask(cfg: &PipelineConfig, masks: &Path, labels: &Path, out: &Path) -> Result<Outcome> {
    let lines = io::read_detection_lines(labels)?;
    mkdir(out)?;
    let mut outcome = Outcome::default();
    for l in &lines {
        let key = io::frame_key(l.sequence.as_deref().unwrap_or(""), l.frame);
        let src = masks.join(format!("{key}.mask"));
        let m = match fs::read(&src).map_err(|e| Error::io(&src, e)).and_then(|b| Mask::read_from(&b[..])) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("skipping {key}: {e}");
                outcome.warnings.push(format!("{key}: {e}"));
                continue;
            }
        };
        let boxes: Vec<BBox3D> = l.detections()?.iter().map(|d| d.bbox).collect();
        let updated = update_mask(&m, &boxes, &cfg.mask);
        let dst = out.join(format!("{key}.mask"));
        write_bytes(&dst, &mask_bytes(&updated))?;
        outcome.outputs.push(dst);
    }
    let metap = out.join("update-mask.meta.json");
    io::write_json(&metap, &meta(cfg, "update-mask", serde_json::json!({ "frames": lines.len(), "warnings": outcome.warnings })))?;
    outcome.message = format!("updated {} masks", outcome.outputs.len());
    outcome.outputs.push(metap);
    Ok(outcome)
}

fn keyed_frames(lines: &[DetectionLine]) -> Result<BTreeMap<String, Vec<crate::geometry::Detection>>> {
    let mut out: BTreeMap<String, Vec<crate::geometry::Detection>> = BTreeMap::new();
    for l in lines {
        out.entry(io::frame_key(l.sequence.as_deref().unwrap_or(""), l.frame))
            .or_default()
            .extend(l.detections()?);
    }
    Ok(out)
}

/// Evaluate detections against ground truth; frames are the ground truth's.
pub fn cmd_eval(cfg: &PipelineConfig, detections: &Path, gt: &Path, out: &Path) -> Result<(Outcome, MetricsReport)> {
    let dets = keyed_frames(&io::read_detection_lines(detections)?)?;
    let gts = keyed_frames(&io::read_detection_lines(gt)?)?;
    if let Some(extra) = dets.keys().find(|k| !gts.contains_key(*k)) {
        return Err(Error::FrameMismatch(format!("detections for unknown frame {extra}")));
    }
    let frames: Vec<EvalFrame> = gts
        .iter()
        .map(|(id, g)| EvalFrame {
            id: id.clone(),
            detections: dets.get(id).cloned().unwrap_or_default(),
            ground_truth: g.iter().map(|d| d.bbox).collect(),
        })
        .collect();
    let report = evaluate_frames(&frames, &cfg.eval)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    io::write_json(
        out,
        &serde_json::json!({ "report": report, "seed": cfg.seed, "config": cfg.to_json() }),
    )?;
    Ok((
        Outcome {
            outputs: vec![out.to_path_buf()],
            warnings: vec![],
            message: format_table(&report),
        },
        report,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapTensors {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxTensors {
    pub pred: Vec<Vec<f64>>,
    pub gt: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignTensors {
    pub synthetic: Vec<Vec<f64>>,
    pub real: Vec<Vec<f64>>,
}

/// Input of `losscheck`; every section is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossInputs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmap: Option<HeatmapTensors>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoxTensors>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align: Option<AlignTensors>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossDump {
    pub config: LossConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmap: Option<LossResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox: Option<LossResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total: Option<LossResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub align: Option<AlignLoss>,
}

fn flatten_rows<T: Copy>(rows: &[Vec<T>], what: &str) -> Result<(Vec<T>, [usize; 2])> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::ShapeMismatch(format!("{what} rows have mixed lengths")));
    }
    Ok((rows.concat(), [rows.len(), cols]))
}

pub fn compute_losses(inputs: &LossInputs, cfg: &LossConfig) -> Result<LossDump> {
    let mut dump = LossDump {
        config: *cfg,
        ..LossDump::default()
    };
    if let Some(h) = &inputs.heatmap {
        let (x, shape) = flatten_rows(&h.x, "x")?;
        let (y, ys) = flatten_rows(&h.y, "y")?;
        let (m, ms) = flatten_rows(&h.mask, "mask")?;
        if ys != shape || ms != shape {
            return Err(Error::ShapeMismatch(format!("x {shape:?}, y {ys:?}, mask {ms:?}")));
        }
        dump.heatmap = Some(heatmap_loss_raw(&x, &y, &m, shape, cfg)?);
    }
    if let Some(b) = &inputs.bbox {
        dump.bbox = Some(bbox_loss(&b.pred, &b.gt)?);
    }
    if let (Some(h), Some(b)) = (&dump.heatmap, &dump.bbox) {
        dump.total = Some(total_loss(h, b));
    }
    if let Some(a) = &inputs.align {
        let fs = FeatureBatch::new(FeatureRole::Synthetic, a.synthetic.clone())?;
        let fr = FeatureBatch::new(FeatureRole::Real, a.real.clone())?;
        dump.align = Some(align_loss(&fs, &fr, cfg)?);
    }
    Ok(dump)
}

pub fn cmd_losscheck(cfg: &PipelineConfig, tensors: &Path, out: &Path) -> Result<(Outcome, LossDump)> {
    let inputs: LossInputs = io::read_json(tensors)?;
    let dump = compute_losses(&inputs, &cfg.loss)?;
    io::write_json(out, &dump)?;
    let mut msg = String::new();
    for (name, v) in [
        ("heatmap", dump.heatmap.as_ref().map(|r| r.value)),
        ("bbox", dump.bbox.as_ref().map(|r| r.value)),
        ("total", dump.total.as_ref().map(|r| r.value)),
        ("align", dump.align.as_ref().map(|r| r.result.value)),
    ] {
        if let Some(v) = v {
            msg.push_str(&format!("{name}: {v:.17e}\n"));
        }
    }
    Ok((
        Outcome {
            outputs: vec![out.to_path_buf()],
            warnings: vec![],
            message: msg,
        },
        dump,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_and_effective_config() {
        let c = PipelineConfig::default().effective(Some(9)).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.ransac.seed, 9);
        assert_eq!(c.range, Some(DetectionRange::hucenlife()));
        assert_eq!(c.voxel_size, Some([0.025, 0.05, 0.25]));
        let grid = c.grid().unwrap();
        assert_eq!((grid.rows(), grid.cols()), (128, 256));
        let s = PipelineConfig {
            preset: DatasetPreset::Stcrowd,
            ..PipelineConfig::default()
        }
        .effective(None)
        .unwrap();
        assert_eq!(s.eval.range, DetectionRange::stcrowd());
        assert_eq!(s.voxel_size, Some([0.03, 0.04, 0.125]));
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let c = PipelineConfig::for_toy(&ToyConfig::default());
        let text = toml::to_string(&c).unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), c);
        let partial = PipelineConfig::from_toml("seed = 3\n[insertion]\nmax_failures = 4\n").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.insertion.max_failures, 4);
        assert_eq!(partial.insertion.max_iou, 0.35);
        assert!(PipelineConfig::from_toml("seed = 'x'").is_err());
    }

    #[test]
    fn digest_depends_on_names_and_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        fs::create_dir(a.path().join("x")).unwrap();
        fs::write(a.path().join("x/f"), b"1").unwrap();
        fs::create_dir(b.path().join("x")).unwrap();
        fs::write(b.path().join("x/f"), b"1").unwrap();
        assert_eq!(directory_digest(a.path()).unwrap(), directory_digest(b.path()).unwrap());
        fs::write(b.path().join("x/f"), b"2").unwrap();
        assert_ne!(directory_digest(a.path()).unwrap(), directory_digest(b.path()).unwrap());
    }

    #[test]
    fn loss_dump_sections() {
        let inputs = LossInputs {
            heatmap: Some(HeatmapTensors {
                x: vec![vec![0.5, 0.1]],
                y: vec![vec![1.0, 0.0]],
                mask: vec![vec![true, true]],
            }),
            bbox: Some(BoxTensors {
                pred: vec![vec![1.0, 0.0]],
                gt: vec![vec![0.0, 0.0]],
            }),
            align: None,
        };
        let d = compute_losses(&inputs, &LossConfig::default()).unwrap();
        let t = d.total.unwrap();
        assert_eq!(t.value, d.heatmap.unwrap().value + 1.0);
        assert_eq!(t.gradients.len(), 2);
        assert!(d.align.is_none());
    }
}
