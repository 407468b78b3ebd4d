//! BEV supervision rasters: vacant-ground masks, composed and expanded
//! training masks, Gaussian center heatmaps and key-joint visibility.
//!
//! Grid rows run along x and columns along y. Cell `(r, c)` covers
//! `[x_min + r·cell, x_min + (r+1)·cell) × [y_min + c·cell, ...)`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::geometry::{BBox3D, DetectionRange, PointCloud, Vec3};
use crate::lidar_sim::{BodyPart, Joint};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub cell: f64,
    rows: usize,
    cols: usize,
}

impl BevGrid {
    pub fn new(x: [f64; 2], y: [f64; 2], cell: f64) -> Result<Self> {
        if !(x[0] < x[1] && y[0] < y[1]) || !(cell > 0.0) {
            return Err(Error::invalid("bev grid", "extents must be ordered and cell positive"));
        }
        Ok(Self {
            x,
            y,
            cell,
            rows: ((x[1] - x[0]) / cell).ceil() as usize,
            cols: ((y[1] - y[0]) / cell).ceil() as usize,
        })
    }

    pub fn from_range(range: &DetectionRange, cell: f64) -> Result<Self> {
        Self::new(range.x, range.y, cell)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn index(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let r = ((x - self.x[0]) / self.cell).floor();
        let c = ((y - self.y[0]) / self.cell).floor();
        if r < 0.0 || c < 0.0 || r >= self.rows as f64 || c >= self.cols as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn cell_center(&self, r: usize, c: usize) -> (f64, f64) {
        (
            self.x[0] + (r as f64 + 0.5) * self.cell,
            self.y[0] + (c as f64 + 0.5) * self.cell,
        )
    }

    fn write_header<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for v in [self.x[0], self.x[1], self.y[0], self.y[1], self.cell] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())
    }

    fn read_header<R: Read>(r: &mut R) -> Result<Self> {
        let mut f = [0f64; 5];
        for v in &mut f {
            let mut b = [0u8; 8];
            read_exact(r, &mut b)?;
            *v = f64::from_le_bytes(b);
        }
        let mut dims = [0usize; 2];
        for d in &mut dims {
            let mut b = [0u8; 4];
            read_exact(r, &mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let grid = BevGrid::new([f[0], f[1]], [f[2], f[3]], f[4])?;
        if (grid.rows, grid.cols) != (dims[0], dims[1]) {
            return Err(Error::invalid(
                "raster header",
                format!("dims {}x{} disagree with extents", dims[0], dims[1]),
            ));
        }
        Ok(grid)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::invalid("raster", format!("truncated input: {e}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    grid: BevGrid,
    bits: Vec<bool>,
}

impl Mask {
    pub fn filled(grid: BevGrid, value: bool) -> Self {
        Self {
            grid,
            bits: vec![value; grid.n_cells()],
        }
    }

    pub fn from_bits(grid: BevGrid, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "{} bits for a {}x{} grid",
                bits.len(),
                grid.rows,
                grid.cols
            )));
        }
        Ok(Self { grid, bits })
    }

    pub fn grid(&self) -> &BevGrid {
        &self.grid
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[self.grid.index(r, c)]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        let i = self.grid.index(r, c);
        self.bits[i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn not(&self) -> Mask {
        Mask {
            grid: self.grid,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        Ok(Mask {
            grid: self.grid,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// Every true cell of `self` is true in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.grid == other.grid && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    /// Header then an LSB-first bitset, row-major.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        self.grid.write_header(&mut w)?;
        let mut bytes = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, _) in self.bits.iter().enumerate().filter(|(_, b)| **b) {
            bytes[i / 8] |= 1 << (i % 8);
        }
        w.write_all(&bytes)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Mask> {
        let grid = BevGrid::read_header(&mut r)?;
        let mut bytes = vec![0u8; grid.n_cells().div_ceil(8)];
        read_exact(&mut r, &mut bytes)?;
        let bits = (0..grid.n_cells()).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Mask { grid, bits })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    grid: BevGrid,
    values: Vec<f64>,
}

impl HeatmapGrid {
    pub fn zeros(grid: BevGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.n_cells()],
        }
    }

    /// Values must lie in `[0, 1]`.
    pub fn from_values(grid: BevGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {}x{} grid",
                values.len(),
                grid.rows,
                grid.cols
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("heatmap", "values must lie in [0, 1]"));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &BevGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[self.grid.index(r, c)]
    }

    pub fn support(&self) -> Mask {
        Mask {
            grid: self.grid,
            bits: self.values.iter().map(|&v| v > 0.0).collect(),
        }
    }

    /// Header then row-major little-endian `f32` values.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        self.grid.write_header(&mut w)?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for &v in &self.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<HeatmapGrid> {
        let grid = BevGrid::read_header(&mut r)?;
        let mut bytes = vec![0u8; grid.n_cells() * 4];
        read_exact(&mut r, &mut bytes)?;
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        HeatmapGrid::from_values(grid, values)
    }
}

/// Part-specific search radii for joint visibility, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointRadii {
    pub head: f64,
    pub trunk: f64,
    pub arms: f64,
    pub legs: f64,
}

impl Default for JointRadii {
    fn default() -> Self {
        Self {
            head: 0.3,
            trunk: 0.4,
            arms: 0.15,
            legs: 0.22,
        }
    }
}

impl JointRadii {
    pub fn of(&self, part: BodyPart) -> f64 {
        match part {
            BodyPart::Head => self.head,
            BodyPart::Trunk => self.trunk,
            BodyPart::LeftArm | BodyPart::RightArm => self.arms,
            BodyPart::LeftLeg | BodyPart::RightLeg => self.legs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Height of one vacancy voxel, meters.
    pub vacancy_voxel_z: f64,
    /// Column window above the reference ground height, meters.
    pub vacancy_z_range: [f64; 2],
    /// A cell is vacant when more than this fraction of its column voxels is empty.
    pub vacancy_empty_fraction: f64,
    pub heatmap_min_overlap: f64,
    /// Lower bound on the Gaussian radius, in cells.
    pub heatmap_min_radius: usize,
    /// Minimum BEV footprint of a pseudo-label before rasterizing, meters.
    pub expansion: [f64; 2],
    pub joint_min_points: usize,
    pub joint_radii: JointRadii,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            vacancy_voxel_z: 0.25,
            vacancy_z_range: [0.0, 2.5],
            vacancy_empty_fraction: 0.8,
            heatmap_min_overlap: 0.7,
            heatmap_min_radius: 2,
            expansion: [2.0, 2.0],
            joint_min_points: 10,
            joint_radii: JointRadii::default(),
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let r = &self.joint_radii;
        let ok = self.vacancy_voxel_z > 0.0
            && self.vacancy_z_range[0] < self.vacancy_z_range[1]
            && (0.0..1.0).contains(&self.vacancy_empty_fraction)
            && self.heatmap_min_overlap > 0.0
            && self.heatmap_min_overlap < 1.0
            && self.expansion.iter().all(|&e| e > 0.0)
            && self.joint_min_points > 0
            && [r.head, r.trunk, r.arms, r.legs].iter().all(|&v| v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("mask config", "all parameters must be positive"))
        }
    }

    pub fn vacancy_voxels(&self) -> usize {
        let span = self.vacancy_z_range[1] - self.vacancy_z_range[0];
        ((span / self.vacancy_voxel_z).round() as usize).max(1)
    }
}

/// Mark cells whose column above `ground_z` is mostly free space.
///
/// The column window `[ground_z + lo, ground_z + hi)` is split into voxels
/// of `vacancy_voxel_z`; a cell is vacant iff the number of voxels without
/// any point exceeds `vacancy_empty_fraction` of the total.
pub fn vacant_ground_mask(cloud: &PointCloud, grid: &BevGrid, ground_z: f64, cfg: &MaskConfig) -> Mask {
    let nz = cfg.vacancy_voxels();
    let lo = ground_z + cfg.vacancy_z_range[0];
    let mut occupied = vec![false; grid.n_cells() * nz];
    for p in cloud.points() {
        let Some((r, c)) = grid.cell_of(p.x, p.y) else {
            continue;
        };
        let k = ((p.z - lo) / cfg.vacancy_voxel_z).floor();
        if k >= 0.0 && (k as usize) < nz {
            occupied[grid.index(r, c) * nz + k as usize] = true;
        }
    }
    let bits = occupied
        .chunks_exact(nz)
        .map(|col| {
            let empty = col.iter().filter(|&&o| !o).count();
            empty as f64 > cfg.vacancy_empty_fraction * nz as f64
        })
        .collect();
    Mask { grid: *grid, bits }
}

/// `M* = M ∨ (y > 0)`.
pub fn compose_training_mask(m: &Mask, y: &HeatmapGrid) -> Result<Mask> {
    if m.grid != y.grid {
        return Err(Error::GridMismatch);
    }
    m.or(&y.support())
}

/// Union of the expanded BEV footprints; a cell belongs to it when its
/// center lies inside any footprint.
pub fn footprint_mask(grid: &BevGrid, boxes: &[BBox3D], expansion: [f64; 2]) -> Mask {
    let mut p = Mask::filled(*grid, false);
    for b in boxes {
        let e = b.with_min_bev_extent(expansion[0], expansion[1]);
        let corners = e.bev_corners();
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for c in &corners {
            x0 = x0.min(c.x);
            x1 = x1.max(c.x);
            y0 = y0.min(c.y);
            y1 = y1.max(c.y);
        }
        let r_range = cell_span(x0, x1, grid.x[0], grid.cell, grid.rows);
        let c_range = cell_span(y0, y1, grid.y[0], grid.cell, grid.cols);
        for r in r_range {
            for c in c_range.clone() {
                let (cx, cy) = grid.cell_center(r, c);
                if e.contains_bev(cx, cy) {
                    p.set(r, c, true);
                }
            }
        }
    }
    p
}

fn cell_span(lo: f64, hi: f64, origin: f64, cell: f64, n: usize) -> std::ops::Range<usize> {
    let a = ((lo - origin) / cell).floor().max(0.0);
    let b = ((hi - origin) / cell).ceil().min(n as f64);
    if b <= a {
        0..0
    } else {
        a as usize..b as usize
    }
}

/// `M′ = M ∨ ¬P` where `P` is the expanded pseudo-label footprint.
pub fn update_mask(m: &Mask, pseudo_labels: &[BBox3D], cfg: &MaskConfig) -> Mask {
    let p = footprint_mask(&m.grid, pseudo_labels, cfg.expansion);
    Mask {
        grid: m.grid,
        bits: m.bits.iter().zip(&p.bits).map(|(a, b)| *a || !b).collect(),
    }
}

/// Center-heatmap Gaussian radius for a `height × width` (cells) box: the
/// largest shift keeping IoU ≥ `min_overlap` in the three corner cases.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let (h, w, o) = (height, width, min_overlap);
    let b1 = h + w;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;

    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;

    let a3 = 4.0 * o;
    let b3 = -2.0 * o * (h + w);
    let c3 = (o - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;

    r1.min(r2).min(r3)
}

/// Integer radius (cells) used to splat `b` on `grid`.
pub fn splat_radius(b: &BBox3D, grid: &BevGrid, cfg: &MaskConfig) -> usize {
    let d = b.dims();
    let r = gaussian_radius(d.x / grid.cell, d.y / grid.cell, cfg.heatmap_min_overlap);
    (r.max(0.0) as usize).max(cfg.heatmap_min_radius)
}

/// Splat one Gaussian per label at its center cell, `σ = (2r + 1) / 6`,
/// truncated to the `(2r + 1)²` window; overlaps take the per-cell max.
/// Labels centered outside the grid are skipped.
pub fn render_heatmap(labels: &[BBox3D], grid: &BevGrid, cfg: &MaskConfig) -> HeatmapGrid {
    let mut hm = HeatmapGrid::zeros(*grid);
    for b in labels {
        let c = b.center();
        let Some((r0, c0)) = grid.cell_of(c.x, c.y) else {
            continue;
        };
        let radius = splat_radius(b, grid, cfg);
        let sigma = (2 * radius + 1) as f64 / 6.0;
        let ri = radius as isize;
        for dr in -ri..=ri {
            for dc in -ri..=ri {
                let (r, cc) = (r0 as isize + dr, c0 as isize + dc);
                if r < 0 || cc < 0 || r >= grid.rows as isize || cc >= grid.cols as isize {
                    continue;
                }
                let g = (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
                let i = grid.index(r as usize, cc as usize);
                if g > hm.values[i] {
                    hm.values[i] = g;
                }
            }
        }
    }
    hm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEntry {
    pub part: BodyPart,
    pub position: [f64; 3],
    pub visible: bool,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointSet {
    pub entries: Vec<JointEntry>,
}

impl JointSet {
    pub fn visible(&self) -> impl Iterator<Item = &JointEntry> {
        self.entries.iter().filter(|e| e.visible)
    }
}

/// A joint is visible iff at least `joint_min_points` instance points lie
/// within its part radius (inclusive).
pub fn visible_joints(joints: &[Joint], points: &[Vec3], cfg: &MaskConfig) -> JointSet {
    let entries = joints
        .iter()
        .map(|j| {
            let r = cfg.joint_radii.of(j.part);
            let n = points.iter().filter(|p| (*p - j.position).norm() <= r).count();
            JointEntry {
                part: j.part,
                position: [j.position.x, j.position.y, j.position.z],
                visible: n >= cfg.joint_min_points,
                points: n,
            }
        })
        .collect();
    JointSet { entries }
}
