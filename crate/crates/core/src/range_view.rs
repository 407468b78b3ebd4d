//! Range-image view of a spinning LiDAR.
//!
//! A [`RangeImage`] is an H×W grid addressed by beam row (elevation) and
//! azimuth column; each cell holds at most one return, the nearest one.
//! Rows increase with elevation (row 0 is the lowest beam). Columns cover
//! azimuth `atan2(y, x)` over `[-180°, 180°)`, column 0 starting at −180°.
//!
//! Bin edges belong to the lower bin. The lower FOV edge is kept in row 0;
//! azimuth −180° (≡ 180°) is the upper edge of the last column.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::geometry::{PointCloud, Source, Vec3};
use crate::{Error, Result};

/// Beam pattern and sensor placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    pub rows: usize,
    pub cols: usize,
    pub min_elev_deg: f64,
    pub max_elev_deg: f64,
    pub max_range: f64,
    #[serde(default)]
    pub origin: [f64; 3],
}

impl LidarSpec {
    pub fn new(rows: usize, cols: usize, min_elev_deg: f64, max_elev_deg: f64, max_range: f64) -> Result<Self> {
        let spec = Self {
            rows,
            cols,
            min_elev_deg,
            max_elev_deg,
            max_range,
            origin: [0.0; 3],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_origin(mut self, origin: Vec3) -> Self {
        self.origin = [origin.x, origin.y, origin.z];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rows >= 1
            && self.cols >= 1
            && self.max_range > 0.0
            && self.min_elev_deg < self.max_elev_deg
            && self.min_elev_deg >= -90.0
            && self.max_elev_deg <= 90.0
            && self.origin.iter().all(|c| c.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("lidar spec", format!("{self:?}")))
        }
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::from(self.origin)
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn row_height_deg(&self) -> f64 {
        (self.max_elev_deg - self.min_elev_deg) / self.rows as f64
    }

    pub fn col_width_deg(&self) -> f64 {
        360.0 / self.cols as f64
    }

    pub fn row_of_elevation(&self, elev_deg: f64) -> Option<usize> {
        if !(self.min_elev_deg..=self.max_elev_deg).contains(&elev_deg) {
            return None;
        }
        let t = (elev_deg - self.min_elev_deg) / (self.max_elev_deg - self.min_elev_deg) * self.rows as f64;
        let k = t.ceil() as isize - 1;
        Some(k.clamp(0, self.rows as isize - 1) as usize)
    }

    pub fn col_of_azimuth(&self, az_deg: f64) -> usize {
        let t = (az_deg + 180.0) / 360.0 * self.cols as f64;
        let k = t.ceil() as isize - 1;
        if k < 0 {
            self.cols - 1
        } else {
            (k as usize).min(self.cols - 1)
        }
    }

    /// Cell and range of a point, or `None` if it lies outside the FOV, beyond
    /// `max_range`, or at the sensor origin.
    pub fn locate(&self, p: &Vec3) -> Option<(usize, usize, f64)> {
        let d = p - self.origin();
        let range = d.norm();
        if !(range > 0.0 && range <= self.max_range) {
            return None;
        }
        let elev = d.z.atan2(d.x.hypot(d.y)).to_degrees();
        let az = d.y.atan2(d.x).to_degrees();
        let row = self.row_of_elevation(elev)?;
        Some((row, self.col_of_azimuth(az), range))
    }

    pub fn elevation_center_deg(&self, row: usize) -> f64 {
        self.min_elev_deg + (row as f64 + 0.5) * self.row_height_deg()
    }

    pub fn azimuth_center_deg(&self, col: usize) -> f64 {
        -180.0 + (col as f64 + 0.5) * self.col_width_deg()
    }

    /// Unit ray direction through the center of cell `(row, col)`.
    pub fn ray_direction(&self, row: usize, col: usize) -> Vec3 {
        let e = self.elevation_center_deg(row).to_radians();
        let a = self.azimuth_center_deg(col).to_radians();
        Vec3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin())
    }
}

/// One stored return. `tag` is 0 for scene points and the synthetic
/// instance id otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub point: Vec3,
    pub range: f64,
    pub tag: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    spec: LidarSpec,
    cells: Vec<Option<Cell>>,
}

impl RangeImage {
    pub fn empty(spec: LidarSpec) -> Self {
        Self {
            spec,
            cells: vec![None; spec.n_cells()],
        }
    }

    pub fn spec(&self) -> &LidarSpec {
        &self.spec
    }

    pub fn rows(&self) -> usize {
        self.spec.rows
    }

    pub fn cols(&self) -> usize {
        self.spec.cols
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.spec.cols + col
    }

    pub fn get(&self, row: usize, col: usize) -> Option<&Cell> {
        self.cells[self.index(row, col)].as_ref()
    }

    pub fn cells(&self) -> &[Option<Cell>] {
        &self.cells
    }

    /// Cell distance with empty cells at +∞.
    pub fn distance(&self, idx: usize) -> f64 {
        self.cells[idx].map_or(f64::INFINITY, |c| c.range)
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn occupied(&self) -> impl Iterator<Item = (usize, &Cell)> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|c| (i, c)))
    }

    /// Insert a candidate return, keeping the nearer one. Returns whether the
    /// candidate is now stored.
    fn offer(&mut self, idx: usize, cell: Cell) -> bool {
        match &self.cells[idx] {
            Some(existing) if existing.range <= cell.range => false,
            _ => {
                self.cells[idx] = Some(cell);
                true
            }
        }
    }

    /// Project a cloud; tags come from the cloud's source attribute.
    pub fn project(cloud: &PointCloud, spec: &LidarSpec) -> Self {
        let mut img = Self::empty(*spec);
        for (i, p) in cloud.points().iter().enumerate() {
            if let Some((row, col, range)) = spec.locate(p) {
                let idx = img.index(row, col);
                img.offer(
                    idx,
                    Cell {
                        point: *p,
                        range,
                        tag: cloud.source_of(i).tag(),
                    },
                );
            }
        }
        img
    }

    /// Project raw points, tagging every stored cell with `tag`.
    pub fn project_points(points: &[Vec3], spec: &LidarSpec, tag: u32) -> Self {
        let mut img = Self::empty(*spec);
        for p in points {
            if let Some((row, col, range)) = spec.locate(p) {
                let idx = img.index(row, col);
                img.offer(idx, Cell { point: *p, range, tag });
            }
        }
        img
    }

    /// The stored points of all occupied cells in row-major order, with
    /// source tags.
    pub fn backproject(&self) -> PointCloud {
        let (points, sources): (Vec<Vec3>, Vec<Source>) = self
            .occupied()
            .map(|(_, c)| (c.point, Source::from_tag(c.tag)))
            .unzip();
        PointCloud::new(points)
            .and_then(|c| c.with_sources(sources))
            .expect("stored points are finite and tags cover every point")
    }

    /// Nearest-return merge of an instance image into a scene image.
    ///
    /// Per cell the scene return survives only if strictly nearer than the
    /// instance return; ties go to the instance. Empty cells are at +∞.
    pub fn merge(scene: &RangeImage, instance: &RangeImage) -> Result<RangeImage> {
        let mut out = scene.clone();
        out.merge_in_place(instance)?;
        Ok(out)
    }

    pub fn merge_in_place(&mut self, instance: &RangeImage) -> Result<()> {
        if self.spec != instance.spec {
            return Err(Error::SpecMismatch);
        }
        for (idx, cell) in instance.occupied() {
            if self.instance_wins(idx, cell.range) {
                self.cells[idx] = Some(*cell);
            }
        }
        Ok(())
    }

    /// Whether an instance return at `range` replaces what cell `idx` holds.
    pub fn instance_wins(&self, idx: usize, range: f64) -> bool {
        !(self.distance(idx) < range)
    }

    /// Store `cell` at `idx` unconditionally.
    pub fn overwrite(&mut self, idx: usize, cell: Cell) {
        self.cells[idx] = Some(cell);
    }

    /// Fraction of the instance's returns that did not survive in `merged`.
    pub fn occlusion_rate(instance: &RangeImage, merged: &RangeImage) -> Result<f64> {
        if instance.spec != merged.spec {
            return Err(Error::SpecMismatch);
        }
        let mut total = 0usize;
        let mut survived = 0usize;
        for (idx, cell) in instance.occupied() {
            total += 1;
            if merged.cells[idx].as_ref() == Some(cell) {
                survived += 1;
            }
        }
        if total == 0 {
            return Err(Error::EmptyInstance("instance range image has no returns"));
        }
        Ok(1.0 - survived as f64 / total as f64)
    }

    /// Count of occupied cells per tag, indexed by tag, covering tags
    /// `0..=max_tag`.
    pub fn tag_histogram(&self, max_tag: u32) -> Vec<usize> {
        let mut counts = vec![0usize; max_tag as usize + 1];
        for (_, c) in self.occupied() {
            if c.tag <= max_tag {
                counts[c.tag as usize] += 1;
            }
        }
        counts
    }

    /// Binary encoding: `rows: u32, cols: u32`, then `min_elev, max_elev,
    /// max_range, origin.x, origin.y, origin.z` as `f64`, then row-major cells
    /// of `occupied: u8, x, y, z: f32`. All little-endian. Tags are not
    /// stored.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let s = &self.spec;
        w.write_all(&(s.rows as u32).to_le_bytes())?;
        w.write_all(&(s.cols as u32).to_le_bytes())?;
        for v in [s.min_elev_deg, s.max_elev_deg, s.max_range, s.origin[0], s.origin[1], s.origin[2]] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.cells.len() * 13);
        for cell in &self.cells {
            match cell {
                Some(c) => {
                    buf.push(1u8);
                    for v in c.point.iter() {
                        buf.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                }
                None => {
                    buf.push(0u8);
                    buf.extend_from_slice(&[0u8; 12]);
                }
            }
        }
        w.write_all(&buf)
    }

    /// Decode the format written by [`RangeImage::write_to`]. Ranges are
    /// recomputed from the stored points; all tags are 0.
    pub fn read_from<R: Read>(mut r: R) -> Result<RangeImage> {
        let bad = |reason: String| Error::format("<range image>", reason);
        let mut u4 = [0u8; 4];
        let mut f8 = [0u8; 8];
        let mut read_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut u4).map_err(|e| bad(e.to_string()))?;
            Ok(u32::from_le_bytes(u4))
        };
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut vals = [0f64; 6];
        for v in &mut vals {
            r.read_exact(&mut f8).map_err(|e| bad(e.to_string()))?;
            *v = f64::from_le_bytes(f8);
        }
        let spec = LidarSpec {
            rows,
            cols,
            min_elev_deg: vals[0],
            max_elev_deg: vals[1],
            max_range: vals[2],
            origin: [vals[3], vals[4], vals[5]],
        };
        spec.validate()?;
        let mut payload = vec![0u8; spec.n_cells() * 13];
        r.read_exact(&mut payload).map_err(|e| bad(e.to_string()))?;
        let origin = spec.origin();
        let cells = payload
            .chunks_exact(13)
            .map(|c| {
                if c[0] == 0 {
                    return None;
                }
                let f = |k: usize| f32::from_le_bytes([c[k], c[k + 1], c[k + 2], c[k + 3]]) as f64;
                let point = Vec3::new(f(1), f(5), f(9));
                Some(Cell {
                    point,
                    range: (point - origin).norm(),
                    tag: 0,
                })
            })
            .collect();
        Ok(RangeImage { spec, cells })
    }

    /// Build directly from cells; used by tests and decoders.
    pub fn from_cells(spec: LidarSpec, cells: Vec<Option<Cell>>) -> Result<RangeImage> {
        if cells.len() != spec.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "{} cells for a {}x{} image",
                cells.len(),
                spec.rows,
                spec.cols
            )));
        }
        Ok(RangeImage { spec, cells })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> LidarSpec {
        LidarSpec::new(16, 64, -15.0, 15.0, 100.0).unwrap()
    }

    #[test]
    fn empty_cloud_projects_to_empty_image() {
        let img = RangeImage::project(&PointCloud::empty(), &spec());
        assert_eq!(img.occupied_count(), 0);
        assert!(img.backproject().is_empty());
    }

    #[test]
    fn mid_fov_point_lands_on_center_bin() {
        // Elevation exactly 0 is the edge between rows 7 and 8: the lower bin
        // wins. Azimuth 0 is the edge between columns 31 and 32.
        let s = spec();
        let cloud = PointCloud::new(vec![Vec3::new(10.0, 0.0, 0.0)]).unwrap();
        let img = RangeImage::project(&cloud, &s);
        assert_eq!(img.occupied_count(), 1);
        assert!(img.get(7, 31).is_some());
    }

    #[test]
    fn nearest_point_wins_a_cell() {
        let s = spec();
        let dir = s.ray_direction(3, 10);
        let cloud = PointCloud::new(vec![dir * 5.0, dir * 3.0]).unwrap();
        let img = RangeImage::project(&cloud, &s);
        let c = img.get(3, 10).unwrap();
        assert!((c.range - 3.0).abs() < 1e-12);
        assert_eq!(img.occupied_count(), 1);
    }

    #[test]
    fn out_of_fov_and_range_dropped() {
        let s = spec();
        let cloud = PointCloud::new(vec![
            Vec3::new(1.0, 0.0, 10.0),
            Vec3::new(200.0, 0.0, 0.0),
            Vec3::zeros(),
        ])
        .unwrap();
        assert_eq!(RangeImage::project(&cloud, &s).occupied_count(), 0);
    }

    #[test]
    fn azimuth_wrap_edge_goes_to_last_column() {
        let s = spec();
        assert_eq!(s.col_of_azimuth(-180.0), s.cols - 1);
        assert_eq!(s.col_of_azimuth(180.0), s.cols - 1);
        assert_eq!(s.row_of_elevation(s.min_elev_deg), Some(0));
        assert_eq!(s.row_of_elevation(s.max_elev_deg), Some(s.rows - 1));
    }

    #[test]
    fn merge_with_empty_instance_is_identity() {
        let s = spec();
        let scene = RangeImage::project_points(&[s.ray_direction(2, 2) * 4.0], &s, 0);
        let merged = RangeImage::merge(&scene, &RangeImage::empty(s)).unwrap();
        assert_eq!(merged, scene);
    }

    #[test]
    fn merge_keeps_nearer_instance_and_ties_go_to_instance() {
        let s = spec();
        let d = s.ray_direction(5, 5);
        let scene = RangeImage::project_points(&[d * 5.0], &s, 0);
        let inst = RangeImage::project_points(&[d * 3.0], &s, 1);
        let m = RangeImage::merge(&scene, &inst).unwrap();
        assert_eq!(m.get(5, 5).unwrap().tag, 1);

        let scene = RangeImage::project_points(&[d * 3.0], &s, 0);
        let m = RangeImage::merge(&scene, &inst).unwrap();
        assert_eq!(m.get(5, 5).unwrap().tag, 1);

        let scene = RangeImage::project_points(&[d * 2.0], &s, 0);
        let m = RangeImage::merge(&scene, &inst).unwrap();
        assert_eq!(m.get(5, 5).unwrap().tag, 0);
    }

    #[test]
    fn merge_rejects_mismatched_specs() {
        let a = RangeImage::empty(spec());
        let b = RangeImage::empty(LidarSpec::new(8, 64, -15.0, 15.0, 100.0).unwrap());
        let err = RangeImage::merge(&a, &b).unwrap_err();
        assert!(err.to_string().starts_with("spec-mismatch"));
    }

    #[test]
    fn occlusion_rate_cases() {
        let s = spec();
        let cells: Vec<Vec3> = (0..4).map(|j| s.ray_direction(4, j) * 10.0).collect();
        let inst = RangeImage::project_points(&cells, &s, 1);
        let merged = RangeImage::merge(&RangeImage::empty(s), &inst).unwrap();
        assert_eq!(RangeImage::occlusion_rate(&inst, &merged).unwrap(), 0.0);

        let blockers: Vec<Vec3> = (0..4).map(|j| s.ray_direction(4, j) * 2.0).collect();
        let wall = RangeImage::project_points(&blockers, &s, 0);
        let merged = RangeImage::merge(&wall, &inst).unwrap();
        assert_eq!(RangeImage::occlusion_rate(&inst, &merged).unwrap(), 1.0);

        let half = RangeImage::project_points(&blockers[..2], &s, 0);
        let merged = RangeImage::merge(&half, &inst).unwrap();
        assert_eq!(RangeImage::occlusion_rate(&inst, &merged).unwrap(), 0.5);

        let err = RangeImage::occlusion_rate(&RangeImage::empty(s), &merged).unwrap_err();
        assert!(err.to_string().starts_with("empty-instance"));
    }

    #[test]
    fn binary_layout() {
        let s = LidarSpec::new(2, 3, -10.0, 10.0, 50.0).unwrap();
        let img = RangeImage::project_points(&[s.ray_direction(1, 2) * 7.0], &s, 0);
        let mut buf = Vec::new();
        img.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 48 + 6 * 13);
        assert_eq!(&buf[0..4], &2u32.to_le_bytes());
        assert_eq!(&buf[4..8], &3u32.to_le_bytes());
        assert_eq!(&buf[8..16], &(-10.0f64).to_le_bytes());
        let cell5 = 56 + 5 * 13;
        assert_eq!(buf[cell5], 1);
        assert_eq!(buf[56], 0);
        let back = RangeImage::read_from(&buf[..]).unwrap();
        assert_eq!(back.occupied_count(), 1);
        let p = back.get(1, 2).unwrap().point;
        assert!((p - img.get(1, 2).unwrap().point).norm() < 1e-5);
    }
}
