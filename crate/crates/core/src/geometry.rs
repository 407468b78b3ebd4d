//! Shared geometric primitives: point sets, oriented boxes, rigid transforms,
//! box fitting and the two box-similarity measures (BEV IoU and 3D center
//! distance) used by insertion, tracking and evaluation.
//!
//! All arithmetic is double precision; file formats may narrow to `f32`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

/// Origin of a point: the real scan, or a synthetic instance (1-based id
/// within its frame).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Scene,
    Synthetic(u32),
}

impl Source {
    /// Numeric tag used in range-image cells and packed clouds: 0 for scene
    /// points, the instance id otherwise.
    pub fn tag(self) -> u32 {
        match self {
            Source::Scene => 0,
            Source::Synthetic(id) => id,
        }
    }

    pub fn from_tag(tag: u32) -> Self {
        if tag == 0 {
            Source::Scene
        } else {
            Source::Synthetic(tag)
        }
    }

    pub fn is_synthetic(self) -> bool {
        matches!(self, Source::Synthetic(_))
    }
}

/// Unordered 3D points in the sensor frame, with optional per-point
/// attributes. Attributes, when present, cover every point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    channel: Option<Vec<u16>>,
    source: Option<Vec<Source>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !is_finite(p)) {
            return Err(Error::invalid(
                "point cloud",
                format!("point {i} has a non-finite coordinate"),
            ));
        }
        Ok(Self {
            points,
            channel: None,
            source: None,
        })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Cloud whose every point carries the same source tag.
    pub fn with_uniform_source(points: Vec<Vec3>, source: Source) -> Result<Self> {
        let n = points.len();
        Self::new(points)?.with_sources(vec![source; n])
    }

    pub fn with_sources(mut self, source: Vec<Source>) -> Result<Self> {
        if source.len() != self.points.len() {
            return Err(Error::invalid(
                "point cloud",
                format!(
                    "{} source tags for {} points",
                    source.len(),
                    self.points.len()
                ),
            ));
        }
        self.source = Some(source);
        Ok(self)
    }

    pub fn with_channels(mut self, channel: Vec<u16>) -> Result<Self> {
        if channel.len() != self.points.len() {
            return Err(Error::invalid(
                "point cloud",
                format!(
                    "{} channel indices for {} points",
                    channel.len(),
                    self.points.len()
                ),
            ));
        }
        self.channel = Some(channel);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn sources(&self) -> Option<&[Source]> {
        self.source.as_deref()
    }

    pub fn channels(&self) -> Option<&[u16]> {
        self.channel.as_deref()
    }

    /// Source of point `i`; untagged clouds count as scene data.
    pub fn source_of(&self, i: usize) -> Source {
        self.source.as_ref().map_or(Source::Scene, |s| s[i])
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    /// Apply a rigid transform to every point, keeping attributes.
    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            channel: self.channel.clone(),
            source: self.source.clone(),
        }
    }
}

impl AsRef<[Vec3]> for PointCloud {
    fn as_ref(&self) -> &[Vec3] {
        &self.points
    }
}

fn is_finite(p: &Vec3) -> bool {
    p.iter().all(|c| c.is_finite())
}

/// Wrap an angle into `[-π, π)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    if (-PI..PI).contains(&yaw) {
        return yaw;
    }
    let mut a = (yaw + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2π for tiny negative inputs.
    if a >= PI {
        a -= 2.0 * PI;
    }
    a
}

/// Oriented 3D box: center, `(l, w, h)` extents along the box's local x, y
/// and z axes, and yaw about +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 7]", into = "[f64; 7]")]
pub struct BBox3D {
    center: Vec3,
    dims: Vec3,
    yaw: f64,
}

impl BBox3D {
    pub fn new(center: Vec3, dims: Vec3, yaw: f64) -> Result<Self> {
        if !is_finite(&center) || !is_finite(&dims) || !yaw.is_finite() {
            return Err(Error::invalid("box", "non-finite parameter"));
        }
        if dims.iter().any(|&d| d <= 0.0) {
            return Err(Error::invalid(
                "box",
                format!("dims must be positive, got {:?}", dims.as_slice()),
            ));
        }
        Ok(Self {
            center,
            dims,
            yaw: normalize_yaw(yaw),
        })
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn dims(&self) -> Vec3 {
        self.dims
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    /// `[cx, cy, cz, l, w, h, yaw]`.
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.center.x,
            self.center.y,
            self.center.z,
            self.dims.x,
            self.dims.y,
            self.dims.z,
            self.yaw,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Result<Self> {
        Self::new(Vec3::new(a[0], a[1], a[2]), Vec3::new(a[3], a[4], a[5]), a[6])
    }

    pub fn bev_center(&self) -> Vec2 {
        Vec2::new(self.center.x, self.center.y)
    }

    /// Footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [Vec2; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.dims.x / 2.0;
        let hw = self.dims.y / 2.0;
        let local = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
        local.map(|(lx, ly)| {
            Vec2::new(
                self.center.x + c * lx - s * ly,
                self.center.y + s * lx + c * ly,
            )
        })
    }

    pub fn bev_area(&self) -> f64 {
        self.dims.x * self.dims.y
    }

    /// Express a world point in the box frame (origin at the center, axes
    /// along l, w, h).
    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let d = p - self.center;
        Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= self.dims.x / 2.0 + tol
            && l.y.abs() <= self.dims.y / 2.0 + tol
            && l.z.abs() <= self.dims.z / 2.0 + tol
    }

    /// BEV containment of an `(x, y)` location.
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.center.x;
        let dy = y - self.center.y;
        (c * dx + s * dy).abs() <= self.dims.x / 2.0 && (-s * dx + c * dy).abs() <= self.dims.y / 2.0
    }

    /// The 8 box corners.
    pub fn corners(&self) -> [Vec3; 8] {
        let bev = self.bev_corners();
        let hz = self.dims.z / 2.0;
        let mut out = [Vec3::zeros(); 8];
        for (k, c) in bev.iter().enumerate() {
            out[k] = Vec3::new(c.x, c.y, self.center.z - hz);
            out[k + 4] = Vec3::new(c.x, c.y, self.center.z + hz);
        }
        out
    }

    /// Same footprint orientation and center, BEV extents grown to at least
    /// `min_l` by `min_w`.
    pub fn with_min_bev_extent(&self, min_l: f64, min_w: f64) -> BBox3D {
        BBox3D {
            center: self.center,
            dims: Vec3::new(self.dims.x.max(min_l), self.dims.y.max(min_w), self.dims.z),
            yaw: self.yaw,
        }
    }
}

impl TryFrom<[f64; 7]> for BBox3D {
    type Error = Error;
    fn try_from(a: [f64; 7]) -> Result<Self> {
        Self::from_array(a)
    }
}

impl From<BBox3D> for [f64; 7] {
    fn from(b: BBox3D) -> Self {
        b.to_array()
    }
}

/// Axis-aligned crop volume, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRange {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
}

impl DetectionRange {
    /// 25.6 m × 51.2 m × [−2.5, 7.5] m, centered on the sensor in x and y.
    pub fn hucenlife() -> Self {
        Self {
            x: [-12.8, 12.8],
            y: [-25.6, 25.6],
            z: [-2.5, 7.5],
        }
    }

    /// 30.72 m forward × 40.96 m × [−4, 1] m.
    pub fn stcrowd() -> Self {
        Self {
            x: [0.0, 30.72],
            y: [-20.48, 20.48],
            z: [-4.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x, self.y, self.z]
            .iter()
            .all(|[lo, hi]| lo.is_finite() && hi.is_finite() && lo < hi);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("detection range", format!("{self:?}")))
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (self.x[0]..=self.x[1]).contains(&p.x)
            && (self.y[0]..=self.y[1]).contains(&p.y)
            && (self.z[0]..=self.z[1]).contains(&p.z)
    }
}

impl Default for DetectionRange {
    fn default() -> Self {
        Self::hucenlife()
    }
}

/// A scored box observed in a given frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub frame: usize,
    pub bbox: BBox3D,
    pub confidence: f64,
}

impl Detection {
    pub fn new(frame: usize, bbox: BBox3D, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::invalid(
                "detection",
                format!("confidence {confidence} outside [0, 1]"),
            ));
        }
        Ok(Self {
            frame,
            bbox,
            confidence,
        })
    }
}

/// A proper rigid motion `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl RigidTransform {
    const ORTHO_TOL: f64 = 1e-9;

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.abs().max() > Self::ORTHO_TOL || (rotation.determinant() - 1.0).abs() > Self::ORTHO_TOL
        {
            return Err(Error::invalid(
                "transform",
                "rotation is not orthonormal with determinant +1",
            ));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self::from_translation(Vec3::zeros())
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about +z by `yaw`, then translation.
    pub fn from_yaw_translation(yaw: f64, translation: Vec3) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn is_pure_translation(&self) -> bool {
        self.rotation == Matrix3::identity()
    }
}

/// Smallest extent assigned to a degenerate axis (e.g. all points coplanar).
pub const MIN_BOX_DIM: f64 = 1e-6;

/// Minimal box at the given yaw enclosing all points.
pub fn fit_bbox(points: impl AsRef<[Vec3]>, yaw: f64) -> Result<BBox3D> {
    let points = points.as_ref();
    if points.is_empty() {
        return Err(Error::EmptyInstance("cannot fit a box to zero points"));
    }
    let yaw = normalize_yaw(yaw);
    let (s, c) = yaw.sin_cos();
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        let local = Vec3::new(c * p.x + s * p.y, -s * p.x + c * p.y, p.z);
        lo = lo.inf(&local);
        hi = hi.sup(&local);
    }
    let mid = (lo + hi) / 2.0;
    let dims = (hi - lo).map(|d| d.max(MIN_BOX_DIM));
    let center = Vec3::new(c * mid.x - s * mid.y, s * mid.x + c * mid.y, mid.z);
    BBox3D::new(center, dims, yaw)
}

pub fn center_distance(a: &BBox3D, b: &BBox3D) -> f64 {
    (a.center - b.center).norm()
}

pub fn bev_center_distance(a: &BBox3D, b: &BBox3D) -> f64 {
    (a.bev_center() - b.bev_center()).norm()
}

/// Intersection over union of the two BEV footprints, by exact convex
/// polygon clipping.
pub fn bev_iou(a: &BBox3D, b: &BBox3D) -> f64 {
    if a.center.xy() == b.center.xy() && a.dims.xy() == b.dims.xy() && a.yaw == b.yaw {
        return 1.0;
    }
    let ra = a.dims.xy().norm() / 2.0;
    let rb = b.dims.xy().norm() / 2.0;
    if bev_center_distance(a, b) >= ra + rb {
        return 0.0;
    }
    let inter = convex_intersection_area(&a.bev_corners(), &b.bev_corners());
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

fn cross2(o: &Vec2, a: &Vec2, b: &Vec2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Area of the intersection of two counter-clockwise convex polygons
/// (Sutherland–Hodgman clipping of `subject` by each edge of `clip`).
pub fn convex_intersection_area(subject: &[Vec2], clip: &[Vec2]) -> f64 {
    let mut poly: Vec<Vec2> = subject.to_vec();
    for k in 0..clip.len() {
        if poly.is_empty() {
            break;
        }
        let e0 = clip[k];
        let e1 = clip[(k + 1) % clip.len()];
        let input = std::mem::take(&mut poly);
        for i in 0..input.len() {
            let cur = input[i];
            let prev = input[(i + input.len() - 1) % input.len()];
            let cur_in = cross2(&e0, &e1, &cur) >= 0.0;
            let prev_in = cross2(&e0, &e1, &prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    poly.push(segment_line_intersection(&prev, &cur, &e0, &e1));
                }
                poly.push(cur);
            } else if prev_in {
                poly.push(segment_line_intersection(&prev, &cur, &e0, &e1));
            }
        }
    }
    polygon_area(&poly).abs()
}

fn segment_line_intersection(p: &Vec2, q: &Vec2, a: &Vec2, b: &Vec2) -> Vec2 {
    let dp = cross2(a, b, p);
    let dq = cross2(a, b, q);
    let t = dp / (dp - dq);
    p + (q - p) * t
}

pub fn polygon_area(poly: &[Vec2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a.x * b.y - a.y * b.x;
    }
    acc / 2.0
}

/// Translation that moves the asset's lowest point onto `ground_point`.
///
/// Ties on the minimum z resolve to the lowest point index.
pub fn place_on_ground(asset_points: impl AsRef<[Vec3]>, ground_point: Vec3) -> Result<RigidTransform> {
    let points = asset_points.as_ref();
    let lowest = points
        .iter()
        .copied()
        .reduce(|best, p| if p.z < best.z { p } else { best })
        .ok_or(Error::EmptyInstance("cannot place an empty asset"))?;
    Ok(RigidTransform::from_translation(ground_point - lowest))
}
