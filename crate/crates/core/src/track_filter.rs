//! Bi-directional tracking filter for pseudo-labels.
//!
//! Detections are tracked with a constant-velocity Kalman filter and greedy
//! center-distance association, once forward and once backward in time.
//! Tracklets that are too short or never move far enough are discarded;
//! the surviving detections of both passes are merged and same-frame
//! duplicates removed. The output is always a subset of the input.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::geometry::{bev_iou, center_distance, BBox3D, Detection, Vec3, MIN_BOX_DIM};

pub type StateVec = SVector<f64, 10>;
pub type StateCov = SMatrix<f64, 10, 10>;
type MeasVec = SVector<f64, 7>;
type MeasMat = SMatrix<f64, 7, 10>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub min_confidence: f64,
    pub min_length: usize,
    pub min_displacement: f64,
    /// Disable for moving-sensor data, where static objects also move.
    pub check_displacement: bool,
    pub gate: f64,
    pub merge_iou: f64,
    pub merge_distance: f64,
    /// Process noise for center, dims and yaw.
    pub q_pose: f64,
    pub q_velocity: f64,
    pub r_measurement: f64,
    pub p0_pose: f64,
    pub p0_velocity: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_confidence: 0.5,
            min_length: 3,
            min_displacement: 2.0,
            check_displacement: true,
            gate: 2.0,
            merge_iou: 0.3,
            merge_distance: 0.3,
            q_pose: 0.1,
            q_velocity: 1.0,
            r_measurement: 0.05,
            p0_pose: 10.0,
            p0_velocity: 1000.0,
        }
    }
}

/// Wrap into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// State `[x, y, z, l, w, h, yaw, vx, vy, vz]` and its covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub x: StateVec,
    pub p: StateCov,
}

fn measurement_of(b: &BBox3D) -> MeasVec {
    MeasVec::from_column_slice(&b.to_array())
}

fn observation() -> MeasMat {
    let mut h = MeasMat::zeros();
    for i in 0..7 {
        h[(i, i)] = 1.0;
    }
    h
}

pub fn transition(dt: f64) -> StateCov {
    let mut f = StateCov::identity();
    for i in 0..3 {
        f[(i, 7 + i)] = dt;
    }
    f
}

impl TrackState {
    pub fn from_box(b: &BBox3D, cfg: &FilterConfig) -> Self {
        let mut x = StateVec::zeros();
        x.fixed_rows_mut::<7>(0).copy_from(&measurement_of(b));
        let mut p = StateCov::zeros();
        for i in 0..10 {
            p[(i, i)] = if i < 7 { cfg.p0_pose } else { cfg.p0_velocity };
        }
        Self { x, p }
    }

    pub fn velocity(&self) -> Vec3 {
        Vec3::new(self.x[7], self.x[8], self.x[9])
    }

    /// Box view of the state; dims are floored at a tiny positive value.
    pub fn bbox(&self) -> BBox3D {
        let x = &self.x;
        let dims = Vec3::new(x[3], x[4], x[5]).map(|d| d.max(MIN_BOX_DIM));
        BBox3D::new(Vec3::new(x[0], x[1], x[2]), dims, x[6]).expect("finite state")
    }

    fn process_noise(cfg: &FilterConfig) -> StateCov {
        let mut q = StateCov::zeros();
        for i in 0..10 {
            q[(i, i)] = if i < 7 { cfg.q_pose } else { cfg.q_velocity };
        }
        q
    }

    /// Constant-velocity propagation over `dt` frames.
    pub fn predict(&self, dt: f64, cfg: &FilterConfig) -> TrackState {
        let f = transition(dt);
        let p = f * self.p * f.transpose() + Self::process_noise(cfg);
        TrackState {
            x: f * self.x,
            p: (p + p.transpose()) * 0.5,
        }
    }

    /// Joseph-form measurement update with the box `(center, dims, yaw)`.
    pub fn update(&self, b: &BBox3D, cfg: &FilterConfig) -> TrackState {
        let h = observation();
        let r = SMatrix::<f64, 7, 7>::identity() * cfg.r_measurement;
        let mut innov = measurement_of(b) - h * self.x;
        innov[6] = wrap_angle(innov[6]);
        let s = h * self.p * h.transpose() + r;
        let s_inv = s.try_inverse().expect("innovation covariance is positive definite");
        let k = self.p * h.transpose() * s_inv;
        let mut x = self.x + k * innov;
        x[6] = wrap_angle(x[6]);
        let ikh = StateCov::identity() - k * h;
        let p = ikh * self.p * ikh.transpose() + k * r * k.transpose();
        TrackState {
            x,
            p: (p + p.transpose()) * 0.5,
        }
    }
}

/// Predicted box and propagated state.
pub fn predict(state: &TrackState, dt: f64, cfg: &FilterConfig) -> (BBox3D, TrackState) {
    let next = state.predict(dt, cfg);
    (next.bbox(), next)
}

pub fn update(state: &TrackState, det: &Detection, cfg: &FilterConfig) -> TrackState {
    state.update(&det.bbox, cfg)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Association {
    /// `(prediction index, detection index)`.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Greedy assignment over in-gate pairs by ascending center distance, ties
/// by prediction then detection index.
pub fn associate(predictions: &[BBox3D], detections: &[Detection], gate: f64) -> Association {
    let mut pairs = Vec::new();
    for (i, p) in predictions.iter().enumerate() {
        for (j, d) in detections.iter().enumerate() {
            let dist = center_distance(p, &d.bbox);
            if dist <= gate {
                pairs.push((dist, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; predictions.len()];
    let mut used_d = vec![false; detections.len()];
    let mut matches = Vec::new();
    for (_, i, j) in pairs {
        if !used_p[i] && !used_d[j] {
            used_p[i] = true;
            used_d[j] = true;
            matches.push((i, j));
        }
    }
    Association {
        matches,
        unmatched_predictions: (0..predictions.len()).filter(|&i| !used_p[i]).collect(),
        unmatched_detections: (0..detections.len()).filter(|&j| !used_d[j]).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Alive,
    Closed,
}

/// A detection's identity: position of its frame in the input and its
/// index within that frame's list.
pub type DetKey = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct TrackEntry {
    pub key: DetKey,
    pub detection: Detection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    /// Ordered by ascending frame position, whatever the direction.
    pub entries: Vec<TrackEntry>,
    pub state: TrackState,
    pub status: TrackStatus,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest distance between any two centers along the tracklet.
    pub fn displacement(&self) -> f64 {
        let mut best = 0.0f64;
        for (a, ea) in self.entries.iter().enumerate() {
            for eb in &self.entries[a + 1..] {
                best = best.max(center_distance(&ea.detection.bbox, &eb.detection.bbox));
            }
        }
        best
    }

    pub fn keep(&self, cfg: &FilterConfig) -> bool {
        self.len() >= cfg.min_length && (!cfg.check_displacement || self.displacement() >= cfg.min_displacement)
    }
}

/// Track one direction. `frames[t]` holds frame `t`'s detections;
/// detections below `min_confidence` never enter tracking, and a track
/// that misses a single frame is closed.
pub fn track_direction(frames: &[Vec<Detection>], direction: Direction, cfg: &FilterConfig) -> Vec<Tracklet> {
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..frames.len()).collect(),
        Direction::Backward => (0..frames.len()).rev().collect(),
    };
    let mut alive: Vec<Tracklet> = Vec::new();
    let mut done: Vec<Tracklet> = Vec::new();
    for t in order {
        let kept: Vec<(usize, Detection)> = frames[t]
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, d)| d.confidence >= cfg.min_confidence)
            .collect();
        let dets: Vec<Detection> = kept.iter().map(|(_, d)| *d).collect();
        let predicted: Vec<TrackState> = alive.iter().map(|tr| tr.state.predict(1.0, cfg)).collect();
        let boxes: Vec<BBox3D> = predicted.iter().map(TrackState::bbox).collect();
        let assoc = associate(&boxes, &dets, cfg.gate);

        let mut next_alive = Vec::with_capacity(alive.len());
        let mut matched_of = vec![None; alive.len()];
        for &(i, j) in &assoc.matches {
            matched_of[i] = Some(j);
        }
        for (i, (mut tr, pred)) in alive.drain(..).zip(predicted).enumerate() {
            match matched_of[i] {
                Some(j) => {
                    tr.state = pred.update(&dets[j].bbox, cfg);
                    tr.entries.push(TrackEntry {
                        key: (t, kept[j].0),
                        detection: dets[j],
                    });
                    next_alive.push(tr);
                }
                None => {
                    tr.status = TrackStatus::Closed;
                    done.push(tr);
                }
            }
        }
        for &j in &assoc.unmatched_detections {
            next_alive.push(Tracklet {
                entries: vec![TrackEntry {
                    key: (t, kept[j].0),
                    detection: dets[j],
                }],
                state: TrackState::from_box(&dets[j].bbox, cfg),
                status: TrackStatus::Alive,
            });
        }
        alive = next_alive;
    }
    for mut tr in alive {
        tr.status = TrackStatus::Closed;
        done.push(tr);
    }
    for tr in &mut done {
        if direction == Direction::Backward {
            tr.entries.reverse();
        }
    }
    done.sort_by_key(|tr| tr.entries[0].key);
    done
}

/// Keys of detections belonging to kept tracklets of one direction.
pub fn surviving_keys(tracklets: &[Tracklet], cfg: &FilterConfig) -> BTreeSet<DetKey> {
    tracklets
        .iter()
        .filter(|t| t.keep(cfg))
        .flat_map(|t| t.entries.iter().map(|e| e.key))
        .collect()
}

fn duplicates(a: &BBox3D, b: &BBox3D, cfg: &FilterConfig) -> bool {
    bev_iou(a, b) > cfg.merge_iou || center_distance(a, b) < cfg.merge_distance
}

/// Indices of the retained detections per frame, ascending.
pub fn filter_indices(frames: &[Vec<Detection>], cfg: &FilterConfig) -> Vec<Vec<usize>> {
    let fwd = track_direction(frames, Direction::Forward, cfg);
    let bwd = track_direction(frames, Direction::Backward, cfg);
    let mut keys = surviving_keys(&fwd, cfg);
    keys.extend(surviving_keys(&bwd, cfg));

    let mut per_frame: Vec<Vec<usize>> = vec![Vec::new(); frames.len()];
    for (t, j) in keys {
        per_frame[t].push(j);
    }
    for (t, idx) in per_frame.iter_mut().enumerate() {
        let dets = &frames[t];
        idx.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
        let mut kept: Vec<usize> = Vec::with_capacity(idx.len());
        for &j in idx.iter() {
            if !kept.iter().any(|&k| duplicates(&dets[k].bbox, &dets[j].bbox, cfg)) {
                kept.push(j);
            }
        }
        kept.sort_unstable();
        *idx = kept;
    }
    per_frame
}

/// Per-frame retained detections, in input order.
pub fn filter_labels(frames: &[Vec<Detection>], cfg: &FilterConfig) -> Vec<Vec<Detection>> {
    filter_indices(frames, cfg)
        .into_iter()
        .enumerate()
        .map(|(t, idx)| idx.into_iter().map(|j| frames[t][j]).collect())
        .collect()
}
