//! Center-distance detection metrics.
//!
//! Detections are matched greedily by descending confidence to the nearest
//! unmatched ground truth whose 3D center is strictly closer than `D`.
//! Matches are pooled over all frames to build one PR curve per threshold,
//! integrated with 101-point interpolation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::geometry::{bev_center_distance, center_distance, BBox3D, Detection, DetectionRange};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub nms_radius: f64,
    /// Apply circle NMS inside [`evaluate`].
    pub apply_nms: bool,
    pub range: DetectionRange,
    /// Detections below this score are dropped before matching.
    pub score_floor: f64,
    /// Score cut for the thresholded precision/recall variant.
    pub operating_score: f64,
    pub interpolation_points: usize,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.25, 0.5, 1.0],
            nms_radius: 0.2,
            apply_nms: true,
            range: DetectionRange::default(),
            score_floor: 0.0,
            operating_score: 0.5,
            interpolation_points: 101,
            exec: Execution::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        if self.thresholds.is_empty()
            || self.thresholds.iter().any(|&t| !(t > 0.0))
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::invalid("eval config", "thresholds must be positive and ascending"));
        }
        if self.interpolation_points < 2 || self.nms_radius < 0.0 {
            return Err(Error::invalid("eval config", "bad interpolation or NMS radius"));
        }
        Ok(())
    }
}

/// Indices of detections kept by circle NMS, in processing order
/// (confidence descending, then input index).
pub fn circle_nms_indices(dets: &[Detection], radius: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| bev_center_distance(&dets[k].bbox, &dets[i].bbox) >= radius)
        {
            kept.push(i);
        }
    }
    kept
}

pub fn circle_nms(dets: &[Detection], radius: f64) -> Vec<Detection> {
    circle_nms_indices(dets, radius).into_iter().map(|i| dets[i]).collect()
}

/// TP flags for `dets` (assumed sorted by descending confidence).
pub fn match_frame(dets: &[Detection], gts: &[BBox3D], d: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|det| {
            let mut best: Option<(f64, usize)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let dist = center_distance(&det.bbox, gt);
                if dist < d && best.is_none_or(|(bd, _)| dist < bd) {
                    best = Some((dist, g));
                }
            }
            match best {
                Some((_, g)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApStatus {
    Ok,
    /// No ground truth and no detections.
    Empty,
}

/// One scored match decision, pooled across frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredFlag {
    pub confidence: f64,
    pub frame: usize,
    pub index: usize,
    pub tp: bool,
}

/// Interpolated average precision over `points` evenly spaced recall
/// levels. Sorting is by (confidence desc, frame, index).
pub fn average_precision(flags: &[ScoredFlag], n_gt: usize, points: usize) -> (f64, ApStatus) {
    if n_gt == 0 {
        return (0.0, if flags.is_empty() { ApStatus::Empty } else { ApStatus::Ok });
    }
    let mut sorted = flags.to_vec();
    sorted.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.frame.cmp(&b.frame))
            .then(a.index.cmp(&b.index))
    });
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(sorted.len());
    for (k, f) in sorted.iter().enumerate() {
        tp += f.tp as usize;
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // Precision envelope: max precision at recall ≥ r.
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for i in 0..points {
        let r = i as f64 / (points - 1) as f64;
        while j < curve.len() && curve[j].0 < r {
            j += 1;
        }
        if j < curve.len() {
            sum += curve[j].1;
        }
    }
    (sum / points as f64, ApStatus::Ok)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
}

impl OperatingPoint {
    fn of(tp: usize, n_det: usize, n_gt: usize) -> Self {
        Self {
            precision: if n_det == 0 { 0.0 } else { tp as f64 / n_det as f64 },
            recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
            tp,
            fp: n_det - tp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub distance: f64,
    pub ap: f64,
    pub status: ApStatus,
    /// All retained detections.
    pub all: OperatingPoint,
    /// Detections with score ≥ the operating score.
    pub thresholded: OperatingPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_threshold: Vec<ThresholdMetrics>,
    pub m_ap: f64,
    pub m_prec: f64,
    pub m_recall: f64,
    pub m_prec_thresholded: f64,
    pub m_recall_thresholded: f64,
    pub n_gt: usize,
    pub n_det: usize,
    pub n_frames: usize,
    pub interpolation: String,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// A frame's detections and ground truth, keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFrame {
    pub id: String,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<BBox3D>,
}

fn prepare(frame: &EvalFrame, cfg: &EvalConfig) -> (Vec<Detection>, Vec<BBox3D>) {
    let mut dets: Vec<Detection> = frame
        .detections
        .iter()
        .filter(|d| d.confidence >= cfg.score_floor && cfg.range.contains(&d.bbox.center()))
        .copied()
        .collect();
    if cfg.apply_nms {
        dets = circle_nms(&dets, cfg.nms_radius);
    } else {
        let mut idx: Vec<usize> = (0..dets.len()).collect();
        idx.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
        dets = idx.into_iter().map(|i| dets[i]).collect();
    }
    let gts = frame
        .ground_truth
        .iter()
        .filter(|g| cfg.range.contains(&g.center()))
        .copied()
        .collect();
    (dets, gts)
}

/// Evaluate frames; frames are pooled in ascending id order so the report
/// does not depend on input order. Duplicate ids are an error.
pub fn evaluate_frames(frames: &[EvalFrame], cfg: &EvalConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by(|&a, &b| frames[a].id.cmp(&frames[b].id));
    if let Some(w) = order.windows(2).find(|w| frames[w[0]].id == frames[w[1]].id) {
        return Err(Error::FrameMismatch(format!("duplicate frame id {}", frames[w[0]].id)));
    }
    let sorted: Vec<&EvalFrame> = order.iter().map(|&i| &frames[i]).collect();
    let prepared: Vec<(Vec<Detection>, Vec<BBox3D>)> = cfg.exec.map_slice(&sorted, |f| prepare(f, cfg));
    let n_gt: usize = prepared.iter().map(|p| p.1.len()).sum();
    let n_det: usize = prepared.iter().map(|p| p.0.len()).sum();

    let per_threshold = cfg
        .thresholds
        .iter()
        .map(|&d| {
            let per_frame: Vec<Vec<bool>> = cfg.exec.map_slice(&prepared, |(dets, gts)| match_frame(dets, gts, d));
            let mut flags = Vec::with_capacity(n_det);
            let (mut tp_hi, mut n_hi, mut tp_all) = (0, 0, 0);
            for (f, ((dets, _), tps)) in prepared.iter().zip(&per_frame).enumerate() {
                for (k, (det, &tp)) in dets.iter().zip(tps).enumerate() {
                    flags.push(ScoredFlag {
                        confidence: det.confidence,
                        frame: f,
                        index: k,
                        tp,
                    });
                    tp_all += tp as usize;
                    if det.confidence >= cfg.operating_score {
                        n_hi += 1;
                        tp_hi += tp as usize;
                    }
                }
            }
            let (ap, status) = average_precision(&flags, n_gt, cfg.interpolation_points);
            ThresholdMetrics {
                distance: d,
                ap,
                status,
                all: OperatingPoint::of(tp_all, n_det, n_gt),
                thresholded: OperatingPoint::of(tp_hi, n_hi, n_gt),
            }
        })
        .collect::<Vec<_>>();
    Ok(MetricsReport {
        m_ap: mean(per_threshold.iter().map(|t| t.ap)),
        m_prec: mean(per_threshold.iter().map(|t| t.all.precision)),
        m_recall: mean(per_threshold.iter().map(|t| t.all.recall)),
        m_prec_thresholded: mean(per_threshold.iter().map(|t| t.thresholded.precision)),
        m_recall_thresholded: mean(per_threshold.iter().map(|t| t.thresholded.recall)),
        per_threshold,
        n_gt,
        n_det,
        n_frames: frames.len(),
        interpolation: format!("{}-point", cfg.interpolation_points),
    })
}

/// Positional variant: `dets[i]` and `gts[i]` describe the same frame.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<BBox3D>], cfg: &EvalConfig) -> Result<MetricsReport> {
    if dets.len() != gts.len() {
        return Err(Error::FrameMismatch(format!(
            "{} detection frames vs {} ground-truth frames",
            dets.len(),
            gts.len()
        )));
    }
    let frames: Vec<EvalFrame> = dets
        .iter()
        .zip(gts)
        .enumerate()
        .map(|(i, (d, g))| EvalFrame {
            id: format!("{i:08}"),
            detections: d.clone(),
            ground_truth: g.clone(),
        })
        .collect();
    evaluate_frames(&frames, cfg)
}

/// Fixed-width table with columns
/// `AP(D)… Prec(D)… Recall(D)… mPrec mRecall mAP`, values in percent.
pub fn format_table(report: &MetricsReport) -> String {
    let mut head = String::new();
    let mut all = String::new();
    let mut hi = String::new();
    let col = |s: &mut String, v: &str| {
        let _ = write!(s, " {v:>12}");
    };
    col(&mut head, "");
    col(&mut all, "all");
    col(&mut hi, "score>=op");
    type Pick = fn(&ThresholdMetrics) -> (f64, f64);
    let groups: [(&str, Pick); 3] = [
        ("AP", |t| (t.ap, t.ap)),
        ("Prec", |t| (t.all.precision, t.thresholded.precision)),
        ("Recall", |t| (t.all.recall, t.thresholded.recall)),
    ];
    for (name, pick) in groups {
        for t in &report.per_threshold {
            col(&mut head, &format!("{name}({})", t.distance));
            let (a, b) = pick(t);
            col(&mut all, &format!("{:.2}", 100.0 * a));
            col(&mut hi, &format!("{:.2}", 100.0 * b));
        }
    }
    for (name, a, b) in [
        ("mPrec", report.m_prec, report.m_prec_thresholded),
        ("mRecall", report.m_recall, report.m_recall_thresholded),
        ("mAP", report.m_ap, report.m_ap),
    ] {
        col(&mut head, name);
        col(&mut all, &format!("{:.2}", 100.0 * a));
        col(&mut hi, &format!("{:.2}", 100.0 * b));
    }
    format!("{head}\n{all}\n{hi}\n")
}
