//! Loss kernels with analytic gradients: the masked center-heatmap focal
//! loss, the squared-ℓ2 box loss, their sum, and the feature alignment
//! block that pulls synthetic and real human features together while
//! keeping their norms near one.
//!
//! All reductions go through [`chunked_sum`], so values are bit-stable
//! regardless of thread count.

use serde::{Deserialize, Serialize};

use crate::exec::{chunked_sum, Execution};
use crate::supervision::{BevGrid, HeatmapGrid, Mask};
use crate::geometry::BBox3D;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub delta_var: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta1: 2.0,
            beta2: 4.0,
            epsilon: 1e-12,
            beta3: 1.0,
            beta4: 1.0,
            delta_var: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta1 >= 0.0
            && self.beta2 >= 0.0
            && self.epsilon > 0.0
            && self.beta3 >= 0.0
            && self.beta4 >= 0.0
            && self.delta_var >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("loss config", "exponents and weights must be non-negative, epsilon positive"))
        }
    }
}

/// Gradient with respect to one named input, row-major with `shape`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedGrad {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossResult {
    pub value: f64,
    pub gradients: Vec<NamedGrad>,
}

impl LossResult {
    pub fn gradient(&self, name: &str) -> Option<&NamedGrad> {
        self.gradients.iter().find(|g| g.name == name)
    }
}

/// `x^b` and its derivative, with `0^0 = 1` and `d/dx x^0 = 0`.
fn pow_and_deriv(x: f64, b: f64) -> (f64, f64) {
    if b == 0.0 {
        (1.0, 0.0)
    } else {
        (x.powf(b), b * x.powf(b - 1.0))
    }
}

/// Heatmap loss on raw row-major buffers of `shape = [rows, cols]`.
///
/// Per cell: 0 where the mask is off; `-(1-x)^β1 ln(x+ε)` where the target
/// is exactly 1; `-x^β1 (1-y)^β2 ln(1-x+ε)` otherwise. Summed, not averaged.
pub fn heatmap_loss_raw(x: &[f64], y: &[f64], mask: &[bool], shape: [usize; 2], cfg: &LossConfig) -> Result<LossResult> {
    let n = shape[0] * shape[1];
    if x.len() != n || y.len() != n || mask.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "heatmap inputs have {}, {}, {} cells, expected {n}",
            x.len(),
            y.len(),
            mask.len()
        )));
    }
    if x.iter().chain(y).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("heatmap loss", "predictions and targets must lie in [0, 1]"));
    }
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut terms = vec![0.0; n];
    let mut grad = vec![0.0; n];
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let xi = x[i];
        if y[i] == 1.0 {
            let (p, dp) = pow_and_deriv(1.0 - xi, b1);
            let l = (xi + eps).ln();
            terms[i] = -p * l;
            grad[i] = dp * l - p / (xi + eps);
        } else {
            let (p, dp) = pow_and_deriv(xi, b1);
            let (q, _) = pow_and_deriv(1.0 - y[i], b2);
            let l = (1.0 - xi + eps).ln();
            terms[i] = -p * q * l;
            grad[i] = -dp * q * l + p * q / (1.0 - xi + eps);
        }
    }
    Ok(LossResult {
        value: chunked_sum(Execution::default(), &terms),
        gradients: vec![NamedGrad {
            name: "x".into(),
            shape: shape.to_vec(),
            values: grad,
        }],
    })
}

/// Masked focal heatmap loss of prediction `x` against target `y`.
pub fn heatmap_loss(x: &HeatmapGrid, y: &HeatmapGrid, mask: &Mask, cfg: &LossConfig) -> Result<LossResult> {
    if x.grid() != y.grid() || x.grid() != mask.grid() {
        return Err(Error::ShapeMismatch("heatmap, target and mask grids differ".into()));
    }
    let g: &BevGrid = x.grid();
    heatmap_loss_raw(x.values(), y.values(), mask.bits(), [g.rows(), g.cols()], cfg)
}

fn uniform_dim(vs: &[Vec<f64>], what: &str) -> Result<usize> {
    let d = vs.first().map_or(0, Vec::len);
    if vs.iter().any(|v| v.len() != d) {
        return Err(Error::ShapeMismatch(format!("{what} vectors have mixed lengths")));
    }
    Ok(d)
}

/// Mean over matched pairs of the squared ℓ2 distance between parameter
/// vectors. Gradient w.r.t. `pred` is `2 (pred - gt) / count`.
pub fn bbox_loss(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<LossResult> {
    if pred.len() != gt.len() {
        return Err(Error::CardinalityMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let d = uniform_dim(pred, "prediction")?;
    if uniform_dim(gt, "target")? != d && !gt.is_empty() {
        return Err(Error::ShapeMismatch("prediction and target parameter lengths differ".into()));
    }
    let count = pred.len();
    let mut terms = Vec::with_capacity(count * d);
    let mut grad = Vec::with_capacity(count * d);
    for (p, g) in pred.iter().zip(gt) {
        for (a, b) in p.iter().zip(g) {
            let diff = a - b;
            terms.push(diff * diff);
            grad.push(2.0 * diff / count as f64);
        }
    }
    let value = if count == 0 {
        0.0
    } else {
        chunked_sum(Execution::default(), &terms) / count as f64
    };
    Ok(LossResult {
        value,
        gradients: vec![NamedGrad {
            name: "pred".into(),
            shape: vec![count, d],
            values: grad,
        }],
    })
}

/// Convenience wrapper over box arrays `[cx, cy, cz, l, w, h, yaw]`.
pub fn bbox_loss_boxes(pred: &[BBox3D], gt: &[BBox3D]) -> Result<LossResult> {
    let p: Vec<Vec<f64>> = pred.iter().map(|b| b.to_array().to_vec()).collect();
    let g: Vec<Vec<f64>> = gt.iter().map(|b| b.to_array().to_vec()).collect();
    bbox_loss(&p, &g)
}

/// Detector loss: heatmap term plus box term, gradients passed through.
pub fn total_loss(hm: &LossResult, bbox: &LossResult) -> LossResult {
    LossResult {
        value: hm.value + bbox.value,
        gradients: hm.gradients.iter().chain(&bbox.gradients).cloned().collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    Synthetic,
    Real,
}

impl FeatureRole {
    fn name(self) -> &'static str {
        match self {
            FeatureRole::Synthetic => "synthetic",
            FeatureRole::Real => "real",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBatch {
    pub role: FeatureRole,
    features: Vec<Vec<f64>>,
}

impl FeatureBatch {
    pub fn new(role: FeatureRole, features: Vec<Vec<f64>>) -> Result<Self> {
        uniform_dim(&features, role.name())?;
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature batch", "non-finite component"));
        }
        Ok(Self { role, features })
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    fn mean(&self) -> Vec<f64> {
        let d = self.dim();
        let n = self.len() as f64;
        (0..d)
            .map(|k| {
                let col: Vec<f64> = self.features.iter().map(|f| f[k]).collect();
                chunked_sum(Execution::default(), &col) / n
            })
            .collect()
    }
}

/// Alignment losses; `result.value` is the weighted combination and its
/// gradients are named `"F_s"` and `"F_r"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignLoss {
    pub s2r: f64,
    pub norm: f64,
    pub result: LossResult,
}

/// `ReLU(|1 - ‖f‖| - Δ)²` averaged over the batch, plus its gradient
/// scaled by `weight`. At `‖f‖ = 0` the subgradient 0 is used.
fn norm_penalty(batch: &FeatureBatch, delta: f64, weight: f64) -> (f64, Vec<f64>) {
    let n = batch.len() as f64;
    let d = batch.dim();
    let mut terms = Vec::with_capacity(batch.len());
    let mut grad = Vec::with_capacity(batch.len() * d);
    for f in batch.features() {
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u = (1.0 - norm).abs() - delta;
        if u > 0.0 {
            terms.push(u * u);
            let scale = if norm > 0.0 {
                weight * 2.0 * u * (norm - 1.0).signum() / (norm * n)
            } else {
                0.0
            };
            grad.extend(f.iter().map(|v| scale * v));
        } else {
            terms.push(0.0);
            grad.extend(std::iter::repeat_n(0.0, d));
        }
    }
    (chunked_sum(Execution::default(), &terms) / n, grad)
}

pub fn align_loss(fs: &FeatureBatch, fr: &FeatureBatch, cfg: &LossConfig) -> Result<AlignLoss> {
    if fs.is_empty() {
        return Err(Error::EmptyBatch("synthetic"));
    }
    if fr.is_empty() {
        return Err(Error::EmptyBatch("real"));
    }
    if fs.dim() != fr.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature dimensions {} and {} differ",
            fs.dim(),
            fr.dim()
        )));
    }
    let d = fs.dim();
    let diff: Vec<f64> = fs.mean().iter().zip(fr.mean()).map(|(a, b)| a - b).collect();
    let sq: Vec<f64> = diff.iter().map(|v| v * v).collect();
    let s2r = chunked_sum(Execution::default(), &sq);

    let (ns, mut gs) = norm_penalty(fs, cfg.delta_var, cfg.beta4);
    let (nr, mut gr) = norm_penalty(fr, cfg.delta_var, cfg.beta4);
    let norm = ns + nr;

    let (cs, cr) = (
        cfg.beta3 * 2.0 / fs.len() as f64,
        cfg.beta3 * 2.0 / fr.len() as f64,
    );
    for (i, g) in gs.iter_mut().enumerate() {
        *g += cs * diff[i % d];
    }
    for (i, g) in gr.iter_mut().enumerate() {
        *g -= cr * diff[i % d];
    }
    Ok(AlignLoss {
        s2r,
        norm,
        result: LossResult {
            value: cfg.beta3 * s2r + cfg.beta4 * norm,
            gradients: vec![
                NamedGrad {
                    name: "F_s".into(),
                    shape: vec![fs.len(), d],
                    values: gs,
                },
                NamedGrad {
                    name: "F_r".into(),
                    shape: vec![fr.len(), d],
                    values: gr,
                },
            ],
        },
    })
}

/// Sample a channel-major `[channels, rows, cols]` BEV feature map at the
/// cell holding each box center. Boxes whose center falls outside the grid
/// are skipped.
///
/// This is one convention for gathering per-instance features; callers
/// with their own pooling can build a [`FeatureBatch`] directly.
pub fn gather_at_centers(map: &[f64], channels: usize, grid: &BevGrid, boxes: &[BBox3D], role: FeatureRole) -> Result<FeatureBatch> {
    let hw = grid.n_cells();
    if map.len() != channels * hw {
        return Err(Error::ShapeMismatch(format!(
            "feature map has {} values, expected {channels}x{}x{}",
            map.len(),
            grid.rows(),
            grid.cols()
        )));
    }
    let features = boxes
        .iter()
        .filter_map(|b| grid.cell_of(b.center().x, b.center().y))
        .map(|(r, c)| {
            let i = grid.index(r, c);
            (0..channels).map(|k| map[k * hw + i]).collect()
        })
        .collect();
    FeatureBatch::new(role, features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn batch(role: FeatureRole, v: Vec<Vec<f64>>) -> FeatureBatch {
        FeatureBatch::new(role, v).unwrap()
    }

    #[test]
    fn defaults() {
        let c = LossConfig::default();
        assert_eq!((c.beta1, c.beta2, c.epsilon, c.beta3, c.beta4, c.delta_var), (2.0, 4.0, 1e-12, 1.0, 1.0, 0.1));
    }

    #[test]
    fn masked_out_is_zero() {
        let r = heatmap_loss_raw(&[0.3, 0.9], &[1.0, 0.2], &[false, false], [1, 2], &LossConfig::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.gradients[0].values.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn positive_cell_hand_value() {
        let cfg = LossConfig::default();
        let e = 1e-3;
        let r = heatmap_loss_raw(&[1.0 - e], &[1.0], &[true], [1, 1], &cfg).unwrap();
        let expected = -(e * e) * (1.0 - e + cfg.epsilon).ln();
        assert!((r.value - expected).abs() <= 1e-18);
    }

    #[test]
    fn heatmap_shape_errors() {
        let cfg = LossConfig::default();
        assert!(matches!(
            heatmap_loss_raw(&[0.5], &[0.5, 0.5], &[true], [1, 1], &cfg),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn box_loss_cases() {
        let z = bbox_loss(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]).unwrap();
        assert_eq!(z.value, 0.0);
        let u = bbox_loss(&[vec![1.0, 0.0, 0.0]], &[vec![0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(u.value, 1.0);
        assert_eq!(u.gradients[0].values, vec![2.0, 0.0, 0.0]);
        assert!(matches!(
            bbox_loss(&[vec![1.0]], &[]),
            Err(Error::CardinalityMismatch { pred: 1, gt: 0 })
        ));
    }

    #[test]
    fn total_is_sum() {
        let a = LossResult {
            value: 1.5,
            gradients: vec![],
        };
        let b = LossResult {
            value: 2.5,
            gradients: vec![],
        };
        assert_eq!(total_loss(&a, &b).value, 4.0);
    }

    #[test]
    fn align_hand_case() {
        let cfg = LossConfig {
            delta_var: 0.0,
            ..LossConfig::default()
        };
        let l = align_loss(
            &batch(FeatureRole::Synthetic, vec![vec![2.0]]),
            &batch(FeatureRole::Real, vec![vec![0.0]]),
            &cfg,
        )
        .unwrap();
        assert_eq!((l.s2r, l.norm, l.result.value), (4.0, 2.0, 6.0));
    }

    #[test]
    fn align_identical_unit_features_vanish() {
        let cfg = LossConfig {
            delta_var: 0.0,
            ..LossConfig::default()
        };
        let f = vec![vec![0.6, 0.8], vec![1.0, 0.0]];
        let l = align_loss(&batch(FeatureRole::Synthetic, f.clone()), &batch(FeatureRole::Real, f), &cfg).unwrap();
        assert_eq!((l.s2r, l.norm, l.result.value), (0.0, 0.0, 0.0));
    }

    #[test]
    fn align_errors() {
        let cfg = LossConfig::default();
        let e = batch(FeatureRole::Synthetic, vec![]);
        let r = batch(FeatureRole::Real, vec![vec![1.0]]);
        assert!(matches!(align_loss(&e, &r, &cfg), Err(Error::EmptyBatch("synthetic"))));
        let r2 = batch(FeatureRole::Real, vec![vec![1.0, 2.0]]);
        assert!(matches!(
            align_loss(&batch(FeatureRole::Synthetic, vec![vec![1.0]]), &r2, &cfg),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn permutation_invariance_of_value() {
        let mut r = rng::rng_for(4, &[]);
        let mk = |r: &mut rng::Rng| (0..5).map(|_| (0..3).map(|_| r.random_range(-2.0..2.0)).collect()).collect::<Vec<Vec<f64>>>();
        let fs = mk(&mut r);
        let fr = mk(&mut r);
        let mut fs_rev = fs.clone();
        fs_rev.reverse();
        let cfg = LossConfig::default();
        let a = align_loss(&batch(FeatureRole::Synthetic, fs), &batch(FeatureRole::Real, fr.clone()), &cfg).unwrap();
        let b = align_loss(&batch(FeatureRole::Synthetic, fs_rev), &batch(FeatureRole::Real, fr), &cfg).unwrap();
        assert!((a.result.value - b.result.value).abs() < 1e-12);
    }

    #[test]
    fn gather_reads_center_cells() {
        let g = BevGrid::new([0.0, 2.0], [0.0, 2.0], 1.0).unwrap();
        let map: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let b = BBox3D::new(crate::geometry::Vec3::new(1.5, 0.5, 0.0), crate::geometry::Vec3::new(1.0, 1.0, 1.0), 0.0).unwrap();
        let fb = gather_at_centers(&map, 2, &g, &[b], FeatureRole::Real).unwrap();
        assert_eq!(fb.features(), &[vec![2.0, 6.0]]);
    }
}
