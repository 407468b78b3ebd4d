//! The tracker's predict/update steps against a plain dynamic-size Kalman
//! filter written from the textbook equations.

use hunter_core::geometry::{normalize_yaw, BBox3D, Vec3};
use hunter_core::track_filter::{associate, wrap_angle, FilterConfig, TrackState};
use hunter_core::geometry::Detection;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Textbook {
    x: DVector<f64>,
    p: DMatrix<f64>,
}

impl Textbook {
    fn new(b: &BBox3D, cfg: &FilterConfig) -> Self {
        let mut x = DVector::zeros(10);
        for (i, v) in b.to_array().iter().enumerate() {
            x[i] = *v;
        }
        let diag: Vec<f64> = (0..10).map(|i| if i < 7 { cfg.p0_pose } else { cfg.p0_velocity }).collect();
        Self {
            x,
            p: DMatrix::from_diagonal(&DVector::from_vec(diag)),
        }
    }

    fn predict(&mut self, dt: f64, cfg: &FilterConfig) {
        let mut f = DMatrix::<f64>::identity(10, 10);
        for i in 0..3 {
            f[(i, 7 + i)] = dt;
        }
        let q: Vec<f64> = (0..10).map(|i| if i < 7 { cfg.q_pose } else { cfg.q_velocity }).collect();
        self.x = &f * &self.x;
        self.p = &f * &self.p * f.transpose() + DMatrix::from_diagonal(&DVector::from_vec(q));
    }

    fn update(&mut self, b: &BBox3D, cfg: &FilterConfig) {
        let h = DMatrix::<f64>::identity(7, 10);
        let r = DMatrix::<f64>::identity(7, 7) * cfg.r_measurement;
        let z = DVector::from_vec(b.to_array().to_vec());
        let mut y = z - &h * &self.x;
        y[6] = wrap_angle(y[6]);
        let s = &h * &self.p * h.transpose() + &r;
        let k = &self.p * h.transpose() * s.try_inverse().unwrap();
        self.x = &self.x + &k * y;
        self.x[6] = wrap_angle(self.x[6]);
        self.p = (DMatrix::<f64>::identity(10, 10) - &k * &h) * &self.p;
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-8 * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn filter_steps_match_textbook_oracle() {
    let cfg = FilterConfig::default();
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let mut center = Vec3::new(r.random_range(-10.0..10.0), r.random_range(-10.0..10.0), 0.9);
        let vel = Vec3::new(r.random_range(-0.3..0.3), r.random_range(-0.3..0.3), 0.0);
        let dims = Vec3::new(0.6, 0.5, 1.7);
        let mut yaw = r.random_range(-3.1..3.1);
        let b0 = BBox3D::new(center, dims, yaw).unwrap();
        let mut ours = TrackState::from_box(&b0, &cfg);
        let mut oracle = Textbook::new(&b0, &cfg);
        for _ in 0..15 {
            center += vel;
            yaw = normalize_yaw(yaw + r.random_range(-0.4..0.4));
            let noisy = center + Vec3::new(r.random_range(-0.05..0.05), r.random_range(-0.05..0.05), 0.0);
            let b = BBox3D::new(noisy, dims, yaw).unwrap();
            ours = ours.predict(1.0, &cfg).update(&b, &cfg);
            oracle.predict(1.0, &cfg);
            oracle.update(&b, &cfg);
            for i in 0..10 {
                let (a, o) = (ours.x[i], oracle.x[i]);
                let same = if i == 6 { close(wrap_angle(a - o), 0.0) } else { close(a, o) };
                assert!(same, "state {i}: {a} vs {o}");
                for j in 0..10 {
                    assert!(close(ours.p[(i, j)], oracle.p[(i, j)]), "cov ({i},{j})");
                }
            }
            let sym = (ours.p - ours.p.transpose()).abs().max();
            assert!(sym <= 1e-9);
            assert!(ours.p.symmetric_eigenvalues().min() >= -1e-9);
        }
    }
}

#[test]
fn repeated_prediction_is_linear() {
    let cfg = FilterConfig::default();
    let b = BBox3D::new(Vec3::new(1.0, 2.0, 0.9), Vec3::new(0.6, 0.6, 1.7), 0.2).unwrap();
    let mut s = TrackState::from_box(&b, &cfg);
    s.x[7] = 0.3;
    s.x[8] = -0.2;
    let mut t = s.clone();
    for _ in 0..5 {
        t = t.predict(1.0, &cfg);
    }
    assert!((t.x[0] - (1.0 + 5.0 * 0.3)).abs() < 1e-12);
    assert!((t.x[1] - (2.0 - 5.0 * 0.2)).abs() < 1e-12);
    assert_eq!(t.x[6], s.x[6]);
}

/// Replays greedy assignment over every pair ordering consistent with the
/// distance-then-index rule and checks the result is the unique one.
#[test]
fn crossing_association_matches_exhaustive_greedy() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let dims = Vec3::new(0.6, 0.6, 1.7);
    for _ in 0..200 {
        let preds: Vec<BBox3D> = (0..3)
            .map(|_| BBox3D::new(Vec3::new(r.random_range(0.0..3.0), r.random_range(0.0..3.0), 0.0), dims, 0.0).unwrap())
            .collect();
        let dets: Vec<Detection> = (0..3)
            .map(|_| {
                let b = BBox3D::new(Vec3::new(r.random_range(0.0..3.0), r.random_range(0.0..3.0), 0.0), dims, 0.0).unwrap();
                Detection::new(0, b, 0.9).unwrap()
            })
            .collect();
        let got = associate(&preds, &dets, 2.0);
        let mut claimed_p = [false; 3];
        let mut claimed_d = [false; 3];
        let mut expect = Vec::new();
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for i in 0..3 {
                for j in 0..3 {
                    if claimed_p[i] || claimed_d[j] {
                        continue;
                    }
                    let d = (preds[i].center() - dets[j].bbox.center()).norm();
                    if d <= 2.0 && best.is_none_or(|b| (d, i, j) < b) {
                        best = Some((d, i, j));
                    }
                }
            }
            let Some((_, i, j)) = best else { break };
            claimed_p[i] = true;
            claimed_d[j] = true;
            expect.push((i, j));
        }
        let mut a = got.matches.clone();
        a.sort_unstable();
        expect.sort_unstable();
        assert_eq!(a, expect);
        assert_eq!(got.unmatched_predictions.len() + a.len(), 3);
        assert_eq!(got.unmatched_detections.len() + a.len(), 3);
    }
}
