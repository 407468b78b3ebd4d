//! Procedural humanoid: ellipsoid head and trunk, capsule limbs.
//!
//! Asset frame: feet near z = 0, body centered on the z axis, facing +x,
//! left side on +y.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BodyPart, HumanAsset, Joint, TriMesh};
use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanoidParams {
    /// Standing height in meters, nominally 1.5–1.9.
    pub height: f64,
    /// Forward pitch of each arm about the shoulder, radians (left, right).
    pub arm_swing: [f64; 2],
    /// Forward pitch of each leg about the hip, radians (left, right).
    pub leg_swing: [f64; 2],
    /// Outward roll of both arms, radians.
    pub arm_spread: f64,
    /// Tessellation: segments around each limb.
    pub segments: usize,
}

impl Default for HumanoidParams {
    fn default() -> Self {
        Self {
            height: 1.75,
            arm_swing: [0.0, 0.0],
            leg_swing: [0.0, 0.0],
            arm_spread: 0.1,
            segments: 10,
        }
    }
}

/// Random walking-ish pose with height uniform in [1.5, 1.9].
pub fn random_humanoid<R: Rng + ?Sized>(rng: &mut R) -> HumanAsset {
    let swing = rng.random_range(-0.5..0.5);
    let params = HumanoidParams {
        height: rng.random_range(1.5..1.9),
        arm_swing: [-swing * 0.8, swing * 0.8],
        leg_swing: [swing, -swing],
        arm_spread: rng.random_range(0.05..0.4),
        segments: 10,
    };
    generate_humanoid(&params)
}

pub fn generate_humanoid(p: &HumanoidParams) -> HumanAsset {
    let h = p.height;
    let k = h / 1.75;
    let seg = p.segments.max(4);
    let mut mesh = TriMesh::default();

    let head_c = Vec3::new(0.0, 0.0, 0.93 * h);
    mesh.extend(&ellipsoid(head_c, Vec3::new(0.10 * k, 0.08 * k, 0.12 * k), seg.max(6) / 2 + 2, seg + 2));
    let trunk_c = Vec3::new(0.0, 0.0, 0.665 * h);
    mesh.extend(&ellipsoid(trunk_c, Vec3::new(0.12 * k, 0.18 * k, 0.155 * h), seg.max(6) / 2 + 2, seg + 2));

    let mut joints = vec![
        Joint {
            part: BodyPart::Head,
            position: head_c,
        },
        Joint {
            part: BodyPart::Trunk,
            position: trunk_c,
        },
    ];

    let arm_len = 0.40 * h;
    let arm_r = 0.045 * k;
    for (side, part, swing) in [
        (1.0, BodyPart::LeftArm, p.arm_swing[0]),
        (-1.0, BodyPart::RightArm, p.arm_swing[1]),
    ] {
        let shoulder = Vec3::new(0.0, side * 0.21 * k, 0.80 * h);
        let dir = limb_direction(swing, side * p.arm_spread);
        let hand = shoulder + dir * arm_len;
        mesh.extend(&capsule(shoulder, hand, arm_r, seg, 3));
        joints.push(Joint {
            part,
            position: (shoulder + hand) / 2.0,
        });
    }

    let leg_r = 0.065 * k;
    let leg_len = 0.50 * h - leg_r;
    for (side, part, swing) in [
        (1.0, BodyPart::LeftLeg, p.leg_swing[0]),
        (-1.0, BodyPart::RightLeg, p.leg_swing[1]),
    ] {
        let hip = Vec3::new(0.0, side * 0.09 * k, 0.50 * h);
        let foot = hip + limb_direction(swing, 0.0) * leg_len;
        mesh.extend(&capsule(hip, foot, leg_r, seg, 3));
        joints.push(Joint {
            part,
            position: (hip + foot) / 2.0,
        });
    }

    // Rest the lowest vertex on z = 0.
    let min_z = mesh.vertices.iter().map(|v| v.z).fold(f64::INFINITY, f64::min);
    let shift = Vec3::new(0.0, 0.0, -min_z);
    for v in &mut mesh.vertices {
        *v += shift;
    }
    for j in &mut joints {
        j.position += shift;
    }
    HumanAsset::new(mesh, joints, 0.0).expect("generated humanoid is well-formed")
}

/// Downward unit vector pitched forward by `pitch` and rolled outward by
/// `roll` (positive roll moves toward +y).
fn limb_direction(pitch: f64, roll: f64) -> Vec3 {
    Vec3::new(pitch.sin() * roll.cos(), roll.sin(), -pitch.cos() * roll.cos()).normalize()
}

pub(crate) fn ellipsoid(center: Vec3, radii: Vec3, n_lat: usize, n_lon: usize) -> TriMesh {
    let mut vertices = vec![center + Vec3::new(0.0, 0.0, -radii.z)];
    for i in 1..n_lat {
        let phi = -PI / 2.0 + PI * i as f64 / n_lat as f64;
        for j in 0..n_lon {
            let th = 2.0 * PI * j as f64 / n_lon as f64;
            vertices.push(
                center
                    + Vec3::new(
                        radii.x * phi.cos() * th.cos(),
                        radii.y * phi.cos() * th.sin(),
                        radii.z * phi.sin(),
                    ),
            );
        }
    }
    vertices.push(center + Vec3::new(0.0, 0.0, radii.z));
    TriMesh {
        triangles: ring_triangles(n_lat - 1, n_lon),
        vertices,
    }
}

/// Capsule around segment `a → b`.
pub(crate) fn capsule(a: Vec3, b: Vec3, radius: f64, n_around: usize, n_cap: usize) -> TriMesh {
    let axis = b - a;
    let len = axis.norm();
    let w = if len > 0.0 { axis / len } else { Vec3::z() };
    let helper = if w.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = w.cross(&helper).normalize();
    let v = w.cross(&u);

    // (axial offset, ring radius), bottom to top, poles excluded.
    let mut rings = Vec::new();
    for k in 1..=n_cap {
        let phi = -PI / 2.0 + (PI / 2.0) * k as f64 / n_cap as f64;
        rings.push((radius * phi.sin(), radius * phi.cos()));
    }
    for k in 0..n_cap {
        let phi = (PI / 2.0) * k as f64 / n_cap as f64;
        rings.push((len + radius * phi.sin(), radius * phi.cos()));
    }

    let mut vertices = vec![a - w * radius];
    for &(off, r) in &rings {
        for j in 0..n_around {
            let th = 2.0 * PI * j as f64 / n_around as f64;
            vertices.push(a + w * off + (u * th.cos() + v * th.sin()) * r);
        }
    }
    vertices.push(b + w * radius);
    TriMesh {
        triangles: ring_triangles(rings.len(), n_around),
        vertices,
    }
}

/// Triangles for: bottom pole (vertex 0), `n_rings` rings of `n_around`
/// vertices, top pole (last vertex).
fn ring_triangles(n_rings: usize, n_around: usize) -> Vec<[u32; 3]> {
    let ring = |r: usize, j: usize| (1 + r * n_around + (j % n_around)) as u32;
    let top = (1 + n_rings * n_around) as u32;
    let mut tris = Vec::new();
    for j in 0..n_around {
        tris.push([0, ring(0, j + 1), ring(0, j)]);
    }
    for r in 0..n_rings.saturating_sub(1) {
        for j in 0..n_around {
            tris.push([ring(r, j), ring(r, j + 1), ring(r + 1, j + 1)]);
            tris.push([ring(r, j), ring(r + 1, j + 1), ring(r + 1, j)]);
        }
    }
    for j in 0..n_around {
        tris.push([ring(n_rings - 1, j), ring(n_rings - 1, j + 1), top]);
    }
    tris
}
