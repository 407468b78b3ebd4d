//! Asset ingestion: OBJ subset (`v` and `f` records) plus a JSON sidecar
//! holding the six key joints and the facing yaw:
//!
//! ```json
//! {"joints": {"head": [0, 0, 1.6], "trunk": [...], ...}, "yaw": 0.0}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BodyPart, HumanAsset, Joint, TriMesh};
use crate::geometry::Vec3;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSidecar {
    pub joints: BTreeMap<String, [f64; 3]>,
    #[serde(default)]
    pub yaw: f64,
}

/// Parse `v x y z` and `f i j k …` records. Face indices may carry `/vt/vn`
/// suffixes and may be negative (relative). Polygons are fan-triangulated.
/// Everything else is ignored.
pub fn read_obj<R: Read>(r: R) -> Result<TriMesh> {
    let mut mesh = TriMesh::default();
    for (lineno, line) in BufReader::new(r).lines().enumerate() {
        let line = line.map_err(|e| Error::io("<obj>", e))?;
        let mut it = line.split_whitespace();
        let bad = |msg: &str| Error::format("<obj>", format!("line {}: {msg}", lineno + 1));
        match it.next() {
            Some("v") => {
                let mut c = [0.0; 3];
                for v in &mut c {
                    *v = it
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad("malformed vertex"))?;
                }
                mesh.vertices.push(Vec3::from(c));
            }
            Some("f") => {
                let n = mesh.vertices.len() as i64;
                let idx: Vec<u32> = it
                    .map(|tok| {
                        let head = tok.split('/').next().unwrap_or("");
                        let i: i64 = head.parse().map_err(|_| bad("malformed face index"))?;
                        let zero_based = if i > 0 { i - 1 } else { n + i };
                        if zero_based < 0 || zero_based >= n {
                            return Err(bad("face index out of range"));
                        }
                        Ok(zero_based as u32)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(bad("face with fewer than 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok(mesh)
}

pub fn write_obj<W: Write>(mesh: &TriMesh, mut w: W) -> std::io::Result<()> {
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

pub fn load_asset(obj_path: &Path, sidecar_path: &Path) -> Result<HumanAsset> {
    let obj = fs::File::open(obj_path).map_err(|e| Error::io(obj_path, e))?;
    let mesh = read_obj(obj).map_err(|e| match e {
        Error::Format { reason, .. } => Error::format(obj_path, reason),
        other => other,
    })?;
    let text = fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
    let sidecar: JointSidecar = serde_json::from_str(&text)?;
    let joints = sidecar
        .joints
        .iter()
        .map(|(name, p)| {
            BodyPart::from_name(name)
                .map(|part| Joint {
                    part,
                    position: Vec3::from(*p),
                })
                .ok_or_else(|| Error::format(sidecar_path, format!("unknown body part {name:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    HumanAsset::new(mesh, joints, sidecar.yaw)
}

pub fn save_asset(asset: &HumanAsset, obj_path: &Path, sidecar_path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_obj(asset.mesh(), &mut buf).map_err(|e| Error::io(obj_path, e))?;
    fs::write(obj_path, buf).map_err(|e| Error::io(obj_path, e))?;
    let sidecar = JointSidecar {
        joints: asset
            .joints()
            .iter()
            .map(|j| (j.part.name().to_string(), [j.position.x, j.position.y, j.position.z]))
            .collect(),
        yaw: asset.yaw(),
    };
    fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(sidecar_path, e))?;
    Ok(())
}
