//! File formats: packed float point clouds, ASCII xyz, dataset manifests
//! and detection JSON lines.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::{BBox3D, Detection, PointCloud, Source, Vec3};
use crate::{Error, Result};

/// Encode points as little-endian `f32` quadruples `(x, y, z, extra)`.
pub fn encode_cloud(points: &[Vec3], extra: impl Fn(usize) -> f32) -> Vec<u8> {
    let mut buf = Vec::with_capacity(points.len() * 16);
    for (i, p) in points.iter().enumerate() {
        for v in [p.x as f32, p.y as f32, p.z as f32, extra(i)] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Cloud with the source tag (0 scene, k instance k) as the fourth value.
pub fn encode_tagged_cloud(cloud: &PointCloud) -> Vec<u8> {
    encode_cloud(cloud.points(), |i| cloud.source_of(i).tag() as f32)
}

/// Decode packed quadruples into points and the fourth column.
pub fn decode_cloud(bytes: &[u8], path: &Path) -> Result<(Vec<Vec3>, Vec<f32>)> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::format(path, format!("{} bytes is not a multiple of 16", bytes.len())));
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut extra = Vec::with_capacity(bytes.len() / 16);
    for q in bytes.chunks_exact(16) {
        let p = Vec3::new(f(&q[0..4]) as f64, f(&q[4..8]) as f64, f(&q[8..12]) as f64);
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::format(path, "non-finite coordinate"));
        }
        points.push(p);
        extra.push(f(&q[12..16]));
    }
    Ok((points, extra))
}

pub fn read_bin_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (points, _) = decode_cloud(&bytes, path)?;
    PointCloud::new(points)
}

/// Read a forged frame, restoring source tags from the fourth column.
pub fn read_tagged_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (points, extra) = decode_cloud(&bytes, path)?;
    let sources = extra.iter().map(|&t| Source::from_tag(t as u32)).collect();
    PointCloud::new(points)?.with_sources(sources)
}

pub fn write_bin_cloud(path: &Path, points: &[Vec3]) -> Result<()> {
    fs::write(path, encode_cloud(points, |_| 0.0)).map_err(|e| Error::io(path, e))
}

/// Whitespace-separated ASCII points, three or more columns per line; extra
/// columns are ignored, `#` starts a comment.
pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        if vals.len() < 3 {
            return Err(Error::format(path, format!("line {}: need x y z", n + 1)));
        }
        points.push(Vec3::new(vals[0], vals[1], vals[2]));
    }
    PointCloud::new(points)
}

/// Load by extension: `.xyz`/`.txt` as ASCII, anything else as packed floats.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyz") | Some("txt") => read_xyz(path),
        _ => read_bin_cloud(path),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum FrameEntry {
    Path(String),
    Full {
        #[serde(default)]
        id: Option<String>,
        cloud: String,
        #[serde(default)]
        labels: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SequenceEntry {
    name: String,
    frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestFile {
    #[serde(default)]
    dataset: String,
    sequences: Vec<SequenceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameRecord {
    pub id: String,
    pub cloud: PathBuf,
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<FrameRecord>,
}

/// Dataset listing. Relative paths resolve against the manifest's folder;
/// frame ids default to `<sequence>_<index:04>`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub dataset: String,
    pub sequences: Vec<Sequence>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Json(j) => Error::format(path, j.to_string()),
            other => other,
        })
    }

    pub fn parse(text: &str, base: &Path) -> Result<Manifest> {
        let raw: ManifestFile = serde_json::from_str(text)?;
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let mut seen = HashSet::new();
        let mut sequences = Vec::with_capacity(raw.sequences.len());
        for s in raw.sequences {
            let mut frames = Vec::with_capacity(s.frames.len());
            for (i, f) in s.frames.into_iter().enumerate() {
                let default_id = format!("{}_{i:04}", s.name);
                let rec = match f {
                    FrameEntry::Path(p) => FrameRecord {
                        id: default_id,
                        cloud: resolve(&p),
                        labels: None,
                    },
                    FrameEntry::Full { id, cloud, labels } => FrameRecord {
                        id: id.unwrap_or(default_id),
                        cloud: resolve(&cloud),
                        labels: labels.as_deref().map(resolve),
                    },
                };
                if !seen.insert(rec.id.clone()) {
                    return Err(Error::invalid("manifest", format!("duplicate frame id {}", rec.id)));
                }
                frames.push(rec);
            }
            sequences.push(Sequence { name: s.name, frames });
        }
        Ok(Manifest {
            dataset: raw.dataset,
            sequences,
        })
    }

    pub fn frames(&self) -> impl Iterator<Item = (&Sequence, usize, &FrameRecord)> {
        self.sequences
            .iter()
            .flat_map(|s| s.frames.iter().enumerate().map(move |(i, f)| (s, i, f)))
    }

    pub fn n_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }
}

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<String>,
    pub frame: usize,
    /// `[cx, cy, cz, l, w, h, yaw, score]`; the score may be omitted for
    /// ground truth and then reads as 1.
    pub boxes: Vec<Vec<f64>>,
}

impl DetectionLine {
    pub fn detections(&self) -> Result<Vec<Detection>> {
        self.boxes
            .iter()
            .map(|b| {
                if b.len() != 7 && b.len() != 8 {
                    return Err(Error::invalid("detection line", format!("box has {} values", b.len())));
                }
                let bbox = BBox3D::from_array(b[..7].try_into().expect("seven values"))?;
                Detection::new(self.frame, bbox, b.get(7).copied().unwrap_or(1.0))
            })
            .collect()
    }

    pub fn from_detections(sequence: Option<String>, frame: usize, dets: &[Detection]) -> Self {
        Self {
            sequence,
            frame,
            boxes: dets
                .iter()
                .map(|d| {
                    let mut v = d.bbox.to_array().to_vec();
                    v.push(d.confidence);
                    v
                })
                .collect(),
        }
    }
}

pub fn read_detection_lines(path: &Path) -> Result<Vec<DetectionLine>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionLine = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_detection_lines(path: &Path, lines: &[DetectionLine]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        let s = serde_json::to_string(l)?;
        writeln!(w, "{s}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Detections grouped per sequence and dense per frame index; frames with
/// no line get an empty list. Sequences are ordered by name.
pub fn group_by_sequence(lines: &[DetectionLine]) -> Result<BTreeMap<String, Vec<Vec<Detection>>>> {
    let mut out: BTreeMap<String, Vec<Vec<Detection>>> = BTreeMap::new();
    for l in lines {
        let seq = out.entry(l.sequence.clone().unwrap_or_default()).or_default();
        if seq.len() <= l.frame {
            seq.resize(l.frame + 1, Vec::new());
        }
        seq[l.frame].extend(l.detections()?);
    }
    Ok(out)
}

/// Frame id used when joining detections with ground truth.
pub fn frame_key(sequence: &str, frame: usize) -> String {
    if sequence.is_empty() {
        format!("{frame:06}")
    } else {
        format!("{sequence}_{frame:04}")
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let pts = vec![Vec3::new(1.0, -2.5, 0.25), Vec3::new(0.0, 3.0, -1.0)];
        write_bin_cloud(&p, &pts).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 32);
        assert_eq!(read_cloud(&p).unwrap().points(), &pts[..]);
        fs::write(&p, [0u8; 10]).unwrap();
        assert!(matches!(read_cloud(&p), Err(Error::Format { .. })));
        assert!(matches!(read_cloud(&dir.path().join("missing.bin")), Err(Error::Io { .. })));
    }

    #[test]
    fn tagged_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let c = PointCloud::new(vec![Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0)])
            .unwrap()
            .with_sources(vec![Source::Scene, Source::Synthetic(3)])
            .unwrap();
        fs::write(&p, encode_tagged_cloud(&c)).unwrap();
        assert_eq!(read_tagged_cloud(&p).unwrap(), c);
    }

    #[test]
    fn xyz_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.xyz");
        fs::write(&p, "# header\n1 2 3 9\n\n4.5 5 6\n").unwrap();
        let c = read_cloud(&p).unwrap();
        assert_eq!(c.points(), &[Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.5, 5.0, 6.0)]);
        fs::write(&p, "1 2\n").unwrap();
        assert!(read_cloud(&p).is_err());
    }

    #[test]
    fn manifest_forms() {
        let text = r#"{"dataset":"d","sequences":[{"name":"s","frames":["a.bin",{"id":"x","cloud":"/abs/b.bin","labels":"l.json"}]}]}"#;
        let m = Manifest::parse(text, Path::new("/data")).unwrap();
        let f = &m.sequences[0].frames;
        assert_eq!(f[0].id, "s_0000");
        assert_eq!(f[0].cloud, PathBuf::from("/data/a.bin"));
        assert_eq!(f[1].cloud, PathBuf::from("/abs/b.bin"));
        assert_eq!(f[1].labels, Some(PathBuf::from("/data/l.json")));
        let dup = r#"{"sequences":[{"name":"s","frames":[{"id":"x","cloud":"a"},{"id":"x","cloud":"b"}]}]}"#;
        assert!(Manifest::parse(dup, Path::new(".")).is_err());
    }

    #[test]
    fn detection_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let b = BBox3D::new(Vec3::new(1.0, 2.0, 0.0), Vec3::new(0.5, 0.5, 1.7), 0.1).unwrap();
        let lines = vec![
            DetectionLine::from_detections(Some("s".into()), 2, &[Detection::new(2, b, 0.7).unwrap()]),
            DetectionLine {
                sequence: None,
                frame: 0,
                boxes: vec![b.to_array().to_vec()],
            },
        ];
        write_detection_lines(&p, &lines).unwrap();
        let back = read_detection_lines(&p).unwrap();
        assert_eq!(back, lines);
        assert_eq!(back[1].detections().unwrap()[0].confidence, 1.0);
        let g = group_by_sequence(&back).unwrap();
        assert_eq!(g["s"].len(), 3);
        assert_eq!(g["s"][2].len(), 1);
        assert_eq!(g[""].len(), 1);
        let bad = DetectionLine {
            sequence: None,
            frame: 0,
            boxes: vec![vec![1.0; 5]],
        };
        assert!(bad.detections().is_err());
    }
}
