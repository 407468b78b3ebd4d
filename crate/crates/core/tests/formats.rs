use std::fs;

use hunter_core::exec::Execution;
use hunter_core::geometry::{BBox3D, Detection, PointCloud, Source, Vec3};
use hunter_core::io::{self, DetectionLine, Manifest};
use hunter_core::pipeline::{cmd_filter, cmd_segment_ground, PipelineConfig};
use hunter_core::range_view::{LidarSpec, RangeImage};
use hunter_core::supervision::{BevGrid, HeatmapGrid, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn tagged_cloud_round_trip_keeps_sources() {
    let pts = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-4.5, 0.25, 1.0)];
    let cloud = PointCloud::new(pts)
        .unwrap()
        .with_sources(vec![Source::Scene, Source::Synthetic(3)])
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    fs::write(&path, io::encode_tagged_cloud(&cloud)).unwrap();
    let back = io::read_tagged_cloud(&path).unwrap();
    assert_eq!(back.points(), cloud.points());
    assert_eq!(back.sources(), cloud.sources());
    fs::write(&path, [0u8; 15]).unwrap();
    assert!(io::read_bin_cloud(&path).is_err());
}

#[test]
fn ascii_and_binary_agree() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.xyz"), "1 2 3\n# comment\n4.5 -1 0.25\n").unwrap();
    let a = io::read_cloud(&dir.path().join("p.xyz")).unwrap();
    io::write_bin_cloud(&dir.path().join("p.bin"), a.points()).unwrap();
    let b = io::read_cloud(&dir.path().join("p.bin")).unwrap();
    assert_eq!(a.points(), b.points());
}

#[test]
fn raster_files_round_trip() {
    let g = BevGrid::new([-1.0, 1.0], [-2.0, 2.0], 0.25).unwrap();
    let mut m = Mask::filled(g, false);
    m.set(1, 3, true);
    let mut bytes = Vec::new();
    m.write_to(&mut bytes).unwrap();
    assert_eq!(Mask::read_from(&bytes[..]).unwrap(), m);
    let vals: Vec<f64> = (0..g.n_cells()).map(|i| (i % 4) as f64 / 4.0).collect();
    let h = HeatmapGrid::from_values(g, vals).unwrap();
    let mut hb = Vec::new();
    h.write_to(&mut hb).unwrap();
    assert_eq!(HeatmapGrid::read_from(&hb[..]).unwrap(), h);
    assert!(Mask::read_from(&hb[..8]).is_err());

    let spec = LidarSpec::new(8, 32, -10.0, 10.0, 30.0).unwrap();
    let img = RangeImage::project_points(&[Vec3::new(5.0, 1.0, 0.2), Vec3::new(-3.0, 2.0, 0.0)], &spec, 2);
    let mut rb = Vec::new();
    img.write_to(&mut rb).unwrap();
    // Points are stored as f32 and tags are dropped.
    let back = RangeImage::read_from(&rb[..]).unwrap();
    assert_eq!(back.spec(), img.spec());
    for (a, b) in img.cells().iter().zip(back.cells()) {
        match (a, b) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                assert_eq!(a.point.map(|v| v as f32 as f64), b.point);
                assert_eq!(b.tag, 0);
            }
            _ => panic!("occupancy changed"),
        }
    }
}

#[test]
fn manifest_forms_and_ids() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"dataset":"d","sequences":[{"name":"a","frames":["f0.bin",{"id":"custom","cloud":"f1.bin","labels":"l.jsonl"}]}]}"#;
    let m = Manifest::parse(text, dir.path()).unwrap();
    let frames: Vec<_> = m.frames().map(|(_, _, f)| f.clone()).collect();
    assert_eq!(frames[0].id, "a_0000");
    assert_eq!(frames[1].id, "custom");
    assert_eq!(frames[0].cloud, dir.path().join("f0.bin"));
    let dup = r#"{"dataset":"d","sequences":[{"name":"a","frames":[{"id":"x","cloud":"1"},{"id":"x","cloud":"2"}]}]}"#;
    assert!(Manifest::parse(dup, dir.path()).is_err());
}

#[test]
fn detection_lines_default_score() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    fs::write(&path, "{\"frame\":2,\"boxes\":[[0,0,0,1,1,1,0]]}\n\n{\"frame\":0,\"boxes\":[]}\n").unwrap();
    let lines = io::read_detection_lines(&path).unwrap();
    assert_eq!(lines.len(), 2);
    let d = lines[0].detections().unwrap();
    assert_eq!(d[0].confidence, 1.0);
    assert_eq!(d[0].frame, 2);
    let b = BBox3D::new(Vec3::new(1.0, 2.0, 0.5), Vec3::new(0.5, 0.4, 1.7), 0.3).unwrap();
    let l = DetectionLine::from_detections(None, 1, &[Detection::new(1, b, 0.75).unwrap()]);
    assert_eq!(l.detections().unwrap()[0].bbox, b);
}

fn flat_scene(dir: &std::path::Path) -> (std::path::PathBuf, usize) {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut pts = Vec::new();
    for _ in 0..12_000 {
        pts.push(Vec3::new(r.random_range(-12.0..12.0), r.random_range(-25.0..25.0), -1.6 + r.random_range(-0.02..0.02)));
    }
    let n_ground = pts.len();
    for _ in 0..3000 {
        pts.push(Vec3::new(r.random_range(3.0..4.0), r.random_range(3.0..4.0), r.random_range(-1.4..1.0)));
    }
    let p = dir.join("scene.bin");
    io::write_bin_cloud(&p, &pts).unwrap();
    (p, n_ground)
}

#[test]
fn segment_ground_recovers_planted_plane_and_warns_on_missing_frames() {
    let dir = tempfile::tempdir().unwrap();
    let (_, n_ground) = flat_scene(dir.path());
    let manifest = dir.path().join("manifest.json");
    fs::write(&manifest, r#"{"dataset":"t","sequences":[{"name":"s","frames":["scene.bin","missing.bin"]}]}"#).unwrap();
    let cfg = PipelineConfig {
        manifest: Some(manifest),
        ..PipelineConfig::default()
    }
    .effective(Some(1))
    .unwrap();
    let out = dir.path().join("out");
    let outcome = cmd_segment_ground(&cfg, &out, Execution::default()).unwrap();
    assert_eq!(outcome.warnings.len(), 1);
    assert!(outcome.warnings[0].starts_with("s_0001"));
    let cloud = io::read_cloud(&dir.path().join("scene.bin")).unwrap();
    let text = fs::read_to_string(out.join("ground/s_0000.json")).unwrap();
    let ground = hunter_core::ground_seg::GroundModel::from_json(&text, &cloud).unwrap();
    let planted = ground.indices().iter().filter(|&&i| i < n_ground).count();
    assert!(planted as f64 >= 0.95 * n_ground as f64, "{planted} of {n_ground}");
    assert!(out.join("masks/s_0000.mask").exists());
    assert!(out.join("segment-ground.meta.json").exists());

    let empty = dir.path().join("empty.json");
    fs::write(&empty, r#"{"dataset":"t","sequences":[]}"#).unwrap();
    let cfg = PipelineConfig {
        manifest: Some(empty),
        ..cfg
    };
    let outcome = cmd_segment_ground(&cfg, &dir.path().join("out2"), Execution::default()).unwrap();
    assert!(outcome.warnings.is_empty());
}

#[test]
fn filter_command_handles_empty_and_static_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default().effective(None).unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("f.jsonl");
    cmd_filter(&cfg, &empty, &out, Execution::default()).unwrap();
    assert_eq!(fs::read_to_string(&out).unwrap(), "");

    let wall = BBox3D::new(Vec3::new(5.0, 5.0, 0.9), Vec3::new(0.6, 0.6, 1.7), 0.0).unwrap();
    let lines: Vec<DetectionLine> = (0..20)
        .map(|f| DetectionLine::from_detections(Some("s".into()), f, &[Detection::new(f, wall, 0.9).unwrap()]))
        .collect();
    let input = dir.path().join("static.jsonl");
    io::write_detection_lines(&input, &lines).unwrap();
    cmd_filter(&cfg, &input, &out, Execution::default()).unwrap();
    let kept: usize = io::read_detection_lines(&out).unwrap().iter().map(|l| l.boxes.len()).sum();
    assert_eq!(kept, 0);
    let meta: serde_json::Value = io::read_json(&dir.path().join("f.jsonl.meta.json")).unwrap();
    assert_eq!(meta["seed"], 0);
    assert!(meta["config"]["filter"]["min_displacement"].is_number());
}
