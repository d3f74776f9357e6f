mod common;

use std::fs;

use common::*;
use proptest::prelude::*;
use sfagc::io::config::parse_pairs;
use sfagc::io::points::{read_bin, write_bin, BIN_MAGIC};
use sfagc::io::synth::{segment2_raw, classify4_raw, random_rotation};
use sfagc::io::{
    load_points, normalize_unit_sphere, parse_off, sample_mesh, sample_off_mesh, save_points, synth_dataset, Augment,
    Format, Manifest, RunConfig, Schedule, SynthKind, SynthOptions,
};
use sfagc::models::Task;
use sfagc::{Error, Tensor};

const TWO_TRIANGLES: &str = "OFF\n6 2 0\n0 0 0\n3 0 0\n0 2 0\n10 0 0\n12 0 0\n10 1 0\n3 0 1 2\n3 3 4 5\n";

#[test]
fn mesh_sampling_follows_area() {
    let mesh = parse_off(TWO_TRIANGLES, "mesh").unwrap();
    let n = 20_000;
    let pts = sample_mesh(&mesh, n, 3).unwrap();
    let big = (0..n).filter(|&i| pts.row(i)[0] < 5.0).count() as f64;
    let small = n as f64 - big;
    let (e_big, e_small) = (0.75 * n as f64, 0.25 * n as f64);
    let chi2 = (big - e_big).powi(2) / e_big + (small - e_small).powi(2) / e_small;
    assert!(chi2 < 10.83, "chi2 = {chi2}");
    for i in 0..n {
        let p = pts.row(i);
        assert_eq!(p[2], 0.0);
        let inside = if p[0] < 5.0 {
            p[0] >= 0.0 && p[1] >= 0.0 && p[0] / 3.0 + p[1] / 2.0 <= 1.0 + 1e-12
        } else {
            p[0] >= 10.0 && p[1] >= 0.0 && (p[0] - 10.0) / 2.0 + p[1] <= 1.0 + 1e-12
        };
        assert!(inside, "{p:?}");
    }
}

#[test]
fn mesh_parse_variants_and_errors() {
    let fused = parse_off("OFF4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n", "quad").unwrap();
    assert_eq!(fused.faces, vec![[0, 1, 2], [0, 2, 3]]);
    assert!(matches!(parse_off("PLY\n", "x"), Err(Error::Parse { .. })));
    assert!(parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n", "short").is_err());
    assert!(parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n", "range").is_err());
    let flat = parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n2 0 0\n3 0 1 2\n", "flat").unwrap();
    assert!(sample_mesh(&flat, 10, 0).is_err());
}

#[test]
fn off_conversion_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.off");
    fs::write(&path, TWO_TRIANGLES).unwrap();
    let a = sample_off_mesh(&path, 100, 9).unwrap();
    let b = sample_off_mesh(&path, 100, 9).unwrap();
    let c = sample_off_mesh(&path, 100, 10).unwrap();
    assert_eq!(a.coords, b.coords);
    assert_ne!(a.coords, c.coords);
    assert_eq!(a.coords.shape(), &[100, 3]);
}

#[test]
fn point_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let t = rand_tensor(&mut rng(1), &[17, 3]);
    for (name, fmt) in [("p.txt", Format::XyzText), ("p.bin", Format::Bin)] {
        let path = dir.path().join(name);
        save_points(&path, &t, fmt).unwrap();
        assert_eq!(Format::from_path(&path), fmt);
        let back = load_points(&path, fmt).unwrap();
        assert_eq!(back.coords, t);
        assert_eq!(back.feats, t);
    }
}

#[test]
fn point_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "0 0 0\n1 x 2\n").unwrap();
    let err = load_points(&bad, Format::XyzText).unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
    fs::write(&bad, "# only a comment\n").unwrap();
    assert!(load_points(&bad, Format::XyzText).is_err());
    fs::write(&bad, "0 0 0\n1 2\n").unwrap();
    assert!(load_points(&bad, Format::XyzText).is_err());
    let mut buf = Vec::new();
    write_bin(&mut buf, &Tensor::zeros(&[2, 3])).unwrap();
    assert_eq!(&buf[..7], BIN_MAGIC);
    assert!(read_bin(&mut &buf[..buf.len() - 3], "cut").is_err());
    buf[0] = b'X';
    assert!(read_bin(&mut &buf[..], "magic").is_err());
    assert!(load_points(&dir.path().join("missing.txt"), Format::XyzText).is_err());
}

#[test]
fn normalization_fits_the_unit_sphere() {
    let t = Tensor::matrix(3, 3, vec![1.0, 1.0, 1.0, 3.0, 1.0, 1.0, 2.0, 4.0, 1.0]).unwrap();
    let n = normalize_unit_sphere(&t);
    let mut mean = [0.0; 3];
    let mut far: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            mean[j] += n.row(i)[j] / 3.0;
        }
        far = far.max(n.row(i).iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    assert!(mean.iter().all(|m| m.abs() < 1e-12));
    assert!((far - 1.0).abs() < 1e-12);
    let same = normalize_unit_sphere(&Tensor::filled(&[4, 3], 2.0));
    assert!(same.data().iter().all(|&x| x == 0.0));
    let single = normalize_unit_sphere(&Tensor::matrix(1, 3, vec![4.0, -1.0, 2.0]).unwrap());
    assert!(single.data().iter().all(|&x| x == 0.0));
    assert!(normalize_unit_sphere(&n).max_abs_diff(&n) < 1e-12);
}

#[test]
fn synthetic_classes_are_balanced_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let opts = SynthOptions { train: 3, test: 2, points: 32, full_rotation: true };
    let a = synth_dataset(SynthKind::Classify4, opts, 5, &dir.path().join("a")).unwrap();
    let b = synth_dataset(SynthKind::Classify4, opts, 5, &dir.path().join("b")).unwrap();
    assert_eq!(a.train.len(), 12);
    assert_eq!(a.test.len(), 8);
    for class in 0..4 {
        assert_eq!(a.train.iter().filter(|e| e.label == class).count(), 3);
    }
    let sa = a.load_split(&a.train).unwrap();
    let sb = b.load_split(&b.train).unwrap();
    for (x, y) in sa.iter().zip(&sb) {
        assert_eq!(x.points, y.points);
        assert_eq!(x.points.shape(), &[32, 3]);
    }
    let reloaded = Manifest::load(&dir.path().join("a/manifest.txt")).unwrap();
    assert_eq!(reloaded.train, a.train);
    assert_eq!(reloaded.labels, a.labels);
}

#[test]
fn synthetic_segmentation_marks_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    let opts = SynthOptions { train: 4, test: 2, points: 64, full_rotation: false };
    let m = synth_dataset(SynthKind::Segment2, opts, 6, dir.path()).unwrap();
    assert_eq!(m.task, Task::Segment);
    assert_eq!(m.outputs(), 2);
    for s in m.load_split(&m.train).unwrap() {
        assert_eq!(s.parts.len(), 64);
        assert!(s.parts.iter().all(|&p| p < 2));
    }
    let mut r = rng(7);
    for _ in 0..20 {
        let (pts, parts, top) = segment2_raw(&mut r, 200);
        for (p, &part) in pts.iter().zip(&parts) {
            if part == 1 {
                assert!((p[2] - top).abs() < 1e-12);
            } else {
                assert!(p[2] <= top + 1e-12);
            }
        }
        assert!(parts.contains(&0) && parts.contains(&1));
    }
}

#[test]
fn synthetic_shapes_and_rotations() {
    let mut r = rng(8);
    let sphere = classify4_raw(&mut r, 0, 50);
    assert!(sphere.iter().all(|p| ((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 1.0).abs() < 1e-12));
    let plane = classify4_raw(&mut r, 3, 50);
    let z0 = plane[0][2];
    assert!(plane.iter().all(|p| p[2] == z0));
    for full in [true, false] {
        let m = random_rotation(&mut r, full);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        if !full {
            assert!((m[2][2] - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn manifest_validation() {
    let root = std::path::Path::new(".");
    let ok = "task classify\npoints 4\nlabel a\nlabel b\ntrain x.bin 1\ntest y.bin 0\n";
    let m = Manifest::parse(ok, root, "m").unwrap();
    assert_eq!(m.outputs(), 2);
    assert_eq!(Manifest::parse(&m.to_text(), root, "m").unwrap(), m);
    assert!(Manifest::parse("task classify\nlabel a\ntrain x.bin 3\n", root, "m").is_err());
    assert!(Manifest::parse("task other\n", root, "m").is_err());
    assert!(Manifest::parse("label a\nbogus line\n", root, "m").is_err());
    let seg = "task segment\npoints 4\nlabel c\nparts 0 side,cap\ntrain s.txt 0\ntest t.txt 0\n";
    let m = Manifest::parse(seg, root, "m").unwrap();
    assert_eq!(m.parts, vec![vec![0, 1]]);
    assert!(Manifest::parse("task segment\nlabel c\nparts 1 side\n", root, "m").is_err());
}

#[test]
fn segmentation_rows_must_belong_to_the_category() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.txt"), "0 0 0 0\n1 0 0 1\n0 1 0 1\n").unwrap();
    fs::write(dir.path().join("bad.txt"), "0 0 0 0\n1 0 0 2\n").unwrap();
    let text = "task segment\npoints 3\nlabel c\nparts 0 side,cap\nlabel d\nparts 1 other\ntrain s.txt 0\ntest bad.txt 0\n";
    fs::write(dir.path().join("manifest.txt"), text).unwrap();
    let m = Manifest::load(&dir.path().join("manifest.txt")).unwrap();
    let s = m.load_split(&m.train).unwrap();
    assert_eq!(s[0].parts, vec![0, 1, 1]);
    assert_eq!(s[0].points.shape(), &[3, 3]);
    assert!(m.load_split(&m.test).is_err());
}

#[test]
fn run_config_parsing() {
    let base = std::path::Path::new("/base");
    let text = "# toy\nnetwork = toy-segment\ndata = d/manifest.txt\nepochs = 3\nlr = 0.01\nschedule = cosine\nrotate = z\ndropout = 0.1\nablation = nP\n";
    let cfg = RunConfig::parse(text, base, "cfg").unwrap();
    assert_eq!(cfg.data, base.join("d/manifest.txt"));
    assert_eq!(cfg.out, base.join("run"));
    assert_eq!((cfg.epochs, cfg.batch, cfg.seed), (3, 16, 0));
    assert_eq!(cfg.schedule, Schedule::Cosine);
    assert_eq!(cfg.augment, Augment::RotateZ);
    assert_eq!(cfg.network.task, Task::Segment);
    assert_eq!(cfg.network.dropout, 0.1);
    assert!(!cfg.network.ablation.use_position);
    for bad in [
        "data = d\nepochs = 0\n",
        "data = d\nbatch = 0\n",
        "data = d\nlr = -1\n",
        "data = d\nlr = fast\n",
        "data = d\nunknown = 1\n",
        "data = d\nrotate = y\n",
        "data = d\nschedule = step\n",
        "data = d\nnetwork = nope\n",
        "data = d\ndropout = 1\n",
        "epochs = 2\n",
        "data d\n",
    ] {
        assert!(RunConfig::parse(bad, base, "cfg").is_err(), "{bad}");
    }
    assert!(parse_pairs("a = 1\n", "cfg").is_err());
}

#[test]
fn cosine_schedule_anneals() {
    assert_eq!(Schedule::Constant.rate(0.1, 5, 10), 0.1);
    assert_eq!(Schedule::Cosine.rate(0.1, 1, 10), 0.1);
    assert!((Schedule::Cosine.rate(0.1, 6, 10) - 0.05).abs() < 1e-15);
    assert!(Schedule::Cosine.rate(0.1, 10, 10) > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn text_and_binary_round_trip(seed in any::<u64>(), n in 1usize..30, c in 1usize..6) {
        let t = rand_tensor(&mut rng(seed), &[n, c]);
        let mut buf = Vec::new();
        write_bin(&mut buf, &t).unwrap();
        prop_assert_eq!(read_bin(&mut &buf[..], "mem").unwrap(), t.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        save_points(&path, &t, Format::XyzText).unwrap();
        prop_assert_eq!(load_points(&path, Format::XyzText).unwrap().coords, t);
    }
}
