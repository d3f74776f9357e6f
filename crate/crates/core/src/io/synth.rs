//! Synthetic datasets: `classify4` (sphere, cube, cylinder and plane
//! surfaces) and `segment2` (cylinders with a top cap, parts side and cap).

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::manifest::{Entry, Manifest};
use crate::io::points::{normalize_unit_sphere, save_points, Format};
use crate::models::Task;
use crate::tensor::Tensor;

pub const CLASSIFY4_CLASSES: [&str; 4] = ["sphere", "cube", "cylinder", "plane"];
pub const JITTER: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Classify4,
    Segment2,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classify4" => Ok(SynthKind::Classify4),
            "segment2" => Ok(SynthKind::Segment2),
            other => Err(Error::invalid(format!("unknown dataset kind {other:?} (classify4 or segment2)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    /// Training shapes per class (per category for segmentation).
    pub train: usize,
    pub test: usize,
    pub points: usize,
    /// Random rotations for `classify4`: full 3-D when true, about z otherwise.
    pub full_rotation: bool,
}

impl SynthOptions {
    pub fn default_for(kind: SynthKind) -> Self {
        match kind {
            SynthKind::Classify4 => SynthOptions {
                train: 100,
                test: 40,
                points: 64,
                full_rotation: false,
            },
            SynthKind::Segment2 => SynthOptions {
                train: 100,
                test: 20,
                points: 128,
                full_rotation: false,
            },
        }
    }
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(-1.0..1.0)
}

/// Uniform point on the unit sphere.
pub fn sphere_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let z = unit(rng);
    let phi = rng.gen_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

/// Uniform point on the surface of `[−1, 1]³`.
pub fn cube_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let face = rng.gen_range(0..6);
    let mut p = [unit(rng), unit(rng), unit(rng)];
    p[face / 2] = if face % 2 == 0 { -1.0 } else { 1.0 };
    p
}

/// Uniform point on a closed cylinder of radius 1 and height 2.
pub fn cylinder_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // lateral area 4π, caps 2π in total
    if rng.gen::<f64>() < 2.0 / 3.0 {
        let phi = rng.gen_range(0.0..2.0 * PI);
        [phi.cos(), phi.sin(), unit(rng)]
    } else {
        let (x, y) = disk_point(rng, 1.0);
        [x, y, if rng.gen::<bool>() { 1.0 } else { -1.0 }]
    }
}

pub fn plane_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [unit(rng), unit(rng), 0.0]
}

fn disk_point(rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
    let r = radius * rng.gen::<f64>().sqrt();
    let phi = rng.gen_range(0.0..2.0 * PI);
    (r * phi.cos(), r * phi.sin())
}

/// Uniform random rotation matrix (row-major), from a random unit quaternion.
pub fn random_rotation(rng: &mut ChaCha8Rng, full: bool) -> [[f64; 3]; 3] {
    if !full {
        let t = rng.gen_range(0.0..2.0 * PI);
        let (s, c) = t.sin_cos();
        return [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
    }
    let (u1, u2, u3) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (
        a * (2.0 * PI * u2).sin(),
        a * (2.0 * PI * u2).cos(),
        b * (2.0 * PI * u3).sin(),
        b * (2.0 * PI * u3).cos(),
    );
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn rotate(m: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2])
}

fn jitter(rng: &mut ChaCha8Rng, p: [f64; 3]) -> [f64; 3] {
    let normal = Normal::new(0.0, JITTER).expect("valid sigma");
    p.map(|v| v + normal.sample(rng))
}

/// One `classify4` cloud of class `class`, before rotation, jitter and normalization.
pub fn classify4_raw(rng: &mut ChaCha8Rng, class: usize, n: usize) -> Vec<[f64; 3]> {
    let f: fn(&mut ChaCha8Rng) -> [f64; 3] = match class {
        0 => sphere_point,
        1 => cube_point,
        2 => cylinder_point,
        _ => plane_point,
    };
    (0..n).map(|_| f(rng)).collect()
}

/// One `classify4` sample: rotated, jittered, normalized to the unit sphere.
pub fn classify4_sample(rng: &mut ChaCha8Rng, class: usize, n: usize, full_rotation: bool) -> Tensor {
    let raw = classify4_raw(rng, class, n);
    let rot = random_rotation(rng, full_rotation);
    let data = raw.into_iter().flat_map(|p| jitter(rng, rotate(&rot, p))).collect();
    normalize_unit_sphere(&Tensor::from_parts(vec![n, 3], data))
}

/// One capped cylinder before jitter and normalization: points and parts
/// (0 side, 1 cap), plus the cap height.
pub fn segment2_raw(rng: &mut ChaCha8Rng, n: usize) -> (Vec<[f64; 3]>, Vec<usize>, f64) {
    let radius = rng.gen_range(0.3..0.6);
    let height = rng.gen_range(1.0..2.0);
    let side = 2.0 * PI * radius * height;
    let cap = PI * radius * radius;
    let top = height / 2.0;
    let mut pts = Vec::with_capacity(n);
    let mut parts = Vec::with_capacity(n);
    for _ in 0..n {
        if rng.gen::<f64>() < side / (side + cap) {
            let phi = rng.gen_range(0.0..2.0 * PI);
            pts.push([radius * phi.cos(), radius * phi.sin(), rng.gen_range(-top..top)]);
            parts.push(0);
        } else {
            let (x, y) = disk_point(rng, radius);
            pts.push([x, y, top]);
            parts.push(1);
        }
    }
    (pts, parts, top)
}

pub fn segment2_sample(rng: &mut ChaCha8Rng, n: usize) -> (Tensor, Vec<usize>) {
    let (pts, parts, _) = segment2_raw(rng, n);
    let data = pts.into_iter().flat_map(|p| jitter(rng, p)).collect();
    (normalize_unit_sphere(&Tensor::from_parts(vec![n, 3], data)), parts)
}

fn write_segment(path: &Path, coords: &Tensor, parts: &[usize]) -> Result<()> {
    let mut s = String::new();
    for (i, p) in parts.iter().enumerate() {
        let r = coords.row(i);
        s.push_str(&format!("{:?} {:?} {:?} {p}\n", r[0], r[1], r[2]));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Writes a dataset under `out` (`manifest.txt`, `train/`, `test/`) and
/// returns its manifest. Output is a pure function of the arguments.
pub fn synth_dataset(kind: SynthKind, opts: SynthOptions, seed: u64, out: &Path) -> Result<Manifest> {
    if opts.train < 2 || opts.points == 0 {
        return Err(Error::invalid("need at least 2 shapes per class and 1 point per shape"));
    }
    for split in ["train", "test"] {
        fs::create_dir_all(out.join(split))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = match kind {
        SynthKind::Classify4 => Task::Classify,
        SynthKind::Segment2 => Task::Segment,
    };
    let mut m = Manifest::new(out, task, opts.points);
    match kind {
        SynthKind::Classify4 => {
            m.labels = CLASSIFY4_CLASSES.iter().map(|s| s.to_string()).collect();
            for (split, count) in [("train", opts.train), ("test", opts.test)] {
                for i in 0..count {
                    for (class, name) in CLASSIFY4_CLASSES.iter().enumerate() {
                        let t = classify4_sample(&mut rng, class, opts.points, opts.full_rotation);
                        let rel = format!("{split}/{name}_{i:03}.bin");
                        save_points(&out.join(&rel), &t, Format::Bin)?;
                        let e = Entry {
                            path: rel.into(),
                            label: class,
                        };
                        if split == "train" { m.train.push(e) } else { m.test.push(e) }
                    }
                }
            }
        }
        SynthKind::Segment2 => {
            m.labels = vec!["capped_cylinder".into()];
            m.part_names = vec!["side".into(), "cap".into()];
            m.parts = vec![vec![0, 1]];
            for (split, count) in [("train", opts.train), ("test", opts.test)] {
                for i in 0..count {
                    let (t, parts) = segment2_sample(&mut rng, opts.points);
                    let rel = format!("{split}/shape_{i:03}.txt");
                    write_segment(&out.join(&rel), &t, &parts)?;
                    let e = Entry {
                        path: rel.into(),
                        label: 0,
                    };
                    if split == "train" { m.train.push(e) } else { m.test.push(e) }
                }
            }
        }
    }
    m.save(&out.join("manifest.txt"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_points_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in classify4_raw(&mut rng, 0, 500) {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for full in [true, false] {
            let r = random_rotation(&mut rng, full);
            for i in 0..3 {
                for j in 0..3 {
                    let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                    assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cap_points_lie_on_cap_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (pts, parts, top) = segment2_raw(&mut rng, 400);
        assert!(parts.contains(&1) && parts.contains(&0));
        for (p, part) in pts.iter().zip(parts) {
            assert_eq!(part == 1, p[2] == top);
        }
    }
}
