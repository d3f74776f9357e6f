//! OFF triangle meshes and area-weighted surface sampling.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::PointSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    /// Triangles; polygons are fan-triangulated.
    pub faces: Vec<[usize; 3]>,
}

/// Parses OFF text. Also accepts the header fused with the counts (`OFF8 6 0`).
pub fn parse_off(text: &str, source: &str) -> Result<Mesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let err = |line: usize, m: String| Error::parse(source, format!("line {line}: {m}"));
    let (hl, header) = lines.next().ok_or_else(|| Error::parse(source, "empty file"))?;
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| err(hl, "missing OFF header".into()))?
        .trim();
    let (cl, counts) = if rest.is_empty() {
        lines.next().ok_or_else(|| err(hl, "missing counts".into()))?
    } else {
        (hl, rest)
    };
    let nums: Vec<usize> = counts
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| err(cl, format!("bad count {t:?}"))))
        .collect::<Result<_>>()?;
    if nums.len() < 2 {
        return Err(err(cl, "expected vertex and face counts".into()));
    }
    let (nv, nf) = (nums[0], nums[1]);
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (l, s) = lines.next().ok_or_else(|| Error::parse(source, "unexpected end of vertices"))?;
        let v: Vec<f64> = s
            .split_whitespace()
            .take(3)
            .map(|t| t.parse().map_err(|_| err(l, format!("bad coordinate {t:?}"))))
            .collect::<Result<_>>()?;
        if v.len() != 3 || v.iter().any(|x| !x.is_finite()) {
            return Err(err(l, "vertex needs three finite coordinates".into()));
        }
        vertices.push([v[0], v[1], v[2]]);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (l, s) = lines.next().ok_or_else(|| Error::parse(source, "unexpected end of faces"))?;
        let f: Vec<usize> = s
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err(l, format!("bad index {t:?}"))))
            .collect::<Result<_>>()?;
        let (&k, idx) = f.split_first().ok_or_else(|| err(l, "empty face".into()))?;
        if k < 3 || idx.len() < k {
            return Err(err(l, format!("face declares {k} vertices, has {}", idx.len())));
        }
        if let Some(bad) = idx[..k].iter().find(|&&i| i >= nv) {
            return Err(err(l, format!("vertex index {bad} out of range")));
        }
        for j in 1..k - 1 {
            faces.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok(Mesh { vertices, faces })
}

pub fn load_off(path: &Path) -> Result<Mesh> {
    parse_off(&fs::read_to_string(path)?, &path.display().to_string())
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let (u, v) = (sub(b, a), sub(c, a));
    let x = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    0.5 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

/// `n` points with probability proportional to triangle area, uniform
/// within each triangle.
pub fn sample_mesh(mesh: &Mesh, n: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in &mesh.faces {
        total += triangle_area(mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::invalid("mesh has zero surface area"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let r = rng.gen::<f64>() * total;
        let i = cumulative.partition_point(|&c| c <= r).min(mesh.faces.len() - 1);
        let [a, b, c] = mesh.faces[i].map(|v| mesh.vertices[v]);
        let (mut s, mut t) = (rng.gen::<f64>(), rng.gen::<f64>());
        if s + t > 1.0 {
            s = 1.0 - s;
            t = 1.0 - t;
        }
        for d in 0..3 {
            out.push(a[d] + s * (b[d] - a[d]) + t * (c[d] - a[d]));
        }
    }
    Tensor::new(vec![n, 3], out)
}

pub fn sample_off_mesh(path: &Path, n: usize, seed: u64) -> Result<PointSet> {
    PointSet::from_coords(sample_mesh(&load_off(path)?, n, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_quads_and_fused_header() {
        let m = parse_off("OFF4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n", "m").unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
        assert!(parse_off("PLY\n", "m").is_err());
        assert!(parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 5\n", "m").is_err());
    }

    #[test]
    fn zero_area_is_rejected() {
        let m = parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n2 0 0\n3 0 1 2\n", "m").unwrap();
        assert!(sample_mesh(&m, 4, 0).is_err());
    }
}
