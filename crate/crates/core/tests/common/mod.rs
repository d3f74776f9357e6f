//! Brute-force oracles and random instances shared by the test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfagc::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Coordinates on a small integer grid, so distance ties are common.
pub fn grid_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-3..=3) as f64).collect()).unwrap()
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Full sort of all other nodes by (distance, index).
pub fn knn_oracle(coords: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let pts = rows(coords);
    (0..pts.len())
        .map(|v| {
            let mut all: Vec<(f64, usize)> = (0..pts.len())
                .filter(|&u| u != v)
                .map(|u| (euclid(&pts[u], &pts[v]), u))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            all.into_iter().take(k).map(|(_, u)| u).collect()
        })
        .collect()
}

/// Greedy FPS recomputing every candidate's distance to the whole picked set.
pub fn fps_oracle(coords: &Tensor, t: usize, seed: usize) -> Vec<usize> {
    let pts = rows(coords);
    let mut picked = vec![seed];
    while picked.len() < t {
        let mut best: Option<(f64, usize)> = None;
        for u in 0..pts.len() {
            if picked.contains(&u) {
                continue;
            }
            let d = picked
                .iter()
                .map(|&p| euclid(&pts[u], &pts[p]))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, u));
            }
        }
        picked.push(best.unwrap().1);
    }
    picked
}

/// Repeated selection of the largest remaining score (lowest index on ties).
pub fn topk_oracle(scores: &[f64], t: usize) -> Vec<usize> {
    let mut picked = Vec::new();
    while picked.len() < t {
        let mut best = None;
        for (i, &s) in scores.iter().enumerate() {
            if !picked.contains(&i) && best.is_none_or(|b: usize| s > scores[b]) {
                best = Some(i);
            }
        }
        picked.push(best.unwrap());
    }
    picked
}

/// Every node within `radius` (inclusive), centroid first, then by
/// (distance, index), truncated or padded with the centroid to `cap`.
pub fn ball_oracle(coords: &Tensor, centroids: &[usize], radius: f64, cap: usize) -> Vec<Vec<usize>> {
    let pts = rows(coords);
    centroids
        .iter()
        .map(|&c| {
            let mut near: Vec<(f64, usize)> = Vec::new();
            for u in 0..pts.len() {
                let d2: f64 = pts[u].iter().zip(&pts[c]).map(|(a, b)| (a - b) * (a - b)).sum();
                if u != c && d2 <= radius * radius {
                    near.push((d2, u));
                }
            }
            near.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut g = vec![c];
            for (_, u) in near {
                if g.len() < cap {
                    g.push(u);
                }
            }
            while g.len() < cap {
                g.push(c);
            }
            g
        })
        .collect()
}

/// True when no node has two candidates at equal distance, so k-NN
/// neighbor order is unambiguous.
pub fn tie_free(coords: &Tensor) -> bool {
    let pts = rows(coords);
    for v in 0..pts.len() {
        let mut d: Vec<f64> = (0..pts.len()).filter(|&u| u != v).map(|u| euclid(&pts[u], &pts[v])).collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if d.windows(2).any(|w| (w[1] - w[0]).abs() < 1e-9) {
            return false;
        }
    }
    true
}

pub fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Row `i` of the result is row `perm[i]` of `t`.
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    t.gather_rows(perm).unwrap()
}

pub const VARIANTS: [&str; 5] = ["full", "nS", "nP", "ndot", "nsub"];

/// A randomly sized layer with its store; widths stay small.
pub fn random_layer(
    rng: &mut ChaCha8Rng,
    n: usize,
    variant: &str,
) -> (sfagc::params::ParamStore, sfagc::layer::SfagcLayer, Tensor, Tensor) {
    use sfagc::layer::{Ablation, CoordUpdate, SfagcConfig, SfagcLayer};
    let c = rng.gen_range(1..4);
    let d = rng.gen_range(1..5);
    let f = rng.gen_range(1..7);
    let k = rng.gen_range(1..n);
    let update = if rng.gen_bool(0.5) { CoordUpdate::Identity } else { CoordUpdate::Mlp(rng.gen_range(1..5)) };
    let mut cfg = SfagcConfig::new(c, d, update, f, k);
    cfg.att_dim = rng.gen_range(1..6);
    cfg.head_dim = rng.gen_range(1..6);
    cfg.hidden = rng.gen_range(1..6);
    cfg.ablation = Ablation::variant(variant).unwrap();
    let mut store = sfagc::params::ParamStore::new();
    let layer = SfagcLayer::new(&mut store, "l", cfg, rng).unwrap();
    let coords = rand_tensor(rng, &[n, c]);
    let feats = rand_tensor(rng, &[n, d]);
    (store, layer, coords, feats)
}

pub fn max_row_diff(t: &Tensor, rows: &[Vec<f64>]) -> f64 {
    let mut m: f64 = 0.0;
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(t.row(i).len(), r.len());
        for (a, b) in t.row(i).iter().zip(r) {
            m = m.max((a - b).abs());
        }
    }
    m
}

/// `Σ R⊙x` with a fixed random `R`, a scalar that touches every entry.
pub fn probe(ctx: &mut sfagc::nn::Ctx, x: sfagc::tape::Var, seed: u64) -> sfagc::tape::Var {
    let shape = ctx.value(x).shape().to_vec();
    let r = rand_tensor(&mut rng(seed), &shape);
    let r = ctx.constant(r);
    let y = ctx.tape.mul(x, r).unwrap();
    ctx.tape.sum(y).unwrap()
}
