//! Point sets and the graphs built over them: k-NN neighborhoods, farthest
//! point sampling, score ranking and radius grouping.
//!
//! All searches are exhaustive O(N²) scans over squared Euclidean distance,
//! with ties broken by the lower node index, so every result is a
//! deterministic function of its inputs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Graph signal: one coordinate row and one feature row per node.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub coords: Tensor,
    pub feats: Tensor,
}

impl PointSet {
    pub fn new(coords: Tensor, feats: Tensor) -> Result<Self> {
        if coords.rank() != 2 || feats.rank() != 2 {
            return Err(Error::shape("point_set", "coords and feats must be matrices"));
        }
        if coords.rows() != feats.rows() {
            return Err(Error::shape(
                "point_set",
                format!("{} coordinate rows vs {} feature rows", coords.rows(), feats.rows()),
            ));
        }
        Ok(PointSet { coords, feats })
    }

    /// Point set whose features are a copy of its coordinates.
    pub fn from_coords(coords: Tensor) -> Result<Self> {
        let feats = coords.clone();
        PointSet::new(coords, feats)
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coord_dim(&self) -> usize {
        self.coords.cols()
    }

    pub fn feat_dim(&self) -> usize {
        self.feats.cols()
    }

    /// Reorders nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        PointSet::new(self.coords.gather_rows(perm)?, self.feats.gather_rows(perm)?)
    }
}

/// Fixed-degree neighbor lists, ordered by ascending distance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    k: usize,
    neighbors: Vec<usize>,
}

impl KnnGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_nodes(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v * self.k..(v + 1) * self.k]
    }

    /// Neighbor indices for all nodes, node-major (`N·k` entries).
    pub fn flat(&self) -> &[usize] {
        &self.neighbors
    }

    /// Target node of every edge, aligned with [`KnnGraph::flat`].
    pub fn targets(&self) -> Vec<usize> {
        (0..self.neighbors.len()).map(|e| e / self.k).collect()
    }

    /// Builds a graph from explicit lists, checking the structural invariants.
    pub fn from_lists(lists: &[Vec<usize>]) -> Result<Self> {
        let n = lists.len();
        let k = lists.first().map(Vec::len).unwrap_or(0);
        if k == 0 {
            return Err(Error::invalid("neighbor lists must be nonempty"));
        }
        for (v, l) in lists.iter().enumerate() {
            if l.len() != k {
                return Err(Error::invalid(format!("node {v} has {} neighbors, expected {k}", l.len())));
            }
            if l.iter().any(|&u| u >= n || u == v) {
                return Err(Error::invalid(format!("node {v} has an invalid neighbor list {l:?}")));
            }
        }
        Ok(KnnGraph {
            k,
            neighbors: lists.concat(),
        })
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_matrix(op: &'static str, coords: &Tensor) -> Result<usize> {
    if coords.rank() != 2 {
        return Err(Error::shape(op, format!("coords must be N×C, got {:?}", coords.shape())));
    }
    Ok(coords.rows())
}

/// k nearest neighbors of every node, self excluded.
pub fn build_knn_graph(coords: &Tensor, k: usize) -> Result<KnnGraph> {
    let n = check_matrix("build_knn_graph", coords)?;
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k must satisfy 1 <= k < N, got k={k}, N={n}")));
    }
    let mut neighbors = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for v in 0..n {
        cand.clear();
        let cv = coords.row(v);
        cand.extend(
            (0..n)
                .filter(|&u| u != v)
                .map(|u| (sq_dist(coords.row(u), cv), u)),
        );
        let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by);
        }
        let head = &mut cand[..k];
        head.sort_unstable_by(by);
        neighbors.extend(head.iter().map(|&(_, u)| u));
    }
    Ok(KnnGraph { k, neighbors })
}

/// Greedy farthest point sampling starting at `seed`.
pub fn fps_select(coords: &Tensor, t: usize, seed: usize) -> Result<Vec<usize>> {
    let n = check_matrix("fps_select", coords)?;
    if t == 0 || t > n {
        return Err(Error::invalid(format!("t must satisfy 1 <= t <= N, got t={t}, N={n}")));
    }
    if seed >= n {
        return Err(Error::invalid(format!("seed index {seed} out of range for N={n}")));
    }
    let mut picked = Vec::with_capacity(t);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = seed;
    for _ in 0..t {
        picked.push(current);
        min_d[current] = f64::NEG_INFINITY;
        let cc = coords.row(current);
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for u in 0..n {
            if min_d[u] == f64::NEG_INFINITY {
                continue;
            }
            let d = sq_dist(coords.row(u), cc);
            if d < min_d[u] {
                min_d[u] = d;
            }
            if min_d[u] > best_d {
                best_d = min_d[u];
                best = u;
            }
        }
        current = best;
    }
    Ok(picked)
}

/// Node farthest from the centroid (lowest index on ties). Unlike a fixed
/// index, this seed does not depend on node order.
pub fn farthest_from_centroid(coords: &Tensor) -> Result<usize> {
    let n = check_matrix("farthest_from_centroid", coords)?;
    let c = coords.cols();
    let mut mean = vec![0.0; c];
    for v in 0..n {
        for (m, x) in mean.iter_mut().zip(coords.row(v)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for v in 0..n {
        let d = sq_dist(coords.row(v), &mean);
        if d > best_d {
            best_d = d;
            best = v;
        }
    }
    Ok(best)
}

/// Indices of the `t` largest scores in descending order.
pub fn rank_topk(scores: &[f64], t: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if t == 0 || t > n {
        return Err(Error::invalid(format!("t must satisfy 1 <= t <= N, got t={t}, N={n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(t);
    Ok(idx)
}

/// Radius grouping around each centroid: the centroid first, then up to
/// `cap − 1` other nodes within `radius` by ascending distance, padded to
/// `cap` entries by repeating the centroid.
pub fn ball_query(
    coords: &Tensor,
    centroids: &[usize],
    radius: f64,
    cap: usize,
) -> Result<Vec<Vec<usize>>> {
    let n = check_matrix("ball_query", coords)?;
    if !(radius > 0.0) || cap == 0 {
        return Err(Error::invalid(format!("need radius > 0 and cap >= 1, got {radius}, {cap}")));
    }
    let r2 = radius * radius;
    let mut groups = Vec::with_capacity(centroids.len());
    for &c in centroids {
        if c >= n {
            return Err(Error::invalid(format!("centroid {c} out of range for N={n}")));
        }
        let cc = coords.row(c);
        let mut inside: Vec<(f64, usize)> = (0..n)
            .filter(|&u| u != c)
            .map(|u| (sq_dist(coords.row(u), cc), u))
            .filter(|&(d, _)| d <= r2)
            .collect();
        inside.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut g = Vec::with_capacity(cap);
        g.push(c);
        g.extend(inside.iter().take(cap - 1).map(|&(_, u)| u));
        g.resize(cap, c);
        groups.push(g);
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn knn_small_cases() {
        let g = build_knn_graph(&pts(&[&[0.0], &[1.0]]), 1).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
        let same = pts(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let g = build_knn_graph(&same, 2).unwrap();
        assert_eq!(g.neighbors(0), &[1, 2]);
        assert_eq!(g.neighbors(2), &[0, 1]);
        assert!(build_knn_graph(&same, 3).is_err());
        assert!(build_knn_graph(&same, 0).is_err());
    }

    #[test]
    fn fps_small_cases() {
        let line = pts(&[&[0.0], &[1.0], &[10.0]]);
        assert_eq!(fps_select(&line, 2, 0).unwrap(), vec![0, 2]);
        let mut all = fps_select(&line, 3, 1).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(fps_select(&line, 4, 0).is_err());
        assert!(fps_select(&line, 1, 3).is_err());
        // duplicates still yield distinct indices
        let dup = pts(&[&[0.0], &[0.0], &[0.0]]);
        assert_eq!(fps_select(&dup, 3, 0).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn topk_cases() {
        assert_eq!(rank_topk(&[0.5; 5], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(rank_topk(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert!(rank_topk(&[0.1], 2).is_err());
    }

    #[test]
    fn ball_query_cases() {
        let p = pts(&[&[0.0], &[0.5], &[0.2], &[5.0]]);
        let g = ball_query(&p, &[0], 100.0, 4).unwrap();
        assert_eq!(g[0], vec![0, 2, 1, 3]);
        let g = ball_query(&p, &[3], 1.0, 3).unwrap();
        assert_eq!(g[0], vec![3, 3, 3]);
        let g = ball_query(&p, &[0], 0.3, 4).unwrap();
        assert_eq!(g[0], vec![0, 2, 0, 0]);
        assert!(ball_query(&p, &[0], 0.0, 1).is_err());
    }

    #[test]
    fn centroid_seed_picks_outlier() {
        let p = pts(&[&[0.0], &[0.1], &[-0.1], &[3.0]]);
        assert_eq!(farthest_from_centroid(&p).unwrap(), 3);
    }
}
