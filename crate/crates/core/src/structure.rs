//! Local structure features and projection aggregation.
//!
//! Per edge `u → v` of the k-NN graph:
//!
//! * structure vector `sv = co_u − co_v`
//! * base vector `sv_b = mean_u σ(W_b·sv)` (one per target node)
//! * feature angle `fa = cos(sv, sv_b)`, 0 when either vector is degenerate
//! * feature distance `fd = |co_u − co_v|` elementwise
//! * relational embedding `re = σ(W_re·sv)`
//! * encoding `s = cat(fd, re, σ(W_se·cat(fd, re)))`
//!
//! and per node `af_v = Σ_u fa·s`, fused as `h′_v = σ(W_s·cat(h_v, af_v))`.
//!
//! The free functions evaluate one node or edge directly; [`StructureParams`]
//! runs the same computation for a whole graph on the tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::KnnGraph;
use crate::nn::{Ctx, Linear};
use crate::params::ParamStore;
use crate::tape::{cosine, Var};
use crate::tensor::Tensor;

pub(crate) fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// `σ(W·x)` for a single vector, `W` stored `[out×in]`.
pub fn act_matvec(w: &Tensor, x: &[f64], slope: f64) -> Result<Vec<f64>> {
    Ok(matvec(w, x)?.into_iter().map(|v| leaky(v, slope)).collect())
}

pub fn matvec(w: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    if w.rank() != 2 || w.shape()[1] != x.len() {
        return Err(Error::shape(
            "matvec",
            format!("weight {:?} with vector of {}", w.shape(), x.len()),
        ));
    }
    Ok((0..w.shape()[0])
        .map(|o| w.row(o).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect())
}

pub fn structure_vector(co_u: &[f64], co_v: &[f64]) -> Result<Vec<f64>> {
    if co_u.len() != co_v.len() {
        return Err(Error::shape("structure_vector", format!("{} vs {}", co_u.len(), co_v.len())));
    }
    Ok(co_u.iter().zip(co_v).map(|(a, b)| a - b).collect())
}

/// Structure vectors `co_u − co_v` for every edge, edge-major `[N·k × C]`.
pub fn structure_vectors(coords: &Tensor, graph: &KnnGraph) -> Result<Tensor> {
    let c = coords.cols();
    let mut out = Vec::with_capacity(graph.flat().len() * c);
    for (e, &u) in graph.flat().iter().enumerate() {
        let v = e / graph.k();
        out.extend(structure_vector(coords.row(u), coords.row(v))?);
    }
    Tensor::new(vec![graph.flat().len(), c], out)
}

pub fn base_structure_vector(svs: &[Vec<f64>], w_b: &Tensor, slope: f64) -> Result<Vec<f64>> {
    if svs.is_empty() {
        return Err(Error::invalid("base structure vector of an empty neighborhood"));
    }
    let mut acc = vec![0.0; w_b.shape()[0]];
    for sv in svs {
        for (a, x) in acc.iter_mut().zip(act_matvec(w_b, sv, slope)?) {
            *a += x;
        }
    }
    acc.iter_mut().for_each(|a| *a /= svs.len() as f64);
    Ok(acc)
}

/// Cosine between a structure vector and the base vector, in `[−1, 1]`.
pub fn feature_angle(sv: &[f64], sv_b: &[f64]) -> f64 {
    cosine(sv, sv_b)
}

pub fn feature_distance(co_u: &[f64], co_v: &[f64]) -> Result<Vec<f64>> {
    if co_u.len() != co_v.len() {
        return Err(Error::shape("feature_distance", format!("{} vs {}", co_u.len(), co_v.len())));
    }
    Ok(co_u.iter().zip(co_v).map(|(a, b)| (a - b).abs()).collect())
}

pub fn relational_embedding(sv: &[f64], w_re: &Tensor, slope: f64) -> Result<Vec<f64>> {
    act_matvec(w_re, sv, slope)
}

pub fn structure_encoding(fd: &[f64], re: &[f64], w_se: &Tensor, slope: f64) -> Result<Vec<f64>> {
    let joined: Vec<f64> = fd.iter().chain(re).copied().collect();
    let enc = act_matvec(w_se, &joined, slope)?;
    Ok(joined.into_iter().chain(enc).collect())
}

/// `Σ fa_u · s_u` over a neighborhood.
pub fn projection_aggregate(fa: &[f64], s: &[Vec<f64>]) -> Result<Vec<f64>> {
    if fa.len() != s.len() || s.is_empty() {
        return Err(Error::shape("projection_aggregate", format!("{} angles, {} encodings", fa.len(), s.len())));
    }
    let mut af = vec![0.0; s[0].len()];
    for (f, row) in fa.iter().zip(s) {
        if row.len() != af.len() {
            return Err(Error::shape("projection_aggregate", "ragged encodings"));
        }
        for (a, x) in af.iter_mut().zip(row) {
            *a += f * x;
        }
    }
    Ok(af)
}

pub fn fuse_structure(h: &[f64], af: &[f64], w_s: &Tensor, slope: f64) -> Result<Vec<f64>> {
    let joined: Vec<f64> = h.iter().chain(af).copied().collect();
    act_matvec(w_s, &joined, slope)
}

/// Learnable maps of the structure pass.
#[derive(Clone, Debug)]
pub struct StructureParams {
    pub base: Linear,
    pub relational: Linear,
    pub encode: Linear,
    pub fuse: Linear,
}

/// Edge- and node-level intermediates of one structure pass.
#[derive(Clone, Copy, Debug)]
pub struct StructureTrace {
    /// `[E×C]` structure vectors.
    pub sv: Var,
    /// `[E×1]` feature angles.
    pub fa: Var,
    /// `[E×C]` feature distances.
    pub fd: Var,
    /// `[E×S]` structure encodings.
    pub s: Var,
    /// `[N×S]` aggregated structure.
    pub af: Var,
    /// `[N×F]` fused features.
    pub fused: Var,
}

impl StructureParams {
    /// `re_dim` and `se_dim` are the output widths of the relational and
    /// structure-encoding maps; `hidden` is the width of the fused features.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        coord_dim: usize,
        feat_dim: usize,
        re_dim: usize,
        se_dim: usize,
        hidden: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let base = Linear::new(store, &format!("{prefix}.W_b"), coord_dim, coord_dim, bias, rng)?;
        let relational = Linear::new(store, &format!("{prefix}.W_re"), re_dim, coord_dim, bias, rng)?;
        let encode = Linear::new(store, &format!("{prefix}.W_se"), se_dim, coord_dim + re_dim, bias, rng)?;
        let s_dim = coord_dim + re_dim + se_dim;
        let fuse = Linear::new(store, &format!("{prefix}.W_s"), hidden, feat_dim + s_dim, bias, rng)?;
        Ok(StructureParams {
            base,
            relational,
            encode,
            fuse,
        })
    }

    pub fn encoding_dim(&self) -> usize {
        self.encode.in_dim + self.encode.out_dim
    }

    /// Structure pass over all nodes. `sv` holds the `[E×C]` edge offsets
    /// (edge `e` targets node `e / k`), `feats` the `[N×D]` node features.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        sv: Var,
        feats: Var,
        k: usize,
        targets: &[usize],
        slope: f64,
    ) -> Result<StructureTrace> {
        let mapped = self.base.forward_act(ctx, sv, slope)?;
        let base_node = ctx.tape.group_mean(mapped, k)?;
        let base_edge = ctx.tape.gather(base_node, targets)?;
        let fa = ctx.tape.row_cosine(sv, base_edge)?;
        let fd = ctx.tape.abs(sv)?;
        let re = self.relational.forward_act(ctx, sv, slope)?;
        let joined = ctx.tape.concat(&[fd, re], 1)?;
        let enc = self.encode.forward_act(ctx, joined, slope)?;
        let s = ctx.tape.concat(&[joined, enc], 1)?;
        let projected = ctx.tape.mul_rows(s, fa)?;
        let af = ctx.tape.group_sum(projected, k)?;
        let cat = ctx.tape.concat(&[feats, af], 1)?;
        let fused = self.fuse.forward_act(ctx, cat, slope)?;
        Ok(StructureTrace {
            sv,
            fa,
            fd,
            s,
            af,
            fused,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structure_vector_examples() {
        assert_eq!(structure_vector(&[1., 2., 3.], &[0., 0., 4.]).unwrap(), vec![1., 2., -1.]);
        assert_eq!(structure_vector(&[1., 1.], &[1., 1.]).unwrap(), vec![0., 0.]);
        let a = structure_vector(&[0.3, -2.0], &[1.5, 0.25]).unwrap();
        let b = structure_vector(&[1.5, 0.25], &[0.3, -2.0]).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| *x == -*y));
    }

    #[test]
    fn feature_angle_examples() {
        let v = [0.3, -1.0, 2.0];
        assert!((feature_angle(&v, &v) - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((feature_angle(&neg, &v) + 1.0).abs() < 1e-15);
        assert_eq!(feature_angle(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
        assert_eq!(feature_angle(&[0.0, 0.0, 0.0], &v), 0.0);
    }

    #[test]
    fn feature_distance_examples() {
        assert_eq!(feature_distance(&[1., 2., 3.], &[0., 0., 4.]).unwrap(), vec![1., 2., 1.]);
        assert_eq!(feature_distance(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), vec![0., 0.]);
        assert_eq!(
            feature_distance(&[0.1, -3.0], &[2.0, 1.0]).unwrap(),
            feature_distance(&[2.0, 1.0], &[0.1, -3.0]).unwrap()
        );
        assert!(feature_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn relational_embedding_examples() {
        let w = Tensor::identity(2);
        assert_eq!(relational_embedding(&[0.0, 0.0], &w, 0.2).unwrap(), vec![0.0, 0.0]);
        assert_eq!(relational_embedding(&[-1.0, 2.0], &w, 0.2).unwrap(), vec![-0.2, 2.0]);
    }

    #[test]
    fn encoding_width_and_zero_case() {
        let w_se = Tensor::filled(&[4, 5], 0.3);
        let s = structure_encoding(&[0.0; 3], &[0.0; 2], &w_se, 0.2).unwrap();
        assert_eq!(s, vec![0.0; 9]);
        let s = structure_encoding(&[1.0, 0.0, 2.0], &[0.5, -1.0], &w_se, 0.2).unwrap();
        assert_eq!(s.len(), 3 + 2 + 4);
        // σ(0.3·(1+0+2+0.5−1)) = 0.75
        assert!((s[5] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let s = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(projection_aggregate(&[0.0, 0.0], &s).unwrap(), vec![0.0, 0.0]);
        assert_eq!(projection_aggregate(&[1.0], &s[..1]).unwrap(), vec![1.0, 2.0]);
        assert!(projection_aggregate(&[], &[]).is_err());
    }

    #[test]
    fn base_vector_single_and_identical() {
        let w = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let sv = vec![0.3, 0.9];
        let single = base_structure_vector(std::slice::from_ref(&sv), &w, 0.2).unwrap();
        assert_eq!(single, act_matvec(&w, &sv, 0.2).unwrap());
        let many = base_structure_vector(&[sv.clone(), sv.clone(), sv.clone()], &w, 0.2).unwrap();
        assert!(many.iter().zip(&single).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(base_structure_vector(&[], &w, 0.2).is_err());
    }
}
