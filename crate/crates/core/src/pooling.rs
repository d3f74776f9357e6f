//! Resolution changes: score-based and FPS-based graph pooling, feature
//! propagation (upsampling) and multi-scale set abstraction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{ball_query, farthest_from_centroid, fps_select, rank_topk, sq_dist};
use crate::layer::{SfagcConfig, SfagcLayer};
use crate::nn::{Ctx, Linear, DEFAULT_SLOPE};
use crate::params::ParamStore;
use crate::tape::{ParamId, Var};
use crate::tensor::Tensor;

/// How farthest point sampling picks its first node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FpsSeed {
    /// A fixed node index.
    Index(usize),
    /// The node farthest from the centroid; independent of node order.
    #[default]
    FarthestFromCentroid,
}

impl FpsSeed {
    pub fn resolve(self, coords: &Tensor) -> Result<usize> {
        match self {
            FpsSeed::Index(i) => Ok(i),
            FpsSeed::FarthestFromCentroid => farthest_from_centroid(coords),
        }
    }
}

/// Output of a pooling layer on the tape.
#[derive(Clone, Debug)]
pub struct Pooled {
    pub coords: Var,
    pub feats: Var,
    /// Selected node indices into the layer's input, in selection order.
    pub idx: Vec<usize>,
}

/// `score_v = softmax_v(W_1·h_v)` over all nodes, as an `[N×1]` column.
pub fn node_scores(ctx: &mut Ctx, feats: Var, scorer: &Linear) -> Result<Var> {
    let n = ctx.tape.shape(feats)[0];
    let raw = scorer.forward(ctx, feats)?;
    let row = ctx.tape.reshape(raw, &[1, n])?;
    let soft = ctx.tape.softmax_rows(row, 1.0)?;
    ctx.tape.reshape(soft, &[n, 1])
}

/// Three-branch pooling: score ranking picks `t` nodes, the integration
/// branch scales features by their score, and an SFAGC branch transforms
/// the full graph; the selected rows of both are merged by `W_pl`.
#[derive(Clone, Debug)]
pub struct ScorePool {
    pub t: usize,
    pub scorer: Linear,
    pub merge: Linear,
    pub sfagc: SfagcLayer,
}

impl ScorePool {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, sfagc: SfagcConfig, t: usize, rng: &mut R) -> Result<Self> {
        if t == 0 {
            return Err(Error::Config("pooling size t must be positive".into()));
        }
        let d = sfagc.feat_in;
        let out = sfagc.feat_out;
        let bias = sfagc.bias;
        let scorer = Linear::new(store, &format!("{prefix}.W_1"), 1, d, bias, rng)?;
        let merge = Linear::new(store, &format!("{prefix}.W_pl"), out, d + out, bias, rng)?;
        let sfagc = SfagcLayer::new(store, prefix, sfagc, rng)?;
        Ok(ScorePool {
            t,
            scorer,
            merge,
            sfagc,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, coords: Var, feats: Var) -> Result<Pooled> {
        let n = ctx.tape.shape(feats)[0];
        if self.t > n {
            return Err(Error::invalid(format!("cannot keep t={} of {n} nodes", self.t)));
        }
        let scores = node_scores(ctx, feats, &self.scorer)?;
        let idx = rank_topk(ctx.value(scores).data(), self.t)?;
        let integrated = ctx.tape.mul_rows(feats, scores)?;
        let branch = self.sfagc.forward(ctx, coords, feats)?;
        let a = ctx.tape.gather(integrated, &idx)?;
        let b = ctx.tape.gather(branch.feats, &idx)?;
        let joined = ctx.tape.concat(&[a, b], 1)?;
        let feats = self.merge.forward_act(ctx, joined, self.sfagc.config.slope)?;
        let coords = ctx.tape.gather(branch.coords, &idx)?;
        Ok(Pooled { coords, feats, idx })
    }

    pub fn named_params(&self) -> Vec<(String, ParamId)> {
        let mut out = vec![
            ("W_1".to_string(), self.scorer.weight),
            ("W_pl".to_string(), self.merge.weight),
        ];
        out.extend(self.sfagc.named_params().into_iter().map(|(n, id)| (n.to_string(), id)));
        out
    }
}

/// Two-branch pooling: FPS on the input coordinates picks `t` nodes, whose
/// rows are taken from the SFAGC branch output.
#[derive(Clone, Debug)]
pub struct FpsPool {
    pub t: usize,
    pub seed: FpsSeed,
    pub sfagc: SfagcLayer,
}

impl FpsPool {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        sfagc: SfagcConfig,
        t: usize,
        seed: FpsSeed,
        rng: &mut R,
    ) -> Result<Self> {
        if t == 0 {
            return Err(Error::Config("pooling size t must be positive".into()));
        }
        Ok(FpsPool {
            t,
            seed,
            sfagc: SfagcLayer::new(store, prefix, sfagc, rng)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, coords: Var, feats: Var) -> Result<Pooled> {
        let n = ctx.tape.shape(coords)[0];
        if self.t > n {
            return Err(Error::invalid(format!("cannot keep t={} of {n} nodes", self.t)));
        }
        let seed = self.seed.resolve(ctx.value(coords))?;
        let idx = fps_select(ctx.value(coords), self.t, seed)?;
        let branch = self.sfagc.forward(ctx, coords, feats)?;
        let feats = ctx.tape.gather(branch.feats, &idx)?;
        let coords = ctx.tape.gather(branch.coords, &idx)?;
        Ok(Pooled { coords, feats, idx })
    }
}

/// Inverse-distance interpolation weights from `src` to each `dst` point:
/// `neighbors` nearest sources, weight ∝ 1/d^power, normalized to 1. A
/// destination closer than 1e-10 to a source copies it.
///
/// Returns `(source indices, weights)`, both `[M·m]` with `m = min(neighbors, S)`.
pub fn interpolation_weights(src: &Tensor, dst: &Tensor, neighbors: usize, power: f64) -> Result<(Vec<usize>, Vec<f64>, usize)> {
    if src.rows() == 0 {
        return Err(Error::invalid("feature propagation needs at least one source point"));
    }
    if src.cols() != dst.cols() {
        return Err(Error::shape("feature_propagation", format!("{:?} vs {:?}", src.shape(), dst.shape())));
    }
    let m = neighbors.min(src.rows()).max(1);
    let mut idx = Vec::with_capacity(dst.rows() * m);
    let mut w = Vec::with_capacity(dst.rows() * m);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(src.rows());
    for i in 0..dst.rows() {
        cand.clear();
        cand.extend((0..src.rows()).map(|s| (sq_dist(src.row(s), dst.row(i)), s)));
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let near = &cand[..m];
        if near[0].0.sqrt() < 1e-10 {
            for (j, &(_, s)) in near.iter().enumerate() {
                idx.push(s);
                w.push(if j == 0 { 1.0 } else { 0.0 });
            }
            continue;
        }
        let raw: Vec<f64> = near.iter().map(|(d2, _)| 1.0 / d2.sqrt().powf(power)).collect();
        let total: f64 = raw.iter().sum();
        for (&(_, s), r) in near.iter().zip(raw) {
            idx.push(s);
            w.push(r / total);
        }
    }
    Ok((idx, w, m))
}

/// Upsampling by interpolation, optional skip concatenation and a per-point map.
#[derive(Clone, Debug)]
pub struct FeaturePropagation {
    pub layers: Vec<Linear>,
    pub neighbors: usize,
    pub power: f64,
    pub slope: f64,
}

impl FeaturePropagation {
    /// `widths = [in, hidden.., out]`; `in` counts interpolated plus skip channels.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, widths: &[usize], bias: bool, rng: &mut R) -> Result<Self> {
        Ok(FeaturePropagation {
            layers: mlp(store, prefix, widths, bias, rng)?,
            neighbors: 3,
            power: 2.0,
            slope: DEFAULT_SLOPE,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    /// Interpolates `src_feats` (rows aligned with `src_xyz`) onto `dst_xyz`.
    /// The weights depend only on the fixed positions and carry no gradient.
    pub fn interpolate(&self, ctx: &mut Ctx, src_xyz: &Tensor, src_feats: Var, dst_xyz: &Tensor) -> Result<Var> {
        let (idx, w, m) = interpolation_weights(src_xyz, dst_xyz, self.neighbors, self.power)?;
        let gathered = ctx.tape.gather(src_feats, &idx)?;
        let weights = ctx.constant(Tensor::from_parts(vec![w.len(), 1], w));
        let weighted = ctx.tape.mul_rows(gathered, weights)?;
        ctx.tape.group_sum(weighted, m)
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        src_xyz: &Tensor,
        src_feats: Var,
        dst_xyz: &Tensor,
        skip: Option<Var>,
    ) -> Result<Var> {
        let mut x = self.interpolate(ctx, src_xyz, src_feats, dst_xyz)?;
        if let Some(s) = skip {
            x = ctx.tape.concat(&[x, s], 1)?;
        }
        for l in &self.layers {
            x = l.forward_act(ctx, x, self.slope)?;
        }
        Ok(x)
    }
}

/// One radius scale of a set-abstraction layer.
#[derive(Clone, Debug)]
pub struct SaScale {
    pub radius: f64,
    pub group: usize,
    pub layers: Vec<Linear>,
}

/// Multi-scale grouping: FPS centroids, ball-query groups per scale, a
/// shared per-point map on centroid-relative offsets, channel-wise max.
#[derive(Clone, Debug)]
pub struct SetAbstraction {
    pub samples: usize,
    pub seed: FpsSeed,
    pub scales: Vec<SaScale>,
    pub slope: f64,
}

impl SetAbstraction {
    /// Each scale is `(radius, group size, widths)` with `widths[0]` equal to
    /// the coordinate dimension.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        samples: usize,
        scales: &[(f64, usize, Vec<usize>)],
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if samples == 0 || scales.is_empty() {
            return Err(Error::Config("set abstraction needs samples >= 1 and one scale".into()));
        }
        let mut out = Vec::new();
        for (i, (radius, group, widths)) in scales.iter().enumerate() {
            if !(*radius > 0.0) || *group == 0 {
                return Err(Error::Config(format!("bad set abstraction scale {i}: r={radius}, D={group}")));
            }
            out.push(SaScale {
                radius: *radius,
                group: *group,
                layers: mlp(store, &format!("{prefix}.s{i}"), widths, bias, rng)?,
            });
        }
        Ok(SetAbstraction {
            samples,
            seed: FpsSeed::FarthestFromCentroid,
            scales: out,
            slope: DEFAULT_SLOPE,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.scales
            .iter()
            .map(|s| s.layers.last().map(|l| l.out_dim).unwrap_or(0))
            .sum()
    }

    pub fn in_dim(&self) -> usize {
        self.scales[0].layers.first().map(|l| l.in_dim).unwrap_or(0)
    }

    /// Returns the `[S×Σout]` features and the centroid indices into `xyz`.
    pub fn forward(&self, ctx: &mut Ctx, xyz: &Tensor) -> Result<(Var, Vec<usize>)> {
        let n = xyz.rows();
        if self.samples > n {
            return Err(Error::invalid(format!("cannot sample S={} of {n} points", self.samples)));
        }
        let seed = self.seed.resolve(xyz)?;
        let centroids = fps_select(xyz, self.samples, seed)?;
        let c = xyz.cols();
        let mut outs = Vec::with_capacity(self.scales.len());
        for scale in &self.scales {
            let groups = ball_query(xyz, &centroids, scale.radius, scale.group)?;
            let mut rel = Vec::with_capacity(centroids.len() * scale.group * c);
            for (g, &ci) in groups.iter().zip(&centroids) {
                for &u in g {
                    rel.extend(xyz.row(u).iter().zip(xyz.row(ci)).map(|(a, b)| a - b));
                }
            }
            let mut x = ctx.constant(Tensor::new(vec![centroids.len() * scale.group, c], rel)?);
            for l in &scale.layers {
                x = l.forward_act(ctx, x, self.slope)?;
            }
            outs.push(ctx.tape.group_max(x, scale.group)?);
        }
        let feats = if outs.len() == 1 { outs[0] } else { ctx.tape.concat(&outs, 1)? };
        Ok((feats, centroids))
    }
}

fn mlp<R: Rng>(store: &mut ParamStore, prefix: &str, widths: &[usize], bias: bool, rng: &mut R) -> Result<Vec<Linear>> {
    if widths.len() < 2 {
        return Err(Error::Config(format!("{prefix}: map needs at least [in, out] widths")));
    }
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| Linear::new(store, &format!("{prefix}.W_{i}"), w[1], w[0], bias, rng))
        .collect()
}
