//! The SFAGC graph convolution.
//!
//! One call builds a k-NN graph on the current coordinates, runs the
//! structure pass to get fused features `h′`, then the attention pass:
//!
//! ```text
//! p_u    = W_P2·σ(W_P1·(co_u − co_v))
//! qk_vu  = (W_q1·h′_v − W_k1·h′_u) + W_c·((W_q2·h′_v)·(W_k2·h′_u)) + p_u
//! at_vu  = softmax_u(W_a2·σ(W_a1·qk_vu) / √d_head)
//! h̃_v    = Σ_u at_vu·(W_v·h′_u + p_u)
//! h″_v   = σ(W·cat(h_v, co_v, h̃_v))
//! co′_v  = MLP(co_v) or co_v
//! ```
//!
//! [`Ablation`] switches off the structure pass, the position embedding, or
//! one of the two attention terms. Disabled parts are never evaluated, so
//! their parameters receive exactly zero gradient.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{build_knn_graph, KnnGraph};
use crate::nn::{Ctx, Linear, DEFAULT_SLOPE};
use crate::params::ParamStore;
use crate::structure::{self, StructureParams};
use crate::tape::{softmax_in_place, ParamId, Var};
use crate::tensor::Tensor;

/// Which SFAGC components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub use_structure: bool,
    pub use_position: bool,
    pub use_dot: bool,
    pub use_sub: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        use_structure: true,
        use_position: true,
        use_dot: true,
        use_sub: true,
    };

    pub const NAMES: [&'static str; 5] = ["full", "nS", "nP", "ndot", "nsub"];

    /// `full`, `nS`, `nP`, `ndot` or `nsub` (case-insensitive).
    pub fn variant(name: &str) -> Result<Self> {
        let mut a = Ablation::FULL;
        match name.to_ascii_lowercase().as_str() {
            "full" => {}
            "ns" => a.use_structure = false,
            "np" => a.use_position = false,
            "ndot" => a.use_dot = false,
            "nsub" => a.use_sub = false,
            other => return Err(Error::invalid(format!("unknown ablation variant {other:?}"))),
        }
        Ok(a)
    }

    pub fn name(&self) -> &'static str {
        match (self.use_structure, self.use_position, self.use_dot, self.use_sub) {
            (true, true, true, true) => "full",
            (false, true, true, true) => "nS",
            (true, false, true, true) => "nP",
            (true, true, false, true) => "ndot",
            (true, true, true, false) => "nsub",
            _ => "custom",
        }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordUpdate {
    /// `co′ = co`.
    Identity,
    /// Two-layer map to the given width.
    Mlp(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SfagcConfig {
    pub coord_in: usize,
    pub feat_in: usize,
    pub feat_out: usize,
    pub coord_update: CoordUpdate,
    pub k: usize,
    /// Width of `a₁`, `p_u` and the value vectors.
    pub att_dim: usize,
    /// Output width of `W_a1`; the softmax temperature is its square root.
    pub head_dim: usize,
    /// Width of the fused features `h′`.
    pub hidden: usize,
    pub re_dim: usize,
    pub se_dim: usize,
    pub slope: f64,
    pub bias: bool,
    pub ablation: Ablation,
}

impl SfagcConfig {
    /// Config with the default derived widths: attention, head and fused
    /// widths equal `feat_out`, relational and encoding widths equal `coord_in`.
    pub fn new(coord_in: usize, feat_in: usize, coord_update: CoordUpdate, feat_out: usize, k: usize) -> Self {
        SfagcConfig {
            coord_in,
            feat_in,
            feat_out,
            coord_update,
            k,
            att_dim: feat_out,
            head_dim: feat_out,
            hidden: feat_out,
            re_dim: coord_in,
            se_dim: coord_in,
            slope: DEFAULT_SLOPE,
            bias: false,
            ablation: Ablation::FULL,
        }
    }

    pub fn coord_out(&self) -> usize {
        match self.coord_update {
            CoordUpdate::Identity => self.coord_in,
            CoordUpdate::Mlp(c) => c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.coord_in,
            self.feat_in,
            self.feat_out,
            self.k,
            self.att_dim,
            self.head_dim,
            self.hidden,
            self.re_dim,
            self.se_dim,
            self.coord_out(),
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("SFAGC widths must be positive: {self:?}")));
        }
        if !self.ablation.use_dot && !self.ablation.use_sub {
            return Err(Error::Config(
                "at least one of the dot and subtraction attention terms must be enabled".into(),
            ));
        }
        Ok(())
    }
}

/// Learnable parameters of one SFAGC layer.
#[derive(Clone, Debug)]
pub struct SfagcLayer {
    pub config: SfagcConfig,
    pub structure: StructureParams,
    /// Replaces the structure pass when it is ablated.
    pub plain_fuse: Option<Linear>,
    pub pos1: Linear,
    pub pos2: Linear,
    pub query_sub: Linear,
    pub key_sub: Linear,
    pub query_dot: Linear,
    pub key_dot: Linear,
    pub lift: Linear,
    pub att_hidden: Linear,
    pub att_out: Linear,
    pub value: Linear,
    pub update: Linear,
    pub coord_mlp: Option<(Linear, Linear)>,
}

/// Result of one layer evaluation on the tape.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    /// `[N×D_out]` convolved features.
    pub feats: Var,
    /// `[N×C_out]` updated coordinates.
    pub coords: Var,
    /// `[N×k]` attention weights, row `v` over `graph.neighbors(v)`.
    pub attention: Var,
    /// `[N×F]` structure-fused features.
    pub fused: Var,
    pub graph: KnnGraph,
}

impl SfagcLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: SfagcConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let b = c.bias;
        let name = |s: &str| format!("{prefix}.{s}");
        let structure = StructureParams::new(
            store, prefix, c.coord_in, c.feat_in, c.re_dim, c.se_dim, c.hidden, b, rng,
        )?;
        let plain_fuse = if c.ablation.use_structure {
            None
        } else {
            Some(Linear::new(store, &name("W_ns"), c.hidden, c.feat_in, b, rng)?)
        };
        let pos1 = Linear::new(store, &name("W_P1"), c.att_dim, c.coord_in, b, rng)?;
        let pos2 = Linear::new(store, &name("W_P2"), c.att_dim, c.att_dim, b, rng)?;
        let query_sub = Linear::new(store, &name("W_q1"), c.att_dim, c.hidden, b, rng)?;
        let key_sub = Linear::new(store, &name("W_k1"), c.att_dim, c.hidden, b, rng)?;
        let query_dot = Linear::new(store, &name("W_q2"), c.att_dim, c.hidden, b, rng)?;
        let key_dot = Linear::new(store, &name("W_k2"), c.att_dim, c.hidden, b, rng)?;
        let lift = Linear::new(store, &name("W_c"), c.att_dim, 1, b, rng)?;
        let att_hidden = Linear::new(store, &name("W_a1"), c.head_dim, c.att_dim, b, rng)?;
        let att_out = Linear::new(store, &name("W_a2"), 1, c.head_dim, b, rng)?;
        let value = Linear::new(store, &name("W_v"), c.att_dim, c.hidden, b, rng)?;
        let update = Linear::new(
            store,
            &name("W"),
            c.feat_out,
            c.feat_in + c.coord_in + c.att_dim,
            b,
            rng,
        )?;
        let coord_mlp = match c.coord_update {
            CoordUpdate::Identity => None,
            CoordUpdate::Mlp(out) => Some((
                Linear::new(store, &name("W_m1"), out, c.coord_in, b, rng)?,
                Linear::new(store, &name("W_m2"), out, out, b, rng)?,
            )),
        };
        Ok(SfagcLayer {
            config,
            structure,
            plain_fuse,
            pos1,
            pos2,
            query_sub,
            key_sub,
            query_dot,
            key_dot,
            lift,
            att_hidden,
            att_out,
            value,
            update,
            coord_mlp,
        })
    }

    /// Every parameter id with its role, in declaration order.
    pub fn named_params(&self) -> Vec<(&'static str, ParamId)> {
        let s = &self.structure;
        let mut out = vec![
            ("W_b", s.base.weight),
            ("W_re", s.relational.weight),
            ("W_se", s.encode.weight),
            ("W_s", s.fuse.weight),
            ("W_P1", self.pos1.weight),
            ("W_P2", self.pos2.weight),
            ("W_q1", self.query_sub.weight),
            ("W_k1", self.key_sub.weight),
            ("W_q2", self.query_dot.weight),
            ("W_k2", self.key_dot.weight),
            ("W_c", self.lift.weight),
            ("W_a1", self.att_hidden.weight),
            ("W_a2", self.att_out.weight),
            ("W_v", self.value.weight),
            ("W", self.update.weight),
        ];
        if let Some(p) = &self.plain_fuse {
            out.push(("W_ns", p.weight));
        }
        if let Some((m1, m2)) = &self.coord_mlp {
            out.push(("W_m1", m1.weight));
            out.push(("W_m2", m2.weight));
        }
        out
    }

    /// Parameters belonging to each ablatable component.
    pub fn component_params(&self) -> [(&'static str, Vec<ParamId>); 4] {
        let s = &self.structure;
        let cat = |ls: &[&Linear]| ls.iter().flat_map(|l| l.params()).collect::<Vec<_>>();
        [
            ("structure", cat(&[&s.base, &s.relational, &s.encode, &s.fuse])),
            ("position", cat(&[&self.pos1, &self.pos2])),
            ("dot", cat(&[&self.query_dot, &self.key_dot, &self.lift])),
            ("sub", cat(&[&self.query_sub, &self.key_sub])),
        ]
    }

    /// Evaluates the layer on `coords [N×C_in]`, `feats [N×D_in]`.
    pub fn forward(&self, ctx: &mut Ctx, coords: Var, feats: Var) -> Result<LayerOutput> {
        let c = &self.config;
        let (cs, fs) = (ctx.tape.shape(coords).to_vec(), ctx.tape.shape(feats).to_vec());
        if cs.len() != 2 || fs.len() != 2 || cs[1] != c.coord_in || fs[1] != c.feat_in || cs[0] != fs[0] {
            return Err(Error::shape(
                "sfagc_forward",
                format!(
                    "layer expects coords N×{} and feats N×{}, got {cs:?} and {fs:?}",
                    c.coord_in, c.feat_in
                ),
            ));
        }
        let n = cs[0];
        let graph = build_knn_graph(ctx.value(coords), c.k)?;
        let k = c.k;
        let nbr = graph.flat().to_vec();
        let tgt = graph.targets();
        let slope = c.slope;

        let co_u = ctx.tape.gather(coords, &nbr)?;
        let co_v = ctx.tape.gather(coords, &tgt)?;
        let sv = ctx.tape.sub(co_u, co_v)?;

        let fused = if c.ablation.use_structure {
            self.structure.forward(ctx, sv, feats, k, &tgt, slope)?.fused
        } else {
            self.plain_fuse
                .as_ref()
                .expect("plain fuse exists when structure is ablated")
                .forward(ctx, feats)?
        };

        let pos = if c.ablation.use_position {
            let h = self.pos1.forward_act(ctx, sv, slope)?;
            Some(self.pos2.forward(ctx, h)?)
        } else {
            None
        };

        let mut terms = Vec::with_capacity(3);
        if c.ablation.use_sub {
            let q = self.query_sub.forward(ctx, fused)?;
            let kk = self.key_sub.forward(ctx, fused)?;
            let qv = ctx.tape.gather(q, &tgt)?;
            let ku = ctx.tape.gather(kk, &nbr)?;
            terms.push(ctx.tape.sub(qv, ku)?);
        }
        if c.ablation.use_dot {
            let q = self.query_dot.forward(ctx, fused)?;
            let kk = self.key_dot.forward(ctx, fused)?;
            let qv = ctx.tape.gather(q, &tgt)?;
            let ku = ctx.tape.gather(kk, &nbr)?;
            let dot = ctx.tape.row_dot(qv, ku)?;
            terms.push(self.lift.forward(ctx, dot)?);
        }
        if let Some(p) = pos {
            terms.push(p);
        }
        let mut qk = terms[0];
        for &t in &terms[1..] {
            qk = ctx.tape.add(qk, t)?;
        }

        let hidden = self.att_hidden.forward_act(ctx, qk, slope)?;
        let logits = self.att_out.forward(ctx, hidden)?;
        let logits = ctx.tape.reshape(logits, &[n, k])?;
        let attention = ctx.tape.softmax_rows(logits, (c.head_dim as f64).sqrt())?;
        let weights = ctx.tape.reshape(attention, &[n * k, 1])?;

        let values = self.value.forward(ctx, fused)?;
        let mut values = ctx.tape.gather(values, &nbr)?;
        if let Some(p) = pos {
            values = ctx.tape.add(values, p)?;
        }
        let weighted = ctx.tape.mul_rows(values, weights)?;
        let aggregated = ctx.tape.group_sum(weighted, k)?;

        let joined = ctx.tape.concat(&[feats, coords, aggregated], 1)?;
        let out = self.update.forward_act(ctx, joined, slope)?;

        let new_coords = match &self.coord_mlp {
            None => coords,
            Some((m1, m2)) => {
                let h = m1.forward_act(ctx, coords, slope)?;
                m2.forward(ctx, h)?
            }
        };
        Ok(LayerOutput {
            feats: out,
            coords: new_coords,
            attention,
            fused,
            graph,
        })
    }

    /// Convenience wrapper: evaluates on concrete tensors without gradients.
    pub fn apply(&self, store: &ParamStore, coords: &Tensor, feats: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut ctx = Ctx::new(store);
        let co = ctx.constant(coords.clone());
        let h = ctx.constant(feats.clone());
        let out = self.forward(&mut ctx, co, h)?;
        Ok((
            ctx.value(out.feats).clone(),
            ctx.value(out.coords).clone(),
            ctx.value(out.attention).clone(),
        ))
    }
}

/// Per-node direct evaluation of the layer, one neighbor at a time.
///
/// Independent of the batched tape path; used as its oracle.
pub mod reference {
    use super::*;

    pub fn position_embedding(co_u: &[f64], co_v: &[f64], w_p1: &Tensor, w_p2: &Tensor, slope: f64) -> Result<Vec<f64>> {
        let off = structure::structure_vector(co_u, co_v)?;
        structure::matvec(w_p2, &structure::act_matvec(w_p1, &off, slope)?)
    }

    /// `qk_vu`; disabled terms contribute nothing.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_logits(
        h_v: &[f64],
        h_u: &[f64],
        p_u: Option<&[f64]>,
        w: &Weights,
        ablation: Ablation,
    ) -> Result<Vec<f64>> {
        if !ablation.use_dot && !ablation.use_sub {
            return Err(Error::Config("both attention terms disabled".into()));
        }
        let width = w.w_c.shape()[0];
        let mut qk = vec![0.0; width];
        if ablation.use_sub {
            let q = structure::matvec(&w.w_q1, h_v)?;
            let k = structure::matvec(&w.w_k1, h_u)?;
            for i in 0..width {
                qk[i] += q[i] - k[i];
            }
        }
        if ablation.use_dot {
            let q = structure::matvec(&w.w_q2, h_v)?;
            let k = structure::matvec(&w.w_k2, h_u)?;
            let a2: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
            for i in 0..width {
                qk[i] += w.w_c.data()[i] * a2;
            }
        }
        if let Some(p) = p_u {
            for i in 0..width {
                qk[i] += p[i];
            }
        }
        Ok(qk)
    }

    /// Softmax over a node's neighbors of `W_a2·σ(W_a1·qk)/√d_out`.
    pub fn attention_weights(qks: &[Vec<f64>], w_a1: &Tensor, w_a2: &Tensor, slope: f64) -> Result<Vec<f64>> {
        if qks.is_empty() {
            return Err(Error::invalid("attention over an empty neighborhood"));
        }
        let d_out = w_a1.shape()[0] as f64;
        let mut logits = Vec::with_capacity(qks.len());
        for qk in qks {
            let h = structure::act_matvec(w_a1, qk, slope)?;
            logits.push(structure::matvec(w_a2, &h)?[0]);
        }
        softmax_in_place(&mut logits, d_out.sqrt());
        Ok(logits)
    }

    pub fn weighted_sum_aggregate(weights: &[f64], values: &[Vec<f64>]) -> Result<Vec<f64>> {
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("attention weights sum to {total}")));
        }
        structure::projection_aggregate(weights, values)
    }

    pub fn update_features(h_v: &[f64], co_v: &[f64], agg: &[f64], w: &Tensor, slope: f64) -> Result<Vec<f64>> {
        let joined: Vec<f64> = h_v.iter().chain(co_v).chain(agg).copied().collect();
        structure::act_matvec(w, &joined, slope)
    }

    pub fn update_coordinates(co_v: &[f64], mlp: Option<(&Tensor, &Tensor)>, slope: f64) -> Result<Vec<f64>> {
        match mlp {
            None => Ok(co_v.to_vec()),
            Some((m1, m2)) => structure::matvec(m2, &structure::act_matvec(m1, co_v, slope)?),
        }
    }

    /// Weight matrices of a layer, copied out of the store.
    pub struct Weights {
        pub w_b: Tensor,
        pub w_re: Tensor,
        pub w_se: Tensor,
        pub w_s: Tensor,
        pub w_ns: Option<Tensor>,
        pub w_p1: Tensor,
        pub w_p2: Tensor,
        pub w_q1: Tensor,
        pub w_k1: Tensor,
        pub w_q2: Tensor,
        pub w_k2: Tensor,
        pub w_c: Tensor,
        pub w_a1: Tensor,
        pub w_a2: Tensor,
        pub w_v: Tensor,
        pub w: Tensor,
        pub mlp: Option<(Tensor, Tensor)>,
    }

    impl Weights {
        pub fn of(layer: &SfagcLayer, store: &ParamStore) -> Self {
            let g = |l: &Linear| store.get(l.weight).clone();
            let s = &layer.structure;
            Weights {
                w_b: g(&s.base),
                w_re: g(&s.relational),
                w_se: g(&s.encode),
                w_s: g(&s.fuse),
                w_ns: layer.plain_fuse.as_ref().map(g),
                w_p1: g(&layer.pos1),
                w_p2: g(&layer.pos2),
                w_q1: g(&layer.query_sub),
                w_k1: g(&layer.key_sub),
                w_q2: g(&layer.query_dot),
                w_k2: g(&layer.key_dot),
                w_c: g(&layer.lift),
                w_a1: g(&layer.att_hidden),
                w_a2: g(&layer.att_out),
                w_v: g(&layer.value),
                w: g(&layer.update),
                mlp: layer.coord_mlp.as_ref().map(|(a, b)| (g(a), g(b))),
            }
        }
    }

    /// Node-by-node forward pass. Returns `(h″, co′, attention)` as row lists.
    /// Bias terms are not supported here.
    pub fn forward(
        layer: &SfagcLayer,
        store: &ParamStore,
        coords: &Tensor,
        feats: &Tensor,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let c = &layer.config;
        if c.bias {
            return Err(Error::invalid("reference forward does not model bias terms"));
        }
        let w = Weights::of(layer, store);
        let slope = c.slope;
        let graph = build_knn_graph(coords, c.k)?;
        let n = coords.rows();

        let mut fused = Vec::with_capacity(n);
        for v in 0..n {
            let h_v = feats.row(v);
            if !c.ablation.use_structure {
                fused.push(structure::matvec(w.w_ns.as_ref().unwrap(), h_v)?);
                continue;
            }
            let co_v = coords.row(v);
            let svs: Vec<Vec<f64>> = graph
                .neighbors(v)
                .iter()
                .map(|&u| structure::structure_vector(coords.row(u), co_v))
                .collect::<Result<_>>()?;
            let base = structure::base_structure_vector(&svs, &w.w_b, slope)?;
            let mut fas = Vec::new();
            let mut encs = Vec::new();
            for (sv, &u) in svs.iter().zip(graph.neighbors(v)) {
                fas.push(structure::feature_angle(sv, &base));
                let fd = structure::feature_distance(coords.row(u), co_v)?;
                let re = structure::relational_embedding(sv, &w.w_re, slope)?;
                encs.push(structure::structure_encoding(&fd, &re, &w.w_se, slope)?);
            }
            let af = structure::projection_aggregate(&fas, &encs)?;
            fused.push(structure::fuse_structure(h_v, &af, &w.w_s, slope)?);
        }

        let mut out_feats = Vec::with_capacity(n);
        let mut out_coords = Vec::with_capacity(n);
        let mut attention = Vec::with_capacity(n);
        for v in 0..n {
            let co_v = coords.row(v);
            let mut qks = Vec::new();
            let mut values = Vec::new();
            for &u in graph.neighbors(v) {
                let p = if c.ablation.use_position {
                    Some(position_embedding(coords.row(u), co_v, &w.w_p1, &w.w_p2, slope)?)
                } else {
                    None
                };
                qks.push(attention_logits(&fused[v], &fused[u], p.as_deref(), &w, c.ablation)?);
                let mut val = structure::matvec(&w.w_v, &fused[u])?;
                if let Some(p) = &p {
                    val.iter_mut().zip(p).for_each(|(a, b)| *a += b);
                }
                values.push(val);
            }
            let at = attention_weights(&qks, &w.w_a1, &w.w_a2, slope)?;
            let agg = weighted_sum_aggregate(&at, &values)?;
            out_feats.push(update_features(feats.row(v), co_v, &agg, &w.w, slope)?);
            out_coords.push(update_coordinates(
                co_v,
                w.mlp.as_ref().map(|(a, b)| (a, b)),
                slope,
            )?);
            attention.push(at);
        }
        Ok((out_feats, out_coords, attention))
    }
}
