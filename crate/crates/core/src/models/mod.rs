//! Classification and segmentation networks assembled from a [`NetworkSpec`].

pub mod metrics;
pub mod spec;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use metrics::{mean_class_accuracy, overall_accuracy, shape_iou, mean_iou};
pub use spec::{ConvSpec, NetworkSpec, Part, Ref, SaScaleSpec, Stage, StageKind, Task};

use crate::error::{Error, Result};
use crate::layer::{Ablation, SfagcConfig, SfagcLayer};
use crate::nn::{Ctx, Linear, DEFAULT_SLOPE};
use crate::params::ParamStore;
use crate::pooling::{FeaturePropagation, FpsPool, FpsSeed, ScorePool, SetAbstraction};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;

/// Returns `spec` with every SFAGC layer switched to the named variant
/// (`full`, `nS`, `nP`, `ndot`, `nsub`).
pub fn ablation_variant(spec: &NetworkSpec, variant: &str) -> Result<NetworkSpec> {
    Ok(spec.clone().with_ablation(Ablation::variant(variant)?))
}

/// Mean cross-entropy of `logits [R×K]` against one label per row.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// `−log softmax(logits)[label]` on plain values.
pub fn cross_entropy_value(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!("label {label} out of range for {} classes", logits.len())));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Sum of per-phase losses.
pub fn hierarchical_loss(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    let (&first, rest) = losses
        .split_first()
        .ok_or_else(|| Error::invalid("hierarchical loss needs at least one phase"))?;
    rest.iter().try_fold(first, |acc, &l| tape.add(acc, l))
}

/// Per-phase logits and their sum.
#[derive(Clone, Debug)]
pub struct PhaseOutputs {
    /// `[1×K]` logits of each phase, in head order.
    pub predictions: Vec<Var>,
    /// `[1×K]` sum of the phase logits.
    pub total: Var,
}

impl PhaseOutputs {
    /// Per-phase cross-entropy against `label`.
    pub fn losses(&self, tape: &mut Tape, label: usize) -> Result<Vec<Var>> {
        self.predictions.iter().map(|&p| tape.cross_entropy(p, &[label])).collect()
    }
}

/// Shapes of one built stage, for reporting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageInfo {
    pub name: String,
    pub kind: &'static str,
    pub coord_in: usize,
    pub feat_in: usize,
    pub coord_out: usize,
    pub feat_out: usize,
    /// Resolution level: 0 is the input cloud, each pool or sampling stage opens a new one.
    pub level: usize,
}

#[derive(Clone, Debug)]
enum Module {
    Sfagc(SfagcLayer),
    Score(ScorePool),
    Fps(FpsPool),
    Abstraction(SetAbstraction),
    Propagate {
        fp: FeaturePropagation,
        src_level: usize,
        sources: usize,
    },
}

#[derive(Clone, Debug)]
struct Built {
    name: String,
    module: Module,
    coords: Vec<Ref>,
    feats: Vec<Ref>,
    level: usize,
}

/// Fully connected head: hidden layer, leaky ReLU, dropout, output layer.
#[derive(Clone, Debug)]
pub struct Head {
    pub input: Ref,
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Sym {
    coord: usize,
    feat: usize,
    level: usize,
}

#[derive(Clone, Debug)]
struct LevelInfo {
    /// Stage whose node selection produced this level.
    via: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub in_dim: usize,
    /// Classes (classification) or parts (segmentation).
    pub classes: usize,
    stages: Vec<Built>,
    heads: Vec<Head>,
    levels: Vec<LevelInfo>,
    info: Vec<StageInfo>,
}

struct State {
    outs: HashMap<String, (Var, Var, usize)>,
    idx: HashMap<String, Vec<usize>>,
    xyz: Vec<Tensor>,
}

fn check_level(stage: &str, refs: &[Ref], syms: &[Sym]) -> Result<usize> {
    let level = syms[0].level;
    if syms.iter().any(|s| s.level != level) {
        let list: Vec<String> = refs.iter().map(Ref::to_string).collect();
        return Err(Error::Config(format!(
            "stage {stage}: inputs {} live at different resolutions",
            list.join(",")
        )));
    }
    Ok(level)
}

impl Network {
    /// Builds the network, registering its parameters in `store` with
    /// uniform initialization drawn from `seed`.
    pub fn new(spec: NetworkSpec, in_dim: usize, classes: usize, store: &mut ParamStore, seed: u64) -> Result<Self> {
        if in_dim == 0 || classes == 0 {
            return Err(Error::Config("input width and class count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut syms: HashMap<String, Sym> = HashMap::new();
        syms.insert(
            "x".into(),
            Sym {
                coord: in_dim,
                feat: in_dim,
                level: 0,
            },
        );
        let mut levels = vec![LevelInfo { via: None }];
        let mut pool_levels: HashMap<String, (usize, usize)> = HashMap::new();
        let mut stages = Vec::new();
        let mut info = Vec::new();

        let resolve = |syms: &HashMap<String, Sym>, pool_levels: &HashMap<String, (usize, usize)>, stage: &str, r: &Ref| -> Result<Sym> {
            let s = syms
                .get(&r.name)
                .ok_or_else(|| Error::Config(format!("stage {stage}: unknown input {}", r.name)))?;
            let mut out = Sym {
                coord: s.coord,
                feat: if r.part == Part::Coords { s.coord } else { s.feat },
                level: s.level,
            };
            if let Some(p) = &r.via {
                let &(from, to) = pool_levels
                    .get(p)
                    .ok_or_else(|| Error::Config(format!("stage {stage}: {p} is not a pooling stage")))?;
                if out.level != from {
                    return Err(Error::Config(format!(
                        "stage {stage}: {r} gathers through {p}, but {} is not at {p}'s input resolution",
                        r.name
                    )));
                }
                out.level = to;
            }
            Ok(out)
        };
        let widths = |syms: &[Sym]| syms.iter().map(|s| s.feat).sum::<usize>();

        for st in &spec.stages {
            if syms.contains_key(&st.name) {
                return Err(Error::Config(format!("duplicate stage name {}", st.name)));
            }
            let name = st.name.as_str();
            let res = |rs: &[Ref]| -> Result<Vec<Sym>> {
                rs.iter().map(|r| resolve(&syms, &pool_levels, name, r)).collect()
            };
            let conv_config = |c: &ConvSpec| -> Result<(SfagcConfig, usize)> {
                let cs = res(&c.coords)?;
                let fs = res(&c.feats)?;
                let lc = check_level(name, &c.coords, &cs)?;
                let lf = check_level(name, &c.feats, &fs)?;
                if lc != lf {
                    return Err(Error::Config(format!("stage {name}: coordinates and features at different resolutions")));
                }
                let mut cfg = SfagcConfig::new(widths(&cs), widths(&fs), c.coord, c.f_out, c.k);
                cfg.bias = spec.bias;
                cfg.ablation = spec.ablation;
                Ok((cfg, lc))
            };
            let (built, sym, kind) = match &st.kind {
                StageKind::Sfagc(c) => {
                    let (cfg, level) = conv_config(c)?;
                    let sym = Sym {
                        coord: cfg.coord_out(),
                        feat: cfg.feat_out,
                        level,
                    };
                    let layer = SfagcLayer::new(store, name, cfg, &mut rng)?;
                    (
                        Built {
                            name: name.into(),
                            module: Module::Sfagc(layer),
                            coords: c.coords.clone(),
                            feats: c.feats.clone(),
                            level,
                        },
                        sym,
                        "sfagc",
                    )
                }
                StageKind::ScorePool { conv, t } | StageKind::FpsPool { conv, t } => {
                    let (cfg, level) = conv_config(conv)?;
                    levels.push(LevelInfo {
                        via: Some(name.into()),
                    });
                    let new_level = levels.len() - 1;
                    pool_levels.insert(name.into(), (level, new_level));
                    let sym = Sym {
                        coord: cfg.coord_out(),
                        feat: cfg.feat_out,
                        level: new_level,
                    };
                    let (module, kind) = match &st.kind {
                        StageKind::ScorePool { .. } => (Module::Score(ScorePool::new(store, name, cfg, *t, &mut rng)?), "score_pool"),
                        _ => (
                            Module::Fps(FpsPool::new(store, name, cfg, *t, FpsSeed::FarthestFromCentroid, &mut rng)?),
                            "fps_pool",
                        ),
                    };
                    (
                        Built {
                            name: name.into(),
                            module,
                            coords: conv.coords.clone(),
                            feats: conv.feats.clone(),
                            level,
                        },
                        sym,
                        kind,
                    )
                }
                StageKind::SetAbstraction { on, samples, scales } => {
                    let s = res(std::slice::from_ref(on))?[0];
                    let scales: Vec<(f64, usize, Vec<usize>)> = scales
                        .iter()
                        .map(|sc| {
                            let mut w = vec![in_dim];
                            w.extend(&sc.widths);
                            (sc.radius, sc.group, w)
                        })
                        .collect();
                    let sa = SetAbstraction::new(store, name, *samples, &scales, spec.bias, &mut rng)?;
                    levels.push(LevelInfo {
                        via: Some(name.into()),
                    });
                    let new_level = levels.len() - 1;
                    pool_levels.insert(name.into(), (s.level, new_level));
                    let sym = Sym {
                        coord: in_dim,
                        feat: sa.out_dim(),
                        level: new_level,
                    };
                    (
                        Built {
                            name: name.into(),
                            module: Module::Abstraction(sa),
                            coords: vec![on.clone()],
                            feats: vec![on.clone()],
                            level: s.level,
                        },
                        sym,
                        "set_abstraction",
                    )
                }
                StageKind::Propagate { from, to, skip, widths: w } => {
                    let fs = res(from)?;
                    let src_level = check_level(name, from, &fs)?;
                    let dst_level = res(std::slice::from_ref(to))?[0].level;
                    let ss = res(skip)?;
                    if !ss.is_empty() && check_level(name, skip, &ss)? != dst_level {
                        return Err(Error::Config(format!("stage {name}: skip inputs must live at {to}'s resolution")));
                    }
                    let mut dims = vec![widths(&fs) + widths(&ss)];
                    dims.extend(w);
                    let fp = FeaturePropagation::new(store, name, &dims, spec.bias, &mut rng)?;
                    let sym = Sym {
                        coord: in_dim,
                        feat: fp.out_dim(),
                        level: dst_level,
                    };
                    let mut feats = from.clone();
                    feats.extend(skip.iter().cloned());
                    (
                        Built {
                            name: name.into(),
                            module: Module::Propagate {
                                fp,
                                src_level,
                                sources: from.len(),
                            },
                            coords: vec![to.clone()],
                            feats,
                            level: dst_level,
                        },
                        sym,
                        "propagate",
                    )
                }
            };
            let (coord_in, feat_in) = match &built.module {
                Module::Sfagc(l) => (l.config.coord_in, l.config.feat_in),
                Module::Score(p) => (p.sfagc.config.coord_in, p.sfagc.config.feat_in),
                Module::Fps(p) => (p.sfagc.config.coord_in, p.sfagc.config.feat_in),
                Module::Abstraction(sa) => (in_dim, sa.in_dim()),
                Module::Propagate { fp, .. } => (in_dim, fp.in_dim()),
            };
            info.push(StageInfo {
                name: name.into(),
                kind,
                coord_in,
                feat_in,
                coord_out: sym.coord,
                feat_out: sym.feat,
                level: sym.level,
            });
            syms.insert(name.into(), sym);
            stages.push(built);
        }

        let mut heads = Vec::new();
        match spec.task {
            Task::Classify => {}
            Task::Segment if spec.heads.len() == 1 => {}
            Task::Segment => return Err(Error::Config("segmentation takes exactly one head input".into())),
        }
        for (i, r) in spec.heads.iter().enumerate() {
            let s = resolve(&syms, &pool_levels, "head", r)?;
            if spec.task == Task::Segment && s.level != 0 {
                return Err(Error::Config(format!("segmentation head input {r} is not at full resolution")));
            }
            let width = if spec.task == Task::Classify { 2 * s.feat } else { s.feat };
            let hidden = Linear::new(store, &format!("head{i}.W_h1"), spec.head_hidden, width, true, &mut rng)?;
            let out = Linear::new(store, &format!("head{i}.W_h2"), classes, spec.head_hidden, true, &mut rng)?;
            heads.push(Head {
                input: r.clone(),
                hidden,
                out,
            });
        }
        Ok(Network {
            spec,
            in_dim,
            classes,
            stages,
            heads,
            levels,
            info,
        })
    }

    pub fn stage_info(&self) -> &[StageInfo] {
        &self.info
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    /// SFAGC layers by stage name, including the branches inside pools.
    pub fn sfagc_layers(&self) -> Vec<(&str, &SfagcLayer)> {
        self.stages
            .iter()
            .filter_map(|b| match &b.module {
                Module::Sfagc(l) => Some((b.name.as_str(), l)),
                Module::Score(p) => Some((b.name.as_str(), &p.sfagc)),
                Module::Fps(p) => Some((b.name.as_str(), &p.sfagc)),
                _ => None,
            })
            .collect()
    }

    /// Number of nodes at every resolution level for an `n`-point input.
    pub fn level_sizes(&self, n: usize) -> Vec<usize> {
        self.levels
            .iter()
            .map(|l| match &l.via {
                None => n,
                Some(name) => match self.stages.iter().find(|b| &b.name == name).map(|b| &b.module) {
                    Some(Module::Score(p)) => p.t,
                    Some(Module::Fps(p)) => p.t,
                    Some(Module::Abstraction(sa)) => sa.samples,
                    _ => n,
                },
            })
            .collect()
    }

    fn lookup(&self, ctx: &mut Ctx, state: &State, r: &Ref) -> Result<Var> {
        let &(feats, coords, _) = state
            .outs
            .get(&r.name)
            .ok_or_else(|| Error::Config(format!("unknown input {}", r.name)))?;
        let v = if r.part == Part::Coords { coords } else { feats };
        match &r.via {
            None => Ok(v),
            Some(p) => ctx.tape.gather(v, &state.idx[p]),
        }
    }

    fn gather_cat(&self, ctx: &mut Ctx, state: &State, refs: &[Ref]) -> Result<Var> {
        let vs = refs.iter().map(|r| self.lookup(ctx, state, r)).collect::<Result<Vec<_>>>()?;
        if vs.len() == 1 {
            Ok(vs[0])
        } else {
            ctx.tape.concat(&vs, 1)
        }
    }

    fn run_stages(&self, ctx: &mut Ctx, points: &Tensor) -> Result<State> {
        if points.rank() != 2 || points.cols() != self.in_dim {
            return Err(Error::shape(
                "network",
                format!("expected [N×{}] input, got {:?}", self.in_dim, points.shape()),
            ));
        }
        let x = ctx.constant(points.clone());
        let mut state = State {
            outs: HashMap::new(),
            idx: HashMap::new(),
            xyz: Vec::with_capacity(self.levels.len()),
        };
        state.outs.insert("x".into(), (x, x, 0));
        state.xyz.push(points.clone());
        for b in &self.stages {
            let (feats, coords, level) = match &b.module {
                Module::Sfagc(l) => {
                    let c = self.gather_cat(ctx, &state, &b.coords)?;
                    let f = self.gather_cat(ctx, &state, &b.feats)?;
                    let o = l.forward(ctx, c, f)?;
                    (o.feats, o.coords, b.level)
                }
                Module::Score(_) | Module::Fps(_) => {
                    let c = self.gather_cat(ctx, &state, &b.coords)?;
                    let f = self.gather_cat(ctx, &state, &b.feats)?;
                    let pooled = match &b.module {
                        Module::Score(p) => p.forward(ctx, c, f)?,
                        Module::Fps(p) => p.forward(ctx, c, f)?,
                        _ => unreachable!(),
                    };
                    let xyz = state.xyz[b.level].gather_rows(&pooled.idx)?;
                    state.xyz.push(xyz);
                    state.idx.insert(b.name.clone(), pooled.idx);
                    (pooled.feats, pooled.coords, state.xyz.len() - 1)
                }
                Module::Abstraction(sa) => {
                    let xyz = state.xyz[b.level].clone();
                    let (f, centroids) = sa.forward(ctx, &xyz)?;
                    let cxyz = xyz.gather_rows(&centroids)?;
                    let c = ctx.constant(cxyz.clone());
                    state.xyz.push(cxyz);
                    state.idx.insert(b.name.clone(), centroids);
                    (f, c, state.xyz.len() - 1)
                }
                Module::Propagate { fp, src_level, sources } => {
                    let nfrom = *sources;
                    let src = self.gather_cat(ctx, &state, &b.feats[..nfrom])?;
                    let skip = if b.feats.len() > nfrom {
                        Some(self.gather_cat(ctx, &state, &b.feats[nfrom..])?)
                    } else {
                        None
                    };
                    let src_xyz = state.xyz[*src_level].clone();
                    let dst_xyz = state.xyz[b.level].clone();
                    let f = fp.forward(ctx, &src_xyz, src, &dst_xyz, skip)?;
                    let c = ctx.constant(dst_xyz);
                    (f, c, b.level)
                }
            };
            state.outs.insert(b.name.clone(), (feats, coords, level));
        }
        Ok(state)
    }

    fn head_forward(&self, ctx: &mut Ctx, head: &Head, x: Var) -> Result<Var> {
        let h = head.hidden.forward_act(ctx, x, DEFAULT_SLOPE)?;
        let h = ctx.dropout(h, self.spec.dropout)?;
        head.out.forward(ctx, h)
    }

    /// Per-phase class logits for one `[N×C]` cloud and their sum.
    pub fn classification_forward(&self, ctx: &mut Ctx, points: &Tensor) -> Result<PhaseOutputs> {
        if self.spec.task != Task::Classify {
            return Err(Error::Config("classification_forward on a segmentation network".into()));
        }
        let state = self.run_stages(ctx, points)?;
        let mut predictions = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let f = self.lookup(ctx, &state, &head.input)?;
            let n = ctx.tape.shape(f)[0];
            let mx = ctx.tape.group_max(f, n)?;
            let avg = ctx.tape.group_mean(f, n)?;
            let pooled = ctx.tape.concat(&[mx, avg], 1)?;
            predictions.push(self.head_forward(ctx, head, pooled)?);
        }
        let total = hierarchical_loss(&mut ctx.tape, &predictions)?;
        Ok(PhaseOutputs { predictions, total })
    }

    /// `[N×parts]` per-point logits for one `[N×C]` cloud.
    pub fn segmentation_forward(&self, ctx: &mut Ctx, points: &Tensor) -> Result<Var> {
        if self.spec.task != Task::Segment {
            return Err(Error::Config("segmentation_forward on a classification network".into()));
        }
        let state = self.run_stages(ctx, points)?;
        let head = &self.heads[0];
        let f = self.lookup(ctx, &state, &head.input)?;
        self.head_forward(ctx, head, f)
    }

    /// Training loss of one sample: summed per-phase cross-entropy
    /// (classification) or mean per-point cross-entropy (segmentation).
    pub fn loss(&self, ctx: &mut Ctx, points: &Tensor, labels: &[usize]) -> Result<Var> {
        match self.spec.task {
            Task::Classify => {
                let &[label] = labels else {
                    return Err(Error::invalid("classification takes one label per cloud"));
                };
                let out = self.classification_forward(ctx, points)?;
                let losses = out.losses(&mut ctx.tape, label)?;
                hierarchical_loss(&mut ctx.tape, &losses)
            }
            Task::Segment => {
                let logits = self.segmentation_forward(ctx, points)?;
                ctx.tape.cross_entropy(logits, labels)
            }
        }
    }

    /// Evaluation-mode logits: `[1×K]` total for classification, `[N×parts]` for segmentation.
    pub fn predict(&self, store: &ParamStore, points: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::new(store);
        let v = match self.spec.task {
            Task::Classify => self.classification_forward(&mut ctx, points)?.total,
            Task::Segment => self.segmentation_forward(&mut ctx, points)?,
        };
        Ok(ctx.value(v).clone())
    }

    /// Every parameter the network owns.
    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.ids().collect()
    }
}

/// Index of the largest entry (lowest index on ties).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy_value(&[0.0; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(cross_entropy_value(&[50.0, 0.0], 0).unwrap() < 1e-20);
        let l = cross_entropy_value(&[0.0, 3f64.ln()], 1).unwrap();
        assert!((l - -(0.75f64).ln()).abs() < 1e-12);
        assert!(cross_entropy_value(&[0.0], 1).is_err());
    }

    #[test]
    fn ablation_variants_set_flags() {
        let s = NetworkSpec::toy_classify();
        assert_eq!(ablation_variant(&s, "full").unwrap().ablation, Ablation::FULL);
        let ns = ablation_variant(&s, "nS").unwrap().ablation;
        assert!(!ns.use_structure && ns.use_position && ns.use_dot && ns.use_sub);
        let nsub = ablation_variant(&s, "nsub").unwrap().ablation;
        assert!(nsub.use_structure && nsub.use_position && nsub.use_dot && !nsub.use_sub);
        assert!(ablation_variant(&s, "nX").is_err());
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
