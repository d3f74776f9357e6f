//! Network descriptions: an ordered list of named stages wired by explicit
//! tensor references, plus the per-phase heads.
//!
//! References name the outputs of earlier stages:
//!
//! * `x` is the input cloud (its coordinates double as its features);
//! * `name` is a stage's features, `name.co` its coordinates;
//! * `name@pool` gathers a tensor through the node selection of stage `pool`.
//!
//! The text form is one `key = value` per line; each `stage = ...` line adds
//! a stage in order, e.g.
//!
//! ```text
//! stage = p1a sfagc coords=x feats=x k=20 coord=mlp:32 f_out=64
//! stage = pool1 score_pool coords=x,p1a,p1b feats=x,p1a,p1b k=36 t=512 coord=mlp:32 f_out=64
//! stage = p6 set_abstraction on=x samples=512 scales=0.2/32/64,0.4/128/64
//! stage = fp1 propagate from=p3a,p3b to=pool1 skip=pool1,p2a,p2b widths=256
//! ```

use std::fmt;

use crate::error::{Error, Result};
use crate::layer::{Ablation, CoordUpdate};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classify,
    Segment,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "segment" => Ok(Task::Segment),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Segment => "segment",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Feats,
    Coords,
}

/// Reference to a stage output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ref {
    pub name: String,
    pub part: Part,
    pub via: Option<String>,
}

impl Ref {
    pub fn parse(s: &str) -> Result<Self> {
        let (base, via) = match s.split_once('@') {
            Some((b, v)) => (b, Some(v.to_string())),
            None => (s, None),
        };
        let (name, part) = match base.strip_suffix(".co") {
            Some(n) => (n, Part::Coords),
            None => (base, Part::Feats),
        };
        if name.is_empty() || via.as_deref() == Some("") {
            return Err(Error::Config(format!("bad tensor reference {s:?}")));
        }
        Ok(Ref {
            name: name.to_string(),
            part,
            via,
        })
    }

    pub fn feats(name: &str) -> Self {
        Ref {
            name: name.into(),
            part: Part::Feats,
            via: None,
        }
    }
}

impl fmt::Display for Ref {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name)?;
        if self.part == Part::Coords {
            write!(f, ".co")?;
        }
        if let Some(v) = &self.via {
            write!(f, "@{v}")?;
        }
        Ok(())
    }
}

/// Parameters of an SFAGC-based stage (plain layer or pooling branch).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub coords: Vec<Ref>,
    pub feats: Vec<Ref>,
    pub k: usize,
    pub coord: CoordUpdate,
    pub f_out: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaScaleSpec {
    pub radius: f64,
    pub group: usize,
    /// Widths after the coordinate input, e.g. `[64]` for a `[3, 64]` map.
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StageKind {
    Sfagc(ConvSpec),
    ScorePool { conv: ConvSpec, t: usize },
    FpsPool { conv: ConvSpec, t: usize },
    SetAbstraction { on: Ref, samples: usize, scales: Vec<SaScaleSpec> },
    Propagate { from: Vec<Ref>, to: Ref, skip: Vec<Ref>, widths: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub name: String,
    pub kind: StageKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub task: Task,
    pub stages: Vec<Stage>,
    /// Classification: one head per phase output. Segmentation: the single
    /// per-point feature tensor feeding the part classifier.
    pub heads: Vec<Ref>,
    pub head_hidden: usize,
    pub dropout: f64,
    pub bias: bool,
    pub ablation: Ablation,
}

fn refs(list: &[&str]) -> Vec<Ref> {
    list.iter().map(|s| Ref::parse(s).expect("static reference")).collect()
}

fn conv(coords: &[&str], feats: &[&str], k: usize, coord: CoordUpdate, f_out: usize) -> ConvSpec {
    ConvSpec {
        coords: refs(coords),
        feats: refs(feats),
        k,
        coord,
        f_out,
    }
}

fn stage(name: &str, kind: StageKind) -> Stage {
    Stage {
        name: name.into(),
        kind,
    }
}

use CoordUpdate::{Identity, Mlp};

impl NetworkSpec {
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "full-classify" => Ok(Self::full_classify()),
            "full-segment" => Ok(Self::full_segment()),
            "toy-classify" => Ok(Self::toy_classify()),
            "toy-segment" => Ok(Self::toy_segment()),
            other => Err(Error::Config(format!(
                "unknown network {other:?} (expected full-classify, full-segment, toy-classify or toy-segment)"
            ))),
        }
    }

    /// Classification network with the published layer widths: five SFAGC
    /// phases, three score-based pools and a set-abstraction phase.
    pub fn full_classify() -> Self {
        let sa = |r: f64, d: usize| SaScaleSpec {
            radius: r,
            group: d,
            widths: vec![64],
        };
        NetworkSpec {
            name: "full-classify".into(),
            task: Task::Classify,
            stages: vec![
                stage("p1a", StageKind::Sfagc(conv(&["x"], &["x"], 20, Mlp(32), 64))),
                stage("p1b", StageKind::Sfagc(conv(&["p1a.co"], &["p1a"], 20, Identity, 64))),
                stage(
                    "pool1",
                    StageKind::ScorePool {
                        conv: conv(&["x", "p1a", "p1b"], &["x", "p1a", "p1b"], 36, Mlp(32), 64),
                        t: 512,
                    },
                ),
                stage("p2a", StageKind::Sfagc(conv(&["pool1.co"], &["pool1"], 20, Mlp(64), 64))),
                stage("p2b", StageKind::Sfagc(conv(&["p2a.co"], &["p2a"], 20, Identity, 128))),
                stage(
                    "pool2",
                    StageKind::ScorePool {
                        conv: conv(
                            &["p1b@pool1", "pool1", "p2a", "p2b"],
                            &["p1b@pool1", "pool1", "p2a", "p2b"],
                            64,
                            Mlp(64),
                            128,
                        ),
                        t: 128,
                    },
                ),
                stage("p3a", StageKind::Sfagc(conv(&["pool2.co"], &["pool2"], 20, Mlp(128), 256))),
                stage("p3b", StageKind::Sfagc(conv(&["p3a.co"], &["p3a"], 20, Identity, 256))),
                stage("p4a", StageKind::Sfagc(conv(&["pool2.co"], &["pool2"], 20, Mlp(64), 128))),
                stage("p4b", StageKind::Sfagc(conv(&["p4a.co"], &["p4a"], 20, Identity, 128))),
                stage(
                    "pool3",
                    StageKind::ScorePool {
                        conv: conv(&["p3b", "p4b"], &["p3b", "p4b"], 64, Mlp(128), 128),
                        t: 128,
                    },
                ),
                stage("p5a", StageKind::Sfagc(conv(&["pool3.co"], &["pool3"], 20, Mlp(128), 256))),
                stage("p5b", StageKind::Sfagc(conv(&["p5a.co"], &["p5a"], 20, Identity, 256))),
                stage(
                    "p6",
                    StageKind::SetAbstraction {
                        on: Ref::feats("x"),
                        samples: 512,
                        scales: vec![sa(0.2, 32), sa(0.4, 128)],
                    },
                ),
            ],
            heads: refs(&["p1b", "p2b", "p3b", "p4b", "p5b", "p6"]),
            head_hidden: 256,
            dropout: 0.3,
            bias: false,
            ablation: Ablation::FULL,
        }
    }

    /// Segmentation network with the published widths: three SFAGC phases,
    /// two FPS-based pools and two feature-propagation layers.
    pub fn full_segment() -> Self {
        NetworkSpec {
            name: "full-segment".into(),
            task: Task::Segment,
            stages: vec![
                stage("p1a", StageKind::Sfagc(conv(&["x"], &["x"], 20, Mlp(32), 64))),
                stage("p1b", StageKind::Sfagc(conv(&["p1a.co"], &["p1a"], 20, Identity, 64))),
                stage(
                    "pool1",
                    StageKind::FpsPool {
                        conv: conv(&["x"], &["x", "p1a", "p1b"], 36, Identity, 64),
                        t: 512,
                    },
                ),
                stage("p2a", StageKind::Sfagc(conv(&["pool1.co"], &["pool1"], 20, Mlp(32), 64))),
                stage("p2b", StageKind::Sfagc(conv(&["p2a.co"], &["p2a"], 20, Identity, 128))),
                stage(
                    "pool2",
                    StageKind::FpsPool {
                        conv: conv(&["pool1.co"], &["p1b@pool1", "pool1", "p2a", "p2b"], 64, Identity, 128),
                        t: 128,
                    },
                ),
                stage("p3a", StageKind::Sfagc(conv(&["pool2.co"], &["pool2"], 20, Mlp(128), 256))),
                stage("p3b", StageKind::Sfagc(conv(&["p3a.co"], &["p3a"], 20, Identity, 256))),
                stage(
                    "fp1",
                    StageKind::Propagate {
                        from: refs(&["p3a", "p3b"]),
                        to: Ref::feats("pool1"),
                        skip: refs(&["pool1", "p2a", "p2b"]),
                        widths: vec![256],
                    },
                ),
                stage(
                    "fp2",
                    StageKind::Propagate {
                        from: refs(&["fp1"]),
                        to: Ref::feats("x"),
                        skip: refs(&["p1a", "p1b"]),
                        widths: vec![128],
                    },
                ),
            ],
            heads: refs(&["fp2"]),
            head_hidden: 128,
            dropout: 0.4,
            bias: false,
            ablation: Ablation::FULL,
        }
    }

    /// Two-phase classifier for 64-point clouds.
    pub fn toy_classify() -> Self {
        NetworkSpec {
            name: "toy-classify".into(),
            task: Task::Classify,
            stages: vec![
                stage("p1a", StageKind::Sfagc(conv(&["x"], &["x"], 8, Mlp(8), 16))),
                stage("p1b", StageKind::Sfagc(conv(&["p1a.co"], &["p1a"], 8, Identity, 32))),
                stage(
                    "pool1",
                    StageKind::ScorePool {
                        conv: conv(&["x", "p1a", "p1b"], &["x", "p1a", "p1b"], 8, Mlp(8), 32),
                        t: 32,
                    },
                ),
                stage("p2a", StageKind::Sfagc(conv(&["pool1.co"], &["pool1"], 8, Mlp(8), 32))),
                stage("p2b", StageKind::Sfagc(conv(&["p2a.co"], &["p2a"], 8, Identity, 32))),
            ],
            heads: refs(&["p1b", "p2b"]),
            head_hidden: 32,
            dropout: 0.3,
            bias: false,
            ablation: Ablation::FULL,
        }
    }

    /// Two-phase segmenter for 128-point clouds.
    pub fn toy_segment() -> Self {
        NetworkSpec {
            name: "toy-segment".into(),
            task: Task::Segment,
            stages: vec![
                stage("p1a", StageKind::Sfagc(conv(&["x"], &["x"], 8, Mlp(8), 16))),
                stage("p1b", StageKind::Sfagc(conv(&["p1a.co"], &["p1a"], 8, Identity, 16))),
                stage(
                    "pool1",
                    StageKind::FpsPool {
                        conv: conv(&["x"], &["x", "p1a", "p1b"], 8, Identity, 32),
                        t: 48,
                    },
                ),
                stage("p2a", StageKind::Sfagc(conv(&["pool1.co"], &["pool1"], 8, Mlp(8), 32))),
                stage("p2b", StageKind::Sfagc(conv(&["p2a.co"], &["p2a"], 8, Identity, 32))),
                stage(
                    "fp1",
                    StageKind::Propagate {
                        from: refs(&["p2a", "p2b"]),
                        to: Ref::feats("x"),
                        skip: refs(&["p1a", "p1b"]),
                        widths: vec![32],
                    },
                ),
            ],
            heads: refs(&["fp1"]),
            head_hidden: 32,
            dropout: 0.4,
            bias: false,
            ablation: Ablation::FULL,
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    /// Stage text for one stage, in the `stage = ...` line format.
    pub fn stage_line(stage: &Stage) -> String {
        let list = |rs: &[Ref]| rs.iter().map(Ref::to_string).collect::<Vec<_>>().join(",");
        let coord = |c: &CoordUpdate| match c {
            CoordUpdate::Identity => "identity".to_string(),
            CoordUpdate::Mlp(w) => format!("mlp:{w}"),
        };
        let conv_args = |c: &ConvSpec| {
            format!(
                "coords={} feats={} k={} coord={} f_out={}",
                list(&c.coords),
                list(&c.feats),
                c.k,
                coord(&c.coord),
                c.f_out
            )
        };
        let widths = |w: &[usize]| w.iter().map(usize::to_string).collect::<Vec<_>>().join("/");
        match &stage.kind {
            StageKind::Sfagc(c) => format!("{} sfagc {}", stage.name, conv_args(c)),
            StageKind::ScorePool { conv, t } => format!("{} score_pool {} t={t}", stage.name, conv_args(conv)),
            StageKind::FpsPool { conv, t } => format!("{} fps_pool {} t={t}", stage.name, conv_args(conv)),
            StageKind::SetAbstraction { on, samples, scales } => format!(
                "{} set_abstraction on={on} samples={samples} scales={}",
                stage.name,
                scales
                    .iter()
                    .map(|s| format!("{}/{}/{}", s.radius, s.group, widths(&s.widths)))
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            StageKind::Propagate { from, to, skip, widths: w } => {
                let mut s = format!("{} propagate from={} to={to}", stage.name, list(from));
                if !skip.is_empty() {
                    s.push_str(&format!(" skip={}", list(skip)));
                }
                s.push_str(&format!(" widths={}", widths(w)));
                s
            }
        }
    }

    pub fn parse_stage(line: &str) -> Result<Stage> {
        let mut words = line.split_whitespace();
        let bad = |m: String| Error::Config(format!("stage {line:?}: {m}"));
        let name = words.next().ok_or_else(|| bad("missing name".into()))?.to_string();
        let kind = words.next().ok_or_else(|| bad("missing kind".into()))?;
        let mut args = std::collections::BTreeMap::new();
        for w in words {
            let (k, v) = w.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {w:?}")))?;
            if args.insert(k.to_string(), v.to_string()).is_some() {
                return Err(bad(format!("duplicate key {k}")));
            }
        }
        let get = |k: &str| args.get(k).cloned().ok_or_else(|| bad(format!("missing {k}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| bad(format!("{k} must be a positive integer")))
        };
        let ref_list = |k: &str| -> Result<Vec<Ref>> {
            match args.get(k) {
                None => Ok(Vec::new()),
                Some(v) => v.split(',').map(Ref::parse).collect(),
            }
        };
        let widths = |s: &str| -> Result<Vec<usize>> {
            s.split('/')
                .map(|w| w.parse().map_err(|_| bad(format!("bad width {w:?}"))))
                .collect()
        };
        let conv_spec = || -> Result<ConvSpec> {
            let coord = match get("coord")?.as_str() {
                "identity" => CoordUpdate::Identity,
                other => match other.strip_prefix("mlp:") {
                    Some(w) => CoordUpdate::Mlp(w.parse().map_err(|_| bad(format!("bad coord {other:?}")))?),
                    None => return Err(bad(format!("coord must be identity or mlp:<width>, got {other:?}"))),
                },
            };
            let c = ConvSpec {
                coords: ref_list("coords")?,
                feats: ref_list("feats")?,
                k: num("k")?,
                coord,
                f_out: num("f_out")?,
            };
            if c.coords.is_empty() || c.feats.is_empty() {
                return Err(bad("coords and feats are required".into()));
            }
            Ok(c)
        };
        let allowed: &[&str] = match kind {
            "sfagc" => &["coords", "feats", "k", "coord", "f_out"],
            "score_pool" | "fps_pool" => &["coords", "feats", "k", "coord", "f_out", "t"],
            "set_abstraction" => &["on", "samples", "scales"],
            "propagate" => &["from", "to", "skip", "widths"],
            _ => &[],
        };
        if let Some(extra) = args.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(bad(format!("unexpected key {extra}")));
        }
        let kind = match kind {
            "sfagc" => StageKind::Sfagc(conv_spec()?),
            "score_pool" => StageKind::ScorePool {
                conv: conv_spec()?,
                t: num("t")?,
            },
            "fps_pool" => StageKind::FpsPool {
                conv: conv_spec()?,
                t: num("t")?,
            },
            "set_abstraction" => {
                let scales = get("scales")?
                    .split(',')
                    .map(|s| {
                        let parts: Vec<&str> = s.split('/').collect();
                        if parts.len() < 3 {
                            return Err(bad(format!("scale {s:?} must be radius/group/width[/width..]")));
                        }
                        Ok(SaScaleSpec {
                            radius: parts[0].parse().map_err(|_| bad(format!("bad radius {:?}", parts[0])))?,
                            group: parts[1].parse().map_err(|_| bad(format!("bad group {:?}", parts[1])))?,
                            widths: widths(&parts[2..].join("/"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                StageKind::SetAbstraction {
                    on: Ref::parse(&get("on")?)?,
                    samples: num("samples")?,
                    scales,
                }
            }
            "propagate" => StageKind::Propagate {
                from: ref_list("from")?,
                to: Ref::parse(&get("to")?)?,
                skip: ref_list("skip")?,
                widths: widths(&get("widths")?)?,
            },
            other => return Err(bad(format!("unknown stage kind {other:?}"))),
        };
        Ok(Stage { name, kind })
    }

    /// Serializes to the `key = value` text form read by [`NetworkSpec::from_pairs`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("name = {}\n", self.name));
        s.push_str(&format!("task = {}\n", self.task.as_str()));
        s.push_str(&format!("head_hidden = {}\n", self.head_hidden));
        s.push_str(&format!("dropout = {}\n", self.dropout));
        s.push_str(&format!("bias = {}\n", self.bias));
        s.push_str(&format!("ablation = {}\n", self.ablation.name()));
        s.push_str(&format!(
            "heads = {}\n",
            self.heads.iter().map(Ref::to_string).collect::<Vec<_>>().join(",")
        ));
        for st in &self.stages {
            s.push_str(&format!("stage = {}\n", Self::stage_line(st)));
        }
        s
    }

    /// Builds a spec from ordered `(key, value)` pairs. A `network` key
    /// selects a builtin whose fields the remaining keys override; `stage`
    /// keys, when present, replace the builtin's stage list.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let base = pairs.iter().find(|(k, _)| k == "network").map(|(_, v)| v.as_str());
        let mut spec = match base {
            Some(b) => Self::builtin(b)?,
            None => NetworkSpec {
                name: "custom".into(),
                task: Task::Classify,
                stages: Vec::new(),
                heads: Vec::new(),
                head_hidden: 64,
                dropout: 0.0,
                bias: false,
                ablation: Ablation::FULL,
            },
        };
        let mut stages = Vec::new();
        for (k, v) in pairs {
            let v = v.as_str();
            match k.as_str() {
                "name" => spec.name = v.to_string(),
                "task" => spec.task = Task::parse(v)?,
                "head_hidden" => {
                    spec.head_hidden = v
                        .parse()
                        .map_err(|_| Error::Config(format!("head_hidden must be an integer, got {v:?}")))?
                }
                "dropout" => {
                    spec.dropout = v
                        .parse()
                        .map_err(|_| Error::Config(format!("dropout must be a number, got {v:?}")))?
                }
                "bias" => {
                    spec.bias = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bias must be true or false, got {v:?}")))?
                }
                "ablation" => spec.ablation = Ablation::variant(v).map_err(|e| Error::Config(e.to_string()))?,
                "heads" => spec.heads = v.split(',').map(Ref::parse).collect::<Result<_>>()?,
                "stage" => stages.push(Self::parse_stage(v)?),
                _ => {}
            }
        }
        if !stages.is_empty() {
            spec.stages = stages;
        }
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", spec.dropout)));
        }
        if spec.stages.is_empty() || spec.heads.is_empty() {
            return Err(Error::Config("network needs at least one stage and one head".into()));
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refs_parse_and_print() {
        for s in ["x", "p1a.co", "p1b@pool1", "pool1.co@pool2"] {
            assert_eq!(Ref::parse(s).unwrap().to_string(), s);
        }
        assert!(Ref::parse("@pool").is_err());
        assert!(Ref::parse("a@").is_err());
    }

    #[test]
    fn builtins_round_trip_through_text() {
        for name in ["full-classify", "full-segment", "toy-classify", "toy-segment"] {
            let spec = NetworkSpec::builtin(name).unwrap();
            let pairs: Vec<(String, String)> = spec
                .to_text()
                .lines()
                .map(|l| {
                    let (k, v) = l.split_once('=').unwrap();
                    (k.trim().to_string(), v.trim().to_string())
                })
                .collect();
            assert_eq!(NetworkSpec::from_pairs(&pairs).unwrap(), spec);
        }
    }

    #[test]
    fn stage_parse_errors() {
        assert!(NetworkSpec::parse_stage("a sfagc coords=x feats=x k=2 f_out=4").is_err());
        assert!(NetworkSpec::parse_stage("a sfagc coords=x feats=x k=2 coord=mlp:x f_out=4").is_err());
        assert!(NetworkSpec::parse_stage("a blob").is_err());
        assert!(NetworkSpec::parse_stage("a sfagc coords=x feats=x k=2 coord=identity f_out=4 t=3").is_err());
    }
}
