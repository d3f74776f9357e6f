//! Command implementations behind the CLI: train, eval, gradcheck, synth
//! and convert-off.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::io::config::{parse_pairs, Augment, RunConfig};
use crate::io::manifest::{Manifest, Sample};
use crate::io::points::{normalize_unit_sphere, save_points, Format};
use crate::io::synth::random_rotation;
use crate::layer::{CoordUpdate, SfagcConfig, SfagcLayer};
use crate::models::{argmax, mean_class_accuracy, mean_iou, overall_accuracy, Network, NetworkSpec, Task};
use crate::nn::Ctx;
use crate::params::{finite_diff_grad, max_relative_error, sum_grads, Adam, ParamStore};
use crate::pooling::{FpsPool, FpsSeed, ScorePool};
use crate::tape::Var;
use crate::tensor::Tensor;

/// One line of the training metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_oa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_miou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
}

/// Path of the network description saved next to a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".net");
    PathBuf::from(s)
}

/// Writes parameters and the network description needed to rebuild them.
pub fn save_model(path: &Path, net: &Network, store: &ParamStore) -> Result<()> {
    checkpoint::save(store, path)?;
    let mut text = net.spec.to_text();
    text.push_str(&format!("in_dim = {}\nclasses = {}\n", net.in_dim, net.classes));
    fs::write(sidecar_path(path), text)?;
    Ok(())
}

/// Rebuilds a network from a checkpoint and its sidecar description.
pub fn load_model(path: &Path) -> Result<(Network, ParamStore)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side)
        .map_err(|e| Error::Checkpoint(format!("cannot read network description {}: {e}", side.display())))?;
    let source = side.display().to_string();
    let mut pairs = Vec::new();
    let mut dims = (None, None);
    for line in text.lines() {
        match line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
            Some(("in_dim", v)) => dims.0 = v.parse::<usize>().ok(),
            Some(("classes", v)) => dims.1 = v.parse::<usize>().ok(),
            _ => pairs.push(line),
        }
    }
    let (Some(in_dim), Some(classes)) = dims else {
        return Err(Error::Checkpoint(format!("{source}: missing in_dim or classes")));
    };
    let spec = NetworkSpec::from_pairs(&parse_pairs(&pairs.join("\n"), &source)?)?;
    let mut store = ParamStore::new();
    let net = Network::new(spec, in_dim, classes, &mut store, 0)?;
    store.load_records(checkpoint::load(path)?)?;
    Ok((net, store))
}

fn rotate_z(points: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let r = random_rotation(rng, false);
    let mut out = points.clone();
    for i in 0..out.rows() {
        let p = points.row(i);
        let row = &mut out.data_mut()[i * p.len()..(i + 1) * p.len()];
        for d in 0..3.min(p.len()) {
            row[d] = (0..3.min(p.len())).map(|j| r[d][j] * p[j]).sum();
        }
    }
    out
}

fn sample_labels(task: Task, s: &Sample) -> Vec<usize> {
    match task {
        Task::Classify => vec![s.label],
        Task::Segment => s.parts.clone(),
    }
}

/// Test metric: OA (classification) or mIoU (segmentation).
pub fn evaluate(net: &Network, store: &ParamStore, manifest: &Manifest, samples: &[Sample]) -> Result<EvalReport> {
    match net.spec.task {
        Task::Classify => {
            let mut preds = Vec::with_capacity(samples.len());
            for s in samples {
                preds.push(argmax(net.predict(store, &s.points)?.data()));
            }
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            Ok(EvalReport::Classification {
                oa: overall_accuracy(&preds, &labels)?,
                macc: mean_class_accuracy(&preds, &labels)?,
            })
        }
        Task::Segment => {
            let mut shapes = Vec::with_capacity(samples.len());
            for s in samples {
                let logits = net.predict(store, &s.points)?;
                let allowed = &manifest.parts[s.label];
                let preds = (0..logits.rows())
                    .map(|i| {
                        let row = logits.row(i);
                        let best = argmax(&allowed.iter().map(|&p| row[p]).collect::<Vec<_>>());
                        allowed[best]
                    })
                    .collect();
                shapes.push((s.label, (preds, s.parts.clone(), allowed.clone())));
            }
            let mut per_category = Vec::new();
            for (c, name) in manifest.labels.iter().enumerate() {
                let cat: Vec<_> = shapes.iter().filter(|(l, _)| *l == c).map(|(_, s)| s.clone()).collect();
                if !cat.is_empty() {
                    per_category.push((name.clone(), mean_iou(&cat)?));
                }
            }
            let all: Vec<_> = shapes.into_iter().map(|(_, s)| s).collect();
            Ok(EvalReport::Segmentation {
                miou: mean_iou(&all)?,
                per_category,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EvalReport {
    Classification { oa: f64, macc: f64 },
    Segmentation { miou: f64, per_category: Vec<(String, f64)> },
}

impl EvalReport {
    /// OA or mIoU.
    pub fn headline(&self) -> f64 {
        match self {
            EvalReport::Classification { oa, .. } => *oa,
            EvalReport::Segmentation { miou, .. } => *miou,
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalReport::Classification { oa, macc } => {
                writeln!(f, "OA   {oa:.4}")?;
                writeln!(f, "mAcc {macc:.4}")
            }
            EvalReport::Segmentation { miou, per_category } => {
                for (name, v) in per_category {
                    writeln!(f, "mIoU {name} {v:.4}")?;
                }
                writeln!(f, "mIoU mean {miou:.4}")
            }
        }
    }
}

/// Loads the manifest and both splits, checking they fit the network.
pub fn load_data(manifest_path: &Path, task: Task) -> Result<(Manifest, Vec<Sample>, Vec<Sample>)> {
    let manifest = Manifest::load(manifest_path)?;
    if manifest.task != task {
        return Err(Error::Config(format!(
            "network task is {} but dataset {} is {}",
            task.as_str(),
            manifest_path.display(),
            manifest.task.as_str()
        )));
    }
    let train = manifest.load_split(&manifest.train)?;
    let test = manifest.load_split(&manifest.test)?;
    Ok((manifest, train, test))
}

/// Mean loss gradient over a batch, and the summed loss.
fn batch_step(net: &Network, store: &ParamStore, batch: &[(Tensor, Vec<usize>, u64)]) -> Result<(f64, Vec<Tensor>)> {
    let mut acc: Option<Vec<Tensor>> = None;
    let mut total = 0.0;
    for (points, labels, seed) in batch {
        let mut ctx = Ctx::training(store, *seed);
        let loss = net.loss(&mut ctx, points, labels)?;
        total += ctx.value(loss).item();
        let grads = store.dense_grads(&ctx.tape.backward(loss)?);
        match acc.as_mut() {
            None => acc = Some(grads),
            Some(a) => sum_grads(a, &grads),
        }
    }
    let mut grads = acc.unwrap_or_default();
    let inv = 1.0 / batch.len() as f64;
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok((total, grads))
}

/// Trains per `cfg`, writing `metrics.jsonl` and `model.ckpt` under `cfg.out`.
/// Each metrics line is also echoed to `log`.
pub fn train(cfg: &RunConfig, log: &mut dyn Write) -> Result<TrainReport> {
    let (manifest, train_set, test_set) = load_data(&cfg.data, cfg.network.task)?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Config("dataset needs non-empty train and test splits".into()));
    }
    let in_dim = train_set[0].points.cols();
    let mut store = ParamStore::new();
    let net = Network::new(cfg.network.clone(), in_dim, manifest.outputs(), &mut store, cfg.seed)?;
    for s in train_set.iter().chain(&test_set) {
        if s.points.cols() != in_dim {
            return Err(Error::Config("samples disagree on coordinate width".into()));
        }
    }
    fs::create_dir_all(&cfg.out)?;
    let metrics_log = cfg.out.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_log)?;
    let mut adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        adam.lr = cfg.schedule.rate(cfg.lr, epoch, cfg.epochs);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<(Tensor, Vec<usize>, u64)> = chunk
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let points = match cfg.augment {
                        Augment::None => s.points.clone(),
                        Augment::RotateZ => rotate_z(&s.points, &mut rng),
                    };
                    (points, sample_labels(net.spec.task, s), rng.gen())
                })
                .collect();
            let (loss, grads) = batch_step(&net, &store, &batch)?;
            loss_sum += loss;
            adam.step(&mut store, &grads)?;
        }
        let report = evaluate(&net, &store, &manifest, &test_set)?;
        let (test_oa, test_miou) = match &report {
            EvalReport::Classification { oa, .. } => (Some(*oa), None),
            EvalReport::Segmentation { miou, .. } => (None, Some(*miou)),
        };
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            test_oa,
            test_miou,
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(metrics, "{line}")?;
        writeln!(log, "{line}")?;
        records.push(rec);
    }
    let checkpoint = cfg.out.join("model.ckpt");
    save_model(&checkpoint, &net, &store)?;
    Ok(TrainReport {
        records,
        checkpoint,
        metrics_log,
    })
}

/// Evaluates a saved model on the test split of `manifest`.
pub fn eval(checkpoint: &Path, manifest: &Path) -> Result<EvalReport> {
    let (net, store) = load_model(checkpoint)?;
    let (m, _, test) = load_data(manifest, net.spec.task)?;
    if m.outputs() != net.classes {
        return Err(Error::Checkpoint(format!(
            "width mismatch: model predicts {} outputs, dataset has {}",
            net.classes,
            m.outputs()
        )));
    }
    if let Some(s) = test.first() {
        if s.points.cols() != net.in_dim {
            return Err(Error::Checkpoint(format!(
                "width mismatch: model expects {}-d points, dataset has {}",
                net.in_dim,
                s.points.cols()
            )));
        }
    }
    evaluate(&net, &store, &m, &test)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Layer,
    Pool,
    Model,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(Scope::Layer),
            "pool" => Ok(Scope::Pool),
            "model" => Ok(Scope::Model),
            other => Err(Error::invalid(format!("unknown gradcheck scope {other:?} (layer, pool, model)"))),
        }
    }
}

/// Finite-difference step and the relative-error floor and threshold.
pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-5;
pub const FD_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub case: String,
    pub param: String,
    pub max_rel_error: f64,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < FD_THRESHOLD
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub rows: Vec<GradRow>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(GradRow::passed)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:<18} {:>12}  status", "case", "parameter", "max_rel_err")?;
        for r in &self.rows {
            let status = if r.passed() { "ok" } else { "FAIL" };
            writeln!(f, "{:<14} {:<18} {:>12.3e}  {status}", r.case, r.param, r.max_rel_error)?;
        }
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(f, "{verdict}: {} parameters, threshold {FD_THRESHOLD:e}", self.rows.len())
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// `Σ R ⊙ x` for a fixed random `R`, so every output entry matters.
fn probe(ctx: &mut Ctx, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let r = random_tensor(rng, ctx.tape.shape(x));
    let r = ctx.constant(r);
    let m = ctx.tape.mul(x, r)?;
    ctx.tape.sum(m)
}

/// Compares tape gradients to central differences for every parameter in
/// `store`. `corrupt` names a parameter whose analytic gradient is
/// perturbed, to exercise failure reporting.
pub fn check_gradients<F>(case: &str, store: &ParamStore, corrupt: Option<&str>, loss: F) -> Result<Vec<GradRow>>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let mut ctx = Ctx::new(store);
    let l = loss(&mut ctx)?;
    let grads = store.dense_grads(&ctx.tape.backward(l)?);
    let mut rows = Vec::new();
    for (id, name, value) in store.iter() {
        let mut trial = store.clone();
        let numeric = finite_diff_grad(
            |theta| {
                *trial.get_mut(id) = theta.clone();
                let mut c = Ctx::new(&trial);
                let v = loss(&mut c)?;
                Ok(c.value(v).item())
            },
            value,
            FD_STEP,
        )?;
        let mut analytic = grads[id.0].clone();
        let short = name.rsplit('.').next().unwrap_or(name);
        if corrupt.is_some_and(|c| c == name || c == short) {
            analytic.data_mut().iter_mut().for_each(|g| *g = *g * 1.01 + 1e-3);
        }
        rows.push(GradRow {
            case: case.into(),
            param: name.to_string(),
            max_rel_error: max_relative_error(&analytic, &numeric, FD_FLOOR),
        });
    }
    Ok(rows)
}

const GC_NODES: usize = 12;
const GC_K: usize = 4;

fn layer_case(name: &str, coord_update: CoordUpdate, corrupt: Option<&str>, seed: u64) -> Result<Vec<GradRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = SfagcConfig::new(3, 5, coord_update, 8, GC_K);
    let layer = SfagcLayer::new(&mut store, name, cfg, &mut rng)?;
    let coords = random_tensor(&mut rng, &[GC_NODES, 3]);
    let feats = random_tensor(&mut rng, &[GC_NODES, 5]);
    check_gradients(name, &store, corrupt, |ctx| {
        let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
        let c = ctx.constant(coords.clone());
        let f = ctx.constant(feats.clone());
        let out = layer.forward(ctx, c, f)?;
        let a = probe(ctx, out.feats, &mut r)?;
        let b = probe(ctx, out.coords, &mut r)?;
        ctx.tape.add(a, b)
    })
}

fn pool_case(name: &str, score: bool, corrupt: Option<&str>, seed: u64) -> Result<Vec<GradRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = SfagcConfig::new(3, 5, CoordUpdate::Mlp(4), 6, GC_K);
    let coords = random_tensor(&mut rng, &[GC_NODES, 3]);
    let feats = random_tensor(&mut rng, &[GC_NODES, 5]);
    enum P {
        S(ScorePool),
        F(FpsPool),
    }
    let pool = if score {
        P::S(ScorePool::new(&mut store, name, cfg, 5, &mut rng)?)
    } else {
        P::F(FpsPool::new(&mut store, name, cfg, 5, FpsSeed::Index(0), &mut rng)?)
    };
    check_gradients(name, &store, corrupt, |ctx| {
        let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
        let c = ctx.constant(coords.clone());
        let f = ctx.constant(feats.clone());
        let out = match &pool {
            P::S(p) => p.forward(ctx, c, f)?,
            P::F(p) => p.forward(ctx, c, f)?,
        };
        let a = probe(ctx, out.feats, &mut r)?;
        let b = probe(ctx, out.coords, &mut r)?;
        ctx.tape.add(a, b)
    })
}

/// Small classification and segmentation networks for gradient checks.
pub fn gradcheck_specs() -> [NetworkSpec; 2] {
    let text = |lines: &[&str]| {
        let pairs = parse_pairs(&lines.join("\n"), "gradcheck").expect("static spec");
        NetworkSpec::from_pairs(&pairs).expect("static spec")
    };
    [
        text(&[
            "name = gc-classify",
            "task = classify",
            "head_hidden = 6",
            "stage = p1 sfagc coords=x feats=x k=4 coord=mlp:4 f_out=6",
            "stage = pool1 score_pool coords=p1.co,p1 feats=x,p1 k=4 t=6 coord=mlp:4 f_out=6",
            "stage = p2 sfagc coords=pool1.co feats=pool1 k=3 coord=identity f_out=8",
            "stage = p3 set_abstraction on=x samples=4 scales=0.8/4/5",
            "heads = p1,p2,p3",
        ]),
        text(&[
            "name = gc-segment",
            "task = segment",
            "head_hidden = 6",
            "stage = p1 sfagc coords=x feats=x k=4 coord=identity f_out=6",
            "stage = pool1 fps_pool coords=x feats=x,p1 k=4 t=6 coord=mlp:4 f_out=6",
            "stage = p2 sfagc coords=pool1.co feats=pool1 k=3 coord=identity f_out=8",
            "stage = fp1 propagate from=p2 to=x skip=p1 widths=6",
            "heads = fp1",
        ]),
    ]
}

fn model_case(spec: NetworkSpec, corrupt: Option<&str>, seed: u64) -> Result<Vec<GradRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let case = spec.name.clone();
    let net = Network::new(spec, 3, 3, &mut store, seed)?;
    let points = random_tensor(&mut rng, &[GC_NODES, 3]);
    let labels: Vec<usize> = match net.spec.task {
        Task::Classify => vec![1],
        Task::Segment => (0..GC_NODES).map(|i| i % 3).collect(),
    };
    check_gradients(&case, &store, corrupt, |ctx| net.loss(ctx, &points, &labels))
}

/// Gradient checks at N=12, k=4, widths ≤ 8.
pub fn gradcheck(scope: Scope, corrupt: Option<&str>) -> Result<GradReport> {
    let rows = match scope {
        Scope::Layer => {
            let mut rows = layer_case("sfagc", CoordUpdate::Mlp(6), corrupt, 11)?;
            rows.extend(layer_case("sfagc-id", CoordUpdate::Identity, corrupt, 12)?);
            rows
        }
        Scope::Pool => {
            let mut rows = pool_case("score_pool", true, corrupt, 21)?;
            rows.extend(pool_case("fps_pool", false, corrupt, 22)?);
            rows
        }
        Scope::Model => {
            let [c, s] = gradcheck_specs();
            let mut rows = model_case(c, corrupt, 31)?;
            rows.extend(model_case(s, corrupt, 32)?);
            rows
        }
    };
    Ok(GradReport { rows })
}

/// Generates a synthetic dataset under `out`; returns the manifest path.
pub fn synth(kind: &str, out: &Path, seed: u64, opts: Option<crate::io::SynthOptions>) -> Result<PathBuf> {
    let kind = crate::io::SynthKind::parse(kind)?;
    let opts = opts.unwrap_or_else(|| crate::io::SynthOptions::default_for(kind));
    crate::io::synth_dataset(kind, opts, seed, out)?;
    Ok(out.join("manifest.txt"))
}

/// Samples `n` points from an OFF mesh, normalizes them to the unit sphere
/// and writes them (binary for `.bin`, text otherwise).
pub fn convert_off(input: &Path, n: usize, out: &Path, seed: u64) -> Result<()> {
    let pts = crate::io::sample_off_mesh(input, n, seed)?;
    save_points(out, &normalize_unit_sphere(&pts.coords), Format::from_path(out))
}
