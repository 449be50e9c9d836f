//! Optimizer, learning-rate schedule, datasets, and the training loop.

pub mod data;
pub mod metrics;
pub mod models;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Mode, Var};
use crate::io;
use crate::kernels::interp::UpsampleKind;
use crate::nn::{Module, ParamKind};
use crate::rng::Rng;
use crate::tensor::Tensor;

use data::{CopySample, DepthScene, SegSample};
use metrics::{metrics_seg, metrics_sr, psnr_from_rmse};
pub use models::{Model, ModelId, TaskId};

/// Depth maps are stored in [0, 1]; metrics are reported on a 0..255 scale.
pub const DEPTH_MAX: f64 = 255.0;

fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_power() -> f64 {
    0.9
}
fn default_total_iters() -> usize {
    2000
}
fn default_batch_size() -> usize {
    8
}
fn default_log_every() -> usize {
    100
}
fn default_size() -> usize {
    64
}
fn default_train_samples() -> usize {
    256
}
fn default_test_samples() -> usize {
    16
}
fn default_kernel_size() -> usize {
    3
}
fn default_n_classes() -> usize {
    5
}
fn default_scale() -> usize {
    4
}
fn default_width() -> usize {
    32
}
fn default_tile() -> usize {
    4
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelId,
    /// Defaults to the task the model is built for.
    #[serde(default)]
    pub task: Option<TaskId>,
    /// Initial learning rate of the poly schedule.
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Exponent of the poly schedule.
    #[serde(default = "default_power")]
    pub power: f64,
    #[serde(default = "default_total_iters")]
    pub total_iters: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Seeds initialization and batch sampling.
    #[serde(default)]
    pub seed: u64,
    /// Seeds dataset generation.
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_train_samples")]
    pub train_samples: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    #[serde(default = "default_tile")]
    pub tile: usize,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    #[serde(default = "default_scale")]
    pub scale: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Momentum SGD.
    #[default]
    Sgd,
    /// Adam with β = (0.9, 0.999); `momentum` is ignored.
    Adam,
}

impl RunConfig {
    pub fn new(model: ModelId) -> Self {
        serde_json::from_value(serde_json::json!({ "model": model })).expect("defaults")
    }

    /// Parses JSON, naming the offending key on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.to_string();
            let key = if key == "." {
                unknown_field(&message).unwrap_or(key)
            } else {
                key
            };
            Error::Config { key, message }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn task(&self) -> TaskId {
        self.task.unwrap_or_else(|| self.model.task())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: key.into(),
                message,
            })
        };
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be finite and ≥ 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        if self.power.is_nan() || self.power <= 0.0 {
            return bad("power", format!("must be > 0, got {}", self.power));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay", format!("must be ≥ 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be ≥ 1".into());
        }
        if self.log_every == 0 {
            return bad("log_every", "must be ≥ 1".into());
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return bad("train_samples", "sample counts must be ≥ 1".into());
        }
        if self.width < 2 {
            return bad("width", "must be ≥ 2".into());
        }
        if self.task() != self.model.task() {
            return bad(
                "task",
                format!("model {:?} cannot be trained on {:?}", self.model, self.task()),
            );
        }
        Ok(())
    }
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

/// γ₀ · (1 − it / total)^p, and 0 once `it ≥ total`.
pub fn poly_lr(base: f64, power: f64, it: usize, total: usize) -> f64 {
    if it >= total {
        return 0.0;
    }
    base * (1.0 - it as f64 / total as f64).powf(power)
}

/// One momentum-SGD update: v ← μ·v + g + λ·θ, θ ← θ − lr·v.
pub fn sgd_step(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Momentum SGD over a module's parameters. Weight decay reaches convolution
/// weights only.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, module: &mut dyn Module, grads: &Gradients, lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        module.visit_mut("", &mut |name, p| {
            let Some(g) = grads.param(p).cloned() else { return };
            let v = velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            let decay = if p.kind == ParamKind::Weight { wd } else { 0.0 };
            sgd_step(p.value.data_mut(), g.data(), v, lr, mu, decay);
        });
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment estimates of one tensor.
#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Adam with bias correction. Weight decay is added to the gradient of
/// convolution weights, as for [`Sgd`].
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub weight_decay: f64,
    steps: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::default()
        }
    }

    pub fn step(&mut self, module: &mut dyn Module, grads: &Gradients, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        let wd = self.weight_decay;
        let moments = &mut self.moments;
        module.visit_mut("", &mut |name, p| {
            let Some(g) = grads.param(p) else { return };
            let st = moments.entry(name.to_string()).or_insert_with(|| Moments {
                first: vec![0.0; p.len()],
                second: vec![0.0; p.len()],
            });
            let decay = if p.kind == ParamKind::Weight { wd } else { 0.0 };
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] + decay * *v;
                st.first[i] = ADAM_BETA1 * st.first[i] + (1.0 - ADAM_BETA1) * gi;
                st.second[i] = ADAM_BETA2 * st.second[i] + (1.0 - ADAM_BETA2) * gi * gi;
                *v -= lr * (st.first[i] / c1) / ((st.second[i] / c2).sqrt() + ADAM_EPS);
            }
        });
    }
}

/// The optimizer selected by a run config.
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn for_run(cfg: &RunConfig) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(cfg.momentum, cfg.weight_decay)),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(cfg.weight_decay)),
        }
    }

    pub fn step(&mut self, module: &mut dyn Module, grads: &Gradients, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.step(module, grads, lr),
            Optimizer::Adam(o) => o.step(module, grads, lr),
        }
    }
}

/// Training and held-out data of one task.
pub enum Dataset {
    Copy {
        train: Vec<CopySample>,
        test: Vec<CopySample>,
    },
    Seg {
        train: Vec<SegSample>,
        test: Vec<SegSample>,
    },
    Depth {
        train: Vec<DepthScene>,
        test: Vec<DepthScene>,
    },
}

/// Held-out sets come from a separate generator seed.
pub fn held_out_seed(data_seed: u64) -> u64 {
    data_seed ^ 0x7e57_0000_0000_0000
}

impl Dataset {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let (train_seed, test_seed) = (cfg.data_seed, held_out_seed(cfg.data_seed));
        Ok(match cfg.task() {
            TaskId::DirectionCopy => {
                let mut gen = data::DirectionCopyConfig::new(cfg.size);
                gen.tile = cfg.tile;
                Dataset::Copy {
                    train: data::gen_direction_copy_with(&gen, train_seed, cfg.train_samples)?,
                    test: data::gen_direction_copy_with(&gen, test_seed, cfg.test_samples)?,
                }
            }
            TaskId::ShapesSeg => Dataset::Seg {
                train: data::gen_shapes_seg(train_seed, cfg.train_samples, cfg.size, cfg.n_classes)?,
                test: data::gen_shapes_seg(test_seed, cfg.test_samples, cfg.size, cfg.n_classes)?,
            },
            TaskId::DepthSr => Dataset::Depth {
                train: data::gen_depth_scenes(train_seed, cfg.train_samples, cfg.size, cfg.scale)?,
                test: data::gen_depth_scenes(test_seed, cfg.test_samples, cfg.size, cfg.scale)?,
            },
        })
    }

    fn train_len(&self) -> usize {
        match self {
            Dataset::Copy { train, .. } => train.len(),
            Dataset::Seg { train, .. } => train.len(),
            Dataset::Depth { train, .. } => train.len(),
        }
    }
}

/// Model inputs and the supervision for a batch.
pub enum Target {
    Dense(Tensor),
    Labels(Vec<usize>),
}

pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub target: Target,
}

fn stack<T>(items: &[&T], f: impl Fn(&T) -> &Tensor) -> Result<Tensor> {
    let ts: Vec<Tensor> = items.iter().map(|s| f(s).clone()).collect();
    Tensor::stack_batch(&ts)
}

fn copy_batch(items: &[&CopySample]) -> Result<Batch> {
    Ok(Batch {
        inputs: vec![stack(items, |s| &s.input)?],
        target: Target::Dense(stack(items, |s| &s.target)?),
    })
}

fn seg_batch(items: &[&SegSample]) -> Result<Batch> {
    Ok(Batch {
        inputs: vec![stack(items, |s| &s.image)?],
        target: Target::Labels(items.iter().flat_map(|s| s.labels.iter().copied()).collect()),
    })
}

fn depth_batch(items: &[&DepthScene]) -> Result<Batch> {
    Ok(Batch {
        inputs: vec![stack(items, |s| &s.lr_depth)?, stack(items, |s| &s.guide)?],
        target: Target::Dense(stack(items, |s| &s.hr_depth)?),
    })
}

fn select<'a, T>(items: &'a [T], idx: &[usize]) -> Vec<&'a T> {
    idx.iter().map(|&i| &items[i]).collect()
}

impl Dataset {
    fn train_batch(&self, idx: &[usize]) -> Result<Batch> {
        match self {
            Dataset::Copy { train, .. } => copy_batch(&select(train, idx)),
            Dataset::Seg { train, .. } => seg_batch(&select(train, idx)),
            Dataset::Depth { train, .. } => depth_batch(&select(train, idx)),
        }
    }
}

/// Forward pass plus the task loss.
pub fn loss_on(model: &mut Model, g: &mut Graph, batch: &Batch) -> Result<(Var, Var)> {
    let vars: Vec<Var> = batch.inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = model.forward(g, &vars)?;
    let loss = match &batch.target {
        Target::Dense(t) => g.mse(out, t)?,
        Target::Labels(l) => g.cross_entropy(out, l)?,
    };
    Ok((out, loss))
}

/// Named scalar metrics, ordered by name.
pub type Metrics = BTreeMap<String, f64>;

/// Per-scene RMSE of the model and of bicubic up-sampling, on the 0..255 scale.
pub fn depth_scene_rmse(model: &mut Model, scenes: &[DepthScene], scale: usize) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(scenes.len());
    for s in scenes {
        let batch = depth_batch(&[s])?;
        let mut g = Graph::new(Mode::Eval);
        let (pred, _) = loss_on(model, &mut g, &batch)?;
        let base = crate::ops::upsample(&s.lr_depth, scale, UpsampleKind::Bicubic)?;
        let to_scale = |t: &Tensor| t.data().iter().map(|v| v * DEPTH_MAX).collect::<Vec<_>>();
        let truth = to_scale(&s.hr_depth);
        let m = metrics_sr(&to_scale(g.value(pred)), &truth, DEPTH_MAX)?;
        let b = metrics_sr(&to_scale(&base), &truth, DEPTH_MAX)?;
        out.push((m.rmse, b.rmse));
    }
    Ok(out)
}

/// Predicted labels (argmax over channels) for one batch of logits.
pub fn argmax_labels(logits: &Tensor) -> Vec<usize> {
    let [nb, nc, h, w] = logits.dims();
    let mut out = Vec::with_capacity(nb * h * w);
    for b in 0..nb {
        for p in 0..h * w {
            let mut best = 0;
            for c in 1..nc {
                if logits.data()[(b * nc + c) * h * w + p] > logits.data()[(b * nc + best) * h * w + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Held-out metrics in eval mode.
pub fn evaluate(model: &mut Model, dataset: &Dataset, cfg: &RunConfig) -> Result<Metrics> {
    let mut m = Metrics::new();
    match dataset {
        Dataset::Copy { test, .. } => {
            let mut total = 0.0;
            for chunk in test.chunks(cfg.batch_size) {
                let batch = copy_batch(&chunk.iter().collect::<Vec<_>>())?;
                let mut g = Graph::new(Mode::Eval);
                let (_, loss) = loss_on(model, &mut g, &batch)?;
                total += g.value(loss).data()[0] * chunk.len() as f64;
            }
            m.insert("test_mse".into(), total / test.len() as f64);
        }
        Dataset::Seg { test, .. } => {
            let mut pred = Vec::new();
            let mut truth = Vec::new();
            let mut total = 0.0;
            for chunk in test.chunks(cfg.batch_size) {
                let batch = seg_batch(&chunk.iter().collect::<Vec<_>>())?;
                let mut g = Graph::new(Mode::Eval);
                let (out, loss) = loss_on(model, &mut g, &batch)?;
                total += g.value(loss).data()[0] * chunk.len() as f64;
                pred.extend(argmax_labels(g.value(out)));
                truth.extend(chunk.iter().flat_map(|s| s.labels.iter().copied()));
            }
            let s = metrics_seg(&pred, &truth, cfg.n_classes)?;
            m.insert("test_loss".into(), total / test.len() as f64);
            m.insert("miou".into(), s.miou);
            m.insert("pix_acc".into(), s.pix_acc);
        }
        Dataset::Depth { test, .. } => {
            let rows = depth_scene_rmse(model, test, cfg.scale)?;
            let n = rows.len() as f64;
            let rmse = rows.iter().map(|r| r.0).sum::<f64>() / n;
            let bicubic = rows.iter().map(|r| r.1).sum::<f64>() / n;
            m.insert("rmse".into(), rmse);
            m.insert("psnr".into(), psnr_from_rmse(rmse, DEPTH_MAX));
            m.insert("bicubic_rmse".into(), bicubic);
            m.insert("bicubic_psnr".into(), psnr_from_rmse(bicubic, DEPTH_MAX));
            m.insert("win_rate".into(), rows.iter().filter(|r| r.0 < r.1).count() as f64 / n);
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    /// Loss of the most recent training batch.
    pub loss: f64,
    pub metrics: Metrics,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRow>,
    pub metrics: Metrics,
}

/// Stream labels of the run seed.
const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;

pub fn init_model(cfg: &RunConfig) -> Result<Model> {
    Model::build(cfg, &mut Rng::derived(cfg.seed, INIT_STREAM))
}

/// Trains `cfg.model` with the poly schedule and the configured optimizer. Metrics on the
/// held-out set are logged every `log_every` iterations and at the end.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = Dataset::build(cfg)?;
    train_on(cfg, &dataset)
}

pub fn train_on(cfg: &RunConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    let mut model = init_model(cfg)?;
    let mut opt = Optimizer::for_run(cfg);
    let mut rng = Rng::derived(cfg.seed, BATCH_STREAM);
    let n = dataset.train_len();
    let mut log = Vec::new();
    for it in 0..cfg.total_iters {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(n)).collect();
        let batch = dataset.train_batch(&idx)?;
        let mut g = Graph::new(Mode::Train);
        let (_, loss) = loss_on(&mut model, &mut g, &batch)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                loss: value,
            });
        }
        let grads = g.backward(loss)?;
        let lr = poly_lr(cfg.lr, cfg.power, it, cfg.total_iters);
        opt.step(&mut model, &grads, lr);
        let done = it + 1;
        if done % cfg.log_every == 0 || done == cfg.total_iters {
            log.push(LogRow {
                iteration: done,
                lr,
                loss: value,
                metrics: evaluate(&mut model, dataset, cfg)?,
            });
        }
    }
    let metrics = match log.last() {
        Some(row) => row.metrics.clone(),
        None => evaluate(&mut model, dataset, cfg)?,
    };
    Ok(TrainOutcome { model, log, metrics })
}

/// CSV with columns iteration, lr, loss, then one column per metric.
pub fn log_csv(log: &[LogRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let names: Vec<String> = log
        .first()
        .map(|r| r.metrics.keys().cloned().collect())
        .unwrap_or_default();
    let mut header = vec!["iteration".to_string(), "lr".into(), "loss".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for r in log {
        let mut rec = vec![r.iteration.to_string(), fmt_f64(r.lr), fmt_f64(r.loss)];
        rec.extend(names.iter().map(|n| fmt_f64(r.metrics[n])));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:?}")
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

/// JSON object of metrics; infinities become the strings "inf" / "-inf".
/// JSON number for finite values, a string such as `"inf"` otherwise.
pub fn json_f64(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::json!(fmt_f64(v))
    }
}

pub fn metrics_json(m: &Metrics) -> serde_json::Value {
    serde_json::Value::Object(m.iter().map(|(k, &v)| (k.clone(), json_f64(v))).collect())
}

/// Description stored in a checkpoint manifest.
pub fn model_manifest(cfg: &RunConfig) -> serde_json::Value {
    serde_json::json!({ "run": cfg })
}

/// Writes the resolved config, the CSV log, the final metrics, and a checkpoint.
pub fn write_run(out: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    io::ensure_dir(out)?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("config.json", serde_json::to_string_pretty(cfg)? + "\n")?;
    write("log.csv", log_csv(&outcome.log)?)?;
    write(
        "metrics.json",
        serde_json::to_string_pretty(&metrics_json(&outcome.metrics))? + "\n",
    )?;
    io::save_checkpoint(&out.join("checkpoint"), &outcome.model, model_manifest(cfg))?;
    Ok(())
}

/// Rebuilds a model from a checkpoint directory written by [`write_run`].
pub fn load_model(dir: &Path) -> Result<(RunConfig, Model)> {
    let manifest = io::read_manifest(dir)?;
    let run = manifest.model.get("run").cloned().ok_or_else(|| Error::Format {
        path: dir.join(io::MANIFEST),
        message: "manifest has no run config".into(),
    })?;
    let cfg = RunConfig::from_json(&run.to_string())?;
    let mut model = init_model(&cfg)?;
    io::load_checkpoint(dir, &mut model)?;
    Ok((cfg, model))
}

/// Loads a checkpoint and evaluates it on the held-out set of its config.
pub fn eval_checkpoint(dir: &Path) -> Result<(RunConfig, Metrics)> {
    let (cfg, mut model) = load_model(dir)?;
    let dataset = Dataset::build(&cfg)?;
    let m = evaluate(&mut model, &dataset, &cfg)?;
    Ok((cfg, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(0.01, 0.9, 0, 100), 0.01);
        assert_eq!(poly_lr(0.01, 0.9, 100, 100), 0.0);
        assert!((poly_lr(0.01, 0.9, 75_000, 150_000) - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let (lr, g) = (0.1, 2.0);
        let mut p = [1.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0);
        sgd_step(&mut p, &[g], &mut v, lr, 0.9, 0.0);
        assert!((1.0 - p[0] - lr * (g + 1.9 * g)).abs() < 1e-15);
    }

    #[test]
    fn config_errors_name_the_key() {
        let err = RunConfig::from_json(r#"{"model": "paka-single", "lr": "fast"}"#).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "lr"), "{err}");
        let err = RunConfig::from_json(r#"{"model": "paka-single", "lrate": 0.1}"#).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "lrate"), "{err}");
        let err = RunConfig::from_json(r#"{"model": "paka-single", "momentum": 1.0}"#).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "momentum"), "{err}");
    }

    #[test]
    fn defaults_match_recipe() {
        let cfg = RunConfig::new(ModelId::HpmSeg);
        assert_eq!(
            (cfg.lr, cfg.momentum, cfg.weight_decay, cfg.power),
            (0.01, 0.9, 1e-4, 0.9)
        );
        assert_eq!(cfg.task(), TaskId::ShapesSeg);
    }
}
