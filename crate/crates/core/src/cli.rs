//! Command-line interface. Logs and resolved configs go to stderr; eval,
//! inspect, and bench print machine-readable results to stdout.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::error::{Error, Result};
use crate::field::{field_csv, propagational_field, render_field, trace_attention, FieldQuery, RenderOptions};
use crate::geometry::ConvSpec;
use crate::gradcheck::{run_suites, CheckOptions, Scope, DEFAULT_SEEDS};
use crate::io::{self, DType, Gray, Rgb};
use crate::paka::{kernel_attention, paka_conv2d_fused, paka_conv2d_materialized};
use crate::parallel;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{self, data, Dataset, RunConfig, TaskId};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NUMERICAL: u8 = 2;
pub const EXIT_IO: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "paka",
    version,
    about = "Pixel-adaptive kernel attention: training, checking, and visualization"
)]
pub struct Cli {
    /// Worker threads; 1 selects the sequential reference path.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its held-out set.
    Eval(EvalArgs),
    /// Compute and render the propagational field of one pixel.
    Field(FieldArgs),
    /// Time fused against materialized attention convolution.
    Bench(BenchArgs),
    /// Write a synthetic dataset to disk.
    GenData(GenDataArgs),
    /// Describe a checkpoint, tensor file, or image.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// primitive, paka, hpm, joint, or all.
    #[arg(long, default_value = "all")]
    pub scope: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_SEEDS)]
    pub seeds: usize,
    /// Directory for report.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Perturbs the backward pass of the named op.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory (the `checkpoint` folder of a training run).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation config; defaults to the one stored with the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FieldArgs {
    /// Checkpoint to load; without it the model is built from `--config`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub y: usize,
    #[arg(long)]
    pub x: usize,
    /// Comma-separated trace indices; all attention layers by default.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long, default_value_t = crate::field::DEFAULT_DEPTH)]
    pub depth: usize,
    /// Held-out sample to run.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    #[arg(long, default_value_t = 8)]
    pub zoom: usize,
    #[arg(long, default_value = "field")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Spatial sizes (square maps).
    #[arg(long, value_delimiter = ',', default_values_t = vec![16usize, 32, 64])]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for bench.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// direction-copy, shapes-seg, or depth-sr.
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    #[arg(long, default_value_t = 5)]
    pub n_classes: usize,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Invalid(_) | Error::Shape { .. } => EXIT_USAGE,
        Error::Divergence { .. } => EXIT_NUMERICAL,
        Error::Io { .. } | Error::Format { .. } | Error::Json(_) => EXIT_IO,
    }
}

/// A failed command: the error to report and the exit code.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

/// Parses `args` and runs the command, mapping errors to exit codes.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    parallel::set_threads(cli.threads);
    match cli.command {
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Train(a) => cmd_train(&a).map_err(Into::into),
        Command::Eval(a) => cmd_eval(&a).map_err(Into::into),
        Command::Field(a) => cmd_field(&a).map_err(Into::into),
        Command::Bench(a) => cmd_bench(&a),
        Command::GenData(a) => cmd_gen_data(&a).map_err(Into::into),
        Command::Inspect(a) => cmd_inspect(&a).map_err(Into::into),
    }
}

fn echo(command: &str, resolved: serde_json::Value) {
    eprintln!("{}", json!({ "command": command, "resolved": resolved }));
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json(&text)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<(), Failure> {
    let scope = Scope::parse(&a.scope).ok_or_else(|| Failure {
        code: EXIT_USAGE,
        message: format!("unknown scope `{}` (primitive, paka, hpm, joint, all)", a.scope),
    })?;
    let mut opts = CheckOptions::new();
    opts.fault = a.inject_fault.clone();
    echo(
        "gradcheck",
        json!({ "scope": a.scope, "seed": a.seed, "seeds": a.seeds, "h": opts.h }),
    );
    let report = run_suites(scope, a.seed, a.seeds, &opts)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        io::ensure_dir(out)?;
        write_text(&out.join("report.txt"), &text)?;
    }
    if report.passed() {
        Ok(())
    } else {
        let failing: Vec<String> = report
            .failures()
            .map(|r| format!("{}/{} ({}, rel err {:.3e})", r.suite, r.case, r.group, r.max_rel_err))
            .collect();
        Err(Failure {
            code: EXIT_NUMERICAL,
            message: format!("gradient check failed: {}", failing.join("; ")),
        })
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = read_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    echo("train", serde_json::to_value(&cfg)?);
    let outcome = train::train(&cfg)?;
    for row in &outcome.log {
        eprintln!(
            "iter {} lr {:.6} loss {:.6} {}",
            row.iteration,
            row.lr,
            row.loss,
            train::metrics_json(&row.metrics)
        );
    }
    train::write_run(&a.out, &cfg, &outcome)?;
    println!("{}", serde_json::to_string(&train::metrics_json(&outcome.metrics))?);
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (stored, mut model) = train::load_model(&a.checkpoint)?;
    let cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => stored,
    };
    echo("eval", serde_json::to_value(&cfg)?);
    let dataset = Dataset::build(&cfg)?;
    let metrics = train::evaluate(&mut model, &dataset, &cfg)?;
    println!("{}", serde_json::to_string(&train::metrics_json(&metrics))?);
    Ok(())
}

fn field_model(a: &FieldArgs) -> Result<(RunConfig, train::Model)> {
    match (&a.checkpoint, &a.config) {
        (Some(dir), _) => train::load_model(dir),
        (None, Some(p)) => {
            let mut cfg = read_config(p)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let model = train::init_model(&cfg)?;
            Ok((cfg, model))
        }
        (None, None) => Err(Error::invalid("field needs --checkpoint or --config")),
    }
}

pub fn cmd_field(a: &FieldArgs) -> Result<()> {
    let (cfg, mut model) = field_model(a)?;
    if model.attention_layers().is_empty() {
        return Err(Error::invalid(format!("model {:?} has no attention layers", cfg.model)));
    }
    echo(
        "field",
        json!({ "run": cfg, "y": a.y, "x": a.x, "layers": a.layers, "depth": a.depth, "sample": a.sample }),
    );
    let mut one = cfg.clone();
    one.test_samples = a.sample + 1;
    let input = match Dataset::build(&one)? {
        Dataset::Copy { test, .. } => test[a.sample].input.clone(),
        Dataset::Seg { test, .. } => test[a.sample].image.clone(),
        Dataset::Depth { .. } => return Err(Error::invalid("depth models carry no traced attention")),
    };
    let trace = trace_attention(|g| {
        let x = g.constant(input.clone());
        model.forward(g, &[x])
    })?;
    let query = FieldQuery {
        y: a.y,
        x: a.x,
        layers: a.layers.clone(),
        depth: a.depth,
        item: 0,
    };
    let fr = propagational_field(&trace, &query)?;
    io::ensure_dir(&a.out)?;
    let opts = RenderOptions {
        zoom: a.zoom,
        ..RenderOptions::default()
    };
    let base = (fr.dims == (input.height(), input.width())).then_some(&input);
    render_field(&fr, base, &opts, &a.out.join("field.ppm"))?;
    write_text(&a.out.join("field.csv"), &field_csv(&fr)?)?;
    let summary = json!({
        "query": [fr.query.0, fr.query.1],
        "layers": fr.layers.iter().map(|l| json!({
            "name": l.name, "dilation": l.dilation, "dy": l.vector.0, "dx": l.vector.1
        })).collect::<Vec<_>>(),
        "shared_vector": [fr.shared_vector().0, fr.shared_vector().1],
        "moving_path": fr.moving_path.iter().map(|p| [p.0, p.1]).collect::<Vec<_>>(),
        "footprint_support": fr.footprint.len(),
    });
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    write_text(&a.out.join("field.json"), &text)?;
    print!("{text}");
    Ok(())
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchRow {
    pub size: usize,
    pub variant: String,
    pub reps: usize,
    pub output_elements: usize,
    pub median_ms: f64,
    pub max_abs_diff: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Agreement tolerance between the fused and materialized paths.
pub const BENCH_AGREEMENT: f64 = 1e-12;

/// Checks agreement then times both variants on random instances.
pub fn bench_rows(sizes: &[usize], channels: usize, reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if reps < 20 {
        return Err(Error::invalid(format!("reps must be ≥ 20, got {reps}")));
    }
    let spec = ConvSpec::same(3, 1);
    let mut rows = Vec::new();
    for &s in sizes {
        let mut rng = Rng::derived(seed, s as u64);
        let x = Tensor::randn([1, channels, s, s], 1.0, &mut rng);
        let w = Tensor::randn([channels, spec.taps(), channels, 1], 0.3, &mut rng);
        let b = Tensor::randn([1, channels, 1, 1], 0.1, &mut rng);
        let m = Tensor::randn([1, spec.taps(), s, s], 1.0, &mut rng);
        let n = Tensor::randn([1, channels, s, s], 1.0, &mut rng);
        let fused = || paka_conv2d_fused(&x, &w, Some(&b), &m, &n, spec);
        let materialized = || paka_conv2d_materialized(&x, &w, Some(&b), &kernel_attention(&m, &n)?, spec);
        let yf = fused()?;
        let ym = materialized()?;
        let diff = yf.max_abs_diff(&ym)?;
        if diff.is_nan() || diff > BENCH_AGREEMENT {
            return Err(Error::invalid(format!(
                "fused and materialized disagree by {diff:e} at size {s}"
            )));
        }
        let time = |f: &dyn Fn() -> Result<Tensor>| -> Result<f64> {
            let mut samples = Vec::with_capacity(reps);
            for _ in 0..reps {
                let t = Instant::now();
                std::hint::black_box(f()?);
                samples.push(t.elapsed().as_secs_f64() * 1e3);
            }
            Ok(median(samples))
        };
        for (variant, f) in [
            ("fused", &fused as &dyn Fn() -> Result<Tensor>),
            ("materialized", &materialized),
        ] {
            rows.push(BenchRow {
                size: s,
                variant: variant.into(),
                reps,
                output_elements: yf.len(),
                median_ms: time(f)?,
                max_abs_diff: diff,
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn parse_bench_csv(text: &str) -> Result<Vec<BenchRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<Vec<BenchRow>, _>>()
        .map_err(|e| Error::invalid(format!("csv: {e}")))
}

pub fn cmd_bench(a: &BenchArgs) -> Result<(), Failure> {
    echo(
        "bench",
        json!({ "sizes": a.sizes, "channels": a.channels, "reps": a.reps, "seed": a.seed, "threads": parallel::threads() }),
    );
    let rows = bench_rows(&a.sizes, a.channels, a.reps, a.seed).map_err(|e| match e {
        Error::Invalid(m) if m.contains("disagree") => Failure {
            code: EXIT_NUMERICAL,
            message: m,
        },
        e => e.into(),
    })?;
    let text = bench_csv(&rows)?;
    print!("{text}");
    if let Some(out) = &a.out {
        io::ensure_dir(out)?;
        write_text(&out.join("bench.csv"), &text)?;
    }
    Ok(())
}

fn unit_range(plane: &[f64]) -> Vec<f64> {
    let (lo, hi) = plane
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    plane
        .iter()
        .map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
        .collect()
}

fn rgb_from(t: &Tensor) -> Rgb {
    let (h, w) = (t.height(), t.width());
    let mut img = Rgb::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| (t.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put(y, x, px);
        }
    }
    img
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let task: TaskId = serde_json::from_value(json!(a.task)).map_err(|_| Error::Config {
        key: "task".into(),
        message: format!("unknown task `{}` (direction-copy, shapes-seg, depth-sr)", a.task),
    })?;
    echo(
        "gen-data",
        json!({ "task": task, "seed": a.seed, "n": a.n, "size": a.size, "scale": a.scale, "n_classes": a.n_classes }),
    );
    io::ensure_dir(&a.out)?;
    let s = a.size;
    let path = |i: usize, name: &str| a.out.join(format!("{i:04}_{name}"));
    match task {
        TaskId::DirectionCopy => {
            for (i, smp) in data::gen_direction_copy(a.seed, a.n, s)?.iter().enumerate() {
                io::write_tensor(&path(i, "input.bin"), &smp.input, DType::F64)?;
                io::write_tensor(&path(i, "target.bin"), &smp.target, DType::F64)?;
                io::write_pgm(
                    &path(i, "value.pgm"),
                    &Gray::from_unit(&unit_range(smp.input.plane(0, 0)), s, s, 255),
                )?;
                let dirs: Vec<f64> = smp.directions.iter().map(|&d| d as f64 / 7.0).collect();
                io::write_pgm(&path(i, "directions.pgm"), &Gray::from_unit(&dirs, s, s, 255))?;
            }
        }
        TaskId::ShapesSeg => {
            for (i, smp) in data::gen_shapes_seg(a.seed, a.n, s, a.n_classes)?.iter().enumerate() {
                io::write_tensor(&path(i, "image.bin"), &smp.image, DType::F64)?;
                io::write_ppm(&path(i, "image.ppm"), &rgb_from(&smp.image))?;
                let labels = Gray {
                    width: s,
                    height: s,
                    maxval: 255,
                    pixels: smp.labels.iter().map(|&l| l as u16).collect(),
                };
                io::write_pgm(&path(i, "labels.pgm"), &labels)?;
            }
        }
        TaskId::DepthSr => {
            for (i, smp) in data::gen_depth_scenes(a.seed, a.n, s, a.scale)?.iter().enumerate() {
                let lr = s / a.scale;
                io::write_pgm(
                    &path(i, "lr_depth.pgm"),
                    &Gray::from_unit(smp.lr_depth.data(), lr, lr, u16::MAX),
                )?;
                io::write_pgm(
                    &path(i, "hr_depth.pgm"),
                    &Gray::from_unit(smp.hr_depth.data(), s, s, u16::MAX),
                )?;
                io::write_pgm(&path(i, "guide.pgm"), &Gray::from_unit(smp.guide.data(), s, s, 255))?;
                io::write_tensor(&path(i, "lr_depth.bin"), &smp.lr_depth, DType::F64)?;
                io::write_tensor(&path(i, "hr_depth.bin"), &smp.hr_depth, DType::F64)?;
                io::write_tensor(&path(i, "guide.bin"), &smp.guide, DType::F64)?;
            }
        }
    }
    Ok(())
}

pub fn inspect(path: &Path) -> Result<serde_json::Value> {
    if path.is_dir() {
        let m = io::read_manifest(path)?;
        return Ok(json!({
            "kind": "checkpoint",
            "format_version": m.format_version,
            "model": m.model,
            "tensors": m.tensors.len(),
            "learnable_scalars": m.learnable_scalars(),
            "entries": m.tensors.iter().map(|t| json!({
                "name": t.name, "dims": t.dims, "learnable": t.learnable
            })).collect::<Vec<_>>(),
        }));
    }
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "pgm" => {
            let g = io::read_pgm(path)?;
            Ok(json!({ "kind": "pgm", "width": g.width, "height": g.height, "maxval": g.maxval }))
        }
        "ppm" => {
            let g = io::read_ppm(path)?;
            Ok(json!({ "kind": "ppm", "width": g.width, "height": g.height }))
        }
        _ => {
            let t = io::read_tensor(path)?;
            let (lo, hi) = t
                .data()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
            Ok(json!({
                "kind": "tensor",
                "dims": t.dims(),
                "min": train::json_f64(lo),
                "max": train::json_f64(hi),
                "mean": train::json_f64(t.mean()),
            }))
        }
    }
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    echo("inspect", json!({ "path": a.path }));
    println!("{}", serde_json::to_string_pretty(&inspect(&a.path)?)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&Error::invalid("x")), EXIT_USAGE);
        assert_eq!(
            exit_code(&Error::Divergence {
                iteration: 3,
                loss: f64::NAN
            }),
            EXIT_NUMERICAL
        );
        let io_err = Error::io("missing", std::io::Error::from(std::io::ErrorKind::NotFound));
        assert_eq!(exit_code(&io_err), EXIT_IO);
    }
}
