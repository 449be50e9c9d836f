//! Finite-difference validation of the analytic gradients.
//!
//! Error metric: max over elements of |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)
//! with central differences of step `h`. Non-scalar outputs are reduced by a
//! fixed random projection so every output element contributes.

use serde::Serialize;

use crate::error::Result;
use crate::geometry::ConvSpec;
use crate::graph::{Activation, Graph, Mode, NormStats, Var};
use crate::hpm::{CascadeLayer, HpmConfig, HpmState};
use crate::joint::{DsrConfig, DsrNet, JointUpLayer};
use crate::kernels::interp::UpsampleKind;
use crate::nn::{Module, Param, ParamKind};
use crate::paka::{PakaConfig, PakaLayer};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const MODULE_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 20;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Worst element of one gradient tensor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorError {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// A module without learnable state, for checks whose operands are all inputs.
pub struct Stateless;

impl Module for Stateless {
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}

/// Options shared by every check.
#[derive(Clone, Debug, Default)]
pub struct CheckOptions {
    pub h: f64,
    /// Primitive whose backward is deliberately corrupted (negative control).
    pub fault: Option<String>,
}

impl CheckOptions {
    pub fn new() -> Self {
        Self { h: STEP, fault: None }
    }
}

/// Compares analytic and central-difference gradients of
/// `loss(forward(state, inputs))` for every input and every parameter of `state`.
///
/// `forward` must be deterministic and must not depend on state it mutates;
/// eval-mode graphs satisfy this for batch norm.
pub fn grad_check<M, F>(
    state: &mut M,
    inputs: &[Tensor],
    mode: Mode,
    opts: &CheckOptions,
    projection_seed: u64,
    forward: F,
) -> Result<Vec<TensorError>>
where
    M: Module,
    F: Fn(&mut M, &mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(mode);
    if let Some(f) = &opts.fault {
        g.inject_fault(f);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = forward(state, &mut g, &vars)?;
    let dims = g.value(y).dims();
    let projection = if dims == [1, 1, 1, 1] {
        Tensor::scalar(1.0)
    } else {
        Tensor::randn(dims, 1.0, &mut Rng::derived(projection_seed, 0x9c))
    };
    let loss = g.weighted_sum(y, projection.clone())?;
    let grads = g.backward(loss)?;
    let mut analytic: Vec<(String, Tensor)> = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let t = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].dims()));
        analytic.push((format!("input.{i}"), t));
    }
    let mut param_names = Vec::new();
    state.visit("", &mut |name, p| {
        let t = grads.param(p).cloned().unwrap_or_else(|| Tensor::zeros(p.value.dims()));
        param_names.push(name.to_string());
        analytic.push((name.to_string(), t));
    });
    drop(g);

    let output = |state: &mut M, inputs: &[Tensor]| -> Result<Tensor> {
        let mut g = Graph::new(mode);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = forward(state, &mut g, &vars)?;
        Ok(g.value(y).clone())
    };
    // Differencing outputs before projecting keeps untouched elements exactly
    // zero instead of accumulating cancellation error from the whole sum.
    let central = |up: Tensor, down: Tensor, h: f64| -> f64 {
        let diff: f64 = up
            .data()
            .iter()
            .zip(down.data())
            .zip(projection.data())
            .map(|((u, d), w)| w * (u - d))
            .sum();
        diff / (2.0 * h)
    };

    let h = opts.h;
    let mut report = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, (name, grad)) in analytic.iter().enumerate() {
        let mut worst = TensorError {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in 0..grad.len() {
            let numeric = if idx < inputs.len() {
                let orig = work[idx].data()[e];
                work[idx].data_mut()[e] = orig + h;
                let up = output(state, &work)?;
                work[idx].data_mut()[e] = orig - h;
                let down = output(state, &work)?;
                work[idx].data_mut()[e] = orig;
                central(up, down, h)
            } else {
                let target = &param_names[idx - inputs.len()];
                let orig = nudge_param(state, target, e, None);
                nudge_param(state, target, e, Some(orig + h));
                let up = output(state, &work)?;
                nudge_param(state, target, e, Some(orig - h));
                let down = output(state, &work)?;
                nudge_param(state, target, e, Some(orig));
                central(up, down, h)
            };
            let a = grad.data()[e];
            let err = relative_error(a, numeric);
            if err > worst.max_rel_err || e == 0 {
                worst = TensorError {
                    name: name.clone(),
                    max_rel_err: err,
                    worst_index: e,
                    analytic: a,
                    numeric,
                };
            }
        }
        report.push(worst);
    }
    Ok(report)
}

/// Smallest |relu input| in one forward pass of `forward`.
pub fn relu_margin<M, F>(state: &mut M, inputs: &[Tensor], mode: Mode, forward: F) -> Result<f64>
where
    M: Module,
    F: Fn(&mut M, &mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(mode);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    forward(state, &mut g, &vars)?;
    Ok(g.relu_margin())
}

/// Reads element `e` of the named parameter and optionally overwrites it.
fn nudge_param<M: Module>(state: &mut M, name: &str, e: usize, value: Option<f64>) -> f64 {
    let mut old = f64::NAN;
    state.visit_mut("", &mut |n, p| {
        if n == name {
            old = p.value.data()[e];
            if let Some(v) = value {
                p.value.data_mut()[e] = v;
            }
        }
    });
    old
}

/// Replaces every parameter and buffer with random values of moderate size so
/// that no gradient is structurally zero (zero-initialized scales and heads
/// otherwise block whole subgraphs).
pub fn randomize<M: Module>(state: &mut M, rng: &mut Rng) {
    state.visit_mut("", &mut |name, p| {
        let fan = p.value.dims()[1] * p.value.dims()[2];
        for v in p.value.data_mut() {
            *v = match p.kind {
                ParamKind::Weight => rng.normal() * (1.0 / fan.max(1) as f64).sqrt(),
                ParamKind::Bias => 0.2 * rng.normal(),
                ParamKind::Norm if name.ends_with("gamma") => rng.uniform_in(0.5, 1.5),
                ParamKind::Norm => 0.2 * rng.normal(),
            };
        }
    });
    state.visit_buffers_mut("", &mut |name, b| {
        for v in b.iter_mut() {
            *v = if name.ends_with("running_var") {
                rng.uniform_in(0.5, 1.5)
            } else {
                0.2 * rng.normal()
            };
        }
    });
}

/// Moves entries closer than `margin` to zero away from it, keeping relu
/// inputs off the kink.
fn off_kink(t: Tensor, margin: f64) -> Tensor {
    t.map(|v| if v.abs() < margin { v + margin * v.signum() } else { v })
}

/// Relu inputs closer than this to zero make an instance unsuitable for
/// central differences with step 1e-5.
pub const KINK_MARGIN: f64 = 1e-4;

/// Draws instances until every relu input clears [`KINK_MARGIN`].
pub fn off_kink_instance<M, F>(
    rng: &mut Rng,
    forward: F,
    mut draw: impl FnMut(&mut Rng) -> Result<(M, Vec<Tensor>)>,
) -> Result<(M, Vec<Tensor>)>
where
    M: Module,
    F: Fn(&mut M, &mut Graph, &[Var]) -> Result<Var>,
{
    for _ in 0..100 {
        let (mut state, inputs) = draw(rng)?;
        if relu_margin(&mut state, &inputs, Mode::Eval, &forward)? >= KINK_MARGIN {
            return Ok((state, inputs));
        }
    }
    Err(crate::error::Error::invalid("no kink-free instance in 100 draws"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Primitive,
    Paka,
    Hpm,
    Joint,
    All,
}

impl Scope {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "primitive" => Scope::Primitive,
            "paka" => Scope::Paka,
            "hpm" => Scope::Hpm,
            "joint" => Scope::Joint,
            "all" => Scope::All,
            _ => return None,
        })
    }

    fn includes(self, suite: Scope) -> bool {
        self == Scope::All || self == suite
    }
}

/// Worst error of one tensor across all seeds of one case.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub suite: &'static str,
    pub case: String,
    pub group: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub seeds: Vec<u64>,
    pub results: Vec<CaseResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CaseResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.results.iter().filter(|r| !r.passed())
    }

    /// One line per (case, group): the worst seed and its error.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&format!(
                "{:<9} {:<28} {:<40} seed={:<4} max_rel_err={:.3e} tol={:.0e} {}\n",
                r.suite,
                r.case,
                r.group,
                r.seed,
                r.max_rel_err,
                r.tolerance,
                if r.passed() { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

struct Collector {
    results: Vec<CaseResult>,
}

impl Collector {
    fn add(&mut self, suite: &'static str, case: &str, tol: f64, seed: u64, errs: Vec<TensorError>) {
        for e in errs {
            match self
                .results
                .iter_mut()
                .find(|r| r.suite == suite && r.case == case && r.group == e.name)
            {
                Some(r) if e.max_rel_err > r.max_rel_err => {
                    r.max_rel_err = e.max_rel_err;
                    r.seed = seed;
                }
                Some(_) => {}
                None => self.results.push(CaseResult {
                    suite,
                    case: case.to_string(),
                    group: e.name,
                    seed,
                    max_rel_err: e.max_rel_err,
                    tolerance: tol,
                }),
            }
        }
    }
}

/// Runs the suites selected by `scope` over seeds `base_seed .. base_seed + n_seeds`.
pub fn run_suites(scope: Scope, base_seed: u64, n_seeds: usize, opts: &CheckOptions) -> Result<Report> {
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| base_seed.wrapping_add(i)).collect();
    let mut c = Collector { results: Vec::new() };
    for &seed in &seeds {
        if scope.includes(Scope::Primitive) {
            primitive_suite(seed, opts, &mut c)?;
        }
        if scope.includes(Scope::Paka) {
            paka_suite(seed, opts, &mut c)?;
        }
        if scope.includes(Scope::Hpm) {
            hpm_suite(seed, opts, &mut c)?;
        }
        if scope.includes(Scope::Joint) {
            joint_suite(seed, opts, &mut c)?;
        }
    }
    Ok(Report {
        seeds,
        results: c.results,
    })
}

fn primitive_suite(seed: u64, opts: &CheckOptions, c: &mut Collector) -> Result<()> {
    let mut rng = Rng::derived(seed, 1);
    let tol = PRIMITIVE_TOLERANCE;
    let mut run = |case: &str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>| -> Result<()> {
        let errs = grad_check(&mut Stateless, &inputs, Mode::Train, opts, seed, |_, g, v| f(g, v))?;
        c.add("primitive", case, tol, seed, errs);
        Ok(())
    };

    let x = Tensor::randn([2, 3, 4, 4], 1.0, &mut rng);
    run("square_sum", vec![x], &|g, v| {
        let n = g.value(v[0]).len() as f64;
        let target = Tensor::zeros(g.value(v[0]).dims());
        let m = g.mse(v[0], &target)?;
        Ok(g.scale(m, n))
    })?;

    for (ks, d, s) in [(3, 1, 1), (3, 2, 1), (3, 1, 2), (1, 1, 1), (5, 1, 1)] {
        let spec = ConvSpec::same(ks, d).with_stride(s);
        let x = Tensor::randn([2, 3, 6, 6], 1.0, &mut rng);
        let w = Tensor::randn([2, ks * ks, 3, 1], 0.5, &mut rng);
        let b = Tensor::randn([1, 2, 1, 1], 0.5, &mut rng);
        run(&format!("conv2d_k{ks}_d{d}_s{s}"), vec![x, w, b], &|g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), spec)
        })?;
    }

    let x = Tensor::randn([1, 2, 5, 5], 1.0, &mut rng);
    let w = Tensor::randn([2, 9, 2, 1], 0.3, &mut rng);
    run("conv2d_tanh_sum", vec![x, w], &|g, v| {
        let y = g.conv2d(v[0], v[1], None, ConvSpec::same(3, 1))?;
        let t = g.tanh(y);
        Ok(g.sum(t))
    })?;

    let x = Tensor::randn([3, 2, 3, 3], 2.0, &mut rng);
    let gamma = Tensor::rand_uniform([1, 2, 1, 1], 0.5, 1.5, &mut rng);
    let beta = Tensor::randn([1, 2, 1, 1], 0.5, &mut rng);
    run(
        "batch_norm_train",
        vec![x.clone(), gamma.clone(), beta.clone()],
        &|g, v| Ok(g.batch_norm(v[0], v[1], v[2], NormStats::Batch, 1e-5)?.0),
    )?;
    let mean = [0.3, -0.2];
    let var = [1.4, 0.7];
    run("batch_norm_eval", vec![x, gamma, beta], &|g, v| {
        let stats = NormStats::Running { mean: &mean, var: &var };
        Ok(g.batch_norm(v[0], v[1], v[2], stats, 1e-5)?.0)
    })?;

    let x = off_kink(Tensor::randn([2, 2, 3, 3], 1.0, &mut rng), 1e-2);
    run(
        "relu",
        vec![x.clone()],
        &|g, v| Ok(g.activation(v[0], Activation::Relu)),
    )?;
    run(
        "tanh",
        vec![x.clone()],
        &|g, v| Ok(g.activation(v[0], Activation::Tanh)),
    )?;
    run("global_avg_pool_broadcast", vec![x], &|g, v| {
        let p = g.global_avg_pool(v[0]);
        g.broadcast_spatial(p, 3, 2)
    })?;

    for (kind, f) in [
        (UpsampleKind::Nearest, 2),
        (UpsampleKind::Bilinear, 2),
        (UpsampleKind::Bilinear, 3),
        (UpsampleKind::Bicubic, 2),
    ] {
        let x = Tensor::randn([1, 2, 3, 4], 1.0, &mut rng);
        run(&format!("upsample_{kind:?}_x{f}").to_lowercase(), vec![x], &|g, v| {
            g.upsample(v[0], f, kind)
        })?;
    }

    let a = Tensor::randn([2, 3, 3, 3], 1.0, &mut rng);
    let b = Tensor::randn([2, 2, 3, 3], 1.0, &mut rng);
    run("concat_slice", vec![a, b], &|g, v| {
        let cat = g.concat_channels(&[v[0], v[1]])?;
        g.slice_channels(cat, 1, 4)
    })?;

    let a = Tensor::randn([1, 2, 3, 3], 1.0, &mut rng);
    let b = Tensor::randn([1, 2, 3, 3], 1.0, &mut rng);
    run("add_scale", vec![a, b], &|g, v| {
        let s = g.add(v[0], v[1])?;
        Ok(g.scale(s, -1.7))
    })?;

    let x = Tensor::randn([2, 1, 3, 3], 1.0, &mut rng);
    let target = Tensor::randn([2, 1, 3, 3], 1.0, &mut rng);
    run("mse", vec![x], &|g, v| g.mse(v[0], &target))?;

    let logits = Tensor::randn([2, 4, 3, 3], 1.0, &mut rng);
    let labels: Vec<usize> = (0..18).map(|_| rng.below(4)).collect();
    run("cross_entropy", vec![logits], &|g, v| g.cross_entropy(v[0], &labels))?;

    for (d, s) in [(1, 1), (2, 1), (1, 2)] {
        let spec = ConvSpec::same(3, d).with_stride(s);
        let x = Tensor::randn([2, 3, 5, 5], 1.0, &mut rng);
        let (ho, wo) = spec.output_size(5, 5)?;
        let w = Tensor::randn([2, 9, 3, 1], 0.5, &mut rng);
        let b = Tensor::randn([1, 2, 1, 1], 0.5, &mut rng);
        let m = Tensor::randn([2, 9, ho, wo], 0.7, &mut rng);
        let n = Tensor::randn([2, 3, ho, wo], 0.7, &mut rng);
        run(&format!("paka_conv2d_d{d}_s{s}"), vec![x, w, b, m, n], &|g, v| {
            g.paka_conv2d(v[0], v[1], Some(v[2]), v[3], v[4], spec)
        })?;
    }

    let t = Tensor::randn([2, 2, 3, 3], 1.0, &mut rng);
    let w = Tensor::randn([4 * 2, 9, 2, 1], 0.5, &mut rng);
    let b = Tensor::randn([1, 8, 1, 1], 0.5, &mut rng);
    let m = Tensor::randn([2, 9, 6, 6], 0.7, &mut rng);
    let n = Tensor::randn([2, 2, 6, 6], 0.7, &mut rng);
    run("joint_upsample", vec![t, w, b, m, n], &|g, v| {
        g.joint_upsample(v[0], v[1], Some(v[2]), v[3], v[4], 2, ConvSpec::same(3, 1))
    })?;
    Ok(())
}

fn paka_suite(seed: u64, opts: &CheckOptions, c: &mut Collector) -> Result<()> {
    let mut rng = Rng::derived(seed, 2);
    for (d, s) in [(1, 1), (2, 1), (1, 2)] {
        let spec = ConvSpec::same(3, d).with_stride(s);
        let forward = |l: &mut PakaLayer, g: &mut Graph, v: &[Var]| l.forward(g, v[0]);
        let (mut layer, x) = off_kink_instance(&mut rng, forward, |rng| {
            let mut layer = PakaLayer::new(&PakaConfig::new(4, 3, spec), rng)?;
            randomize(&mut layer, rng);
            Ok((layer, vec![Tensor::randn([2, 4, 5, 5], 1.0, rng)]))
        })?;
        let errs = grad_check(&mut layer, &x, Mode::Eval, opts, seed, forward)?;
        c.add("paka", &format!("paka_layer_d{d}_s{s}"), MODULE_TOLERANCE, seed, errs);
    }
    Ok(())
}

fn hpm_suite(seed: u64, opts: &CheckOptions, c: &mut Collector) -> Result<()> {
    let mut rng = Rng::derived(seed, 3);
    for dense in [false, true] {
        let cfg = HpmConfig {
            in_channels: 8,
            bottleneck_channels: 4,
            cascade: vec![
                CascadeLayer {
                    channels: 4,
                    dilation: 1,
                },
                CascadeLayer {
                    channels: 4,
                    dilation: 2,
                },
            ],
            include_global_pool: true,
            fusion_channels: Some(4),
            dense,
            attention: true,
        };
        let forward = |h: &mut HpmState, g: &mut Graph, v: &[Var]| h.forward(g, v[0]);
        let (mut hpm, x) = off_kink_instance(&mut rng, forward, |rng| {
            let mut hpm = HpmState::new(&cfg, rng)?;
            randomize(&mut hpm, rng);
            Ok((hpm, vec![Tensor::randn([2, 8, 6, 6], 1.0, rng)]))
        })?;
        let errs = grad_check(&mut hpm, &x, Mode::Eval, opts, seed, forward)?;
        let case = if dense { "hpm_dense" } else { "hpm" };
        c.add("hpm", case, MODULE_TOLERANCE, seed, errs);
    }
    Ok(())
}

fn joint_suite(seed: u64, opts: &CheckOptions, c: &mut Collector) -> Result<()> {
    let mut rng = Rng::derived(seed, 4);
    let forward = |l: &mut JointUpLayer, g: &mut Graph, v: &[Var]| l.forward(g, v[0], v[1]);
    let (mut layer, inputs) = off_kink_instance(&mut rng, forward, |rng| {
        let mut layer = JointUpLayer::new(3, 2, 2, rng);
        randomize(&mut layer, rng);
        let t = Tensor::randn([2, 3, 3, 3], 1.0, rng);
        let guide = Tensor::randn([2, 2, 6, 6], 1.0, rng);
        Ok((layer, vec![t, guide]))
    })?;
    let errs = grad_check(&mut layer, &inputs, Mode::Eval, opts, seed, forward)?;
    c.add("joint", "joint_up_layer", MODULE_TOLERANCE, seed, errs);

    let cfg = DsrConfig {
        scale: 2,
        width: 3,
        guide_width: 3,
    };
    let forward = |n: &mut DsrNet, g: &mut Graph, v: &[Var]| n.forward(g, v[0], v[1]);
    let (mut net, inputs) = off_kink_instance(&mut rng, forward, |rng| {
        let mut net = DsrNet::new(&cfg, rng)?;
        randomize(&mut net, rng);
        let d = Tensor::rand_uniform([1, 1, 3, 3], 0.0, 1.0, rng);
        let guide = Tensor::rand_uniform([1, 1, 6, 6], 0.0, 1.0, rng);
        Ok((net, vec![d, guide]))
    })?;
    let errs = grad_check(&mut net, &inputs, Mode::Eval, opts, seed, forward)?;
    c.add("joint", "dsr_net", MODULE_TOLERANCE, seed, errs);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn square_sum_is_nearly_exact() {
        let x = Tensor::randn([1, 2, 3, 3], 1.0, &mut Rng::new(5));
        let errs = grad_check(&mut Stateless, &[x], Mode::Train, &CheckOptions::new(), 0, |_, g, v| {
            let target = Tensor::zeros(g.value(v[0]).dims());
            let m = g.mse(v[0], &target)?;
            Ok(g.scale(m, 18.0))
        })
        .unwrap();
        assert!(errs[0].max_rel_err < 1e-9, "{errs:?}");
    }

    #[test]
    fn injected_fault_is_detected() {
        let mut opts = CheckOptions::new();
        opts.fault = Some("conv2d".into());
        let report = run_suites(Scope::Primitive, 42, 1, &opts).unwrap();
        assert!(!report.passed());
        assert!(report.failures().all(|r| r.case.starts_with("conv2d")));
    }
}
