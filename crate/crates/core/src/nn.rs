//! Parameters and the plain building-block layers.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ConvSpec;
use crate::graph::{Graph, Mode, NormStats, Var, BN_EPS, BN_MOMENTUM};
use crate::rng::Rng;
use crate::tensor::Tensor;

static NEXT_PARAM: AtomicU64 = AtomicU64::new(0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Convolution weights; the only kind that receives weight decay.
    Weight,
    Bias,
    /// Batch-norm scale and shift.
    Norm,
}

/// A learnable tensor. Clones receive a fresh identity so two copies can be
/// bound into one graph independently.
#[derive(Debug)]
pub struct Param {
    id: ParamId,
    pub value: Tensor,
    pub kind: ParamKind,
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Param::new(self.value.clone(), self.kind)
    }
}

impl Param {
    pub fn new(value: Tensor, kind: ParamKind) -> Self {
        Self {
            id: ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed)),
            value,
            kind,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named access to the learnable parameters and persistent buffers of a layer.
///
/// Names are hierarchical (`cascade.0.channel.conv1.weight`) and visiting order
/// is stable, which makes checkpoints and optimizer state deterministic.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    /// Non-learnable state such as running statistics, as (name, values).
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &[f64])) {}
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Vec<f64>)) {}

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Weight tensor dims (out_ch, K, in_ch, 1).
pub fn weight_dims(out_ch: usize, spec: &ConvSpec, in_ch: usize) -> [usize; 4] {
    [out_ch, spec.taps(), in_ch, 1]
}

/// Fan-in scaled normal initialization, std = sqrt(2 / fan_in).
pub fn he_normal(out_ch: usize, spec: &ConvSpec, in_ch: usize, rng: &mut Rng) -> Tensor {
    let fan_in = (spec.taps() * in_ch) as f64;
    Tensor::randn(weight_dims(out_ch, spec, in_ch), (2.0 / fan_in).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, spec: ConvSpec, bias: bool, rng: &mut Rng) -> Self {
        Self {
            weight: Param::new(he_normal(out_ch, &spec, in_ch, rng), ParamKind::Weight),
            bias: bias.then(|| Param::new(Tensor::zeros([1, out_ch, 1, 1]), ParamKind::Bias)),
            spec,
        }
    }

    pub fn zeroed(in_ch: usize, out_ch: usize, spec: ConvSpec, bias: bool) -> Self {
        Self {
            weight: Param::new(Tensor::zeros(weight_dims(out_ch, &spec, in_ch)), ParamKind::Weight),
            bias: bias.then(|| Param::new(Tensor::zeros([1, out_ch, 1, 1]), ParamKind::Bias)),
            spec,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dims()[0]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.conv2d(x, w, b, self.spec)
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self::with_scale(channels, 1.0)
    }

    /// Scale γ initialized to `gamma` (zero makes the layer output β exactly).
    pub fn with_scale(channels: usize, gamma: f64) -> Self {
        Self {
            gamma: Param::new(Tensor::full([1, channels, 1, 1], gamma), ParamKind::Norm),
            beta: Param::new(Tensor::zeros([1, channels, 1, 1]), ParamKind::Norm),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Train-mode graphs normalize with batch statistics and update the
    /// running estimates; eval-mode graphs use the running estimates.
    pub fn forward(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        match g.mode() {
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, NormStats::Batch, self.eps)?;
                let stats = stats.ok_or_else(|| Error::invalid("missing batch statistics"))?;
                let m = self.momentum;
                for c in 0..self.channels() {
                    self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
                    self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c];
                }
                Ok(y)
            }
            Mode::Eval => {
                let stats = NormStats::Running {
                    mean: &self.running_mean,
                    var: &self.running_var,
                };
                Ok(g.batch_norm(x, gamma, beta, stats, self.eps)?.0)
            }
        }
    }
}

impl Module for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Convolution followed by batch normalization and an optional relu.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    pub fn new(in_ch: usize, out_ch: usize, spec: ConvSpec, relu: bool, rng: &mut Rng) -> Self {
        Self {
            conv: Conv2d::new(in_ch, out_ch, spec, true, rng),
            bn: BatchNorm::new(out_ch),
            relu,
        }
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }
}

impl Module for ConvBn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.bn.visit_buffers(&join(prefix, "bn"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.bn.visit_buffers_mut(&join(prefix, "bn"), f);
    }
}
