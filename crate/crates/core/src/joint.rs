//! Guided ×2 up-sampling with kernel attention, and a small guided depth
//! super-resolution network built from it.
//!
//! A [`JointUpLayer`] keeps four weight banks, one per sub-pixel phase. The
//! attention maps are predicted from the high-resolution guide, so each
//! output pixel modulates its phase's bank with attention from its own
//! location.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ConvSpec;
use crate::graph::{Graph, Var};
use crate::kernels::interp::UpsampleKind;
use crate::nn::{he_normal, join, Conv2d, Module, Param, ParamKind};
use crate::paka::{branch_width, ChannelBranch, DirectionalBranch};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const JOINT_FACTOR: usize = 2;

#[derive(Clone, Debug)]
pub struct JointUpLayer {
    /// Banks stacked along the output axis: (4·out, K, in, 1), bank-major.
    pub weight: Param,
    /// (1, 4·out, 1, 1), bank-major.
    pub bias: Param,
    pub spec: ConvSpec,
    pub channel: ChannelBranch,
    pub directional: DirectionalBranch,
}

impl JointUpLayer {
    pub fn new(target_ch: usize, guide_ch: usize, out_ch: usize, rng: &mut Rng) -> Self {
        let spec = ConvSpec::same(3, 1);
        let banks = JOINT_FACTOR * JOINT_FACTOR;
        let hidden = branch_width(guide_ch);
        Self {
            weight: Param::new(he_normal(banks * out_ch, &spec, target_ch, rng), ParamKind::Weight),
            bias: Param::new(Tensor::zeros([1, banks * out_ch, 1, 1]), ParamKind::Bias),
            spec,
            channel: ChannelBranch::projecting(guide_ch, hidden, target_ch, 1, rng),
            directional: DirectionalBranch::new(guide_ch, hidden, spec, rng),
        }
    }

    pub fn target_channels(&self) -> usize {
        self.weight.value.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dims()[0] / (JOINT_FACTOR * JOINT_FACTOR)
    }

    /// Weights of sub-pixel phase `s` as an (out, K, in, 1) tensor.
    pub fn bank(&self, s: usize) -> Tensor {
        let o = self.out_channels();
        let len = self.weight.len() / (JOINT_FACTOR * JOINT_FACTOR);
        let [_, k, c, _] = self.weight.value.dims();
        Tensor::new([o, k, c, 1], self.weight.value.data()[s * len..(s + 1) * len].to_vec()).expect("bank dims")
    }

    pub fn bank_bias(&self, s: usize) -> Tensor {
        let o = self.out_channels();
        Tensor::new([1, o, 1, 1], self.bias.value.data()[s * o..(s + 1) * o].to_vec()).expect("bias dims")
    }

    /// Guide-driven modulations (m, n) at the guide's resolution.
    pub fn modulations(&mut self, g: &mut Graph, guide: Var) -> Result<(Var, Var)> {
        let m = self.directional.forward(g, guide)?;
        let n = self.channel.forward(g, guide)?;
        Ok((m, n))
    }

    pub fn forward(&mut self, g: &mut Graph, target: Var, guide: Var) -> Result<Var> {
        let td = g.value(target).dims();
        let gd = g.value(guide).dims();
        if gd[0] != td[0] || gd[2] != JOINT_FACTOR * td[2] || gd[3] != JOINT_FACTOR * td[3] {
            let expect = [td[0], gd[1], JOINT_FACTOR * td[2], JOINT_FACTOR * td[3]];
            return Err(Error::shape("joint_upsample (guide)", &expect, &gd));
        }
        let (m, n) = self.modulations(g, guide)?;
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.joint_upsample(target, w, Some(b), m, n, JOINT_FACTOR, self.spec)
    }
}

impl Module for JointUpLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
        self.channel.visit(&join(prefix, "channel"), f);
        self.directional.visit(&join(prefix, "directional"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
        self.channel.visit_mut(&join(prefix, "channel"), f);
        self.directional.visit_mut(&join(prefix, "directional"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.channel.visit_buffers(&join(prefix, "channel"), f);
        self.directional.visit_buffers(&join(prefix, "directional"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.channel.visit_buffers_mut(&join(prefix, "channel"), f);
        self.directional.visit_buffers_mut(&join(prefix, "directional"), f);
    }
}

/// Encoders see depth and intensity shifted by this amount; the residual base
/// uses the raw depth.
pub const INPUT_CENTER: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsrConfig {
    /// Up-sampling factor, a power of two.
    pub scale: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_width")]
    pub guide_width: usize,
}

fn default_width() -> usize {
    16
}

impl DsrConfig {
    pub fn new(scale: usize) -> Self {
        Self {
            scale,
            width: default_width(),
            guide_width: default_width(),
        }
    }

    pub fn stages(&self) -> Result<usize> {
        if self.scale < 2 || !self.scale.is_power_of_two() {
            return Err(Error::Config {
                key: "scale".into(),
                message: format!("must be a power of two ≥ 2, got {}", self.scale),
            });
        }
        Ok(self.scale.trailing_zeros() as usize)
    }
}

/// Three conv + relu layers; the first may downsample by 2.
#[derive(Clone, Debug)]
pub struct GuideLevel {
    pub convs: Vec<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct DsrNet {
    pub config: DsrConfig,
    /// Level l produces guide features at 1/2^l of the high resolution.
    pub guide: Vec<GuideLevel>,
    pub target: Vec<Conv2d>,
    pub stages: Vec<JointUpLayer>,
    /// Zero-initialized so a fresh network returns the bicubic base.
    pub head: Conv2d,
}

impl DsrNet {
    pub fn new(cfg: &DsrConfig, rng: &mut Rng) -> Result<Self> {
        let stages = cfg.stages()?;
        let (w, gw) = (cfg.width, cfg.guide_width);
        let spec = ConvSpec::same(3, 1);
        let guide = (0..stages)
            .map(|l| {
                let first_in = if l == 0 { 1 } else { gw };
                let first_spec = if l == 0 { spec } else { spec.with_stride(2) };
                GuideLevel {
                    convs: vec![
                        Conv2d::new(first_in, gw, first_spec, true, rng),
                        Conv2d::new(gw, gw, spec, true, rng),
                        Conv2d::new(gw, gw, spec, true, rng),
                    ],
                }
            })
            .collect();
        let target = vec![Conv2d::new(1, w, spec, true, rng), Conv2d::new(w, w, spec, true, rng)];
        let stage_layers = (0..stages).map(|_| JointUpLayer::new(w, gw, w, rng)).collect();
        Ok(Self {
            config: cfg.clone(),
            guide,
            target,
            stages: stage_layers,
            head: Conv2d::zeroed(w, 1, spec, true),
        })
    }

    pub fn forward(&mut self, g: &mut Graph, d_lr: Var, guide: Var) -> Result<Var> {
        let scale = self.config.scale;
        let ld = g.value(d_lr).dims();
        let gd = g.value(guide).dims();
        let expect = [ld[0], 1, ld[2] * scale, ld[3] * scale];
        if ld[1] != 1 || gd != expect {
            return Err(Error::shape("dsr_forward (guide)", &expect, &gd));
        }
        let centered = |g: &mut Graph, v: Var| -> Result<Var> {
            let shift = g.constant(Tensor::full(g.value(v).dims(), -INPUT_CENTER));
            g.add(v, shift)
        };
        let guide = centered(g, guide)?;
        let d_in = centered(g, d_lr)?;
        let mut guides = Vec::with_capacity(self.guide.len());
        let mut h = guide;
        for level in &self.guide {
            for conv in &level.convs {
                let y = conv.forward(g, h)?;
                h = g.relu(y);
            }
            guides.push(h);
        }
        let mut t = d_in;
        for conv in &self.target {
            let y = conv.forward(g, t)?;
            t = g.relu(y);
        }
        let levels = guides.len();
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let y = stage.forward(g, t, guides[levels - 1 - i])?;
            t = g.relu(y);
        }
        let residual = self.head.forward(g, t)?;
        let base = g.upsample(d_lr, scale, UpsampleKind::Bicubic)?;
        g.add(base, residual)
    }
}

impl Module for DsrNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (l, level) in self.guide.iter().enumerate() {
            for (j, c) in level.convs.iter().enumerate() {
                c.visit(&join(prefix, &format!("guide.{l}.{j}")), f);
            }
        }
        for (j, c) in self.target.iter().enumerate() {
            c.visit(&join(prefix, &format!("target.{j}")), f);
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (l, level) in self.guide.iter_mut().enumerate() {
            for (j, c) in level.convs.iter_mut().enumerate() {
                c.visit_mut(&join(prefix, &format!("guide.{l}.{j}")), f);
            }
        }
        for (j, c) in self.target.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("target.{j}")), f);
        }
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit_buffers(&join(prefix, &format!("stage.{i}")), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_buffers_mut(&join(prefix, &format!("stage.{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;

    #[test]
    fn rejects_non_power_of_two_scale() {
        assert!(DsrNet::new(&DsrConfig::new(3), &mut Rng::new(0)).is_err());
    }

    #[test]
    fn output_dims_at_scale_four() {
        let mut net = DsrNet::new(&DsrConfig::new(4), &mut Rng::new(0)).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let d = g.constant(Tensor::zeros([1, 1, 16, 16]));
        let gd = g.constant(Tensor::zeros([1, 1, 64, 64]));
        let y = net.forward(&mut g, d, gd).unwrap();
        assert_eq!(g.value(y).dims(), [1, 1, 64, 64]);
    }

    #[test]
    fn guide_must_be_twice_the_target() {
        let mut rng = Rng::new(0);
        let mut layer = JointUpLayer::new(2, 3, 2, &mut rng);
        let mut g = Graph::new(Mode::Eval);
        let t = g.constant(Tensor::zeros([1, 2, 4, 4]));
        let gd = g.constant(Tensor::zeros([1, 3, 6, 8]));
        assert!(layer.forward(&mut g, t, gd).is_err());
    }
}
