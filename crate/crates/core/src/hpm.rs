//! Hierarchical attention module: a 1×1 bottleneck, a cascade of 3×3
//! attention layers with increasing dilation, and fusion of every cascade
//! output with the globally pooled bottleneck features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ConvSpec;
use crate::graph::{Graph, Var};
use crate::nn::{join, BatchNorm, Conv2d, ConvBn, Module, Param};
use crate::paka::{branch_width, PakaConfig, PakaLayer};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeLayer {
    pub channels: usize,
    pub dilation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpmConfig {
    pub in_channels: usize,
    pub bottleneck_channels: usize,
    pub cascade: Vec<CascadeLayer>,
    #[serde(default = "yes")]
    pub include_global_pool: bool,
    /// Width of the 1×1 projection after concatenation; `None` returns the concat.
    #[serde(default)]
    pub fusion_channels: Option<usize>,
    /// Feed each cascade layer the concatenation of all earlier features
    /// instead of only its predecessor.
    #[serde(default)]
    pub dense: bool,
    /// `false` builds the plain dilated-convolution twin.
    #[serde(default = "yes")]
    pub attention: bool,
}

fn yes() -> bool {
    true
}

impl HpmConfig {
    /// 32-channel bottleneck and four 32-channel layers at dilations 1, 2, 4, 8.
    pub fn toy(in_channels: usize) -> Self {
        Self {
            in_channels,
            bottleneck_channels: 32,
            cascade: [1, 2, 4, 8]
                .into_iter()
                .map(|d| CascadeLayer {
                    channels: 32,
                    dilation: d,
                })
                .collect(),
            include_global_pool: true,
            fusion_channels: Some(32),
            dense: false,
            attention: true,
        }
    }

    /// 2048 → 512 bottleneck and four 512-channel layers.
    pub fn full_scale() -> Self {
        let mut cfg = Self::toy(2048);
        cfg.bottleneck_channels = 512;
        cfg.fusion_channels = Some(512);
        for l in &mut cfg.cascade {
            l.channels = 512;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.bottleneck_channels == 0 {
            return Err(Error::invalid("HPM channel counts must be positive"));
        }
        for pair in self.cascade.windows(2) {
            if pair[1].dilation <= pair[0].dilation {
                return Err(Error::invalid(format!(
                    "cascade dilations must increase strictly, got {} then {}",
                    pair[0].dilation, pair[1].dilation
                )));
            }
        }
        if self.cascade.iter().any(|l| l.channels == 0 || l.dilation == 0) {
            return Err(Error::invalid("cascade layers need positive channels and dilation"));
        }
        Ok(())
    }

    /// Input width of cascade layer `i`.
    pub fn layer_input(&self, i: usize) -> usize {
        if self.dense {
            self.bottleneck_channels + self.cascade[..i].iter().map(|l| l.channels).sum::<usize>()
        } else if i == 0 {
            self.bottleneck_channels
        } else {
            self.cascade[i - 1].channels
        }
    }

    /// Channel count of the fused concatenation.
    pub fn concat_width(&self) -> usize {
        let pooled = if self.include_global_pool {
            self.bottleneck_channels
        } else {
            0
        };
        let width = pooled + self.cascade.iter().map(|l| l.channels).sum::<usize>();
        if width == 0 {
            self.bottleneck_channels
        } else {
            width
        }
    }

    pub fn out_channels(&self) -> usize {
        self.fusion_channels.unwrap_or_else(|| self.concat_width())
    }

    /// Spatial radius of the cascade output's receptive field.
    pub fn receptive_radius(&self) -> usize {
        self.cascade.iter().map(|l| l.dilation).sum()
    }
}

/// Learnable-scalar counts of an HPM, split by how they scale with width.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    /// Weights whose count is a product of two channel counts.
    pub mixing_weights: usize,
    /// Biases sized by a channel count.
    pub biases: usize,
    /// Batch-norm scale and shift sized by a channel count.
    pub norm: usize,
    /// Directional projection to the K kernel taps, its bias, and its norm.
    pub directional_head: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.mixing_weights + self.biases + self.norm + self.directional_head
    }
}

pub fn hpm_param_breakdown(cfg: &HpmConfig) -> ParamBreakdown {
    let mut p = ParamBreakdown::default();
    let cb = cfg.bottleneck_channels;
    p.mixing_weights += cfg.in_channels * cb;
    p.biases += cb;
    p.norm += 2 * cb;
    for (i, layer) in cfg.cascade.iter().enumerate() {
        let (ci, co) = (cfg.layer_input(i), layer.channels);
        let k = 9;
        p.mixing_weights += co * k * ci;
        p.biases += co;
        p.norm += 2 * co;
        if cfg.attention {
            let r = branch_width(ci);
            p.mixing_weights += ci * r + r * ci;
            p.biases += r + ci;
            p.norm += 2 * ci;
            p.mixing_weights += k * ci * r;
            p.biases += r;
            p.directional_head += r * k + k + 2 * k;
        }
    }
    if let Some(f) = cfg.fusion_channels {
        p.mixing_weights += cfg.concat_width() * f;
        p.biases += f;
        p.norm += 2 * f;
    }
    p
}

/// Exact number of learnable scalars in an HPM built from `cfg`.
pub fn hpm_param_count(cfg: &HpmConfig) -> usize {
    hpm_param_breakdown(cfg).total()
}

#[derive(Clone, Debug)]
pub enum CascadeOp {
    Attention(Box<PakaLayer>),
    Plain(Conv2d),
}

#[derive(Clone, Debug)]
pub struct CascadeUnit {
    pub op: CascadeOp,
    pub bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct HpmState {
    pub config: HpmConfig,
    pub bottleneck: ConvBn,
    pub cascade: Vec<CascadeUnit>,
    pub fusion: Option<ConvBn>,
}

/// Intermediate features of one HPM forward pass.
pub struct HpmFeatures {
    pub squeezed: Var,
    pub cascade: Vec<Var>,
    pub output: Var,
}

impl HpmState {
    pub fn new(cfg: &HpmConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let bottleneck = ConvBn::new(
            cfg.in_channels,
            cfg.bottleneck_channels,
            ConvSpec::pointwise(),
            true,
            rng,
        );
        let mut cascade = Vec::with_capacity(cfg.cascade.len());
        for (i, layer) in cfg.cascade.iter().enumerate() {
            let spec = ConvSpec::same(3, layer.dilation);
            let ci = cfg.layer_input(i);
            let op = if cfg.attention {
                let mut p = PakaLayer::new(&PakaConfig::new(ci, layer.channels, spec), rng)?;
                p.label = format!("cascade.{i}");
                CascadeOp::Attention(Box::new(p))
            } else {
                CascadeOp::Plain(Conv2d::new(ci, layer.channels, spec, true, rng))
            };
            cascade.push(CascadeUnit {
                op,
                bn: BatchNorm::new(layer.channels),
            });
        }
        let fusion = cfg
            .fusion_channels
            .map(|f| ConvBn::new(cfg.concat_width(), f, ConvSpec::pointwise(), true, rng));
        Ok(Self {
            config: cfg.clone(),
            bottleneck,
            cascade,
            fusion,
        })
    }

    /// Same module with every attention layer replaced by its shared convolution.
    pub fn plain_twin(&self) -> Self {
        let mut twin = self.clone();
        twin.config.attention = false;
        for unit in &mut twin.cascade {
            if let CascadeOp::Attention(p) = &unit.op {
                unit.op = CascadeOp::Plain(p.shared_conv());
            }
        }
        twin
    }

    pub fn attention_layers(&self) -> impl Iterator<Item = &PakaLayer> {
        self.cascade.iter().filter_map(|u| match &u.op {
            CascadeOp::Attention(p) => Some(p.as_ref()),
            CascadeOp::Plain(_) => None,
        })
    }

    pub fn forward_features(&mut self, g: &mut Graph, x: Var) -> Result<HpmFeatures> {
        let dims = g.value(x).dims();
        if dims[1] != self.config.in_channels {
            let mut expect = dims;
            expect[1] = self.config.in_channels;
            return Err(Error::shape("hpm_forward", &expect, &dims));
        }
        let (h, w) = (dims[2], dims[3]);
        let z0 = self.bottleneck.forward(g, x)?;
        let mut feats = Vec::with_capacity(self.cascade.len());
        let mut prev = z0;
        for unit in &mut self.cascade {
            let input = if self.config.dense && !feats.is_empty() {
                let mut all = vec![z0];
                all.extend(&feats);
                g.concat_channels(&all)?
            } else {
                prev
            };
            let y = match &mut unit.op {
                CascadeOp::Attention(p) => p.forward(g, input)?,
                CascadeOp::Plain(c) => c.forward(g, input)?,
            };
            let y = unit.bn.forward(g, y)?;
            let y = g.relu(y);
            feats.push(y);
            prev = y;
        }
        let mut parts = Vec::with_capacity(feats.len() + 1);
        if self.config.include_global_pool {
            let pooled = g.global_avg_pool(z0);
            parts.push(g.broadcast_spatial(pooled, h, w)?);
        }
        parts.extend(&feats);
        let fused = if parts.is_empty() {
            z0
        } else {
            g.concat_channels(&parts)?
        };
        let output = match self.fusion.as_mut() {
            Some(f) => f.forward(g, fused)?,
            None => fused,
        };
        Ok(HpmFeatures {
            squeezed: z0,
            cascade: feats,
            output,
        })
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.forward_features(g, x)?.output)
    }
}

impl Module for HpmState {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.bottleneck.visit(&join(prefix, "bottleneck"), f);
        for (i, unit) in self.cascade.iter().enumerate() {
            let name = join(prefix, &format!("cascade.{i}"));
            match &unit.op {
                CascadeOp::Attention(p) => p.visit(&name, f),
                CascadeOp::Plain(c) => c.visit(&name, f),
            }
            unit.bn.visit(&join(&name, "bn"), f);
        }
        if let Some(fu) = &self.fusion {
            fu.visit(&join(prefix, "fusion"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.bottleneck.visit_mut(&join(prefix, "bottleneck"), f);
        for (i, unit) in self.cascade.iter_mut().enumerate() {
            let name = join(prefix, &format!("cascade.{i}"));
            match &mut unit.op {
                CascadeOp::Attention(p) => p.visit_mut(&name, f),
                CascadeOp::Plain(c) => c.visit_mut(&name, f),
            }
            unit.bn.visit_mut(&join(&name, "bn"), f);
        }
        if let Some(fu) = &mut self.fusion {
            fu.visit_mut(&join(prefix, "fusion"), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.bottleneck.visit_buffers(&join(prefix, "bottleneck"), f);
        for (i, unit) in self.cascade.iter().enumerate() {
            let name = join(prefix, &format!("cascade.{i}"));
            if let CascadeOp::Attention(p) = &unit.op {
                p.visit_buffers(&name, f);
            }
            unit.bn.visit_buffers(&join(&name, "bn"), f);
        }
        if let Some(fu) = &self.fusion {
            fu.visit_buffers(&join(prefix, "fusion"), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.bottleneck.visit_buffers_mut(&join(prefix, "bottleneck"), f);
        for (i, unit) in self.cascade.iter_mut().enumerate() {
            let name = join(prefix, &format!("cascade.{i}"));
            if let CascadeOp::Attention(p) = &mut unit.op {
                p.visit_buffers_mut(&name, f);
            }
            unit.bn.visit_buffers_mut(&join(&name, "bn"), f);
        }
        if let Some(fu) = &mut self.fusion {
            fu.visit_buffers_mut(&join(prefix, "fusion"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bottleneck_only_count() {
        let cfg = HpmConfig {
            in_channels: 4,
            bottleneck_channels: 2,
            cascade: vec![],
            include_global_pool: false,
            fusion_channels: None,
            dense: false,
            attention: true,
        };
        assert_eq!(hpm_param_count(&cfg), 4 * 2 + 2 + 2 * 2);
        let state = HpmState::new(&cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(state.param_count(), 14);
    }

    #[test]
    fn toy_concat_width() {
        let mut cfg = HpmConfig::toy(64);
        assert_eq!(cfg.concat_width(), 32 + 4 * 32);
        cfg.include_global_pool = false;
        assert_eq!(cfg.concat_width(), 4 * 32);
    }

    #[test]
    fn analytic_count_matches_built_module() {
        for attention in [true, false] {
            for dense in [false, true] {
                let mut cfg = HpmConfig::toy(24);
                cfg.attention = attention;
                cfg.dense = dense;
                let state = HpmState::new(&cfg, &mut Rng::new(1)).unwrap();
                assert_eq!(state.param_count(), hpm_param_count(&cfg));
            }
        }
    }

    #[test]
    fn rejects_non_increasing_dilations() {
        let mut cfg = HpmConfig::toy(8);
        cfg.cascade[2].dilation = 2;
        assert!(cfg.validate().is_err());
    }
}
