//! Trainable model variants addressed by id.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ConvSpec;
use crate::graph::{Graph, Var};
use crate::hpm::{CascadeLayer, HpmConfig, HpmState};
use crate::joint::{DsrConfig, DsrNet};
use crate::kernels::interp::UpsampleKind;
use crate::nn::{join, Conv2d, ConvBn, Module, Param};
use crate::paka::{PakaConfig, PakaLayer};
use crate::rng::Rng;

use super::data::BEACON_CHANNELS;
use super::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelId {
    /// One attention convolution.
    PakaSingle,
    /// One plain convolution.
    ConvSingle,
    /// Small HPM with a linear head, for dense regression.
    HpmRegress,
    /// Strided stem, HPM, zero-initialized classifier, bilinear up-sampling.
    HpmSeg,
    /// Same as `HpmSeg` with plain dilated convolutions in the cascade.
    ConvSeg,
    /// Guided depth super-resolution network.
    Dsr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskId {
    DirectionCopy,
    ShapesSeg,
    DepthSr,
}

impl ModelId {
    pub fn task(self) -> TaskId {
        match self {
            ModelId::PakaSingle | ModelId::ConvSingle | ModelId::HpmRegress => TaskId::DirectionCopy,
            ModelId::HpmSeg | ModelId::ConvSeg => TaskId::ShapesSeg,
            ModelId::Dsr => TaskId::DepthSr,
        }
    }
}

pub const COPY_CHANNELS: usize = 1 + BEACON_CHANNELS;
const SEG_STRIDE: usize = 4;

#[derive(Clone, Debug)]
pub struct RegressNet {
    pub hpm: HpmState,
    pub head: Conv2d,
}

#[derive(Clone, Debug)]
pub struct SegNet {
    pub stem: Vec<ConvBn>,
    pub hpm: HpmState,
    pub classifier: Conv2d,
}

#[derive(Clone, Debug)]
pub enum Model {
    PakaSingle(Box<PakaLayer>),
    ConvSingle(Conv2d),
    HpmRegress(Box<RegressNet>),
    Seg(Box<SegNet>),
    Dsr(Box<DsrNet>),
}

/// HPM sized by `width`: four cascade layers at dilations 1, 2, 4, 8.
pub fn seg_hpm_config(in_channels: usize, width: usize, attention: bool) -> HpmConfig {
    let mut cfg = HpmConfig::toy(in_channels);
    cfg.bottleneck_channels = width;
    cfg.fusion_channels = Some(width);
    cfg.attention = attention;
    for l in &mut cfg.cascade {
        l.channels = width;
    }
    cfg
}

pub fn regress_hpm_config(width: usize) -> HpmConfig {
    HpmConfig {
        in_channels: COPY_CHANNELS,
        bottleneck_channels: width,
        cascade: vec![
            CascadeLayer {
                channels: width,
                dilation: 1,
            },
            CascadeLayer {
                channels: width,
                dilation: 2,
            },
        ],
        include_global_pool: true,
        fusion_channels: Some(width),
        dense: false,
        attention: true,
    }
}

impl Model {
    pub fn build(cfg: &RunConfig, rng: &mut Rng) -> Result<Self> {
        Ok(match cfg.model {
            ModelId::PakaSingle => {
                let spec = ConvSpec::same(cfg.kernel_size, 1);
                Model::PakaSingle(Box::new(PakaLayer::new(&PakaConfig::new(COPY_CHANNELS, 1, spec), rng)?))
            }
            ModelId::ConvSingle => {
                let spec = ConvSpec::same(cfg.kernel_size, 1);
                spec.validate()?;
                Model::ConvSingle(Conv2d::new(COPY_CHANNELS, 1, spec, true, rng))
            }
            ModelId::HpmRegress => Model::HpmRegress(Box::new(RegressNet {
                hpm: HpmState::new(&regress_hpm_config(cfg.width), rng)?,
                head: Conv2d::zeroed(cfg.width, 1, ConvSpec::pointwise(), true),
            })),
            ModelId::HpmSeg | ModelId::ConvSeg => {
                if !cfg.size.is_multiple_of(SEG_STRIDE) {
                    return Err(Error::Config {
                        key: "size".into(),
                        message: format!("segmentation models need a multiple of {SEG_STRIDE}"),
                    });
                }
                let w = cfg.width;
                let stem_spec = ConvSpec::same(3, 1).with_stride(2);
                let stem = vec![
                    ConvBn::new(3, w / 2, stem_spec, true, rng),
                    ConvBn::new(w / 2, w, stem_spec, true, rng),
                ];
                let attention = cfg.model == ModelId::HpmSeg;
                let hpm = HpmState::new(&seg_hpm_config(w, w, attention), rng)?;
                let classifier = Conv2d::zeroed(hpm.config.out_channels(), cfg.n_classes, ConvSpec::pointwise(), true);
                Model::Seg(Box::new(SegNet { stem, hpm, classifier }))
            }
            ModelId::Dsr => {
                let dsr = DsrConfig {
                    scale: cfg.scale,
                    width: cfg.width,
                    guide_width: cfg.width,
                };
                Model::Dsr(Box::new(DsrNet::new(&dsr, rng)?))
            }
        })
    }

    /// `inputs` is `[x]` for image models and `[lr_depth, guide]` for `Dsr`.
    pub fn forward(&mut self, g: &mut Graph, inputs: &[Var]) -> Result<Var> {
        match self {
            Model::PakaSingle(l) => l.forward(g, inputs[0]),
            Model::ConvSingle(c) => c.forward(g, inputs[0]),
            Model::HpmRegress(n) => {
                let f = n.hpm.forward(g, inputs[0])?;
                n.head.forward(g, f)
            }
            Model::Seg(n) => {
                let mut h = inputs[0];
                for s in &mut n.stem {
                    h = s.forward(g, h)?;
                }
                let f = n.hpm.forward(g, h)?;
                let logits = n.classifier.forward(g, f)?;
                g.upsample(logits, SEG_STRIDE, UpsampleKind::Bilinear)
            }
            Model::Dsr(n) => n.forward(g, inputs[0], inputs[1]),
        }
    }

    /// Attention layers whose directional modulation a traced forward records.
    pub fn attention_layers(&self) -> Vec<&PakaLayer> {
        match self {
            Model::PakaSingle(l) => vec![l.as_ref()],
            Model::HpmRegress(n) => n.hpm.attention_layers().collect(),
            Model::Seg(n) => n.hpm.attention_layers().collect(),
            Model::ConvSingle(_) | Model::Dsr(_) => Vec::new(),
        }
    }

    fn module(&self) -> &dyn Module {
        match self {
            Model::PakaSingle(l) => l.as_ref(),
            Model::ConvSingle(c) => c,
            Model::HpmRegress(n) => n.as_ref(),
            Model::Seg(n) => n.as_ref(),
            Model::Dsr(n) => n.as_ref(),
        }
    }

    fn module_mut(&mut self) -> &mut dyn Module {
        match self {
            Model::PakaSingle(l) => l.as_mut(),
            Model::ConvSingle(c) => c,
            Model::HpmRegress(n) => n.as_mut(),
            Model::Seg(n) => n.as_mut(),
            Model::Dsr(n) => n.as_mut(),
        }
    }
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.module().visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.module_mut().visit_mut(prefix, f)
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.module().visit_buffers(prefix, f)
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.module_mut().visit_buffers_mut(prefix, f)
    }
}

impl Module for RegressNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.hpm.visit(&join(prefix, "hpm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.hpm.visit_mut(&join(prefix, "hpm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.hpm.visit_buffers(&join(prefix, "hpm"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.hpm.visit_buffers_mut(&join(prefix, "hpm"), f);
    }
}

impl Module for SegNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, s) in self.stem.iter().enumerate() {
            s.visit(&join(prefix, &format!("stem.{i}")), f);
        }
        self.hpm.visit(&join(prefix, "hpm"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, s) in self.stem.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stem.{i}")), f);
        }
        self.hpm.visit_mut(&join(prefix, "hpm"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, s) in self.stem.iter().enumerate() {
            s.visit_buffers(&join(prefix, &format!("stem.{i}")), f);
        }
        self.hpm.visit_buffers(&join(prefix, "hpm"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        for (i, s) in self.stem.iter_mut().enumerate() {
            s.visit_buffers_mut(&join(prefix, &format!("stem.{i}")), f);
        }
        self.hpm.visit_buffers_mut(&join(prefix, "hpm"), f);
    }
}
