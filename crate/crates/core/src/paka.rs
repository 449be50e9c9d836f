//! Pixel adaptive kernel attention.
//!
//! A [`PakaLayer`] holds a shared convolution plus two modulation branches. The
//! directional branch predicts one map per kernel tap (`m`, K channels), the
//! channel branch one map per input channel (`n`, N channels). They combine by
//! broadcast into the kernel attention
//!
//! ```text
//! A(k, j, p) = 1 + tanh(m(k, p) + n(j, p))
//! ```
//!
//! which multiplies the shared weight w(o, k, j) at every output pixel p. The
//! attention is shared by all output channels and lies strictly inside (0, 2).
//!
//! Each branch ends in a batch norm whose scale starts at zero, so a freshly
//! built layer computes exactly the plain convolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ConvSpec;
use crate::graph::{AttentionTrace, Graph, Mode, Var};
use crate::kernels::attention::{paka_forward_item, paka_forward_materialized_item};
use crate::kernels::conv::Geom;
use crate::nn::{he_normal, join, BatchNorm, Conv2d, Module, Param, ParamKind};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Hidden width of the modulation branches: a quarter of the input, at least 4.
pub fn branch_width(in_ch: usize) -> usize {
    (in_ch / 4).max(4)
}

/// 1×1 conv → relu → 1×1 conv → batch norm, producing n with N = in_ch channels.
#[derive(Clone, Debug)]
pub struct ChannelBranch {
    pub reduce: Conv2d,
    pub expand: Conv2d,
    pub bn: BatchNorm,
}

impl ChannelBranch {
    /// `stride` matches the shared convolution so n lands on its output grid.
    pub fn new(in_ch: usize, hidden: usize, stride: usize, rng: &mut Rng) -> Self {
        Self::projecting(in_ch, hidden, in_ch, stride, rng)
    }

    /// Branch whose input differs from the modulated tensor, as when a guide
    /// image drives the attention over target features.
    pub fn projecting(in_ch: usize, hidden: usize, out_ch: usize, stride: usize, rng: &mut Rng) -> Self {
        Self {
            reduce: Conv2d::new(in_ch, hidden, ConvSpec::pointwise().with_stride(stride), true, rng),
            expand: Conv2d::new(hidden, out_ch, ConvSpec::pointwise(), true, rng),
            bn: BatchNorm::with_scale(out_ch, 0.0),
        }
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.reduce.forward(g, x)?;
        let h = g.relu(h);
        let n = self.expand.forward(g, h)?;
        self.bn.forward(g, n)
    }
}

/// k×k conv with the shared geometry → 1×1 conv to K → batch norm, producing m.
#[derive(Clone, Debug)]
pub struct DirectionalBranch {
    pub spatial: Conv2d,
    pub project: Conv2d,
    pub bn: BatchNorm,
}

impl DirectionalBranch {
    pub fn new(in_ch: usize, hidden: usize, spec: ConvSpec, rng: &mut Rng) -> Self {
        let k = spec.taps();
        Self {
            spatial: Conv2d::new(in_ch, hidden, spec, true, rng),
            project: Conv2d::new(hidden, k, ConvSpec::pointwise(), true, rng),
            bn: BatchNorm::with_scale(k, 0.0),
        }
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.spatial.forward(g, x)?;
        let m = self.project.forward(g, h)?;
        self.bn.forward(g, m)
    }
}

macro_rules! impl_branch_module {
    ($ty:ty, $a:ident, $b:ident) => {
        impl Module for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
                self.$a.visit(&join(prefix, stringify!($a)), f);
                self.$b.visit(&join(prefix, stringify!($b)), f);
                self.bn.visit(&join(prefix, "bn"), f);
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
                self.$a.visit_mut(&join(prefix, stringify!($a)), f);
                self.$b.visit_mut(&join(prefix, stringify!($b)), f);
                self.bn.visit_mut(&join(prefix, "bn"), f);
            }

            fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
                self.bn.visit_buffers(&join(prefix, "bn"), f);
            }

            fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
                self.bn.visit_buffers_mut(&join(prefix, "bn"), f);
            }
        }
    };
}

impl_branch_module!(ChannelBranch, reduce, expand);
impl_branch_module!(DirectionalBranch, spatial, project);

/// Construction parameters of a [`PakaLayer`], stored in checkpoint manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PakaConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub spec: ConvSpec,
    pub hidden: usize,
    #[serde(default = "yes")]
    pub channel_branch: bool,
    #[serde(default = "yes")]
    pub directional_branch: bool,
}

fn yes() -> bool {
    true
}

impl PakaConfig {
    pub fn new(in_channels: usize, out_channels: usize, spec: ConvSpec) -> Self {
        Self {
            in_channels,
            out_channels,
            spec,
            hidden: branch_width(in_channels),
            channel_branch: true,
            directional_branch: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PakaLayer {
    pub weight: Param,
    pub bias: Option<Param>,
    pub spec: ConvSpec,
    pub channel: Option<ChannelBranch>,
    pub directional: Option<DirectionalBranch>,
    /// Name reported in forward traces.
    pub label: String,
}

impl PakaLayer {
    pub fn new(cfg: &PakaConfig, rng: &mut Rng) -> Result<Self> {
        cfg.spec.validate()?;
        let weight = Param::new(
            he_normal(cfg.out_channels, &cfg.spec, cfg.in_channels, rng),
            ParamKind::Weight,
        );
        let channel = cfg
            .channel_branch
            .then(|| ChannelBranch::new(cfg.in_channels, cfg.hidden, cfg.spec.stride, rng));
        let directional = cfg
            .directional_branch
            .then(|| DirectionalBranch::new(cfg.in_channels, cfg.hidden, cfg.spec, rng));
        Ok(Self {
            weight,
            bias: Some(Param::new(Tensor::zeros([1, cfg.out_channels, 1, 1]), ParamKind::Bias)),
            spec: cfg.spec,
            channel,
            directional,
            label: String::from("paka"),
        })
    }

    pub fn config(&self) -> PakaConfig {
        let hidden = self
            .channel
            .as_ref()
            .map(|c| c.reduce.out_channels())
            .or_else(|| self.directional.as_ref().map(|d| d.spatial.out_channels()))
            .unwrap_or_else(|| branch_width(self.in_channels()));
        PakaConfig {
            in_channels: self.in_channels(),
            out_channels: self.out_channels(),
            spec: self.spec,
            hidden,
            channel_branch: self.channel.is_some(),
            directional_branch: self.directional.is_some(),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dims()[0]
    }

    /// The shared convolution as a plain layer with the same weights.
    pub fn shared_conv(&self) -> Conv2d {
        Conv2d {
            weight: Param::new(self.weight.value.clone(), ParamKind::Weight),
            bias: self.bias.as_ref().map(|b| Param::new(b.value.clone(), ParamKind::Bias)),
            spec: self.spec,
        }
    }

    /// Directional (B, K, Ho, Wo) and channel (B, N, Ho, Wo) modulations.
    /// A disabled branch contributes an all-zero constant.
    pub fn modulations(&mut self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let [nb, c, h, w] = g.value(x).dims();
        if c != self.in_channels() {
            return Err(Error::shape(
                "paka (input channels)",
                &[nb, self.in_channels(), h, w],
                &[nb, c, h, w],
            ));
        }
        let (ho, wo) = self.spec.output_size(h, w)?;
        let m = match self.directional.as_mut() {
            Some(d) => d.forward(g, x)?,
            None => g.constant(Tensor::zeros([nb, self.spec.taps(), ho, wo])),
        };
        let n = match self.channel.as_mut() {
            Some(ch) => ch.forward(g, x)?,
            None => g.constant(Tensor::zeros([nb, c, ho, wo])),
        };
        if g.tracing() {
            let entry = AttentionTrace {
                name: self.label.clone(),
                spec: self.spec,
                directional: g.value(m).clone(),
            };
            g.record_trace(entry);
        }
        Ok((m, n))
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let (m, n) = self.modulations(g, x)?;
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.paka_conv2d(x, w, b, m, n, self.spec)
    }

    /// Evaluates both branches on `x` and returns the kernel attention
    /// laid out as in [`kernel_attention`]. Train mode updates running stats.
    pub fn attention(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new(mode);
        let xv = g.constant(x.clone());
        let (m, n) = self.modulations(&mut g, xv)?;
        kernel_attention(g.value(m), g.value(n))
    }
}

impl Module for PakaLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
        if let Some(c) = &self.channel {
            c.visit(&join(prefix, "channel"), f);
        }
        if let Some(d) = &self.directional {
            d.visit(&join(prefix, "directional"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
        if let Some(c) = &mut self.channel {
            c.visit_mut(&join(prefix, "channel"), f);
        }
        if let Some(d) = &mut self.directional {
            d.visit_mut(&join(prefix, "directional"), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        if let Some(c) = &self.channel {
            c.visit_buffers(&join(prefix, "channel"), f);
        }
        if let Some(d) = &self.directional {
            d.visit_buffers(&join(prefix, "directional"), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        if let Some(c) = &mut self.channel {
            c.visit_buffers_mut(&join(prefix, "channel"), f);
        }
        if let Some(d) = &mut self.directional {
            d.visit_buffers_mut(&join(prefix, "directional"), f);
        }
    }
}

/// Materialized kernel attention A = 1 + tanh(m_k + n_j).
///
/// `m` is (B, K, H, W) and `n` is (B, N, H, W); the result is (B, K·N, H, W)
/// with channel `k·N + j` holding A(k, j).
pub fn kernel_attention(m: &Tensor, n: &Tensor) -> Result<Tensor> {
    let [nb, k, h, w] = m.dims();
    let [nb2, nc, h2, w2] = n.dims();
    if nb != nb2 || h != h2 || w != w2 {
        return Err(Error::shape("kernel_attention", &m.dims(), &n.dims()));
    }
    let mut a = Tensor::zeros([nb, k * nc, h, w]);
    for b in 0..nb {
        for kk in 0..k {
            for j in 0..nc {
                let (mk, nj) = (m.plane(b, kk), n.plane(b, j));
                let dst = a.plane_mut(b, kk * nc + j);
                for p in 0..dst.len() {
                    dst[p] = 1.0 + (mk[p] + nj[p]).tanh();
                }
            }
        }
    }
    Ok(a)
}

fn check_paka_inputs(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Result<Geom> {
    let [_, c, h, wd] = x.dims();
    let [o, k, ci, one] = w.dims();
    if ci != c || k != spec.taps() || one != 1 {
        return Err(Error::shape("paka_conv2d", &x.dims(), &w.dims()));
    }
    Geom::new(c, h, wd, o, spec)
}

/// Attention convolution computing A on the fly, one (k, j) plane at a time.
pub fn paka_conv2d_fused(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    m: &Tensor,
    n: &Tensor,
    spec: ConvSpec,
) -> Result<Tensor> {
    let geom = check_paka_inputs(x, w, spec)?;
    let nb = x.batch();
    let expect_m = [nb, spec.taps(), geom.ho, geom.wo];
    let expect_n = [nb, geom.c_in, geom.ho, geom.wo];
    if m.dims() != expect_m {
        return Err(Error::shape("paka_conv2d (directional)", &expect_m, &m.dims()));
    }
    if n.dims() != expect_n {
        return Err(Error::shape("paka_conv2d (channel)", &expect_n, &n.dims()));
    }
    let po = geom.out_plane();
    let mut out = Vec::with_capacity(nb * geom.c_out * po);
    for b in 0..nb {
        let mut y = vec![0.0; geom.c_out * po];
        paka_forward_item(
            x.item(b),
            w.data(),
            bias.map(|t| t.data()),
            m.item(b),
            n.item(b),
            &geom,
            &mut y,
        );
        out.extend(y);
    }
    Tensor::new([nb, geom.c_out, geom.ho, geom.wo], out)
}

/// Attention convolution reading a precomputed attention block (see [`kernel_attention`]).
pub fn paka_conv2d_materialized(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    a: &Tensor,
    spec: ConvSpec,
) -> Result<Tensor> {
    let geom = check_paka_inputs(x, w, spec)?;
    let nb = x.batch();
    let expect = [nb, spec.taps() * geom.c_in, geom.ho, geom.wo];
    if a.dims() != expect {
        return Err(Error::shape("paka_conv2d (attention)", &expect, &a.dims()));
    }
    let po = geom.out_plane();
    let mut out = Vec::with_capacity(nb * geom.c_out * po);
    for b in 0..nb {
        let mut y = vec![0.0; geom.c_out * po];
        paka_forward_materialized_item(x.item(b), w.data(), bias.map(|t| t.data()), a.item(b), &geom, &mut y);
        out.extend(y);
    }
    Tensor::new([nb, geom.c_out, geom.ho, geom.wo], out)
}
