//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every primitive applied during a forward pass together
//! with whatever the primitive needs for its backward pass. [`Graph::backward`]
//! replays the record in reverse and returns gradients for every node that
//! depends on an input or parameter.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::ConvSpec;
use crate::kernels::attention::{paka_backward_item, paka_forward_item, PakaGrads};
use crate::kernels::conv::{bias_grad_item, conv_backward_item, conv_forward_item, Geom};
use crate::kernels::interp::{apply_plane, apply_plane_transpose, axis_weights, UpsampleKind};
use crate::nn::{Param, ParamId};
use crate::parallel::map_items;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

/// Statistics a batch-norm application normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    Batch,
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics observed in train mode (mean, unbiased variance).
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Directional modulation recorded by an attention layer during a traced forward.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub name: String,
    pub spec: ConvSpec,
    pub directional: Tensor,
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Geom,
    },
    Paka {
        x: Var,
        w: Var,
        b: Option<Var>,
        m: Var,
        n: Var,
        geom: Geom,
    },
    JointUp {
        t: Var,
        w: Var,
        b: Option<Var>,
        m: Var,
        n: Var,
        factor: usize,
        geom: Geom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    GlobalAvgPool {
        x: Var,
    },
    Broadcast {
        x: Var,
    },
    Upsample {
        x: Var,
        kind: UpsampleKind,
        factor: usize,
    },
    Concat {
        xs: Vec<Var>,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
    Mse {
        x: Var,
        target: Tensor,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::Paka { .. } => "paka_conv2d",
            Op::JointUp { .. } => "joint_upsample",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Act {
                kind: Activation::Relu, ..
            } => "relu",
            Op::Act {
                kind: Activation::Tanh, ..
            } => "tanh",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Broadcast { .. } => "broadcast",
            Op::Upsample { .. } => "upsample",
            Op::Concat { .. } => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Mse { .. } => "mse",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    params: HashMap<ParamId, Var>,
    trace: Option<Vec<AttentionTrace>>,
    fault: Option<String>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Mode::Train)
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            params: HashMap::new(),
            trace: None,
            fault: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records directional modulations of attention layers during forward.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn tracing(&self) -> bool {
        self.trace.is_some()
    }

    pub fn record_trace(&mut self, entry: AttentionTrace) {
        if let Some(t) = self.trace.as_mut() {
            t.push(entry);
        }
    }

    pub fn take_trace(&mut self) -> Vec<AttentionTrace> {
        self.trace.take().unwrap_or_default()
    }

    /// Test fixture: perturbs the backward pass of the named primitive.
    pub fn inject_fault(&mut self, op: &str) {
        self.fault = Some(op.to_string());
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Smallest |input| over every relu in the graph; relu is not
    /// differentiable at zero, so finite differences need a margin.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Act {
                    x,
                    kind: Activation::Relu,
                } => Some(self.value(x).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg_opt(&self, v: Option<Var>) -> bool {
        v.is_some_and(|v| self.rg(v))
    }

    /// Differentiable input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable data.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a parameter, reusing its node if already bound in this graph.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.push(p.value.clone(), Op::Leaf, true);
        self.params.insert(p.id(), v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let [nb, c, h, wd] = xv.dims();
        let [o, k, ci, one] = wv.dims();
        if ci != c || k != spec.taps() || one != 1 {
            return Err(Error::shape("conv2d", &xv.dims(), &wv.dims()));
        }
        let geom = Geom::new(c, h, wd, o, spec)?;
        if let Some(b) = b {
            check_bias(self.value(b), o, "conv2d")?;
        }
        let bias = b.map(|b| self.value(b).data());
        let outs = map_items(nb, |i| {
            let mut y = vec![0.0; o * geom.out_plane()];
            conv_forward_item(xv.item(i), wv.data(), bias, &geom, &mut y);
            y
        });
        let value = Tensor::new([nb, o, geom.ho, geom.wo], outs.concat())?;
        let rg = self.rg(x) || self.rg(w) || self.rg_opt(b);
        Ok(self.push(value, Op::Conv { x, w, b, geom }, rg))
    }

    /// Attention-modulated convolution. `m` is (B, K, Ho, Wo) and `n` is (B, C, Ho, Wo).
    pub fn paka_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, m: Var, n: Var, spec: ConvSpec) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let [nb, c, h, wd] = xv.dims();
        let [o, k, ci, one] = wv.dims();
        if ci != c || k != spec.taps() || one != 1 {
            return Err(Error::shape("paka_conv2d", &xv.dims(), &wv.dims()));
        }
        let geom = Geom::new(c, h, wd, o, spec)?;
        let (mv, nv) = (self.value(m), self.value(n));
        if mv.dims() != [nb, k, geom.ho, geom.wo] {
            return Err(Error::shape(
                "paka_conv2d (directional)",
                &[nb, k, geom.ho, geom.wo],
                &mv.dims(),
            ));
        }
        if nv.dims() != [nb, c, geom.ho, geom.wo] {
            return Err(Error::shape(
                "paka_conv2d (channel)",
                &[nb, c, geom.ho, geom.wo],
                &nv.dims(),
            ));
        }
        if let Some(b) = b {
            check_bias(self.value(b), o, "paka_conv2d")?;
        }
        let bias = b.map(|b| self.value(b).data());
        let po = geom.out_plane();
        let ys = map_items(nb, |i| {
            let mut y = vec![0.0; o * po];
            paka_forward_item(xv.item(i), wv.data(), bias, mv.item(i), nv.item(i), &geom, &mut y);
            y
        });
        let value = Tensor::new([nb, o, geom.ho, geom.wo], ys.concat())?;
        let rg = self.rg(x) || self.rg(w) || self.rg_opt(b) || self.rg(m) || self.rg(n);
        Ok(self.push(value, Op::Paka { x, w, b, m, n, geom }, rg))
    }

    /// Sub-pixel attention up-sampling. `t` is the low-resolution target
    /// (B, C, h, w); `w` stacks factor² weight banks as (factor²·O, K, C, 1);
    /// `m`, `n` are attention maps at the high resolution (factor·h, factor·w).
    /// High-resolution pixel P takes bank `(P_y mod f)·f + (P_x mod f)`.
    #[allow(clippy::too_many_arguments)]
    pub fn joint_upsample(
        &mut self,
        t: Var,
        w: Var,
        b: Option<Var>,
        m: Var,
        n: Var,
        factor: usize,
        spec: ConvSpec,
    ) -> Result<Var> {
        let tv = self.value(t);
        let wv = self.value(w);
        let [nb, c, h, wd] = tv.dims();
        let [fo, k, ci, one] = wv.dims();
        let banks = factor * factor;
        if factor < 2 || ci != c || k != spec.taps() || one != 1 || fo % banks != 0 {
            return Err(Error::shape("joint_upsample", &tv.dims(), &wv.dims()));
        }
        let o = fo / banks;
        let geom = Geom::new(c, h, wd, o, spec)?;
        if (geom.ho, geom.wo) != (h, wd) {
            return Err(Error::invalid("joint_upsample requires size-preserving geometry"));
        }
        let (mv, nv) = (self.value(m), self.value(n));
        let (hh, hw) = (factor * h, factor * wd);
        if mv.dims() != [nb, k, hh, hw] {
            return Err(Error::shape(
                "joint_upsample (guide directional)",
                &[nb, k, hh, hw],
                &mv.dims(),
            ));
        }
        if nv.dims() != [nb, c, hh, hw] {
            return Err(Error::shape(
                "joint_upsample (guide channel)",
                &[nb, c, hh, hw],
                &nv.dims(),
            ));
        }
        if let Some(b) = b {
            check_bias(self.value(b), fo, "joint_upsample")?;
        }
        let bias = b.map(|b| self.value(b).data());
        let po = h * wd;
        let bank_len = o * k * c;
        let outs = map_items(nb, |i| {
            let mut y = vec![0.0; o * hh * hw];
            let mut ys = vec![0.0; o * po];
            for s in 0..banks {
                let (sy, sx) = (s / factor, s % factor);
                let ms = phase_gather(mv.item(i), k, h, wd, factor, sy, sx);
                let ns = phase_gather(nv.item(i), c, h, wd, factor, sy, sx);
                let ws = &wv.data()[s * bank_len..(s + 1) * bank_len];
                let bs = bias.map(|bb| &bb[s * o..(s + 1) * o]);
                paka_forward_item(tv.item(i), ws, bs, &ms, &ns, &geom, &mut ys);
                phase_scatter(&ys, &mut y, o, h, wd, factor, sy, sx, false);
            }
            y
        });
        let value = Tensor::new([nb, o, hh, hw], outs.concat())?;
        let rg = self.rg(t) || self.rg(w) || self.rg_opt(b) || self.rg(m) || self.rg(n);
        Ok(self.push(
            value,
            Op::JointUp {
                t,
                w,
                b,
                m,
                n,
                factor,
                geom,
            },
            rg,
        ))
    }

    /// Batch normalization. In `Batch` mode, also returns the observed statistics
    /// so the owning layer can update its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let [nb, c, h, w] = xv.dims();
        check_bias(self.value(gamma), c, "batch_norm (scale)")?;
        check_bias(self.value(beta), c, "batch_norm (shift)")?;
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let plane = h * w;
        let count = (nb * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let batch_stats = matches!(stats, NormStats::Batch);
        match stats {
            NormStats::Batch => {
                for ch in 0..c {
                    let s: f64 = (0..nb).map(|b| xv.plane(b, ch).iter().sum::<f64>()).sum();
                    mean[ch] = s / count;
                    let q: f64 = (0..nb)
                        .map(|b| xv.plane(b, ch).iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>())
                        .sum();
                    var[ch] = q / count;
                }
            }
            NormStats::Running { mean: rm, var: rv } => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape("batch_norm (running)", &[c], &[rm.len()]));
                }
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..nb {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for (i, &v) in xv.plane(b, ch).iter().enumerate() {
                    let xh = (v - mean[ch]) * inv_std[ch];
                    xhat[off + i] = xh;
                    out[off + i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let observed = batch_stats.then(|| BatchStats {
            var: var
                .iter()
                .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                .collect(),
            mean,
        });
        let value = Tensor::new(xv.dims(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, observed))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = match kind {
            Activation::Relu => self.value(x).map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Tanh => self.value(x).map(f64::tanh),
        };
        let rg = self.rg(x);
        self.push(value, Op::Act { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    /// Per-(batch, channel) spatial mean, shaped (B, C, 1, 1).
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [nb, c, _, _] = xv.dims();
        let n = xv.plane_len() as f64;
        let data = (0..nb)
            .flat_map(|b| (0..c).map(move |ch| (b, ch)))
            .map(|(b, ch)| xv.plane(b, ch).iter().sum::<f64>() / n)
            .collect();
        let value = Tensor::new([nb, c, 1, 1], data).expect("pool dims");
        let rg = self.rg(x);
        self.push(value, Op::GlobalAvgPool { x }, rg)
    }

    /// Repeats a (B, C, 1, 1) tensor over an H×W grid.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        let [nb, c, hh, ww] = xv.dims();
        if hh != 1 || ww != 1 {
            return Err(Error::shape("broadcast_spatial", &[nb, c, 1, 1], &xv.dims()));
        }
        let mut value = Tensor::zeros([nb, c, h, w]);
        for b in 0..nb {
            for ch in 0..c {
                let v = xv.at(b, ch, 0, 0);
                value.plane_mut(b, ch).fill(v);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::Broadcast { x }, rg))
    }

    pub fn upsample(&mut self, x: Var, factor: usize, kind: UpsampleKind) -> Result<Var> {
        if factor < 2 {
            return Err(Error::invalid(format!("upsample factor must be >= 2, got {factor}")));
        }
        let xv = self.value(x);
        let value = upsample_tensor(xv, factor, kind);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Upsample { x, kind, factor }, rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat_channels of an empty list"))?;
        let [nb, _, h, w] = self.value(first).dims();
        let mut total = 0;
        for &v in xs {
            let d = self.value(v).dims();
            if d[0] != nb || d[2] != h || d[3] != w {
                return Err(Error::shape("concat_channels", &self.value(first).dims(), &d));
            }
            total += d[1];
        }
        let mut data = Vec::with_capacity(nb * total * h * w);
        for b in 0..nb {
            for &v in xs {
                data.extend_from_slice(self.value(v).item(b));
            }
        }
        let value = Tensor::new([nb, total, h, w], data)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }, rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_channels(start, end)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceChannels { x, start }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, s }, rg)
    }

    /// Σ x ⊙ weights, as a scalar tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let s = self.value(x).dot(&weights)?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let ones = Tensor::full(self.value(x).dims(), 1.0);
        self.weighted_sum(x, ones).expect("same dims")
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let d = self.value(x).sub(target)?;
        let loss = d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                x,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Mean over pixels of -log softmax at the labelled class. `labels` is
    /// indexed as `b·H·W + y·W + x`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let [nb, nc, h, w] = lv.dims();
        let plane = h * w;
        if labels.len() != nb * plane {
            return Err(Error::shape("cross_entropy", &[nb, 1, h, w], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= nc) {
            return Err(Error::invalid(format!("label {bad} out of range for {nc} classes")));
        }
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for b in 0..nb {
            for p in 0..plane {
                let at = |c: usize| lv.data()[(b * nc + c) * plane + p];
                let mx = (0..nc).map(at).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..nc).map(|c| (at(c) - mx).exp()).sum();
                let lz = z.ln();
                for c in 0..nc {
                    probs[(b * nc + c) * plane + p] = (at(c) - mx - lz).exp();
                }
                total += lz - (at(labels[b * plane + p]) - mx);
            }
        }
        let loss = total / (nb * plane) as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", &[1, 1, 1, 1], &self.value(loss).dims()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                let faulty = self.fault.as_deref() == Some(node.op.name());
                self.backward_node(node, &gy, &mut grads, faulty)?;
            }
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>], faulty: bool) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| -> Result<()> {
            let t = if faulty { t.scale(1.01) } else { t };
            match grads[v.0].as_mut() {
                Some(g) => g.add_assign(&t),
                None => {
                    grads[v.0] = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let nb = xv.batch();
                let (need_x, need_w) = (self.rg(*x), self.rg(*w));
                let parts = map_items(nb, |i| {
                    let mut dx = need_x.then(|| vec![0.0; xv.item(i).len()]);
                    let mut dw = need_w.then(|| vec![0.0; geom.weight_len()]);
                    conv_backward_item(
                        xv.item(i),
                        wv.data(),
                        gy.item(i),
                        geom,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                    );
                    (dx, dw)
                });
                let (dxs, dws): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
                if need_x {
                    let data = dxs.into_iter().flatten().flatten().collect();
                    acc(*x, Tensor::new(xv.dims(), data)?)?;
                }
                if need_w {
                    acc(*w, Tensor::new(wv.dims(), sum_partials(dws.into_iter().flatten()))?)?;
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    acc(b, bias_grad(gy, geom.out_plane()))?;
                }
            }
            Op::Paka { x, w, b, m, n, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (mv, nv) = (self.value(*m), self.value(*n));
                let nb = xv.batch();
                let (need_x, need_w, need_m, need_n) = (self.rg(*x), self.rg(*w), self.rg(*m), self.rg(*n));
                let parts = map_items(nb, |i| {
                    let mut dx = need_x.then(|| vec![0.0; xv.item(i).len()]);
                    let mut dw = need_w.then(|| vec![0.0; geom.weight_len()]);
                    let mut dm = need_m.then(|| vec![0.0; mv.item(i).len()]);
                    let mut dn = need_n.then(|| vec![0.0; nv.item(i).len()]);
                    paka_backward_item(
                        xv.item(i),
                        wv.data(),
                        mv.item(i),
                        nv.item(i),
                        gy.item(i),
                        geom,
                        PakaGrads {
                            dx: dx.as_deref_mut(),
                            dw: dw.as_deref_mut(),
                            dm: dm.as_deref_mut(),
                            dn: dn.as_deref_mut(),
                        },
                    );
                    (dx, dw, dm, dn)
                });
                let mut dxs = Vec::new();
                let mut dws = Vec::new();
                let mut dms = Vec::new();
                let mut dns = Vec::new();
                for (dx, dw, dm, dn) in parts {
                    dxs.extend(dx.into_iter().flatten());
                    dws.extend(dw);
                    dms.extend(dm.into_iter().flatten());
                    dns.extend(dn.into_iter().flatten());
                }
                if need_x {
                    acc(*x, Tensor::new(xv.dims(), dxs)?)?;
                }
                if need_w {
                    acc(*w, Tensor::new(wv.dims(), sum_partials(dws.into_iter()))?)?;
                }
                if need_m {
                    acc(*m, Tensor::new(mv.dims(), dms)?)?;
                }
                if need_n {
                    acc(*n, Tensor::new(nv.dims(), dns)?)?;
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    acc(b, bias_grad(gy, geom.out_plane()))?;
                }
            }
            Op::JointUp {
                t,
                w,
                b,
                m,
                n,
                factor,
                geom,
            } => {
                let factor = *factor;
                let (tv, wv) = (self.value(*t), self.value(*w));
                let (mv, nv) = (self.value(*m), self.value(*n));
                let [nb, c, h, wd] = tv.dims();
                let k = geom.taps();
                let o = geom.c_out;
                let banks = factor * factor;
                let bank_len = o * k * c;
                let po = h * wd;
                let (need_t, need_w, need_m, need_n) = (self.rg(*t), self.rg(*w), self.rg(*m), self.rg(*n));
                let parts = map_items(nb, |i| {
                    let mut dt = need_t.then(|| vec![0.0; tv.item(i).len()]);
                    let mut dw = need_w.then(|| vec![0.0; banks * bank_len]);
                    let mut dm = need_m.then(|| vec![0.0; mv.item(i).len()]);
                    let mut dn = need_n.then(|| vec![0.0; nv.item(i).len()]);
                    let mut dms = vec![0.0; k * po];
                    let mut dns = vec![0.0; c * po];
                    for s in 0..banks {
                        let (sy, sx) = (s / factor, s % factor);
                        let gys = phase_gather(gy.item(i), o, h, wd, factor, sy, sx);
                        let ms = phase_gather(mv.item(i), k, h, wd, factor, sy, sx);
                        let ns = phase_gather(nv.item(i), c, h, wd, factor, sy, sx);
                        dms.fill(0.0);
                        dns.fill(0.0);
                        paka_backward_item(
                            tv.item(i),
                            &wv.data()[s * bank_len..(s + 1) * bank_len],
                            &ms,
                            &ns,
                            &gys,
                            geom,
                            PakaGrads {
                                dx: dt.as_deref_mut(),
                                dw: dw.as_deref_mut().map(|d| &mut d[s * bank_len..(s + 1) * bank_len]),
                                dm: need_m.then_some(&mut dms[..]),
                                dn: need_n.then_some(&mut dns[..]),
                            },
                        );
                        if let Some(dm) = dm.as_deref_mut() {
                            phase_scatter(&dms, dm, k, h, wd, factor, sy, sx, true);
                        }
                        if let Some(dn) = dn.as_deref_mut() {
                            phase_scatter(&dns, dn, c, h, wd, factor, sy, sx, true);
                        }
                    }
                    (dt, dw, dm, dn)
                });
                let mut dts = Vec::new();
                let mut dws = Vec::new();
                let mut dms = Vec::new();
                let mut dns = Vec::new();
                for (dt, dw, dm, dn) in parts {
                    dts.extend(dt.into_iter().flatten());
                    dws.extend(dw);
                    dms.extend(dm.into_iter().flatten());
                    dns.extend(dn.into_iter().flatten());
                }
                if need_t {
                    acc(*t, Tensor::new(tv.dims(), dts)?)?;
                }
                if need_w {
                    acc(*w, Tensor::new(wv.dims(), sum_partials(dws.into_iter()))?)?;
                }
                if need_m {
                    acc(*m, Tensor::new(mv.dims(), dms)?)?;
                }
                if need_n {
                    acc(*n, Tensor::new(nv.dims(), dns)?)?;
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    // Bias of bank s collects the gradient of phase-s pixels.
                    let (hh, hw) = (factor * h, factor * wd);
                    let mut db = vec![0.0; banks * o];
                    for bi in 0..nb {
                        for oc in 0..o {
                            let plane = gy.plane(bi, oc);
                            for y in 0..hh {
                                for x in 0..hw {
                                    let s = (y % factor) * factor + x % factor;
                                    db[s * o + oc] += plane[y * hw + x];
                                }
                            }
                        }
                    }
                    acc(b, Tensor::new([1, banks * o, 1, 1], db)?)?;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xv = self.value(*x);
                let [nb, c, h, w] = xv.dims();
                let plane = h * w;
                let count = (nb * plane) as f64;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..nb {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        let g = gy.plane(b, ch);
                        dbeta[ch] += g.iter().sum::<f64>();
                        dgamma[ch] += g.iter().zip(&xhat[off..off + plane]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for b in 0..nb {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let g = gy.plane(b, ch);
                            let scale = gv[ch] * inv_std[ch];
                            for p in 0..plane {
                                dx[off + p] = if *batch_stats {
                                    scale * (g[p] - dbeta[ch] / count - xhat[off + p] * dgamma[ch] / count)
                                } else {
                                    scale * g[p]
                                };
                            }
                        }
                    }
                    acc(*x, Tensor::new(xv.dims(), dx)?)?;
                }
                if self.rg(*gamma) {
                    acc(*gamma, Tensor::new([1, c, 1, 1], dgamma)?)?;
                }
                if self.rg(*beta) {
                    acc(*beta, Tensor::new([1, c, 1, 1], dbeta)?)?;
                }
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x);
                let d = match kind {
                    Activation::Relu => xv.zip_map(gy, |v, g| if v > 0.0 { g } else { 0.0 })?,
                    Activation::Tanh => node.value.zip_map(gy, |t, g| g * (1.0 - t * t))?,
                };
                acc(*x, d)?;
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let [nb, c, h, w] = xv.dims();
                let n = (h * w) as f64;
                let mut d = Tensor::zeros(xv.dims());
                for b in 0..nb {
                    for ch in 0..c {
                        let g = gy.at(b, ch, 0, 0) / n;
                        d.plane_mut(b, ch).fill(g);
                    }
                }
                acc(*x, d)?;
            }
            Op::Broadcast { x } => {
                let [nb, c, _, _] = gy.dims();
                let data = (0..nb)
                    .flat_map(|b| (0..c).map(move |ch| (b, ch)))
                    .map(|(b, ch)| gy.plane(b, ch).iter().sum())
                    .collect();
                acc(*x, Tensor::new([nb, c, 1, 1], data)?)?;
            }
            Op::Upsample { x, kind, factor } => {
                let xv = self.value(*x);
                let [nb, c, h, w] = xv.dims();
                let wy = axis_weights(*kind, h, *factor);
                let wx = axis_weights(*kind, w, *factor);
                let mut d = Tensor::zeros(xv.dims());
                for b in 0..nb {
                    for ch in 0..c {
                        apply_plane_transpose(gy.plane(b, ch), h, w, &wy, &wx, d.plane_mut(b, ch));
                    }
                }
                acc(*x, d)?;
            }
            Op::Concat { xs } => {
                let mut start = 0;
                for &v in xs {
                    let c = self.value(v).channels();
                    if self.rg(v) {
                        acc(v, gy.slice_channels(start, start + c)?)?;
                    }
                    start += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let xv = self.value(*x);
                let [nb, c, h, w] = xv.dims();
                let sc = gy.channels();
                let mut d = Tensor::zeros([nb, c, h, w]);
                for b in 0..nb {
                    for ch in 0..sc {
                        d.plane_mut(b, start + ch).copy_from_slice(gy.plane(b, ch));
                    }
                }
                acc(*x, d)?;
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    acc(*a, gy.clone())?;
                }
                if self.rg(*b) {
                    acc(*b, gy.clone())?;
                }
            }
            Op::Scale { x, s } => acc(*x, gy.scale(*s))?,
            Op::WeightedSum { x, weights } => {
                let g = gy.data()[0];
                acc(*x, weights.scale(g))?;
            }
            Op::Mse { x, target } => {
                let g = gy.data()[0];
                let xv = self.value(*x);
                let n = xv.len() as f64;
                acc(*x, xv.zip_map(target, |a, t| 2.0 * (a - t) * g / n)?)?;
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let g = gy.data()[0];
                let lv = self.value(*logits);
                let [nb, nc, h, w] = lv.dims();
                let plane = h * w;
                let scale = g / (nb * plane) as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for b in 0..nb {
                    for p in 0..plane {
                        d[(b * nc + labels[b * plane + p]) * plane + p] -= scale;
                    }
                }
                acc(*logits, Tensor::new(lv.dims(), d)?)?;
            }
        }
        Ok(())
    }
}

fn check_bias(t: &Tensor, channels: usize, op: &'static str) -> Result<()> {
    if t.dims() != [1, channels, 1, 1] {
        return Err(Error::shape(op, &[1, channels, 1, 1], &t.dims()));
    }
    Ok(())
}

fn bias_grad(gy: &Tensor, plane: usize) -> Tensor {
    let c = gy.channels();
    let mut db = vec![0.0; c];
    for b in 0..gy.batch() {
        bias_grad_item(gy.item(b), plane, &mut db);
    }
    Tensor::new([1, c, 1, 1], db).expect("bias dims")
}

fn sum_partials(parts: impl Iterator<Item = Vec<f64>>) -> Vec<f64> {
    let mut total: Option<Vec<f64>> = None;
    for p in parts {
        match total.as_mut() {
            None => total = Some(p),
            Some(t) => t.iter_mut().zip(&p).for_each(|(a, b)| *a += b),
        }
    }
    total.unwrap_or_default()
}

/// Pixels of phase (sy, sx) from a (C, f·h, f·w) block, as (C, h, w).
fn phase_gather(src: &[f64], c: usize, h: usize, w: usize, f: usize, sy: usize, sx: usize) -> Vec<f64> {
    let (hh, hw) = (f * h, f * w);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * hh + y * f + sy) * hw..];
            for x in 0..w {
                out[(ch * h + y) * w + x] = row[x * f + sx];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn phase_scatter(
    src: &[f64],
    dst: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    sy: usize,
    sx: usize,
    accumulate: bool,
) {
    let (hh, hw) = (f * h, f * w);
    for ch in 0..c {
        for y in 0..h {
            let base = (ch * hh + y * f + sy) * hw;
            for x in 0..w {
                let v = src[(ch * h + y) * w + x];
                if accumulate {
                    dst[base + x * f + sx] += v;
                } else {
                    dst[base + x * f + sx] = v;
                }
            }
        }
    }
}

pub(crate) fn upsample_tensor(xv: &Tensor, factor: usize, kind: UpsampleKind) -> Tensor {
    let [nb, c, h, w] = xv.dims();
    let wy = axis_weights(kind, h, factor);
    let wx = axis_weights(kind, w, factor);
    let mut out = Tensor::zeros([nb, c, h * factor, w * factor]);
    for b in 0..nb {
        for ch in 0..c {
            apply_plane(xv.plane(b, ch), h, w, &wy, &wx, out.plane_mut(b, ch));
        }
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a bound parameter; `None` if it was not used in the graph.
    pub fn param(&self, p: &Param) -> Option<&Tensor> {
        self.params.get(&p.id()).and_then(|&v| self.get(v))
    }
}
