//! Direct-loop reference implementations and shared fixtures.
#![allow(dead_code)]

use paka::hpm::{CascadeOp, HpmState};
use paka::joint::JointUpLayer;
use paka::nn::{BatchNorm, Conv2d, ConvBn};
use paka::paka::{ChannelBranch, DirectionalBranch, PakaLayer};
use paka::{ConvSpec, Tensor};

pub fn out_size(n: usize, spec: &ConvSpec) -> usize {
    (n + 2 * spec.padding - spec.dilation * (spec.kernel_size - 1) - 1) / spec.stride + 1
}

/// Input coordinate read by kernel row/column `kk` for output coordinate `o`.
fn source(o: usize, kk: usize, spec: &ConvSpec) -> isize {
    (o * spec.stride + kk * spec.dilation) as isize - spec.padding as isize
}

/// Convolution with an optional per-(b, k, c, oy, ox) factor on each product.
fn conv_with(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
    factor: impl Fn(usize, usize, usize, usize, usize) -> f64,
) -> Tensor {
    let [nb, c, h, wd] = x.dims();
    let o = w.dims()[0];
    let ks = spec.kernel_size;
    let (ho, wo) = (out_size(h, spec), out_size(wd, spec));
    let mut y = Tensor::zeros([nb, o, ho, wo]);
    for b in 0..nb {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |t| t.at(0, oc, 0, 0));
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let k = ky * ks + kx;
                            for ic in 0..c {
                                let v = x.at_padded(b, ic, source(oy, ky, spec), source(ox, kx, spec));
                                acc += w.at(oc, k, ic, 0) * v * factor(b, k, ic, oy, ox);
                            }
                        }
                    }
                    y.set(b, oc, oy, ox, acc);
                }
            }
        }
    }
    y
}

pub fn conv(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    conv_with(x, w, bias, spec, |_, _, _, _, _| 1.0)
}

pub fn paka_conv(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, m: &Tensor, n: &Tensor, spec: &ConvSpec) -> Tensor {
    conv_with(x, w, bias, spec, |b, k, c, oy, ox| {
        1.0 + (m.at(b, k, oy, ox) + n.at(b, c, oy, ox)).tanh()
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Eval-mode batch norm with running statistics.
pub fn bn_eval(x: &Tensor, bn: &BatchNorm) -> Tensor {
    let mut y = x.clone();
    let [nb, c, h, w] = x.dims();
    for b in 0..nb {
        for ch in 0..c {
            let g = bn.gamma.value.at(0, ch, 0, 0);
            let be = bn.beta.value.at(0, ch, 0, 0);
            let (mu, var) = (bn.running_mean[ch], bn.running_var[ch]);
            for yy in 0..h {
                for xx in 0..w {
                    let v = x.at(b, ch, yy, xx);
                    y.set(b, ch, yy, xx, g * (v - mu) / (var + bn.eps).sqrt() + be);
                }
            }
        }
    }
    y
}

pub fn conv_layer(x: &Tensor, c: &Conv2d) -> Tensor {
    conv(x, &c.weight.value, c.bias.as_ref().map(|b| &b.value), &c.spec)
}

pub fn conv_bn(x: &Tensor, cb: &ConvBn) -> Tensor {
    let y = bn_eval(&conv_layer(x, &cb.conv), &cb.bn);
    if cb.relu {
        relu(&y)
    } else {
        y
    }
}

pub fn channel_branch(x: &Tensor, br: &ChannelBranch) -> Tensor {
    let h = relu(&conv_layer(x, &br.reduce));
    bn_eval(&conv_layer(&h, &br.expand), &br.bn)
}

pub fn directional_branch(x: &Tensor, br: &DirectionalBranch) -> Tensor {
    let h = conv_layer(x, &br.spatial);
    bn_eval(&conv_layer(&h, &br.project), &br.bn)
}

/// Eval-mode attention layer; absent branches contribute zeros.
pub fn paka_layer(x: &Tensor, l: &PakaLayer) -> Tensor {
    let [nb, c, h, w] = x.dims();
    let (ho, wo) = (out_size(h, &l.spec), out_size(w, &l.spec));
    let m = l.directional.as_ref().map_or_else(
        || Tensor::zeros([nb, l.spec.taps(), ho, wo]),
        |d| directional_branch(x, d),
    );
    let n = l
        .channel
        .as_ref()
        .map_or_else(|| Tensor::zeros([nb, c, ho, wo]), |ch| channel_branch(x, ch));
    paka_conv(x, &l.weight.value, l.bias.as_ref().map(|b| &b.value), &m, &n, &l.spec)
}

pub fn concat(parts: &[Tensor]) -> Tensor {
    let [nb, _, h, w] = parts[0].dims();
    let total: usize = parts.iter().map(|p| p.channels()).sum();
    let mut y = Tensor::zeros([nb, total, h, w]);
    for b in 0..nb {
        let mut off = 0;
        for p in parts {
            for c in 0..p.channels() {
                for yy in 0..h {
                    for xx in 0..w {
                        y.set(b, off + c, yy, xx, p.at(b, c, yy, xx));
                    }
                }
            }
            off += p.channels();
        }
    }
    y
}

/// Per-channel spatial mean broadcast back over H×W.
pub fn pooled_broadcast(x: &Tensor) -> Tensor {
    let [nb, c, h, w] = x.dims();
    let mut y = Tensor::zeros(x.dims());
    for b in 0..nb {
        for ch in 0..c {
            let mut s = 0.0;
            for yy in 0..h {
                for xx in 0..w {
                    s += x.at(b, ch, yy, xx);
                }
            }
            let mean = s / (h * w) as f64;
            for yy in 0..h {
                for xx in 0..w {
                    y.set(b, ch, yy, xx, mean);
                }
            }
        }
    }
    y
}

/// Eval-mode HPM.
pub fn hpm(x: &Tensor, state: &HpmState) -> Tensor {
    let cfg = &state.config;
    let z0 = conv_bn(x, &state.bottleneck);
    let mut feats: Vec<Tensor> = Vec::new();
    for unit in &state.cascade {
        let input = if cfg.dense && !feats.is_empty() {
            let mut all = vec![z0.clone()];
            all.extend(feats.iter().cloned());
            concat(&all)
        } else {
            feats.last().cloned().unwrap_or_else(|| z0.clone())
        };
        let y = match &unit.op {
            CascadeOp::Attention(p) => paka_layer(&input, p),
            CascadeOp::Plain(c) => conv_layer(&input, c),
        };
        feats.push(relu(&bn_eval(&y, &unit.bn)));
    }
    let mut parts = Vec::new();
    if cfg.include_global_pool {
        parts.push(pooled_broadcast(&z0));
    }
    parts.extend(feats);
    let fused = if parts.is_empty() { z0 } else { concat(&parts) };
    match &state.fusion {
        Some(f) => conv_bn(&fused, f),
        None => fused,
    }
}

/// Eval-mode guided ×2 up-sampling, evaluated one high-resolution pixel at a time.
pub fn joint_up(t: &Tensor, guide: &Tensor, layer: &JointUpLayer) -> Tensor {
    let m = directional_branch(guide, &layer.directional);
    let n = channel_branch(guide, &layer.channel);
    let [nb, c, h, w] = t.dims();
    let o = layer.out_channels();
    let spec = layer.spec;
    let ks = spec.kernel_size;
    let wt = &layer.weight.value;
    let mut y = Tensor::zeros([nb, o, 2 * h, 2 * w]);
    for b in 0..nb {
        for oc in 0..o {
            for hy in 0..2 * h {
                for hx in 0..2 * w {
                    let s = (hy % 2) * 2 + hx % 2;
                    let row = s * o + oc;
                    let (ly, lx) = (hy / 2, hx / 2);
                    let mut acc = layer.bias.value.at(0, row, 0, 0);
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let k = ky * ks + kx;
                            for ic in 0..c {
                                let v = t.at_padded(b, ic, source(ly, ky, &spec), source(lx, kx, &spec));
                                let a = 1.0 + (m.at(b, k, hy, hx) + n.at(b, ic, hy, hx)).tanh();
                                acc += wt.at(row, k, ic, 0) * a * v;
                            }
                        }
                    }
                    y.set(b, oc, hy, hx, acc);
                }
            }
        }
    }
    y
}

pub fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims(), "dims differ");
    a.max_abs_diff(b).unwrap()
}
