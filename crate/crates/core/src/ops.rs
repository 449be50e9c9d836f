//! Tape-free forms of the differentiable primitives.

use crate::error::Result;
use crate::geometry::ConvSpec;
use crate::graph::{Activation, Graph, Mode};
use crate::kernels::interp::UpsampleKind;
use crate::tensor::Tensor;

pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let mut g = Graph::new(Mode::Eval);
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = bias.map(|b| g.constant(b.clone()));
    let y = g.conv2d(xv, wv, bv, spec)?;
    Ok(g.value(y).clone())
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        Activation::Tanh => x.map(f64::tanh),
    }
}

/// Spatial mean per (batch, channel); optionally broadcast back to H×W.
pub fn global_avg_pool(x: &Tensor, broadcast: bool) -> Tensor {
    let mut g = Graph::new(Mode::Eval);
    let xv = g.constant(x.clone());
    let p = g.global_avg_pool(xv);
    let out = if broadcast {
        g.broadcast_spatial(p, x.height(), x.width()).expect("pooled dims")
    } else {
        p
    };
    g.value(out).clone()
}

pub fn upsample(x: &Tensor, factor: usize, kind: UpsampleKind) -> Result<Tensor> {
    let mut g = Graph::new(Mode::Eval);
    let xv = g.constant(x.clone());
    let y = g.upsample(xv, factor, kind)?;
    Ok(g.value(y).clone())
}

pub fn concat_channels(xs: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::new(Mode::Eval);
    let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
    let y = g.concat_channels(&vars)?;
    Ok(g.value(y).clone())
}
