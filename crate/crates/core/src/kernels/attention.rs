//! Attention-modulated convolution kernels.
//!
//! The kernel attention A(k, c, p) = 1 + tanh(m(k, p) + n(c, p)) lives on the
//! output grid. `m` is (K, Ho, Wo) and `n` is (C, Ho, Wo). Neither the forward
//! nor the backward pass stores the (K, C, Ho, Wo) block; A is rebuilt one
//! plane at a time from per-map exponentials.

use super::conv::{axpy, axpy_compensated, dot, fill_bias, gather_tap, scatter_tap_add, Geom};

/// Beyond this magnitude exp(2v) products could overflow; such entries fall
/// back to a direct tanh.
const EXP_LIMIT: f64 = 170.0;

/// exp(2v), or NaN as a marker for the direct path.
fn half_exp(v: f64) -> f64 {
    if v.abs() <= EXP_LIMIT {
        (2.0 * v).exp()
    } else {
        f64::NAN
    }
}

/// Per-map exponentials so that 1 + tanh(m + n) = 2E / (E + 1) with
/// E = exp(2m)·exp(2n), free of the cancellation in (E − 1) near m + n = 0.
pub(crate) struct AttentionTable {
    em: Vec<f64>,
    en: Vec<f64>,
}

impl AttentionTable {
    pub(crate) fn new(m: &[f64], n: &[f64]) -> Self {
        Self {
            em: m.iter().map(|&v| half_exp(v)).collect(),
            en: n.iter().map(|&v| half_exp(v)).collect(),
        }
    }

    /// A(k, c) over one output plane.
    fn plane(&self, m: &[f64], n: &[f64], k: usize, c: usize, po: usize, out: &mut [f64]) {
        let (mk, nc) = (&m[k * po..(k + 1) * po], &n[c * po..(c + 1) * po]);
        let (ek, ec) = (&self.em[k * po..(k + 1) * po], &self.en[c * po..(c + 1) * po]);
        for p in 0..po {
            let e = ek[p] * ec[p];
            out[p] = if e.is_nan() {
                1.0 + (mk[p] + nc[p]).tanh()
            } else {
                2.0 * e / (e + 1.0)
            };
        }
    }
}

/// Fused forward: A is formed one (k, c) plane at a time and never stored.
pub(crate) fn paka_forward_item(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    m: &[f64],
    n: &[f64],
    g: &Geom,
    y: &mut [f64],
) {
    let (pi, po) = (g.in_plane(), g.out_plane());
    fill_bias(y, bias, po);
    let table = AttentionTable::new(m, n);
    let mut xa = vec![0.0; po];
    let mut a = vec![0.0; po];
    let mut comp = vec![0.0; y.len()];
    for k in 0..g.taps() {
        for c in 0..g.c_in {
            table.plane(m, n, k, c, po, &mut a);
            gather_tap(&x[c * pi..(c + 1) * pi], g, k, &mut xa);
            xa.iter_mut().zip(&a).for_each(|(v, &av)| *v *= av);
            for o in 0..g.c_out {
                let wv = w[g.widx(o, k, c)];
                let r = o * po..(o + 1) * po;
                axpy_compensated(&mut y[r.clone()], &mut comp[r], wv, &xa);
            }
        }
    }
    y.iter_mut().zip(&comp).for_each(|(v, e)| *v += e);
}

/// Forward from an explicit attention block `a` laid out as (K, C, Ho, Wo).
pub(crate) fn paka_forward_materialized_item(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    a: &[f64],
    g: &Geom,
    y: &mut [f64],
) {
    let (pi, po) = (g.in_plane(), g.out_plane());
    fill_bias(y, bias, po);
    let mut xa = vec![0.0; po];
    for k in 0..g.taps() {
        for c in 0..g.c_in {
            let akc = &a[(k * g.c_in + c) * po..(k * g.c_in + c + 1) * po];
            gather_tap(&x[c * pi..(c + 1) * pi], g, k, &mut xa);
            xa.iter_mut().zip(akc).for_each(|(v, &s)| *v *= s);
            for o in 0..g.c_out {
                let wv = w[g.widx(o, k, c)];
                axpy(&mut y[o * po..(o + 1) * po], wv, &xa);
            }
        }
    }
}

pub(crate) struct PakaGrads<'a> {
    pub dx: Option<&'a mut [f64]>,
    pub dw: Option<&'a mut [f64]>,
    pub dm: Option<&'a mut [f64]>,
    pub dn: Option<&'a mut [f64]>,
}

/// Backward through y = Σ x·w·(1 + tanh(m + n)). Gradients are accumulated.
#[allow(clippy::too_many_arguments)]
pub(crate) fn paka_backward_item(
    x: &[f64],
    w: &[f64],
    m: &[f64],
    n: &[f64],
    dy: &[f64],
    g: &Geom,
    grads: PakaGrads<'_>,
) {
    let (pi, po) = (g.in_plane(), g.out_plane());
    let PakaGrads {
        mut dx,
        mut dw,
        mut dm,
        mut dn,
    } = grads;
    let need_attn = dm.is_some() || dn.is_some();
    let mut xs = vec![0.0; po];
    let mut gsum = vec![0.0; po];
    let mut scratch = vec![0.0; po];
    let mut a = vec![0.0; po];
    let table = AttentionTable::new(m, n);
    for k in 0..g.taps() {
        for c in 0..g.c_in {
            table.plane(m, n, k, c, po, &mut a);
            let a = &a[..];
            gather_tap(&x[c * pi..(c + 1) * pi], g, k, &mut xs);

            if let Some(dw) = dw.as_deref_mut() {
                scratch
                    .iter_mut()
                    .zip(xs.iter().zip(a))
                    .for_each(|(s, (&xv, &av))| *s = xv * av);
                for o in 0..g.c_out {
                    dw[g.widx(o, k, c)] += dot(&dy[o * po..(o + 1) * po], &scratch);
                }
            }

            if dx.is_none() && !need_attn {
                continue;
            }
            gsum.fill(0.0);
            for o in 0..g.c_out {
                axpy(&mut gsum, w[g.widx(o, k, c)], &dy[o * po..(o + 1) * po]);
            }
            if let Some(dx) = dx.as_deref_mut() {
                scratch
                    .iter_mut()
                    .zip(gsum.iter().zip(a))
                    .for_each(|(s, (&gv, &av))| *s = gv * av);
                scatter_tap_add(&mut dx[c * pi..(c + 1) * pi], g, k, &scratch);
            }
            if need_attn {
                for p in 0..po {
                    scratch[p] = gsum[p] * xs[p] * a[p] * (2.0 - a[p]);
                }
                if let Some(dm) = dm.as_deref_mut() {
                    axpy(&mut dm[k * po..(k + 1) * po], 1.0, &scratch);
                }
                if let Some(dn) = dn.as_deref_mut() {
                    axpy(&mut dn[c * po..(c + 1) * po], 1.0, &scratch);
                }
            }
        }
    }
}
