//! Separable interpolation weights for integer-factor up-sampling.
//!
//! Source coordinates follow the half-pixel (align-corners = false)
//! convention: `src = (dst + 0.5) / factor - 0.5`.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleKind {
    Nearest,
    Bilinear,
    Bicubic,
}

/// For each output index, the contributing (input index, weight) pairs.
pub(crate) type AxisWeights = Vec<Vec<(usize, f64)>>;

const CUBIC_A: f64 = -0.75;

fn cubic_near(t: f64) -> f64 {
    ((CUBIC_A + 2.0) * t - (CUBIC_A + 3.0)) * t * t + 1.0
}

fn cubic_far(t: f64) -> f64 {
    ((CUBIC_A * t - 5.0 * CUBIC_A) * t + 8.0 * CUBIC_A) * t - 4.0 * CUBIC_A
}

pub(crate) fn axis_weights(kind: UpsampleKind, in_len: usize, factor: usize) -> AxisWeights {
    let f = factor as f64;
    (0..in_len * factor)
        .map(|o| match kind {
            UpsampleKind::Nearest => vec![(o / factor, 1.0)],
            UpsampleKind::Bilinear => {
                let src = ((o as f64 + 0.5) / f - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let l = src - i0 as f64;
                if i0 == i1 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - l), (i1, l)]
                }
            }
            UpsampleKind::Bicubic => {
                let src = (o as f64 + 0.5) / f - 0.5;
                let i = src.floor();
                let t = src - i;
                let ws = [
                    cubic_far(t + 1.0),
                    cubic_near(t),
                    cubic_near(1.0 - t),
                    cubic_far(2.0 - t),
                ];
                let clamp = |j: isize| j.clamp(0, in_len as isize - 1) as usize;
                let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
                for (d, &wv) in ws.iter().enumerate() {
                    let j = clamp(i as isize - 1 + d as isize);
                    match taps.iter_mut().find(|(idx, _)| *idx == j) {
                        Some(e) => e.1 += wv,
                        None => taps.push((j, wv)),
                    }
                }
                taps
            }
        })
        .collect()
}

/// Applies the separable operator to one (h, w) plane.
pub(crate) fn apply_plane(src: &[f64], h: usize, w: usize, wy: &AxisWeights, wx: &AxisWeights, dst: &mut [f64]) {
    let wo = wx.len();
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (ox, taps) in wx.iter().enumerate() {
            tmp[y * wo + ox] = taps.iter().map(|&(i, c)| c * row[i]).sum();
        }
    }
    for (oy, taps) in wy.iter().enumerate() {
        let out = &mut dst[oy * wo..(oy + 1) * wo];
        out.fill(0.0);
        for &(iy, c) in taps {
            let t = &tmp[iy * wo..(iy + 1) * wo];
            out.iter_mut().zip(t).for_each(|(d, v)| *d += c * v);
        }
    }
}

/// Transpose of `apply_plane`: accumulates into `dsrc`.
pub(crate) fn apply_plane_transpose(
    dout: &[f64],
    h: usize,
    w: usize,
    wy: &AxisWeights,
    wx: &AxisWeights,
    dsrc: &mut [f64],
) {
    let wo = wx.len();
    let mut tmp = vec![0.0; h * wo];
    for (oy, taps) in wy.iter().enumerate() {
        let g = &dout[oy * wo..(oy + 1) * wo];
        for &(iy, c) in taps {
            tmp[iy * wo..(iy + 1) * wo]
                .iter_mut()
                .zip(g)
                .for_each(|(d, v)| *d += c * v);
        }
    }
    for y in 0..h {
        let row = &mut dsrc[y * w..(y + 1) * w];
        for (ox, taps) in wx.iter().enumerate() {
            let g = tmp[y * wo + ox];
            for &(i, c) in taps {
                row[i] += c * g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_partition_unity() {
        for kind in [UpsampleKind::Nearest, UpsampleKind::Bilinear, UpsampleKind::Bicubic] {
            for n in [1, 2, 5] {
                for f in [2, 3, 4] {
                    for taps in axis_weights(kind, n, f) {
                        let s: f64 = taps.iter().map(|t| t.1).sum();
                        assert!((s - 1.0).abs() < 1e-14, "{kind:?} {n} {f}");
                    }
                }
            }
        }
    }

    #[test]
    fn cubic_kernel_values() {
        // Keys cubic with a = -0.75 at half-pixel phase.
        assert!((cubic_near(0.0) - 1.0).abs() < 1e-15);
        assert!(cubic_far(1.0).abs() < 1e-15);
        assert!((cubic_near(0.5) - 0.59375).abs() < 1e-15);
        assert!((cubic_far(1.5) + 0.09375).abs() < 1e-15);
    }
}
