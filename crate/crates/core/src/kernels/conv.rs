//! Per-item convolution kernels over raw slices.
//!
//! Every kernel processes one batch element laid out as (C, H, W). Weights are
//! laid out as (out_ch, K, in_ch), so `w[(o * K + k) * C + c]` is w(o, k, c).

use crate::error::Result;
use crate::geometry::ConvSpec;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl Geom {
    pub fn new(c_in: usize, h: usize, w: usize, c_out: usize, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let (ho, wo) = spec.output_size(h, w)?;
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            ho,
            wo,
            spec,
        })
    }

    pub fn taps(&self) -> usize {
        self.spec.taps()
    }

    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.taps() * self.c_in
    }

    #[inline]
    pub fn widx(&self, o: usize, k: usize, c: usize) -> usize {
        (o * self.taps() + k) * self.c_in + c
    }
}

/// Output coordinates `o` in `[start, end)` with `0 <= o*stride + shift < in_len`.
#[inline]
fn span(shift: isize, out_len: usize, in_len: usize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let start = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
    let last = in_len as isize - 1 - shift;
    let end = if last < 0 { 0 } else { last / s + 1 };
    let start = (start as usize).min(out_len);
    let end = (end as usize).min(out_len);
    (start, end.max(start))
}

/// Fills `dst` (output plane) with the input plane sampled at tap `k`, zero outside.
pub(crate) fn gather_tap(src: &[f64], g: &Geom, k: usize, dst: &mut [f64]) {
    let (sy, sx) = g.spec.tap_shift(k);
    let s = g.spec.stride;
    let (y0, y1) = span(sy, g.ho, g.h, s);
    let (x0, x1) = span(sx, g.wo, g.w, s);
    dst.fill(0.0);
    if x0 == x1 {
        return;
    }
    for oy in y0..y1 {
        let iy = (oy as isize * s as isize + sy) as usize;
        let row = &src[iy * g.w..(iy + 1) * g.w];
        let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
        if s == 1 {
            let ix0 = (x0 as isize + sx) as usize;
            out[x0..x1].copy_from_slice(&row[ix0..ix0 + (x1 - x0)]);
        } else {
            for ox in x0..x1 {
                out[ox] = row[(ox as isize * s as isize + sx) as usize];
            }
        }
    }
}

/// Adds the output-plane values `src` back onto the input plane at tap `k`.
pub(crate) fn scatter_tap_add(dst: &mut [f64], g: &Geom, k: usize, src: &[f64]) {
    let (sy, sx) = g.spec.tap_shift(k);
    let s = g.spec.stride;
    let (y0, y1) = span(sy, g.ho, g.h, s);
    let (x0, x1) = span(sx, g.wo, g.w, s);
    if x0 == x1 {
        return;
    }
    for oy in y0..y1 {
        let iy = (oy as isize * s as isize + sy) as usize;
        let row = &mut dst[iy * g.w..(iy + 1) * g.w];
        let inp = &src[oy * g.wo..(oy + 1) * g.wo];
        if s == 1 {
            let ix0 = (x0 as isize + sx) as usize;
            row[ix0..ix0 + (x1 - x0)]
                .iter_mut()
                .zip(&inp[x0..x1])
                .for_each(|(d, v)| *d += v);
        } else {
            for ox in x0..x1 {
                row[(ox as isize * s as isize + sx) as usize] += inp[ox];
            }
        }
    }
}

#[inline]
pub(crate) fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
}

/// `axpy` with the rounding error of each addition carried in `comp`
/// (TwoSum); the compensated result is `dst + comp`.
#[inline]
pub(crate) fn axpy_compensated(dst: &mut [f64], comp: &mut [f64], a: f64, src: &[f64]) {
    for ((d, e), s) in dst.iter_mut().zip(comp.iter_mut()).zip(src) {
        let v = a * s;
        let t = *d + v;
        let bp = t - *d;
        *e += (*d - (t - bp)) + (v - bp);
        *d = t;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn fill_bias(y: &mut [f64], bias: Option<&[f64]>, plane: usize) {
    match bias {
        Some(b) => y.chunks_mut(plane).zip(b).for_each(|(row, &v)| row.fill(v)),
        None => y.fill(0.0),
    }
}

/// y(o, p) = b(o) + Σ_c Σ_k x(p·s + d·p_k, c) · w(o, k, c)
pub(crate) fn conv_forward_item(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &Geom, y: &mut [f64]) {
    let (pi, po) = (g.in_plane(), g.out_plane());
    fill_bias(y, bias, po);
    let mut xs = vec![0.0; po];
    let mut comp = vec![0.0; y.len()];
    for c in 0..g.c_in {
        let xc = &x[c * pi..(c + 1) * pi];
        for k in 0..g.taps() {
            gather_tap(xc, g, k, &mut xs);
            for o in 0..g.c_out {
                let wv = w[g.widx(o, k, c)];
                if wv != 0.0 {
                    let r = o * po..(o + 1) * po;
                    axpy_compensated(&mut y[r.clone()], &mut comp[r], wv, &xs);
                }
            }
        }
    }
    y.iter_mut().zip(&comp).for_each(|(v, e)| *v += e);
}

/// Accumulates weight gradients into `dw` and, when requested, input gradients into `dx`.
pub(crate) fn conv_backward_item(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &Geom,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let (pi, po) = (g.in_plane(), g.out_plane());
    let mut xs = vec![0.0; po];
    let mut gsum = vec![0.0; po];
    let mut dx = dx;
    let mut dw = dw;
    for c in 0..g.c_in {
        let xc = &x[c * pi..(c + 1) * pi];
        for k in 0..g.taps() {
            if let Some(dw) = dw.as_deref_mut() {
                gather_tap(xc, g, k, &mut xs);
                for o in 0..g.c_out {
                    dw[g.widx(o, k, c)] += dot(&dy[o * po..(o + 1) * po], &xs);
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                gsum.fill(0.0);
                for o in 0..g.c_out {
                    axpy(&mut gsum, w[g.widx(o, k, c)], &dy[o * po..(o + 1) * po]);
                }
                scatter_tap_add(&mut dx[c * pi..(c + 1) * pi], g, k, &gsum);
            }
        }
    }
}

pub(crate) fn bias_grad_item(dy: &[f64], plane: usize, db: &mut [f64]) {
    for (o, row) in dy.chunks(plane).enumerate() {
        db[o] += row.iter().sum::<f64>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_matches_bruteforce() {
        for stride in 1..4 {
            for shift in -6isize..6 {
                for in_len in 1..9 {
                    for out_len in 1..9 {
                        let (a, b) = span(shift, out_len, in_len, stride);
                        let expect: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = o as isize * stride as isize + shift;
                                i >= 0 && i < in_len as isize
                            })
                            .collect();
                        let got: Vec<usize> = (a..b).collect();
                        assert_eq!(got, expect, "shift {shift} stride {stride} in {in_len} out {out_len}");
                    }
                }
            }
        }
    }

    #[test]
    fn taps_entirely_outside_a_tiny_input_read_zero() {
        let spec = ConvSpec::same(5, 2);
        let g = Geom::new(1, 1, 2, 1, spec).unwrap();
        let src = [1.0, 2.0];
        let mut dst = [9.0; 2];
        gather_tap(&src, &g, 0, &mut dst);
        assert_eq!(dst, [0.0, 0.0]);
        let mut back = [0.0; 2];
        scatter_tap_add(&mut back, &g, 0, &[1.0, 1.0]);
        assert_eq!(back, [0.0, 0.0]);
    }
}
