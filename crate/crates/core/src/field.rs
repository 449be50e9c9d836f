//! Propagational field: the receptive field of one pixel as bent by the
//! directional modulation of stacked attention layers.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::ConvSpec;
use crate::graph::{AttentionTrace, Graph, Mode, Var};
use crate::io::{self, Rgb};
use crate::tensor::Tensor;

pub const DEFAULT_DEPTH: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct FieldQuery {
    pub y: usize,
    pub x: usize,
    /// Indices into the trace; `None` selects every traced layer.
    pub layers: Option<Vec<usize>>,
    /// Number of layers (counted from the last selected one) the footprint
    /// expansion passes through.
    pub depth: usize,
    /// Batch item of the trace to read.
    pub item: usize,
}

impl FieldQuery {
    pub fn new(y: usize, x: usize) -> Self {
        Self {
            y,
            x,
            layers: None,
            depth: DEFAULT_DEPTH,
            item: 0,
        }
    }
}

/// Weighted offset sum of one layer at the query pixel, as (dy, dx).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerField {
    pub name: String,
    pub dilation: usize,
    pub vector: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldResult {
    pub query: (usize, usize),
    pub dims: (usize, usize),
    pub layers: Vec<LayerField>,
    /// Offset from the query → summed product of directional attention along
    /// every path reaching it.
    pub footprint: BTreeMap<(isize, isize), f64>,
    /// Positions visited when each layer's vector is applied at the point the
    /// previous (later) layer moved to, starting from the query.
    pub moving_path: Vec<(f64, f64)>,
}

impl FieldResult {
    /// Sum of the per-layer vectors in the query's frame.
    pub fn shared_vector(&self) -> (f64, f64) {
        self.layers
            .iter()
            .fold((0.0, 0.0), |(a, b), l| (a + l.vector.0, b + l.vector.1))
    }
}

/// Runs `forward` on an eval-mode graph with tracing on and returns the
/// directional modulation of every attention layer it touched, in call order.
pub fn trace_attention(forward: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<Vec<AttentionTrace>> {
    let mut g = Graph::new(Mode::Eval);
    g.enable_trace();
    forward(&mut g)?;
    Ok(g.take_trace())
}

/// Directional attention 1 + tanh(m) of every tap at one pixel.
fn tap_attention(t: &AttentionTrace, item: usize, y: usize, x: usize) -> Vec<f64> {
    let [_, k, h, w] = t.directional.dims();
    (0..k)
        .map(|tap| 1.0 + t.directional.data()[((item * k + tap) * h + y) * w + x].tanh())
        .collect()
}

/// Σ over non-center taps of (dilation · unit offset) · attention.
pub fn layer_vector(spec: &ConvSpec, attention: &[f64]) -> (f64, f64) {
    let center = spec.center_tap();
    let mut v = (0.0, 0.0);
    for (k, (uy, ux)) in spec.unit_offsets().into_iter().enumerate() {
        if k == center {
            continue;
        }
        let d = spec.dilation as f64;
        v.0 += d * uy as f64 * attention[k];
        v.1 += d * ux as f64 * attention[k];
    }
    v
}

fn selected<'a>(trace: &'a [AttentionTrace], q: &FieldQuery) -> Result<Vec<&'a AttentionTrace>> {
    let idx: Vec<usize> = match &q.layers {
        Some(l) => l.clone(),
        None => (0..trace.len()).collect(),
    };
    if idx.is_empty() {
        return Err(Error::invalid("field query selects no layers"));
    }
    let mut out = Vec::with_capacity(idx.len());
    for i in idx {
        let t = trace
            .get(i)
            .ok_or_else(|| Error::invalid(format!("layer {i} not in trace of {} layers", trace.len())))?;
        if t.spec.stride != 1 {
            return Err(Error::invalid(format!(
                "layer {} is strided; fields need stride 1",
                t.name
            )));
        }
        out.push(t);
    }
    let [nb, _, h, w] = out[0].directional.dims();
    if out.iter().any(|t| {
        let d = t.directional.dims();
        (d[2], d[3]) != (h, w)
    }) {
        return Err(Error::invalid("selected layers have different resolutions"));
    }
    if q.item >= nb {
        return Err(Error::invalid(format!("item {} out of range for batch {nb}", q.item)));
    }
    if q.y >= h || q.x >= w {
        return Err(Error::invalid(format!(
            "query ({}, {}) outside the {h}×{w} map",
            q.y, q.x
        )));
    }
    Ok(out)
}

/// Per-layer vectors at the query, the depth-limited footprint, and the
/// moving-point path.
pub fn propagational_field(trace: &[AttentionTrace], q: &FieldQuery) -> Result<FieldResult> {
    let layers = selected(trace, q)?;
    let [_, _, h, w] = layers[0].directional.dims();
    let fields = layers
        .iter()
        .map(|t| LayerField {
            name: t.name.clone(),
            dilation: t.spec.dilation,
            vector: layer_vector(&t.spec, &tap_attention(t, q.item, q.y, q.x)),
        })
        .collect();

    let mut front: BTreeMap<(isize, isize), f64> = BTreeMap::new();
    front.insert((q.y as isize, q.x as isize), 1.0);
    for t in layers.iter().rev().take(q.depth) {
        let offsets = t.spec.offsets();
        let mut next = BTreeMap::new();
        for (&(py, px), &weight) in &front {
            let a = tap_attention(t, q.item, py as usize, px as usize);
            for (k, &(oy, ox)) in offsets.iter().enumerate() {
                let (ny, nx) = (py + oy, px + ox);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                *next.entry((ny, nx)).or_insert(0.0) += weight * a[k];
            }
        }
        front = next;
    }
    let footprint = front
        .into_iter()
        .map(|((y, x), v)| ((y - q.y as isize, x - q.x as isize), v))
        .collect();

    let mut point = (q.y as f64, q.x as f64);
    let mut moving_path = vec![point];
    for t in layers.iter().rev() {
        let py = point.0.round().clamp(0.0, (h - 1) as f64) as usize;
        let px = point.1.round().clamp(0.0, (w - 1) as f64) as usize;
        let v = layer_vector(&t.spec, &tap_attention(t, q.item, py, px));
        point = (point.0 + v.0, point.1 + v.1);
        moving_path.push(point);
    }

    Ok(FieldResult {
        query: (q.y, q.x),
        dims: (h, w),
        layers: fields,
        footprint,
        moving_path,
    })
}

/// CSV rows `layer,dy,dx,weight`: one per layer vector (weight = its length),
/// then one per footprint offset under the layer name `footprint`.
pub fn field_csv(fr: &FieldResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut row = |cols: [String; 4]| w.write_record(&cols).map_err(|e| Error::invalid(format!("csv: {e}")));
    row(["layer".into(), "dy".into(), "dx".into(), "weight".into()])?;
    for l in &fr.layers {
        let (dy, dx) = l.vector;
        row([
            l.name.clone(),
            format!("{dy:?}"),
            format!("{dx:?}"),
            format!("{:?}", dy.hypot(dx)),
        ])?;
    }
    for (&(dy, dx), &v) in &fr.footprint {
        row(["footprint".into(), dy.to_string(), dx.to_string(), format!("{v:?}")])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// Each map pixel becomes a `zoom`×`zoom` block.
    pub zoom: usize,
    /// Arrow length in map pixels per unit of vector length.
    pub arrow_gain: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            zoom: 8,
            arrow_gain: 2.0,
        }
    }
}

pub const MARKER: [u8; 3] = [0, 255, 0];
pub const ARROW_COLORS: [[u8; 3]; 4] = [[0, 255, 255], [255, 255, 0], [255, 0, 255], [80, 160, 255]];

/// Grayscale base, footprint as a red heat layer, one arrow per layer from the
/// query's center, and the query block in green on top.
pub fn render_field_image(fr: &FieldResult, base: Option<&[f64]>, opts: &RenderOptions) -> Result<Rgb> {
    let (h, w) = fr.dims;
    if let Some(b) = base {
        if b.len() != h * w {
            return Err(Error::shape("render_field (base)", &[h, w], &[b.len()]));
        }
    }
    let z = opts.zoom.max(1);
    let mut img = Rgb::new(w * z, h * z);
    let (lo, hi) = base
        .map(|b| {
            b.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)))
        })
        .unwrap_or((0.0, 0.0));
    let peak = fr.footprint.values().fold(0.0f64, |m, &v| m.max(v));
    for y in 0..h {
        for x in 0..w {
            let gray = match base {
                Some(b) if hi > lo => (b[y * w + x] - lo) / (hi - lo),
                _ => 0.0,
            };
            let heat = fr
                .footprint
                .get(&(y as isize - fr.query.0 as isize, x as isize - fr.query.1 as isize))
                .map_or(0.0, |&v| if peak > 0.0 { v / peak } else { 0.0 });
            let g = 0.5 * gray;
            let px = [
                to_byte(g + (1.0 - g) * heat),
                to_byte(g * (1.0 - heat)),
                to_byte(g * (1.0 - heat)),
            ];
            for yy in y * z..(y + 1) * z {
                for xx in x * z..(x + 1) * z {
                    img.put(yy, xx, px);
                }
            }
        }
    }
    let cy = (fr.query.0 * z + z / 2) as isize;
    let cx = (fr.query.1 * z + z / 2) as isize;
    for (i, l) in fr.layers.iter().enumerate() {
        let ey = cy + (l.vector.0 * opts.arrow_gain * z as f64).round() as isize;
        let ex = cx + (l.vector.1 * opts.arrow_gain * z as f64).round() as isize;
        if (ey, ex) == (cy, cx) {
            continue;
        }
        let color = ARROW_COLORS[i % ARROW_COLORS.len()];
        for (py, px) in bresenham((cy, cx), (ey, ex)) {
            if py >= 0 && px >= 0 && (py as usize) < h * z && (px as usize) < w * z {
                img.put(py as usize, px as usize, color);
            }
        }
    }
    for yy in fr.query.0 * z..(fr.query.0 + 1) * z {
        for xx in fr.query.1 * z..(fr.query.1 + 1) * z {
            img.put(yy, xx, MARKER);
        }
    }
    Ok(img)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Integer line from `a` to `b` inclusive, as (y, x).
pub fn bresenham(a: (isize, isize), b: (isize, isize)) -> Vec<(isize, isize)> {
    let (mut y, mut x) = a;
    let dx = (b.1 - x).abs();
    let dy = -(b.0 - y).abs();
    let sx = if x < b.1 { 1 } else { -1 };
    let sy = if y < b.0 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::new();
    loop {
        out.push((y, x));
        if (y, x) == b {
            return out;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Renders to a binary PPM file.
pub fn render_field(fr: &FieldResult, base: Option<&Tensor>, opts: &RenderOptions, path: &Path) -> Result<()> {
    let plane = base.map(|t| t.plane(0, 0));
    let img = render_field_image(fr, plane, opts)?;
    io::write_ppm(path, &img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_with(m: Tensor, dilation: usize) -> AttentionTrace {
        AttentionTrace {
            name: "layer".into(),
            spec: ConvSpec::same(3, dilation),
            directional: m,
        }
    }

    #[test]
    fn zero_modulation_gives_zero_vector() {
        let t = trace_with(Tensor::zeros([1, 9, 5, 5]), 2);
        let fr = propagational_field(&[t], &FieldQuery::new(2, 2)).unwrap();
        assert_eq!(fr.layers[0].vector, (0.0, 0.0));
    }

    #[test]
    fn east_bias_points_east() {
        let spec = ConvSpec::same(3, 3);
        let east = spec.unit_offsets().iter().position(|&o| o == (0, 1)).unwrap();
        let c = 0.7;
        let m = Tensor::from_fn([1, 9, 4, 4], |[_, k, _, _]| if k == east { c } else { 0.0 });
        let fr = propagational_field(&[trace_with(m, 3)], &FieldQuery::new(1, 1)).unwrap();
        let (dy, dx) = fr.layers[0].vector;
        assert!(dy.abs() < 1e-15);
        assert!((dx - 3.0 * c.tanh()).abs() < 1e-15);
    }

    #[test]
    fn out_of_bounds_query_is_rejected() {
        let t = trace_with(Tensor::zeros([1, 9, 4, 4]), 1);
        assert!(propagational_field(&[t], &FieldQuery::new(4, 0)).is_err());
    }

    #[test]
    fn bresenham_endpoints() {
        let line = bresenham((0, 0), (2, 5));
        assert_eq!(line.first(), Some(&(0, 0)));
        assert_eq!(line.last(), Some(&(2, 5)));
        assert_eq!(line.len(), 6);
    }
}
