//! Deterministic synthetic datasets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// The eight neighbor directions as (dy, dx), row-major around the center.
pub const DIRECTIONS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

pub const EAST: usize = 4;
pub const WEST: usize = 3;

/// Index of the direction pointing the opposite way.
pub fn opposite(dir: usize) -> usize {
    7 - dir
}

/// Beacon channels: east-west, north-south, northeast-southwest, northwest-southeast.
/// Each direction lights exactly one channel with +1 or -1.
pub const BEACON_CHANNELS: usize = 4;

pub fn beacon_code(dir: usize) -> [f64; BEACON_CHANNELS] {
    let (dy, dx) = DIRECTIONS[dir];
    let mut code = [0.0; BEACON_CHANNELS];
    match (dy, dx) {
        (0, dx) => code[0] = dx as f64,
        (dy, 0) => code[1] = -dy as f64,
        (dy, dx) if dy == -dx => code[2] = dx as f64,
        (dy, _) => code[3] = -dy as f64,
    }
    code
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionCopyConfig {
    pub size: usize,
    /// Side of the square tiles on which the beacon is constant.
    pub tile: usize,
    /// Use one direction everywhere instead of a random one per tile.
    pub fixed: Option<usize>,
}

impl DirectionCopyConfig {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            tile: 4,
            fixed: None,
        }
    }
}

/// One direction-copy example: channel 0 of `input` holds a smooth value map,
/// channels 1..=4 the beacon code; `target(p) = value(p + direction(p))`,
/// zero where that neighbor falls outside the map.
#[derive(Clone, Debug, PartialEq)]
pub struct CopySample {
    pub input: Tensor,
    pub target: Tensor,
    pub directions: Vec<usize>,
}

/// Zero-mean, unit-variance smooth noise: white noise blurred by [1, 4, 1] / 6
/// along each axis, rescaled by 2.
pub fn smooth_noise(size: usize, rng: &mut Rng) -> Vec<f64> {
    let n = size + 2;
    let raw: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
    let mut rows = vec![0.0; n * size];
    for y in 0..n {
        for x in 0..size {
            let r = &raw[y * n + x..y * n + x + 3];
            rows[y * size + x] = (r[0] + 4.0 * r[1] + r[2]) / 6.0;
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let col = |dy: usize| rows[(y + dy) * size + x];
            out[y * size + x] = 2.0 * (col(0) + 4.0 * col(1) + col(2)) / 6.0;
        }
    }
    out
}

pub fn gen_direction_copy_with(cfg: &DirectionCopyConfig, seed: u64, n: usize) -> Result<Vec<CopySample>> {
    if cfg.size < 5 {
        return Err(Error::invalid(format!(
            "direction-copy size must be ≥ 5, got {}",
            cfg.size
        )));
    }
    if cfg.tile == 0 || cfg.fixed.is_some_and(|d| d >= 8) {
        return Err(Error::invalid(
            "direction-copy needs tile ≥ 1 and a direction index < 8",
        ));
    }
    let s = cfg.size;
    let mut rng = Rng::derived(seed, 0xd1);
    let tiles = s.div_ceil(cfg.tile);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let value = smooth_noise(s, &mut rng);
        let tile_dirs: Vec<usize> = (0..tiles * tiles)
            .map(|_| cfg.fixed.unwrap_or_else(|| rng.below(8)))
            .collect();
        let mut input = Tensor::zeros([1, 1 + BEACON_CHANNELS, s, s]);
        let mut target = Tensor::zeros([1, 1, s, s]);
        let mut directions = Vec::with_capacity(s * s);
        input.plane_mut(0, 0).copy_from_slice(&value);
        for y in 0..s {
            for x in 0..s {
                let dir = tile_dirs[(y / cfg.tile) * tiles + x / cfg.tile];
                directions.push(dir);
                for (c, v) in beacon_code(dir).into_iter().enumerate() {
                    input.set(0, 1 + c, y, x, v);
                }
                let (dy, dx) = DIRECTIONS[dir];
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < s && (nx as usize) < s {
                    target.set(0, 0, y, x, value[ny as usize * s + nx as usize]);
                }
            }
        }
        out.push(CopySample {
            input,
            target,
            directions,
        });
    }
    Ok(out)
}

pub fn gen_direction_copy(seed: u64, n: usize, size: usize) -> Result<Vec<CopySample>> {
    gen_direction_copy_with(&DirectionCopyConfig::new(size), seed, n)
}

/// Expected MSE of the best constant predictor (zero) when directions are
/// uniform: the target variance 1 times the in-bounds fraction.
pub fn constant_predictor_mse(size: usize) -> f64 {
    let s = size as f64;
    let p_out = 1.0 / (2.0 * s) + (2.0 * s - 1.0) / (2.0 * s * s);
    1.0 - p_out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rect,
    Disc,
    Triangle,
    Diamond,
}

pub const SHAPE_KINDS: [ShapeKind; 4] = [
    ShapeKind::Rect,
    ShapeKind::Disc,
    ShapeKind::Triangle,
    ShapeKind::Diamond,
];

/// A shape with its center, nominal area, and aspect ratio (width / height).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub class: usize,
    pub cy: f64,
    pub cx: f64,
    pub area: f64,
    pub aspect: f64,
}

impl Shape {
    fn half_extents(&self) -> (f64, f64) {
        // Width × height of the bounding box, given the fill ratio of each kind.
        let fill = match self.kind {
            ShapeKind::Rect => 1.0,
            ShapeKind::Disc => std::f64::consts::PI / 4.0,
            ShapeKind::Triangle | ShapeKind::Diamond => 0.5,
        };
        let bbox = self.area / fill;
        let w = (bbox * self.aspect).sqrt();
        (0.5 * bbox / w, 0.5 * w)
    }

    /// Whether the point (y, x) lies inside the shape.
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (hy, hx) = self.half_extents();
        let (u, v) = ((x - self.cx) / hx, (y - self.cy) / hy);
        match self.kind {
            ShapeKind::Rect => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Disc => u * u + v * v <= 1.0,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            // Apex at the top, base along the bottom edge of the box.
            ShapeKind::Triangle => v.abs() <= 1.0 && u.abs() <= (v + 1.0) / 2.0,
        }
    }

    fn texture(&self, y: usize, x: usize, phase: usize) -> f64 {
        let (y, x) = (y + phase, x + phase);
        match self.kind {
            ShapeKind::Rect => ((y / 2) % 2) as f64,
            ShapeKind::Disc => ((y / 2 + x / 2) % 2) as f64,
            ShapeKind::Triangle => (y % 3 == 0 && x % 3 == 0) as u8 as f64,
            ShapeKind::Diamond => (((x + y) / 2) % 2) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub size: usize,
    pub n_classes: usize,
    /// Expected fraction of the image covered by each shape class.
    pub area_budget: f64,
}

impl ShapesConfig {
    pub fn new(size: usize, n_classes: usize) -> Self {
        Self {
            size,
            n_classes,
            area_budget: 0.06,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.n_classes) {
            return Err(Error::invalid(format!(
                "n_classes must be in [2, 5], got {}",
                self.n_classes
            )));
        }
        if self.size < 16 || !(0.0..=0.08).contains(&self.area_budget) {
            return Err(Error::invalid("shapes need size ≥ 16 and an area budget in [0, 0.08]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// (1, 3, H, W) image.
    pub image: Tensor,
    /// Row-major class labels.
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

/// Rasterizes shapes onto a textured background. Later shapes paint over earlier ones.
pub fn render_shapes(shapes: &[Shape], size: usize, n_classes: usize, rng: &mut Rng) -> SegSample {
    let mut image = Tensor::zeros([1, 3, size, size]);
    let mut labels = vec![0usize; size * size];
    let background: [f64; 3] = [
        rng.uniform_in(0.3, 0.7),
        rng.uniform_in(0.3, 0.7),
        rng.uniform_in(0.3, 0.7),
    ];
    for y in 0..size {
        for x in 0..size {
            for (c, &b) in background.iter().enumerate() {
                image.set(0, c, y, x, b + 0.1 * rng.uniform_in(-1.0, 1.0));
            }
        }
    }
    for shape in shapes {
        let color: [f64; 3] = [rng.uniform(), rng.uniform(), rng.uniform()];
        let phase = rng.below(6);
        for y in 0..size {
            for x in 0..size {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    labels[y * size + x] = shape.class;
                    let t = shape.texture(y, x, phase);
                    for (c, &col) in color.iter().enumerate() {
                        image.set(0, c, y, x, 0.6 * col + 0.4 * t);
                    }
                }
            }
        }
    }
    SegSample {
        image,
        labels,
        n_classes,
    }
}

/// Images with one shape per foreground class, each in its own quadrant.
/// Class `c ≥ 1` uses shape kind `c - 1`; class 0 is background.
pub fn gen_shapes_seg_with(cfg: &ShapesConfig, seed: u64, n: usize) -> Result<Vec<SegSample>> {
    cfg.validate()?;
    let mut rng = Rng::derived(seed, 0x5e);
    let s = cfg.size as f64;
    let cell = s / 2.0;
    let nominal = cfg.area_budget * s * s;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut cells = [0usize, 1, 2, 3];
        rng.shuffle(&mut cells);
        let mut shapes = Vec::with_capacity(cfg.n_classes - 1);
        for class in 1..cfg.n_classes {
            let quad = cells[class - 1];
            let mut shape = Shape {
                kind: SHAPE_KINDS[class - 1],
                class,
                cy: 0.0,
                cx: 0.0,
                area: nominal * rng.uniform_in(0.5, 1.5),
                aspect: rng.uniform_in(0.75, 1.33),
            };
            let (hy, hx) = shape.half_extents();
            let (oy, ox) = ((quad / 2) as f64 * cell, (quad % 2) as f64 * cell);
            shape.cy = oy + rng.uniform_in(hy, (cell - hy).max(hy));
            shape.cx = ox + rng.uniform_in(hx, (cell - hx).max(hx));
            shapes.push(shape);
        }
        out.push(render_shapes(&shapes, cfg.size, cfg.n_classes, &mut rng));
    }
    Ok(out)
}

pub fn gen_shapes_seg(seed: u64, n: usize, size: usize, n_classes: usize) -> Result<Vec<SegSample>> {
    gen_shapes_seg_with(&ShapesConfig::new(size, n_classes), seed, n)
}

/// Low-resolution depth, high-resolution guide, and high-resolution depth,
/// each (1, 1, ·, ·), with depth in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct DepthScene {
    pub lr_depth: Tensor,
    pub guide: Tensor,
    pub hr_depth: Tensor,
}

/// Box-filter down-sampling by an integer factor.
pub fn box_downsample(hr: &Tensor, factor: usize) -> Result<Tensor> {
    let [nb, c, h, w] = hr.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!("{h}×{w} is not divisible by {factor}")));
    }
    let (lh, lw) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    Ok(Tensor::from_fn([nb, c, lh, lw], |[b, ch, y, x]| {
        let mut s = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                s += hr.at(b, ch, y * factor + dy, x * factor + dx);
            }
        }
        s * inv
    }))
}

struct PlanarRegion {
    shape: Shape,
    depth: [f64; 3],
    albedo: f64,
}

impl PlanarRegion {
    fn depth_at(&self, y: f64, x: f64, s: f64) -> f64 {
        self.depth[0] + self.depth[1] * (y / s - 0.5) + self.depth[2] * (x / s - 0.5)
    }
}

/// Piecewise-planar depth over a sloped background plane. Every region has its
/// own albedo (levels at least 0.2 apart), so each depth discontinuity sits
/// on an intensity edge of the guide.
pub fn gen_depth_scenes(seed: u64, n: usize, size: usize, scale: usize) -> Result<Vec<DepthScene>> {
    if scale != 2 && scale != 4 {
        return Err(Error::invalid(format!("scale must be 2 or 4, got {scale}")));
    }
    if !size.is_multiple_of(scale) || size < 4 * scale {
        return Err(Error::invalid(format!(
            "size {size} must be a multiple of {scale} and ≥ {}",
            4 * scale
        )));
    }
    let mut rng = Rng::derived(seed, 0xde);
    let s = size as f64;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut albedos = [0.1, 0.3, 0.5, 0.7, 0.9];
        rng.shuffle(&mut albedos);
        let background = PlanarRegion {
            shape: Shape {
                kind: ShapeKind::Rect,
                class: 0,
                cy: s / 2.0,
                cx: s / 2.0,
                area: 4.0 * s * s,
                aspect: 1.0,
            },
            depth: [
                rng.uniform_in(0.7, 0.9),
                rng.uniform_in(-0.1, 0.1),
                rng.uniform_in(-0.1, 0.1),
            ],
            albedo: albedos[0],
        };
        let count = 2 + rng.below(3);
        let mut regions = vec![background];
        for albedo in albedos.iter().skip(1).take(count).copied() {
            let kind = SHAPE_KINDS[rng.below(4)];
            let area = s * s * rng.uniform_in(0.04, 0.12);
            let shape = Shape {
                kind,
                class: 0,
                cy: rng.uniform_in(0.2, 0.8) * s,
                cx: rng.uniform_in(0.2, 0.8) * s,
                area,
                aspect: rng.uniform_in(0.6, 1.6),
            };
            let depth = [
                rng.uniform_in(0.1, 0.6),
                rng.uniform_in(-0.15, 0.15),
                rng.uniform_in(-0.15, 0.15),
            ];
            regions.push(PlanarRegion { shape, depth, albedo });
        }
        let mut hr = Tensor::zeros([1, 1, size, size]);
        let mut guide = Tensor::zeros([1, 1, size, size]);
        let shading = (rng.uniform_in(-0.05, 0.05), rng.uniform_in(-0.05, 0.05));
        for y in 0..size {
            for x in 0..size {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let region = regions
                    .iter()
                    .rev()
                    .find(|r| r.shape.contains(py, px))
                    .unwrap_or(&regions[0]);
                hr.set(0, 0, y, x, region.depth_at(py, px, s).clamp(0.0, 1.0));
                let shade = 1.0 + shading.0 * (py / s - 0.5) + shading.1 * (px / s - 0.5);
                let grain = 0.02 * rng.uniform_in(-1.0, 1.0);
                guide.set(0, 0, y, x, (region.albedo * shade + grain).clamp(0.0, 1.0));
            }
        }
        out.push(DepthScene {
            lr_depth: box_downsample(&hr, scale)?,
            guide,
            hr_depth: hr,
        });
    }
    Ok(out)
}

/// Constant-depth scene with a blank guide.
pub fn flat_scene(size: usize, scale: usize, depth: f64) -> Result<DepthScene> {
    let hr = Tensor::full([1, 1, size, size], depth);
    Ok(DepthScene {
        lr_depth: box_downsample(&hr, scale)?,
        guide: Tensor::full([1, 1, size, size], 0.5),
        hr_depth: hr,
    })
}

/// Central-difference gradient magnitude of one plane, zero on the border.
pub fn gradient_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let gx = plane[y * w + x + 1] - plane[y * w + x - 1];
            let gy = plane[(y + 1) * w + x] - plane[(y - 1) * w + x];
            out[y * w + x] = 0.5 * (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Fraction of depth-edge pixels (gradient above `depth_threshold`) that have
/// a guide-edge pixel (gradient above `guide_threshold`) within one pixel.
pub fn edge_alignment(scene: &DepthScene, depth_threshold: f64, guide_threshold: f64) -> Option<f64> {
    let [_, _, h, w] = scene.hr_depth.dims();
    let gd = gradient_magnitude(scene.hr_depth.data(), h, w);
    let gg = gradient_magnitude(scene.guide.data(), h, w);
    let mut edges = 0usize;
    let mut aligned = 0usize;
    for y in 0..h {
        for x in 0..w {
            if gd[y * w + x] <= depth_threshold {
                continue;
            }
            edges += 1;
            let near = (y.saturating_sub(1)..(y + 2).min(h))
                .any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| gg[yy * w + xx] > guide_threshold));
            aligned += near as usize;
        }
    }
    (edges > 0).then(|| aligned as f64 / edges as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beacon_codes_are_signed_axes() {
        for d in 0..8 {
            let code = beacon_code(d);
            assert_eq!(code.iter().filter(|v| **v != 0.0).count(), 1);
            let opp = beacon_code(opposite(d));
            for c in 0..BEACON_CHANNELS {
                assert_eq!(code[c], -opp[c]);
            }
        }
        assert_eq!(beacon_code(EAST), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(DIRECTIONS[opposite(EAST)], (0, -1));
    }

    #[test]
    fn targets_follow_beacons() {
        let cfg = DirectionCopyConfig::new(9);
        let set = gen_direction_copy_with(&cfg, 3, 2).unwrap();
        for s in &set {
            for y in 0..9 {
                for x in 0..9 {
                    let (dy, dx) = DIRECTIONS[s.directions[y * 9 + x]];
                    let expect = s.input.at_padded(0, 0, y as isize + dy, x as isize + dx);
                    assert_eq!(s.target.at(0, 0, y, x), expect);
                }
            }
        }
    }

    #[test]
    fn smooth_noise_has_unit_variance() {
        let mut rng = Rng::new(1);
        let v = smooth_noise(200, &mut rng);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.05, "mean {mean} var {var}");
    }

    #[test]
    fn background_only_labels_are_zero() {
        let sample = render_shapes(&[], 16, 3, &mut Rng::new(0));
        assert!(sample.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn box_downsample_block_means() {
        let scenes = gen_depth_scenes(0, 2, 16, 4).unwrap();
        for s in &scenes {
            for y in 0..4 {
                for x in 0..4 {
                    let mut sum = 0.0;
                    for dy in 0..4 {
                        for dx in 0..4 {
                            sum += s.hr_depth.at(0, 0, 4 * y + dy, 4 * x + dx);
                        }
                    }
                    assert_eq!(s.lr_depth.at(0, 0, y, x), sum / 16.0);
                }
            }
        }
    }
}
