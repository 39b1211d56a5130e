//! Procedural defect corpus: brushed-metal backgrounds with parametric
//! defect renderers (scratch, welding line, inclusion, water/oil spot,
//! crescent gap, texture variants), dense and overlapping. Each defect is
//! rendered as a delta layer; its annotation is the exact bounding box of
//! the pixels the renderer touched beyond a small threshold, so boxes are
//! tight by construction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::BBox;
use crate::error::{Error, Result};
use crate::rng::{chacha, mix};
use crate::tensor::Tensor;

/// Rendered delta magnitude below which a pixel does not count as defect
/// support (and thus does not extend the annotation box).
const SUPPORT_THRESHOLD: f32 = 0.02;
/// Minimum annotation side length / area in pixels.
const MIN_SIDE: f64 = 3.0;
const MIN_AREA: f64 = 9.0;

/// Defect classes with renderers, in the library order. A run's class list
/// must be a subset of these names.
pub const CLASS_LIBRARY: [&str; 8] = [
    "scratch",
    "welding_line",
    "inclusion",
    "water_spot",
    "oil_spot",
    "crescent_gap",
    "texture_patch",
    "pitted_region",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn all() -> [Split; 3] {
        [Split::Train, Split::Val, Split::Test]
    }

    fn index(&self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parameter(format!(
                "unknown split '{other}' (expected train, val or test)"
            ))),
        }
    }
}

/// One image with its annotations and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Grayscale pixels, row-major; intensity = value / 255 in [0, 1].
    pub image: Vec<u8>,
    pub annotations: Vec<BBox>,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub image_size: usize,
    /// Class names, background excluded; each must be in [`CLASS_LIBRARY`].
    pub classes: Vec<String>,
    pub defects_min: usize,
    pub defects_max: usize,
    pub overlap_allowed: bool,
    /// Amplitude of the uniform per-pixel noise, in intensity units.
    pub noise_level: f32,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            classes: CLASS_LIBRARY[..3].iter().map(|s| s.to_string()).collect(),
            defects_min: 1,
            defects_max: 4,
            overlap_allowed: true,
            noise_level: 0.03,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config("image size must be at least 16".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("at least one defect class required".into()));
        }
        for c in &self.classes {
            if !CLASS_LIBRARY.contains(&c.as_str()) {
                return Err(Error::Config(format!(
                    "unknown defect class '{c}'; library: {CLASS_LIBRARY:?}"
                )));
            }
        }
        if self.defects_min == 0 || self.defects_min > self.defects_max {
            return Err(Error::Config(format!(
                "defect count range [{}, {}] is invalid",
                self.defects_min, self.defects_max
            )));
        }
        if !(0.0..0.2).contains(&self.noise_level) {
            return Err(Error::Config(format!(
                "noise level {} out of range [0, 0.2)",
                self.noise_level
            )));
        }
        Ok(())
    }
}

/// Per-sample seed: split-disjoint ranges below a shared base.
pub fn sample_seed(base: u64, split: Split, index: u64) -> u64 {
    base.wrapping_add(split.index() << 32).wrapping_add(index)
}

/// Generates one sample from an explicit rng (seed it with [`sample_seed`]
/// for corpus determinism).
pub fn generate_sample(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<SampleRecord> {
    cfg.validate()?;
    let size = cfg.image_size;
    let mut canvas = render_background(size, rng);

    let count = rng.gen_range(cfg.defects_min..=cfg.defects_max);
    let mut annotations: Vec<BBox> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.gen_range(0..cfg.classes.len());
        let mut placed = false;
        for _attempt in 0..200 {
            let delta = render_defect(&cfg.classes[class], size, rng);
            let Some(bbox) = support_bbox(&delta, size) else {
                continue;
            };
            if bbox.width() < MIN_SIDE || bbox.height() < MIN_SIDE || bbox.area() < MIN_AREA {
                continue;
            }
            if !cfg.overlap_allowed
                && annotations.iter().any(|a| crate::anchors::iou(a, &bbox) > 0.0)
            {
                continue;
            }
            for (c, d) in canvas.iter_mut().zip(&delta) {
                *c = (*c + d).clamp(0.0, 1.0);
            }
            annotations.push(BBox::with_class(bbox.x1, bbox.y1, bbox.x2, bbox.y2, class));
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Construction(format!(
                "failed to place a '{}' defect after 200 attempts",
                cfg.classes[class]
            )));
        }
    }

    // bounded uniform pixel noise, after the boxes are fixed
    if cfg.noise_level > 0.0 {
        for c in canvas.iter_mut() {
            let n = (rng.gen::<f32>() - 0.5) * 2.0 * cfg.noise_level;
            *c = (*c + n).clamp(0.0, 1.0);
        }
    }

    let image = canvas
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(SampleRecord {
        id: String::new(),
        width: size,
        height: size,
        image,
        annotations,
        seed: 0,
        split: Split::Train,
    })
}

/// Generates a whole split with per-sample seeds and ids filled in.
pub fn generate_split(cfg: &GenConfig, split: Split, count: usize) -> Result<Vec<SampleRecord>> {
    use rayon::prelude::*;
    cfg.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = sample_seed(cfg.seed, split, i as u64);
            let mut rng = chacha(seed);
            let mut record = generate_sample(cfg, &mut rng)?;
            record.id = format!("{}_{:05}", split.name(), i);
            record.seed = seed;
            record.split = split;
            Ok(record)
        })
        .collect()
}

// ── background ─────────────────────────────────────────────────────

/// Brushed-metal plate: base gray, horizontal grain (per-row low-frequency
/// value noise), and a faint 2-D value noise. All components are bounded so
/// the pixel-deviation audit can rely on a hard 3-sigma envelope.
fn render_background(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let base = 0.45 + rng.gen::<f32>() * 0.1;
    let grain = value_noise_1d(size, 8, 0.05, rng);
    let field = value_noise_2d(size, 8, 0.03, rng);
    let mut out = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = (base + grain[y] + field[y * size + x]).clamp(0.05, 0.95);
        }
    }
    out
}

fn value_noise_1d(n: usize, cell: usize, amplitude: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let knots = n / cell + 2;
    let values: Vec<f32> = (0..knots).map(|_| (rng.gen::<f32>() - 0.5) * 2.0 * amplitude).collect();
    (0..n)
        .map(|i| {
            let t = i as f32 / cell as f32;
            let k = t.floor() as usize;
            let f = smoothstep(t - k as f32);
            values[k] * (1.0 - f) + values[k + 1] * f
        })
        .collect()
}

fn value_noise_2d(n: usize, cell: usize, amplitude: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let knots = n / cell + 2;
    let lattice: Vec<f32> = (0..knots * knots)
        .map(|_| (rng.gen::<f32>() - 0.5) * 2.0 * amplitude)
        .collect();
    let mut out = vec![0.0f32; n * n];
    for y in 0..n {
        let ty = y as f32 / cell as f32;
        let ky = ty.floor() as usize;
        let fy = smoothstep(ty - ky as f32);
        for x in 0..n {
            let tx = x as f32 / cell as f32;
            let kx = tx.floor() as usize;
            let fx = smoothstep(tx - kx as f32);
            let v00 = lattice[ky * knots + kx];
            let v01 = lattice[ky * knots + kx + 1];
            let v10 = lattice[(ky + 1) * knots + kx];
            let v11 = lattice[(ky + 1) * knots + kx + 1];
            out[y * n + x] = v00 * (1.0 - fx) * (1.0 - fy)
                + v01 * fx * (1.0 - fy)
                + v10 * (1.0 - fx) * fy
                + v11 * fx * fy;
        }
    }
    out
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

// ── defect renderers ───────────────────────────────────────────────

fn render_defect(class: &str, size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    match class {
        "scratch" => render_scratch(size, rng),
        "welding_line" => render_welding_line(size, rng),
        "inclusion" => render_inclusion(size, rng),
        "water_spot" => render_spot(size, rng, 0.15, 0.25, 2.0),
        "oil_spot" => render_spot(size, rng, -0.30, -0.18, 3.0),
        "crescent_gap" => render_crescent(size, rng),
        "texture_patch" => render_texture_patch(size, rng),
        "pitted_region" => render_pits(size, rng),
        other => unreachable!("unvalidated class {other}"),
    }
}

fn scale(size: usize, v: f32) -> f32 {
    v * size as f32 / 64.0
}

/// Thin anti-aliased line segment, random length/angle/polarity.
fn render_scratch(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = size as f32;
    let len = rng.gen_range(scale(size, 10.0)..scale(size, 34.0));
    let angle = rng.gen_range(0.0..std::f32::consts::PI);
    let cx = rng.gen_range(0.15 * s..0.85 * s);
    let cy = rng.gen_range(0.15 * s..0.85 * s);
    let half = 0.5 * len;
    let (dx, dy) = (angle.cos(), angle.sin());
    let (x0, y0) = (cx - half * dx, cy - half * dy);
    let (x1, y1) = (cx + half * dx, cy + half * dy);
    let width = rng.gen_range(1.0..2.0f32);
    let sign = if rng.gen::<f32>() < 0.7 { -1.0 } else { 1.0 };
    let delta = sign * rng.gen_range(0.25..0.45f32);
    stamp_segment(size, x0, y0, x1, y1, width, delta)
}

/// Thicker straight band with a bead ripple along its length.
fn render_welding_line(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = size as f32;
    let len = rng.gen_range(scale(size, 18.0)..scale(size, 44.0));
    let angle = rng.gen_range(0.0..std::f32::consts::PI);
    let cx = rng.gen_range(0.2 * s..0.8 * s);
    let cy = rng.gen_range(0.2 * s..0.8 * s);
    let half = 0.5 * len;
    let (dx, dy) = (angle.cos(), angle.sin());
    let (x0, y0) = (cx - half * dx, cy - half * dy);
    let (x1, y1) = (cx + half * dx, cy + half * dy);
    let width = rng.gen_range(3.5..6.0f32);
    let delta = rng.gen_range(0.20..0.35f32);
    let mut out = stamp_segment(size, x0, y0, x1, y1, width, delta);
    // bead ripple: modulate along the axis
    let period = rng.gen_range(3.0..5.0f32);
    for y in 0..size {
        for x in 0..size {
            let t = (x as f32 - x0) * dx + (y as f32 - y0) * dy;
            let m = 0.8 + 0.2 * (t * std::f32::consts::TAU / period).cos();
            out[y * size + x] *= m;
        }
    }
    out
}

/// High-contrast irregular filled polygon.
fn render_inclusion(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = size as f32;
    let cx = rng.gen_range(0.2 * s..0.8 * s);
    let cy = rng.gen_range(0.2 * s..0.8 * s);
    let r = rng.gen_range(scale(size, 2.5)..scale(size, 7.0));
    let nv = rng.gen_range(5..=8usize);
    let mut verts = Vec::with_capacity(nv);
    for i in 0..nv {
        let a = (i as f32 + rng.gen_range(-0.2..0.2)) * std::f32::consts::TAU / nv as f32;
        let rr = r * rng.gen_range(0.6..1.4);
        verts.push((cx + rr * a.cos(), cy + rr * a.sin()));
    }
    let delta = -rng.gen_range(0.28..0.45f32);
    let mut out = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            if point_in_polygon(x as f32 + 0.5, y as f32 + 0.5, &verts) {
                out[y * size + x] = delta;
            }
        }
    }
    out
}

/// Soft elliptical blob (water/oil); `falloff` controls edge sharpness.
fn render_spot(size: usize, rng: &mut ChaCha8Rng, lo: f32, hi: f32, falloff: f32) -> Vec<f32> {
    let s = size as f32;
    let cx = rng.gen_range(0.15 * s..0.85 * s);
    let cy = rng.gen_range(0.15 * s..0.85 * s);
    let rx = rng.gen_range(scale(size, 3.0)..scale(size, 9.0));
    let ry = rng.gen_range(scale(size, 3.0)..scale(size, 9.0));
    let delta = rng.gen_range(lo.min(hi)..lo.max(hi));
    let mut out = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let ddx = (x as f32 + 0.5 - cx) / rx;
            let ddy = (y as f32 + 0.5 - cy) / ry;
            let rho2 = ddx * ddx + ddy * ddy;
            if rho2 < 4.0 {
                out[y * size + x] = delta * (-falloff * rho2).exp();
            }
        }
    }
    out
}

/// Dark arc segment (partial ring).
fn render_crescent(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = size as f32;
    let cx = rng.gen_range(0.25 * s..0.75 * s);
    let cy = rng.gen_range(0.25 * s..0.75 * s);
    let radius = rng.gen_range(scale(size, 5.0)..scale(size, 12.0));
    let thickness = rng.gen_range(1.5..3.0f32);
    let start = rng.gen_range(0.0..std::f32::consts::TAU);
    let span = rng.gen_range(1.6..3.8f32);
    let delta = -rng.gen_range(0.25..0.40f32);
    let mut out = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let d = (dx * dx + dy * dy).sqrt();
            let band = (thickness / 2.0 + 0.7 - (d - radius).abs()).clamp(0.0, 1.0);
            if band > 0.0 {
                let mut a = dy.atan2(dx) - start;
                while a < 0.0 {
                    a += std::f32::consts::TAU;
                }
                if a <= span {
                    out[y * size + x] = delta * band;
                }
            }
        }
    }
    out
}

/// Rectangular patch of fine oriented stripes (texture variation).
fn render_texture_patch(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = size as f32;
    let w = rng.gen_range(scale(size, 8.0)..scale(size, 20.0));
    let h = rng.gen_range(scale(size, 8.0)..scale(size, 20.0));
    let x0 = rng.gen_range(0.05 * s..(0.95 * s - w));
    let y0 = rng.gen_range(0.05 * s..(0.95 * s - h));
    let phi = rng.gen_range(0.0..std::f32::consts::PI);
    let lambda = rng.gen_range(2.0..4.0f32);
    let delta = rng.gen_range(0.16..0.24f32);
    let mut out = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let fx = x as f32 + 0.5;
            let fy = y as f32 + 0.5;
            if fx >= x0 && fx < x0 + w && fy >= y0 && fy < y0 + h {
                let t = fx * phi.cos() + fy * phi.sin();
                out[y * size + x] = delta * (t * std::f32::consts::TAU / lambda).sin();
            }
        }
    }
    out
}

/// Cluster of small dark pits.
fn render_pits(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = size as f32;
    let cx = rng.gen_range(0.2 * s..0.8 * s);
    let cy = rng.gen_range(0.2 * s..0.8 * s);
    let cluster_r = rng.gen_range(scale(size, 4.0)..scale(size, 10.0));
    let n = rng.gen_range(6..=14usize);
    let mut out = vec![0.0f32; size * size];
    for _ in 0..n {
        let a = rng.gen_range(0.0..std::f32::consts::TAU);
        let rr = cluster_r * rng.gen::<f32>().sqrt();
        let px = cx + rr * a.cos();
        let py = cy + rr * a.sin();
        let pr = rng.gen_range(0.8..1.8f32);
        let delta = -rng.gen_range(0.25..0.40f32);
        let lo_y = (py - pr - 2.0).max(0.0) as usize;
        let hi_y = ((py + pr + 2.0) as usize).min(size - 1);
        let lo_x = (px - pr - 2.0).max(0.0) as usize;
        let hi_x = ((px + pr + 2.0) as usize).min(size - 1);
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let d2 = ((x as f32 + 0.5 - px).powi(2) + (y as f32 + 0.5 - py).powi(2)) / (pr * pr);
                if d2 < 4.0 {
                    let v = delta * (-2.0 * d2).exp();
                    let cell = &mut out[y * size + x];
                    if v < *cell {
                        *cell = v;
                    }
                }
            }
        }
    }
    out
}

/// Anti-aliased capsule around a segment.
fn stamp_segment(size: usize, x0: f32, y0: f32, x1: f32, y1: f32, width: f32, delta: f32) -> Vec<f32> {
    let mut out = vec![0.0f32; size * size];
    let vx = x1 - x0;
    let vy = y1 - y0;
    let len2 = (vx * vx + vy * vy).max(1e-6);
    for y in 0..size {
        for x in 0..size {
            let px = x as f32 + 0.5 - x0;
            let py = y as f32 + 0.5 - y0;
            let t = ((px * vx + py * vy) / len2).clamp(0.0, 1.0);
            let dx = px - t * vx;
            let dy = py - t * vy;
            let d = (dx * dx + dy * dy).sqrt();
            let alpha = (width / 2.0 + 0.7 - d).clamp(0.0, 1.0);
            if alpha > 0.0 {
                out[y * size + x] = delta * alpha;
            }
        }
    }
    out
}

fn point_in_polygon(x: f32, y: f32, verts: &[(f32, f32)]) -> bool {
    let mut inside = false;
    let n = verts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if ((yi > y) != (yj > y)) && (x < (xj - xi) * (y - yi) / (yj - yi) + xi) {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Bounding box of pixels whose delta magnitude exceeds the support
/// threshold; `None` when the layer is empty.
fn support_bbox(delta: &[f32], size: usize) -> Option<BBox> {
    let mut min_x = usize::MAX;
    let mut min_y = usize::MAX;
    let mut max_x = 0usize;
    let mut max_y = 0usize;
    let mut any = false;
    for y in 0..size {
        for x in 0..size {
            if delta[y * size + x].abs() > SUPPORT_THRESHOLD {
                any = true;
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
    }
    if !any {
        return None;
    }
    Some(BBox::new(
        min_x as f64,
        min_y as f64,
        (max_x + 1) as f64,
        (max_y + 1) as f64,
    ))
}

// ── preprocessing ──────────────────────────────────────────────────

/// Fixed standardization constants (dataset-independent).
pub const STANDARDIZE_MEAN: f32 = 0.5;
pub const STANDARDIZE_STD: f32 = 0.25;

/// Bilinear resize to `target²`, intensity to [0, 1], then standardization
/// with the fixed constants. Returns a `[1 × target × target]` tensor.
pub fn preprocess_image(image: &[u8], width: usize, height: usize, target: usize) -> Result<Tensor> {
    if width == 0 || height == 0 || image.len() != width * height {
        return Err(Error::Contract(format!(
            "preprocess: bad image buffer ({}x{}, {} bytes)",
            width,
            height,
            image.len()
        )));
    }
    if target == 0 {
        return Err(Error::Contract("preprocess: zero target size".into()));
    }
    let gray: Vec<f32>;
    let resized: &[f32] = if width == target && height == target {
        gray = image.iter().map(|&v| v as f32 / 255.0).collect();
        &gray
    } else {
        gray = bilinear_resize(image, width, height, target, target);
        &gray
    };
    let data = resized
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) - STANDARDIZE_MEAN) / STANDARDIZE_STD)
        .collect();
    Tensor::new(vec![1, target, target], data)
}

fn bilinear_resize(image: &[u8], w: usize, h: usize, tw: usize, th: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; tw * th];
    let sx = w as f32 / tw as f32;
    let sy = h as f32 / th as f32;
    for oy in 0..th {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, h as f32 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..tw {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, w as f32 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            let v00 = image[y0 * w + x0] as f32;
            let v01 = image[y0 * w + x1] as f32;
            let v10 = image[y1 * w + x0] as f32;
            let v11 = image[y1 * w + x1] as f32;
            let v = v00 * (1.0 - wx) * (1.0 - wy)
                + v01 * wx * (1.0 - wy)
                + v10 * (1.0 - wx) * wy
                + v11 * wx * wy;
            out[oy * tw + ox] = v / 255.0;
        }
    }
    out
}

/// Rescales annotation coordinates by independent x/y factors.
pub fn rescale_annotations(boxes: &[BBox], sx: f64, sy: f64) -> Vec<BBox> {
    boxes
        .iter()
        .map(|b| BBox {
            x1: b.x1 * sx,
            y1: b.y1 * sy,
            x2: b.x2 * sx,
            y2: b.y2 * sy,
            class_id: b.class_id,
        })
        .collect()
}

/// Image tensor plus annotations rescaled to the target resolution.
pub fn preprocess(record: &SampleRecord, target: usize) -> Result<(Tensor, Vec<BBox>)> {
    let tensor = preprocess_image(&record.image, record.width, record.height, target)?;
    let sx = target as f64 / record.width as f64;
    let sy = target as f64 / record.height as f64;
    Ok((tensor, rescale_annotations(&record.annotations, sx, sy)))
}

// ── augmentation ───────────────────────────────────────────────────

pub fn flip_horizontal(record: &SampleRecord) -> SampleRecord {
    let (w, h) = (record.width, record.height);
    let mut image = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            image[y * w + x] = record.image[y * w + (w - 1 - x)];
        }
    }
    let annotations = record
        .annotations
        .iter()
        .map(|b| BBox {
            x1: w as f64 - b.x2,
            y1: b.y1,
            x2: w as f64 - b.x1,
            y2: b.y2,
            class_id: b.class_id,
        })
        .collect();
    SampleRecord {
        image,
        annotations,
        ..record.clone()
    }
}

pub fn flip_vertical(record: &SampleRecord) -> SampleRecord {
    let (w, h) = (record.width, record.height);
    let mut image = vec![0u8; w * h];
    for y in 0..h {
        image[y * w..(y + 1) * w].copy_from_slice(&record.image[(h - 1 - y) * w..(h - y) * w]);
    }
    let annotations = record
        .annotations
        .iter()
        .map(|b| BBox {
            x1: b.x1,
            y1: h as f64 - b.y2,
            x2: b.x2,
            y2: h as f64 - b.y1,
            class_id: b.class_id,
        })
        .collect();
    SampleRecord {
        image,
        annotations,
        ..record.clone()
    }
}

/// Clockwise quarter-turn (square images only).
pub fn rotate90(record: &SampleRecord) -> SampleRecord {
    let s = record.width;
    debug_assert_eq!(record.width, record.height);
    let mut image = vec![0u8; s * s];
    for y in 0..s {
        for x in 0..s {
            image[y * s + x] = record.image[(s - 1 - x) * s + y];
        }
    }
    let annotations = record
        .annotations
        .iter()
        .map(|b| BBox {
            x1: s as f64 - b.y2,
            y1: b.x1,
            x2: s as f64 - b.y1,
            y2: b.x2,
            class_id: b.class_id,
        })
        .collect();
    SampleRecord {
        image,
        annotations,
        ..record.clone()
    }
}

/// Zoom about the image center by factor `s`, resampling bilinearly and
/// scaling annotations with re-clipping.
fn zoom(record: &SampleRecord, s: f64) -> SampleRecord {
    let size = record.width;
    let c = size as f64 / 2.0;
    let mut image = vec![0u8; size * size];
    for oy in 0..size {
        for ox in 0..size {
            // inverse map: output pixel center -> source position
            let sxp = ((ox as f64 + 0.5 - c) / s + c - 0.5).clamp(0.0, size as f64 - 1.0);
            let syp = ((oy as f64 + 0.5 - c) / s + c - 0.5).clamp(0.0, size as f64 - 1.0);
            let x0 = sxp.floor() as usize;
            let y0 = syp.floor() as usize;
            let x1 = (x0 + 1).min(size - 1);
            let y1 = (y0 + 1).min(size - 1);
            let wx = (sxp - x0 as f64) as f32;
            let wy = (syp - y0 as f64) as f32;
            let v00 = record.image[y0 * size + x0] as f32;
            let v01 = record.image[y0 * size + x1] as f32;
            let v10 = record.image[y1 * size + x0] as f32;
            let v11 = record.image[y1 * size + x1] as f32;
            let v = v00 * (1.0 - wx) * (1.0 - wy)
                + v01 * wx * (1.0 - wy)
                + v10 * (1.0 - wx) * wy
                + v11 * wx * wy;
            image[oy * size + ox] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    let annotations = record
        .annotations
        .iter()
        .map(|b| {
            BBox {
                x1: (b.x1 - c) * s + c,
                y1: (b.y1 - c) * s + c,
                x2: (b.x2 - c) * s + c,
                y2: (b.y2 - c) * s + c,
                class_id: b.class_id,
            }
            .clipped(size as f64, size as f64)
        })
        .collect();
    SampleRecord {
        image,
        annotations,
        ..record.clone()
    }
}

fn boxes_valid(record: &SampleRecord) -> bool {
    record
        .annotations
        .iter()
        .all(|b| b.is_valid() && b.width() >= MIN_SIDE && b.height() >= MIN_SIDE && b.area() >= MIN_AREA)
}

/// Random flip / quarter-turn / ±10% scale jitter with consistent
/// annotation transforms; redraws the transform if a box degenerates.
pub fn augment(record: &SampleRecord, rng: &mut ChaCha8Rng) -> SampleRecord {
    for _ in 0..50 {
        let mut out = record.clone();
        if rng.gen::<bool>() {
            out = flip_horizontal(&out);
        }
        if rng.gen::<bool>() {
            out = flip_vertical(&out);
        }
        for _ in 0..rng.gen_range(0..4u32) {
            out = rotate90(&out);
        }
        let s = rng.gen_range(0.9..1.1f64);
        out = zoom(&out, s);
        if boxes_valid(&out) {
            return out;
        }
    }
    // every draw degenerated a box; fall back to the untouched sample
    record.clone()
}

/// Derives a per-(sample, epoch) augmentation stream.
pub fn augment_seed(base: u64, sample_seed_v: u64, epoch: u64) -> u64 {
    mix(&[base, sample_seed_v, epoch, 0xau64])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_class_cfg(class: &str) -> GenConfig {
        GenConfig {
            classes: vec![class.to_string()],
            defects_min: 1,
            defects_max: 1,
            ..Default::default()
        }
    }

    #[test]
    fn single_defect_contract() {
        let cfg = one_class_cfg("scratch");
        let mut rng = chacha(1);
        let rec = generate_sample(&cfg, &mut rng).unwrap();
        assert_eq!(rec.annotations.len(), 1);
        assert_eq!(rec.annotations[0].class_id, Some(0));
        assert_eq!(rec.image.len(), 64 * 64);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig::default();
        let a = generate_sample(&cfg, &mut chacha(42)).unwrap();
        let b = generate_sample(&cfg, &mut chacha(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn boxes_is_within_bounds_and_big_enough() {
        let cfg = GenConfig {
            classes: CLASS_LIBRARY.iter().map(|s| s.to_string()).collect(),
            defects_min: 2,
            defects_max: 5,
            ..Default::default()
        };
        for seed in 0..20 {
            let rec = generate_sample(&cfg, &mut chacha(seed)).unwrap();
            for b in &rec.annotations {
                assert!(b.is_valid());
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
                assert!(b.area() >= MIN_AREA);
            }
        }
    }

    #[test]
    fn non_overlapping_mode_keeps_boxes_disjoint() {
        let cfg = GenConfig {
            overlap_allowed: false,
            defects_min: 3,
            defects_max: 3,
            ..Default::default()
        };
        for seed in 0..10 {
            let rec = generate_sample(&cfg, &mut chacha(seed)).unwrap();
            for i in 0..rec.annotations.len() {
                for j in 0..i {
                    assert_eq!(crate::anchors::iou(&rec.annotations[i], &rec.annotations[j]), 0.0);
                }
            }
        }
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let mut seen = std::collections::HashSet::new();
        for split in Split::all() {
            for i in 0..1000u64 {
                assert!(seen.insert(sample_seed(7, split, i)));
            }
        }
    }

    #[test]
    fn preprocess_identity_scale_keeps_annotations() {
        let cfg = one_class_cfg("inclusion");
        let mut rec = generate_sample(&cfg, &mut chacha(3)).unwrap();
        rec.id = "t".into();
        let (tensor, boxes) = preprocess(&rec, 64).unwrap();
        assert_eq!(tensor.shape(), &[1, 64, 64]);
        assert_eq!(boxes, rec.annotations);
    }

    #[test]
    fn preprocess_halving_halves_coordinates() {
        let cfg = GenConfig {
            image_size: 128,
            ..one_class_cfg("inclusion")
        };
        let rec = generate_sample(&cfg, &mut chacha(4)).unwrap();
        let (_, boxes) = preprocess(&rec, 64).unwrap();
        for (orig, scaled) in rec.annotations.iter().zip(&boxes) {
            assert!((scaled.x1 - orig.x1 / 2.0).abs() < 1e-12);
            assert!((scaled.y2 - orig.y2 / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn preprocess_constant_image_is_finite() {
        let img = vec![128u8; 32 * 32];
        let t = preprocess_image(&img, 32, 32, 64).unwrap();
        let v = t.to_vec();
        assert!(v.iter().all(|x| x.is_finite()));
        let first = v[0];
        assert!(v.iter().all(|&x| (x - first).abs() < 1e-6));
    }

    #[test]
    fn preprocess_rejects_empty() {
        assert!(preprocess_image(&[], 0, 0, 64).is_err());
    }

    #[test]
    fn horizontal_flip_is_involution() {
        let cfg = GenConfig::default();
        let rec = generate_sample(&cfg, &mut chacha(5)).unwrap();
        let back = flip_horizontal(&flip_horizontal(&rec));
        assert_eq!(back, rec);
    }

    #[test]
    fn flip_box_algebra() {
        let mut rec = generate_sample(&GenConfig::default(), &mut chacha(6)).unwrap();
        rec.annotations = vec![BBox::with_class(10.0, 20.0, 30.0, 40.0, 0)];
        let flipped = flip_horizontal(&rec);
        let b = flipped.annotations[0];
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (34.0, 20.0, 54.0, 40.0));
    }

    #[test]
    fn rotation_preserves_box_invariants_and_multiset() {
        let cfg = GenConfig {
            defects_min: 3,
            defects_max: 3,
            ..Default::default()
        };
        let rec = generate_sample(&cfg, &mut chacha(7)).unwrap();
        let mut classes: Vec<_> = rec.annotations.iter().map(|b| b.class_id).collect();
        let rotated = rotate90(&rec);
        assert_eq!(rotated.annotations.len(), rec.annotations.len());
        let mut rot_classes: Vec<_> = rotated.annotations.iter().map(|b| b.class_id).collect();
        classes.sort();
        rot_classes.sort();
        assert_eq!(classes, rot_classes);
        for b in &rotated.annotations {
            assert!(b.is_valid());
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
        }
        // four quarter-turns come back to the start
        let full = rotate90(&rotate90(&rotate90(&rotate90(&rec))));
        assert_eq!(full, rec);
    }

    #[test]
    fn augment_preserves_count_and_classes() {
        let cfg = GenConfig {
            defects_min: 2,
            defects_max: 4,
            ..Default::default()
        };
        for seed in 0..10 {
            let rec = generate_sample(&cfg, &mut chacha(seed)).unwrap();
            let aug = augment(&rec, &mut chacha(seed + 100));
            assert_eq!(aug.annotations.len(), rec.annotations.len());
            let mut a: Vec<_> = rec.annotations.iter().map(|b| b.class_id).collect();
            let mut b: Vec<_> = aug.annotations.iter().map(|b| b.class_id).collect();
            a.sort();
            b.sort();
            assert_eq!(a, b);
            assert!(boxes_valid(&aug));
        }
    }
}
