//! Synthetic radar-like scenes: sparse targets built from bright point
//! scatterers over multiplicative exponential speckle.
//!
//! On disk a scene is two files:
//! - `scene_<id>.grid`: `MDG1`, u32 H, u32 W, then H·W little-endian f32;
//! - `scene_<id>.boxes.csv`: header `class,cx,cy,w,h`, one box per line.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use crate::diffusion::{Box4, BoxSet};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const GRID_MAGIC: &[u8; 4] = b"MDG1";
pub const CLASS_NAMES: [&str; 3] = ["cross", "line", "ell"];
pub const DEFAULT_SIDE: usize = 128;
pub const MAX_TARGETS: usize = 6;

/// Scatterer point-spread width (pixels) and the radius added around the
/// scatterer centres when boxing a target.
const PSF_SIGMA: f64 = 1.0;
const PSF_RADIUS: f64 = 2.0 * PSF_SIGMA;
const BOX_PAD: f64 = 0.10;
const BASE_LEVEL: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `[1, H, W]`, non-negative.
    pub image: Tensor,
    pub gt: BoxSet,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layout {
    /// `+` with arms of `arm` scatterers.
    Cross { arm: usize },
    /// `n` collinear scatterers at `angle` (multiples of 45°).
    Line { n: usize, angle: usize },
    /// Corner plus two perpendicular arms, rotated by `quarter` turns.
    Ell { a: usize, b: usize, quarter: usize },
}

impl Layout {
    pub fn class(&self) -> usize {
        match self {
            Layout::Cross { .. } => 0,
            Layout::Line { .. } => 1,
            Layout::Ell { .. } => 2,
        }
    }

    /// Scatterer offsets in units of the scatterer spacing.
    pub fn points(&self) -> Vec<(f64, f64)> {
        match *self {
            Layout::Cross { arm } => {
                let mut p = vec![(0.0, 0.0)];
                for k in 1..=arm as i32 {
                    let k = k as f64;
                    p.extend([(k, 0.0), (-k, 0.0), (0.0, k), (0.0, -k)]);
                }
                p
            }
            Layout::Line { n, angle } => {
                let (dx, dy) = [(1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (-1.0, 1.0)][angle % 4];
                (0..n).map(|i| (i as f64 * dx, i as f64 * dy)).collect()
            }
            Layout::Ell { a, b, quarter } => {
                let mut p = vec![(0.0, 0.0)];
                p.extend((1..=a).map(|i| (i as f64, 0.0)));
                p.extend((1..=b).map(|i| (0.0, i as f64)));
                let rot = |(x, y): (f64, f64)| match quarter % 4 {
                    0 => (x, y),
                    1 => (-y, x),
                    2 => (-x, -y),
                    _ => (y, -x),
                };
                p.into_iter().map(rot).collect()
            }
        }
    }

    /// Every layout variant of a class, each with 3–9 scatterers.
    pub fn variants(class: usize) -> Vec<Layout> {
        match class {
            0 => (1..=2).map(|arm| Layout::Cross { arm }).collect(),
            1 => (3..=9).flat_map(|n| (0..4).map(move |angle| Layout::Line { n, angle })).collect(),
            _ => (1..=4)
                .flat_map(|a| (1..=4).flat_map(move |b| (0..4).map(move |quarter| Layout::Ell { a, b, quarter })))
                .collect(),
        }
    }
}

fn gaussian_splat(img: &mut [f64], h: usize, w: usize, cy: f64, cx: f64, sigma: f64, amp: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let (iy, ix) = (cy.round() as isize, cx.round() as isize);
    for y in (iy - r).max(0)..=(iy + r).min(h as isize - 1) {
        for x in (ix - r).max(0)..=(ix + r).min(w as isize - 1) {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            img[y as usize * w + x as usize] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
}

fn overlaps(a: &Box4, b: &Box4, margin: f64) -> bool {
    (a[0] - b[0]).abs() * 2.0 < a[2] + b[2] + 2.0 * margin && (a[1] - b[1]).abs() * 2.0 < a[3] + b[3] + 2.0 * margin
}

/// A deterministic scene: 1–6 non-overlapping targets of `class_count`
/// classes, 0–3 clutter blobs, exponential speckle. Pixel centres sit at
/// `(i + 0.5)/side` in normalised coordinates.
pub fn gen_scene(seed: u64, h: usize, w: usize, class_count: usize) -> Result<SceneSample> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::config(format!("scene size {h}x{w} must be a positive multiple of 32")));
    }
    if !(1..=CLASS_NAMES.len()).contains(&class_count) {
        return Err(Error::config(format!("class count {class_count} outside 1..={}", CLASS_NAMES.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.0; h * w];

    // smooth low-intensity base
    let (fx, fy, phase) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.0..6.3));
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 / w as f64 * fx * std::f64::consts::TAU + phase).sin();
            let v = (y as f64 / h as f64 * fy * std::f64::consts::TAU).cos();
            img[y * w + x] = BASE_LEVEL * (1.0 + 0.3 * u * v);
        }
    }

    for _ in 0..rng.random_range(0..=3) {
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let sigma = rng.random_range(3.0..8.0);
        let amp = rng.random_range(0.2..0.5);
        gaussian_splat(&mut img, h, w, cy, cx, sigma, amp);
    }

    let targets = rng.random_range(1..=MAX_TARGETS);
    let mut boxes: Vec<Box4> = Vec::new();
    let mut labels = Vec::new();
    let mut attempts = 0;
    while boxes.len() < targets && attempts < 200 {
        attempts += 1;
        let class = rng.random_range(0..class_count);
        let variants = Layout::variants(class);
        let layout = variants[rng.random_range(0..variants.len())];
        let spacing = rng.random_range(2.5..4.0);
        let pts: Vec<(f64, f64)> = layout
            .points()
            .into_iter()
            .map(|(x, y)| (x * spacing + rng.random_range(-0.3..0.3), y * spacing + rng.random_range(-0.3..0.3)))
            .collect();
        let (min_x, max_x) = pts.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.0), a.1.max(p.0)));
        let (min_y, max_y) = pts.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.1), a.1.max(p.1)));
        // tight box around the scatterer supports, padded
        let bw = (max_x - min_x + 2.0 * PSF_RADIUS) * (1.0 + BOX_PAD);
        let bh = (max_y - min_y + 2.0 * PSF_RADIUS) * (1.0 + BOX_PAD);
        let cx = rng.random_range(bw / 2.0 + 1.0..w as f64 - bw / 2.0 - 1.0);
        let cy = rng.random_range(bh / 2.0 + 1.0..h as f64 - bh / 2.0 - 1.0);
        let candidate = [cx / w as f64, cy / h as f64, bw / w as f64, bh / h as f64];
        if boxes.iter().any(|b| overlaps(b, &candidate, 2.0 / w as f64)) {
            continue;
        }
        let (ox, oy) = (cx - (min_x + max_x) / 2.0, cy - (min_y + max_y) / 2.0);
        for (px, py) in pts {
            let amp = rng.random_range(2.5..4.0);
            // pixel (i, j) has its centre at continuous coordinate i + 0.5
            gaussian_splat(&mut img, h, w, py + oy - 0.5, px + ox - 0.5, PSF_SIGMA, amp);
        }
        boxes.push(candidate);
        labels.push(class);
    }

    for v in img.iter_mut() {
        let speckle: f64 = Exp1.sample(&mut rng);
        *v *= speckle;
    }
    Ok(SceneSample { image: Tensor::new(&[1, h, w], img)?, gt: BoxSet::ground_truth(boxes, labels)?, seed })
}

pub fn grid_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("scene_{id}.grid"))
}

pub fn boxes_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("scene_{id}.boxes.csv"))
}

pub fn encode_grid(image: &Tensor) -> Result<Vec<u8>> {
    let (_, h, w) = image.dims3()?;
    let mut out = Vec::with_capacity(12 + 4 * h * w);
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in image.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_grid(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let fail = |offset: usize, msg: &str| Error::parse(origin, offset, format!("byte {offset}: {msg}"));
    if bytes.len() < 4 || &bytes[..4] != GRID_MAGIC {
        return Err(fail(0, "missing MDG1 magic"));
    }
    let u32_at = |off: usize| {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| fail(bytes.len(), "truncated header"))
    };
    let (h, w) = (u32_at(4)?, u32_at(8)?);
    let body = &bytes[12..];
    if body.len() != 4 * h * w {
        return Err(fail(12 + body.len().min(4 * h * w), &format!("expected {} data bytes, found {}", 4 * h * w, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Tensor::new(&[1, h, w], data)
}

pub fn encode_boxes(gt: &BoxSet) -> String {
    let mut s = String::from("class,cx,cy,w,h\n");
    for (b, l) in gt.boxes.iter().zip(&gt.labels) {
        s.push_str(&format!("{l},{},{},{},{}\n", b[0], b[1], b[2], b[3]));
    }
    s
}

pub fn parse_boxes(text: &str, origin: &Path) -> Result<BoxSet> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "class,cx,cy,w,h")) => {}
        _ => return Err(Error::parse(origin, 1, "expected header `class,cx,cy,w,h`")),
    }
    let (mut boxes, mut labels) = (Vec::new(), Vec::new());
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::parse(origin, i + 1, format!("expected 5 fields, found {}", fields.len())));
        }
        let class = fields[0].trim().parse::<usize>().map_err(|e| Error::parse(origin, i + 1, format!("class: {e}")))?;
        let mut b = [0.0; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            b[k] = f.trim().parse::<f64>().map_err(|e| Error::parse(origin, i + 1, format!("field {}: {e}", k + 2)))?;
        }
        if b.iter().any(|v| !v.is_finite()) || b[2] <= 0.0 || b[3] <= 0.0 {
            return Err(Error::parse(origin, i + 1, "box needs finite values and positive size"));
        }
        boxes.push(b);
        labels.push(class);
    }
    BoxSet::ground_truth(boxes, labels)
}

pub fn write_scene(dir: &Path, s: &SceneSample) -> Result<()> {
    let gp = grid_path(dir, s.seed);
    fs::write(&gp, encode_grid(&s.image)?).map_err(|e| Error::io(&gp, e))?;
    let bp = boxes_path(dir, s.seed);
    fs::write(&bp, encode_boxes(&s.gt)).map_err(|e| Error::io(&bp, e))
}

/// Generates (in parallel) and writes one scene per seed; the seed is the
/// scene id.
pub fn write_dataset(dir: &Path, seeds: &[u64], h: usize, w: usize, class_count: usize) -> Result<Vec<SceneSample>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scenes: Vec<SceneSample> = seeds.par_iter().map(|&s| gen_scene(s, h, w, class_count)).collect::<Result<_>>()?;
    for s in &scenes {
        write_scene(dir, s)?;
    }
    Ok(scenes)
}

pub fn read_scene(dir: &Path, id: u64) -> Result<SceneSample> {
    let gp = grid_path(dir, id);
    let image = decode_grid(&fs::read(&gp).map_err(|e| Error::io(&gp, e))?, &gp)?;
    let bp = boxes_path(dir, id);
    let gt = parse_boxes(&fs::read_to_string(&bp).map_err(|e| Error::io(&bp, e))?, &bp)?;
    Ok(SceneSample { image, gt, seed: id })
}

/// Every scene in `dir`, ordered by id.
pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name.strip_prefix("scene_").and_then(|r| r.strip_suffix(".grid")) {
            let id = id.parse::<u64>().map_err(|_| Error::parse(entry.path(), 0, "scene id is not an integer"))?;
            ids.push(id);
        }
    }
    ids.sort_unstable();
    ids.into_iter().map(|id| read_scene(dir, id)).collect()
}

/// Parses `a..b` (half-open) or a comma list of seeds.
pub fn parse_seeds(list: &str) -> Result<Vec<u64>> {
    let bad = || Error::config(format!("bad seed list `{list}`; use `a..b` or `1,2,3`"));
    if let Some((a, b)) = list.split_once("..") {
        let (a, b) = (a.trim().parse::<u64>().map_err(|_| bad())?, b.trim().parse::<u64>().map_err(|_| bad())?);
        return Ok((a..b).collect());
    }
    if list.trim().is_empty() {
        return Ok(Vec::new());
    }
    list.split(',').map(|s| s.trim().parse::<u64>().map_err(|_| bad())).collect()
}
