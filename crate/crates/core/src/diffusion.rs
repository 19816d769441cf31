//! Noise-to-box diffusion: cosine schedule, forward corruption, deterministic
//! DDIM sampling with box renewal, and class-aware NMS.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::evalkit::iou;
use crate::numerics::Tensor;

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_S: f64 = 0.008;
pub const SIGNAL_SCALE: f64 = 2.0;
pub const MIN_STEP_ALPHA: f64 = 0.001;
pub const MIN_BOX_SIZE: f64 = 1e-3;
pub const DEFAULT_RENEWAL_THRESH: f64 = 0.5;
pub const DEFAULT_NMS_IOU: f64 = 0.5;
pub const DEFAULT_PROPOSALS: usize = 64;

/// `(cx, cy, w, h)`, normalised to the image.
pub type Box4 = [f64; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    /// `ᾱ_0 ..= ᾱ_T`.
    pub alpha_bar: Vec<f64>,
    /// `α_1 ..= α_T` (index 0 holds `ᾱ_0`).
    pub alpha: Vec<f64>,
    pub signal_scale: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::cosine(DEFAULT_T, DEFAULT_S).expect("default schedule is valid")
    }
}

impl Schedule {
    /// `ᾱ_t = f(t)/f(0)`, `f(t) = cos²(((t/T + s)/(1+s))·π/2)`, with every
    /// per-step `α_t` clipped to at least [`MIN_STEP_ALPHA`].
    pub fn cosine(t_max: usize, s: f64) -> Result<Self> {
        if t_max == 0 || !(s > 0.0) {
            return Err(Error::config(format!("schedule needs T >= 1 and s > 0, got T={t_max}, s={s}")));
        }
        let f = |t: usize| (((t as f64 / t_max as f64 + s) / (1.0 + s)) * FRAC_PI_2).cos().powi(2);
        let f0 = f(0);
        let raw: Vec<f64> = (0..=t_max).map(|t| f(t) / f0).collect();
        let mut alpha = vec![1.0; t_max + 1];
        let mut alpha_bar = vec![1.0; t_max + 1];
        for t in 1..=t_max {
            alpha[t] = (raw[t] / raw[t - 1]).max(MIN_STEP_ALPHA);
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        Ok(Self { alpha_bar, alpha, signal_scale: SIGNAL_SCALE })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::config(format!("diffusion step {t} outside 0..={}", self.steps())));
        }
        Ok(())
    }

    /// Evenly spaced descending steps `T, …` for a `k`-step sampler.
    pub fn sampling_steps(&self, k: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if k == 0 || k > t {
            return Err(Error::config(format!("sampling step count {k} outside 1..={t}")));
        }
        Ok((0..k).map(|i| t * (k - i) / k).collect())
    }

    /// `[0,1] → [−s, s]`.
    pub fn to_scaled(&self, b: f64) -> f64 {
        (2.0 * b - 1.0) * self.signal_scale
    }

    pub fn from_scaled(&self, z: f64) -> f64 {
        (z / self.signal_scale + 1.0) / 2.0
    }

    pub fn boxes_to_scaled(&self, boxes: &[Box4]) -> Result<Tensor> {
        let data = boxes.iter().flatten().map(|&b| self.to_scaled(b)).collect();
        Tensor::new(&[boxes.len(), 4], data)
    }

    pub fn scaled_to_boxes(&self, z: &Tensor) -> Result<Vec<Box4>> {
        let (n, four) = z.dims2()?;
        if four != 4 {
            return Err(Error::dim(format!("box tensor must be [N,4], got {:?}", z.shape())));
        }
        Ok((0..n)
            .map(|i| {
                let r = z.row(i);
                [0, 1, 2, 3].map(|k| self.from_scaled(r[k]))
            })
            .collect())
    }

    /// Clamps scaled coordinates into `[−s, s]`.
    pub fn clamp_scaled(&self, z: &Tensor) -> Tensor {
        let s = self.signal_scale;
        z.map(|v| v.clamp(-s, s))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoxSet {
    pub boxes: Vec<Box4>,
    /// Class ids; the background id is the class count.
    pub labels: Vec<usize>,
    pub scores: Vec<f64>,
}

impl BoxSet {
    pub fn new(boxes: Vec<Box4>, labels: Vec<usize>, scores: Vec<f64>) -> Result<Self> {
        if boxes.len() != labels.len() || boxes.len() != scores.len() {
            return Err(Error::dim(format!(
                "box set with {} boxes, {} labels, {} scores",
                boxes.len(),
                labels.len(),
                scores.len()
            )));
        }
        Ok(Self { boxes, labels, scores })
    }

    /// Ground truth: every score is 1.
    pub fn ground_truth(boxes: Vec<Box4>, labels: Vec<usize>) -> Result<Self> {
        let n = boxes.len();
        Self::new(boxes, labels, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn select(&self, keep: &[usize]) -> BoxSet {
        BoxSet {
            boxes: keep.iter().map(|&i| self.boxes[i]).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            scores: keep.iter().map(|&i| self.scores[i]).collect(),
        }
    }
}

/// Clamps corners to `[0,1]` and enforces a minimum side of `min_size`,
/// keeping the box inside the image.
pub fn clamp_box(b: Box4, min_size: f64) -> Box4 {
    let mut out = b;
    for axis in 0..2 {
        let (c, s) = (b[axis], b[axis + 2]);
        if s >= min_size && c - s / 2.0 >= 0.0 && c + s / 2.0 <= 1.0 {
            continue;
        }
        let mut lo = (c - s / 2.0).clamp(0.0, 1.0);
        let mut hi = (c + s / 2.0).clamp(0.0, 1.0);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        if hi - lo < min_size {
            let mid = ((lo + hi) / 2.0).clamp(min_size / 2.0, 1.0 - min_size / 2.0);
            lo = mid - min_size / 2.0;
            hi = mid + min_size / 2.0;
        }
        out[axis] = (lo + hi) / 2.0;
        out[axis + 2] = hi - lo;
    }
    out
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// `z_t = √ᾱ_t·z̃_0 + √(1−ᾱ_t)·ε` in scaled space.
pub fn corrupt_boxes<R: Rng + ?Sized>(z0: &BoxSet, t: usize, sched: &Schedule, rng: &mut R) -> Result<Tensor> {
    sched.check_t(t)?;
    let clean = sched.boxes_to_scaled(&z0.boxes)?;
    let (a, b) = (sched.alpha_bar[t].sqrt(), (1.0 - sched.alpha_bar[t]).sqrt());
    let mut out = clean;
    out.data_mut().iter_mut().for_each(|z| *z = a * *z + b * standard_normal(rng));
    Ok(out)
}

/// A fresh standard-normal box in scaled space.
fn random_scaled_row<R: Rng + ?Sized>(rng: &mut R) -> [f64; 4] {
    [(); 4].map(|_| standard_normal(rng))
}

/// Pads (or truncates) ground truth to exactly `n` rows. Padding rows are
/// standard-normal boxes in scaled space mapped back and clamped, labelled
/// background.
pub fn pad_gt_boxes<R: Rng + ?Sized>(
    gt: &BoxSet,
    n: usize,
    background: usize,
    sched: &Schedule,
    rng: &mut R,
) -> (BoxSet, Vec<bool>) {
    let mut out = gt.clone();
    if out.len() > n {
        log::warn!("truncating {} ground-truth boxes to {n}", out.len());
        out = out.select(&(0..n).collect::<Vec<_>>());
    }
    let mut mask = vec![true; out.len()];
    while out.len() < n {
        let z = random_scaled_row(rng);
        out.boxes.push(clamp_box(z.map(|v| sched.from_scaled(v)), MIN_BOX_SIZE));
        out.labels.push(background);
        out.scores.push(0.0);
        mask.push(false);
    }
    (out, mask)
}

/// Deterministic (`η = 0`) DDIM update from `t` to `t_next`.
pub fn ddim_step(z_t: &Tensor, z0_hat: &Tensor, t: usize, t_next: usize, sched: &Schedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if t_next >= t {
        return Err(Error::config(format!("DDIM step must descend, got {t} -> {t_next}")));
    }
    let (ab, ab_next) = (sched.alpha_bar[t], sched.alpha_bar[t_next]);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (na, nb) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
    z_t.zip_map(z0_hat, |zt, z0| {
        let eps = (zt - sa * z0) / sb;
        na * z0 + nb * eps
    })
}

/// Replaces rows scoring below `thresh` with fresh standard-normal rows,
/// drawn four at a time in row order.
pub fn box_renewal<R: Rng + ?Sized>(boxes: &Tensor, scores: &[f64], thresh: f64, rng: &mut R) -> Result<Tensor> {
    let (n, _) = boxes.dims2()?;
    if scores.len() != n {
        return Err(Error::dim(format!("{} scores for {n} boxes", scores.len())));
    }
    let mut out = boxes.clone();
    for (i, &s) in scores.iter().enumerate() {
        if s < thresh {
            let fresh = random_scaled_row(rng);
            for (k, v) in fresh.into_iter().enumerate() {
                out.set(&[i, k], v);
            }
        }
    }
    Ok(out)
}

/// Greedy class-aware NMS. Returns kept indices in visiting order
/// (descending score, ties by lower index).
pub fn nms(boxes: &[Box4], scores: &[f64], labels: &[usize], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && labels[j] == labels[i] && iou(boxes[i], boxes[j]) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// One decode of the detector: `ẑ_0` in scaled space with per-row score
/// and (foreground) label.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub z0_hat: Tensor,
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
}

/// `f_θ(z_t, t)` bound to one image.
pub trait Denoiser {
    fn denoise(&self, z_t: &Tensor, t: usize) -> Result<Decoded>;
}

/// Always predicts `gt[i % G]` with score 1; recovers GT in one step.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub gt: BoxSet,
    pub sched: Schedule,
}

impl Denoiser for OracleDenoiser {
    fn denoise(&self, z_t: &Tensor, _t: usize) -> Result<Decoded> {
        let (n, _) = z_t.dims2()?;
        let g = self.gt.len();
        if g == 0 {
            return Err(Error::config("oracle denoiser needs at least one ground-truth box"));
        }
        let rows: Vec<Box4> = (0..n).map(|i| self.gt.boxes[i % g]).collect();
        Ok(Decoded {
            z0_hat: self.sched.boxes_to_scaled(&rows)?,
            scores: vec![1.0; n],
            labels: (0..n).map(|i| self.gt.labels[i % g]).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOptions {
    pub proposals: usize,
    /// Strictly decreasing; the last step descends to 0.
    pub steps: Vec<usize>,
    pub renewal_thresh: f64,
    pub nms_iou: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            proposals: DEFAULT_PROPOSALS,
            steps: vec![DEFAULT_T],
            renewal_thresh: DEFAULT_RENEWAL_THRESH,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }
}

impl SampleOptions {
    pub fn validate(&self, sched: &Schedule) -> Result<()> {
        if self.proposals == 0 {
            return Err(Error::config("proposal count must be >= 1"));
        }
        if self.steps.is_empty() || self.steps.windows(2).any(|w| w[1] >= w[0]) || self.steps[0] > sched.steps() {
            return Err(Error::config(format!(
                "sampling steps {:?} must be strictly decreasing within 1..={}",
                self.steps,
                sched.steps()
            )));
        }
        if *self.steps.last().unwrap() == 0 {
            return Err(Error::config("the last sampling step must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.renewal_thresh) || !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::config("renewal threshold must lie in [0,1] and NMS IoU in (0,1)"));
        }
        Ok(())
    }
}

/// Reverse process from pure noise. Renewal runs between steps only, so
/// the final prediction is never replaced by noise.
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    sched: &Schedule,
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<BoxSet> {
    opts.validate(sched)?;
    let mut z = Tensor::randn(&[opts.proposals, 4], rng);
    let mut last = None;
    for (i, &t) in opts.steps.iter().enumerate() {
        let t_next = opts.steps.get(i + 1).copied().unwrap_or(0);
        let d = model.denoise(&sched.clamp_scaled(&z), t)?;
        if d.z0_hat.shape() != z.shape() || d.scores.len() != opts.proposals || d.labels.len() != opts.proposals {
            return Err(Error::dim(format!(
                "denoiser returned {:?} with {} scores for {} proposals",
                d.z0_hat.shape(),
                d.scores.len(),
                opts.proposals
            )));
        }
        z = ddim_step(&z, &d.z0_hat, t, t_next, sched)?;
        if t_next > 0 {
            z = box_renewal(&z, &d.scores, opts.renewal_thresh, rng)?;
        }
        last = Some(d);
    }
    let d = last.expect("at least one step");
    let boxes: Vec<Box4> = sched.scaled_to_boxes(&z)?.into_iter().map(|b| clamp_box(b, MIN_BOX_SIZE)).collect();
    let keep = nms(&boxes, &d.scores, &d.labels, opts.nms_iou);
    Ok(BoxSet::new(boxes, d.labels, d.scores)?.select(&keep))
}
