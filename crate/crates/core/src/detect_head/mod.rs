//! `f_θ(z_t, t, x)`: decodes noisy boxes against the feature pyramid into a
//! clean-box estimate and class logits, plus the training loss, optimiser
//! and training loop.

mod model;
mod roi;
mod train;

pub use model::{BoundDetector, Detector, DetectorConfig};
pub use roi::{roi_level_stride, roi_pool, roi_pool_var, CANONICAL_SCALE, K0};
pub use train::{train, AdamW, LossParts, TrainConfig, TrainLogRow};

use rand::Rng;

use crate::diffusion::{clamp_box, Box4, Schedule, MIN_BOX_SIZE};
use crate::error::{Error, Result};
use crate::impl_module;
use crate::mambasar::FeaturePyramid;
use crate::numerics::{ops, Linear, Param, Tape, Tensor, Var};

pub const DEFAULT_GRID: usize = 3;
pub const DEFAULT_TIME_DIM: usize = 32;
pub const DEFAULT_HIDDEN: usize = 256;

/// Sinusoidal embedding, interleaved `(sin, cos)` pairs with frequencies
/// `10000^{−2i/dim}`.
pub fn time_embed(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!("time embedding width {dim} must be even and positive")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let arg = t as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Tensor::new(&[dim], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub grid: usize,
    pub time_dim: usize,
    pub hidden: usize,
    /// Foreground classes `K`; logits have `K + 1` columns.
    pub classes: usize,
    /// Pyramid width.
    pub channels: usize,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.classes == 0 || self.hidden == 0 || self.channels == 0 {
            return Err(Error::config("head grid, classes, hidden width and channels must be >= 1"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::config(format!("time embedding width {} must be even", self.time_dim)));
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        self.grid * self.grid * self.channels + self.time_dim + 4
    }
}

/// Shared MLP over `flatten(roi) ⊕ time ⊕ box`, with a box branch (plus a
/// linear skip from the clamped noisy box, initialised to identity) and a
/// `K + 1`-way class branch.
#[derive(Debug, Clone)]
pub struct Head {
    pub config: HeadConfig,
    pub fc1: Linear,
    pub fc2: Linear,
    pub box_out: Linear,
    pub box_skip: Param,
    pub cls_out: Linear,
}
impl_module!(Head { fc1, fc2, box_out, box_skip, cls_out });

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput<'t> {
    /// `[N, 4]`, scaled space.
    pub z0_hat: Var<'t>,
    /// `[N, K + 1]`, background last.
    pub logits: Var<'t>,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(config: HeadConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            fc1: Linear::new("head.fc1", config.input_width(), config.hidden, rng),
            fc2: Linear::new("head.fc2", config.hidden, config.hidden, rng),
            box_out: Linear::new("head.box", config.hidden, 4, rng),
            box_skip: Param::new("head.box_skip", Tensor::identity(4)),
            cls_out: Linear::new("head.cls", config.hidden, config.classes + 1, rng),
        })
    }

    /// `z_t` is `[N, 4]` in scaled space; it is clamped, mapped to image
    /// boxes and pooled from `fp`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        fp: &FeaturePyramid<Var<'t>>,
        z_t: &Tensor,
        t: usize,
        sched: &Schedule,
    ) -> Result<HeadOutput<'t>> {
        let cfg = &self.config;
        let zc = sched.clamp_scaled(z_t);
        let boxes: Vec<Box4> = sched.scaled_to_boxes(&zc)?.into_iter().map(|b| clamp_box(b, MIN_BOX_SIZE)).collect();
        let n = boxes.len();
        let roi = roi_pool_var(fp, &boxes, cfg.grid)?;
        let te = time_embed(t, cfg.time_dim)?;
        let mut time_rows = Vec::with_capacity(n * cfg.time_dim);
        (0..n).for_each(|_| time_rows.extend_from_slice(te.data()));
        let time = tape.constant(Tensor::new(&[n, cfg.time_dim], time_rows)?);
        let geo = tape.constant(Tensor::new(&[n, 4], boxes.iter().flatten().copied().collect())?);
        let x = Var::concat_cols(&[roi, time, geo])?;
        let h = self.fc1.forward(tape, x)?.silu();
        let h = self.fc2.forward(tape, h)?.silu();
        let skip = tape.constant(zc).matmul(tape.param(&self.box_skip))?;
        let z0_hat = self.box_out.forward(tape, h)?.add(skip)?;
        let logits = self.cls_out.forward(tape, h)?;
        Ok(HeadOutput { z0_hat, logits })
    }
}

/// Best foreground class per row and its softmax probability.
pub fn decode_scores(logits: &Tensor) -> Result<(Vec<f64>, Vec<usize>)> {
    let (n, k1) = logits.dims2()?;
    if k1 < 2 {
        return Err(Error::dim(format!("logits {:?} need a foreground and a background column", logits.shape())));
    }
    let p = ops::softmax_rows(logits);
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let row = &p.row(r)[..k1 - 1];
        let (best, &score) = row
            .iter()
            .enumerate()
            .fold((0, &row[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        scores.push(score);
        labels.push(best);
    }
    Ok((scores, labels))
}

/// `½·mean_{GT rows}‖ẑ_0 − z_0‖² + λ·mean_{rows} CE(logits, label)`.
/// Returns `(total, box term, class term)`.
pub fn train_loss<'t>(
    z0_hat: Var<'t>,
    logits: Var<'t>,
    z0_true: &Tensor,
    labels: &[usize],
    origin_mask: &[bool],
    lambda: f64,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let tape = z0_hat.tape();
    let (n, _) = z0_true.dims2()?;
    if z0_hat.shape() != z0_true.shape() || labels.len() != n || origin_mask.len() != n {
        return Err(Error::dim(format!(
            "loss inputs disagree: prediction {:?}, target {:?}, {} labels, {} mask rows",
            z0_hat.shape(),
            z0_true.shape(),
            labels.len(),
            origin_mask.len()
        )));
    }
    let gt_rows = origin_mask.iter().filter(|&&m| m).count();
    let weight = if gt_rows == 0 { 0.0 } else { 0.5 / gt_rows as f64 };
    let w: Vec<f64> = origin_mask.iter().flat_map(|&m| [if m { weight } else { 0.0 }; 4]).collect();
    let diff = z0_hat.sub(tape.constant(z0_true.clone()))?;
    let box_term = diff.mul(diff)?.mul_const(&Tensor::new(&[n, 4], w)?)?.sum();
    let cls_term = logits.cross_entropy_rows(labels)?.mean();
    let total = box_term.add(cls_term.scale(lambda))?;
    Ok((total, box_term, cls_term))
}
