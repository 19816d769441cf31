use rand::Rng;

use crate::diffusion::{corrupt_boxes, pad_gt_boxes, sample, BoxSet, Decoded, Denoiser, SampleOptions, Schedule};
use crate::error::{Error, Result};
use crate::impl_module;
use crate::mambasar::{FeaturePyramid, MambaSarConfig, Neck, FPN_WIDTH};
use crate::numerics::{Tape, Tensor};

use super::{decode_scores, train_loss, Head, HeadConfig, DEFAULT_GRID, DEFAULT_HIDDEN, DEFAULT_TIME_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub classes: usize,
    /// `None` gives the plain CNN + FPN baseline.
    pub mambasar: Option<MambaSarConfig>,
    pub fpn_width: usize,
    pub roi_grid: usize,
    pub time_dim: usize,
    pub hidden: usize,
    pub diffusion_steps: usize,
    pub schedule_s: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            mambasar: Some(MambaSarConfig::default()),
            fpn_width: FPN_WIDTH,
            roi_grid: DEFAULT_GRID,
            time_dim: DEFAULT_TIME_DIM,
            hidden: DEFAULT_HIDDEN,
            diffusion_steps: crate::diffusion::DEFAULT_T,
            schedule_s: crate::diffusion::DEFAULT_S,
        }
    }
}

impl DetectorConfig {
    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            grid: self.roi_grid,
            time_dim: self.time_dim,
            hidden: self.hidden,
            classes: self.classes,
            channels: self.fpn_width,
        }
    }
}

/// Neck (stem, optional MambaSAR fusion, FPN) plus the diffusion head.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub sched: Schedule,
    pub neck: Neck,
    pub head: Head,
}
impl_module!(Detector { neck, head });

/// Per-step loss values of one training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub box_loss: f64,
    pub cls_loss: f64,
    pub total: f64,
}

impl Detector {
    pub fn new<R: Rng + ?Sized>(config: DetectorConfig, rng: &mut R) -> Result<Self> {
        if config.fpn_width == 0 {
            return Err(Error::config("fpn width must be >= 1"));
        }
        let sched = Schedule::cosine(config.diffusion_steps, config.schedule_s)?;
        let neck = Neck::new(config.mambasar.clone(), config.fpn_width, rng)?;
        let head = Head::new(config.head(), rng)?;
        Ok(Self { config, sched, neck, head })
    }

    pub fn background(&self) -> usize {
        self.config.classes
    }

    /// Records one training example on `tape` and returns the loss node and
    /// its parts. `n_train` rows are corrupted at a uniformly drawn step.
    pub fn training_loss<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        image: &Tensor,
        gt: &BoxSet,
        n_train: usize,
        lambda: f64,
        rng: &mut R,
    ) -> Result<(crate::numerics::Var<'t>, LossValues)> {
        if gt.labels.iter().any(|&l| l >= self.config.classes) {
            return Err(Error::config(format!("ground-truth label outside 0..{}", self.config.classes)));
        }
        let fp = self.neck.forward(tape, tape.constant(image.clone()))?;
        let (padded, mask) = pad_gt_boxes(gt, n_train, self.background(), &self.sched, rng);
        let t = rng.random_range(0..self.sched.steps());
        let z_t = corrupt_boxes(&padded, t, &self.sched, rng)?;
        let out = self.head.forward(tape, &fp, &z_t, t, &self.sched)?;
        let z0 = self.sched.boxes_to_scaled(&padded.boxes)?;
        let (total, b, c) = train_loss(out.z0_hat, out.logits, &z0, &padded.labels, &mask, lambda)?;
        let v = |x: crate::numerics::Var| x.value().data()[0];
        let values = LossValues { box_loss: v(b), cls_loss: v(c), total: v(total) };
        Ok((total, values))
    }

    pub fn pyramid(&self, image: &Tensor) -> Result<FeaturePyramid> {
        self.neck.apply(image)
    }

    /// Caches the image features for repeated denoising.
    pub fn bind(&self, image: &Tensor) -> Result<BoundDetector<'_>> {
        Ok(BoundDetector { det: self, pyramid: self.pyramid(image)? })
    }

    pub fn detect<R: Rng + ?Sized>(&self, image: &Tensor, opts: &SampleOptions, rng: &mut R) -> Result<BoxSet> {
        sample(&self.bind(image)?, &self.sched, opts, rng)
    }
}

pub struct BoundDetector<'a> {
    det: &'a Detector,
    pyramid: FeaturePyramid,
}

impl Denoiser for BoundDetector<'_> {
    fn denoise(&self, z_t: &Tensor, t: usize) -> Result<Decoded> {
        let tape = Tape::no_grad();
        let fp = FeaturePyramid { levels: self.pyramid.levels.each_ref().map(|l| tape.constant(l.clone())) };
        let out = self.det.head.forward(&tape, &fp, z_t, t, &self.det.sched)?;
        let (scores, labels) = decode_scores(&out.logits.value())?;
        Ok(Decoded { z0_hat: (*out.z0_hat.value()).clone(), scores, labels })
    }
}
