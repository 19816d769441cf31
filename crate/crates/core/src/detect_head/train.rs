use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::BoxSet;
use crate::error::{Error, Result};
use crate::numerics::{Module, Tape, Tensor};

use super::model::{Detector, LossValues};

pub type LossParts = LossValues;

/// Adam with decoupled weight decay. Moment buffers follow the module's
/// visit order, so one optimiser must stay with one module.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update from `Param::grad` and clears the gradients.
    pub fn step(&mut self, module: &mut dyn Module) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        let mut i = 0;
        module.visit_mut(&mut |p| {
            if self.m.len() <= i {
                self.m.push(Tensor::zeros(p.value.shape()));
                self.v.push(Tensor::zeros(p.value.shape()));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = p.grad.data();
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
            p.zero_grad();
            i += 1;
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Proposals per training image.
    pub n_train: usize,
    /// Weight of the classification term.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 1.5e-5, weight_decay: 1e-4, n_train: 16, lambda: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: LossValues,
}

/// Single-image steps over `data`, reshuffled every epoch from `cfg.seed`.
/// Each row is also written to `log` as CSV when given.
pub fn train(
    det: &mut Detector,
    data: &[(Tensor, BoxSet)],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<TrainLogRow>> {
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if cfg.n_train == 0 || !(cfg.lr > 0.0) || cfg.weight_decay < 0.0 {
        return Err(Error::config("training needs n_train >= 1, lr > 0 and weight_decay >= 0"));
    }
    let io = |e| Error::io("training log", e);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "step,box_loss,cls_loss,total").map_err(io)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::with_capacity(cfg.steps);
    det.zero_grad();
    for step in 0..cfg.steps {
        if step % data.len() == 0 {
            order.shuffle(&mut rng);
        }
        let (image, gt) = &data[order[step % data.len()]];
        let tape = Tape::new();
        let (loss, values) = det.training_loss(&tape, image, gt, cfg.n_train, cfg.lambda, &mut rng)?;
        if !values.total.is_finite() {
            return Err(Error::config(format!("loss diverged at step {step}; lower the learning rate")));
        }
        tape.backward(loss).accumulate(det);
        opt.step(det);
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{step},{:.6},{:.6},{:.6}", values.box_loss, values.cls_loss, values.total).map_err(io)?;
        }
        log::debug!("step {step}: total {:.4}", values.total);
        rows.push(TrainLogRow { step, loss: values });
    }
    Ok(rows)
}
