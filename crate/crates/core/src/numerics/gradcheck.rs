//! Central finite-difference verification of tape gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Module, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen elements per parameter.
    pub max_elems: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-4, max_elems: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ElementCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

/// Worst element per parameter.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub worst: Vec<ElementCheck>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.worst.iter().fold(0.0, |m, w| m.max(w.error))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for w in &self.worst {
            writeln!(
                f,
                "{:<40} [{:>6}] analytic {:>13.6e} numeric {:>13.6e} err {:.2e}",
                w.param, w.index, w.analytic, w.numeric, w.error
            )?;
        }
        write!(f, "{} elements checked, max error {:.2e}", self.checked, self.max_error())
    }
}

/// `|a − n| / max(1, |a|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval<M, F>(module: &M, loss: &F) -> Result<f64>
where
    M: Module + ?Sized,
    F: for<'t> Fn(&M, &'t Tape) -> Result<Var<'t>>,
{
    let tape = Tape::no_grad();
    let l = loss(module, &tape)?;
    Ok(l.value().data()[0])
}

fn perturb<M: Module + ?Sized>(module: &mut M, which: usize, index: usize, delta: f64) {
    let mut k = 0;
    module.visit_mut(&mut |p| {
        if k == which {
            p.value.data_mut()[index] += delta;
        }
        k += 1;
    });
}

/// Compares tape gradients of `loss` against central differences for every
/// parameter of `module`. Fails on the first parameter whose worst element
/// exceeds `opts.tol`.
pub fn grad_check<M, F>(module: &mut M, loss: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    M: Module + ?Sized,
    F: for<'t> Fn(&M, &'t Tape) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let l = loss(module, &tape)?;
    let grads = tape.backward(l);
    let mut analytic = Vec::new();
    module.visit(&mut |p| {
        let g = grads
            .of_param(p)
            .cloned()
            .unwrap_or_else(|| super::Tensor::zeros(p.value.shape()));
        analytic.push((p.name.clone(), g));
    });
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    for (which, (name, g)) in analytic.iter().enumerate() {
        let n = g.len();
        let indices: Vec<usize> = match opts.max_elems {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut worst: Option<ElementCheck> = None;
        for i in indices {
            perturb(module, which, i, opts.eps);
            let up = eval(module, &loss);
            perturb(module, which, i, -2.0 * opts.eps);
            let down = eval(module, &loss);
            perturb(module, which, i, opts.eps);
            let numeric = (up? - down?) / (2.0 * opts.eps);
            let a = g.data()[i];
            let error = relative_error(a, numeric);
            report.checked += 1;
            if worst.as_ref().is_none_or(|w| error > w.error) {
                worst = Some(ElementCheck { param: name.clone(), index: i, analytic: a, numeric, error });
            }
        }
        if let Some(w) = worst {
            if w.error > opts.tol {
                return Err(Error::GradCheck {
                    param: w.param,
                    index: w.index,
                    analytic: w.analytic,
                    numeric: w.numeric,
                });
            }
            report.worst.push(w);
        }
    }
    Ok(report)
}
