//! Parameterised layers built from tape ops.

use rand::Rng;

use crate::error::Result;
use crate::impl_module;

use super::{Param, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}
impl_module!(Linear { weight, bias });

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::xavier(format!("{name}.w"), &[cin, cout], cin, cout, rng),
            bias: Param::zeros(format!("{name}.b"), &[cout]),
        }
    }

    pub fn zero(&mut self) {
        self.weight.value.fill(0.0);
        self.bias.value.fill(0.0);
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(tape.param(&self.weight), tape.param(&self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}
impl_module!(LayerNorm { gamma, beta });

impl LayerNorm {
    pub fn new(name: &str, c: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), super::Tensor::ones(&[c])),
            beta: Param::zeros(format!("{name}.beta"), &[c]),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(tape.param(&self.gamma), tape.param(&self.beta), LN_EPS)
    }

    /// Normalises each pixel of a `[C, H, W]` grid across channels.
    pub fn forward_grid<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let y = self.forward(tape, x.grid_to_tokens()?)?;
        y.tokens_to_grid(shape[1], shape[2])
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}
impl_module!(Conv2d { kernel, bias });

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let fan_out = cout * k * k;
        Self {
            kernel: Param::xavier(format!("{name}.k"), &[cout, cin, k, k], fan_in, fan_out, rng),
            bias: Param::zeros(format!("{name}.b"), &[cout]),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(tape.param(&self.kernel), tape.param(&self.bias), self.stride, self.pad)
    }
}

/// Conv → channel LayerNorm → SiLU.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}
impl_module!(ConvNormAct { conv, norm });

impl ConvNormAct {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, 3, stride, rng),
            norm: LayerNorm::new(&format!("{name}.norm"), cout),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.conv.forward(tape, x)?;
        Ok(self.norm.forward_grid(tape, y)?.silu())
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    pub kernel: Param,
}
impl_module!(DepthwiseConv1d { kernel });

impl DepthwiseConv1d {
    pub fn new<R: Rng + ?Sized>(name: &str, c: usize, kw: usize, rng: &mut R) -> Self {
        Self { kernel: Param::xavier(format!("{name}.k"), &[c, kw], kw, kw, rng) }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        x.conv1d_depthwise(tape.param(&self.kernel))
    }
}

/// Linear → SiLU → Linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}
impl_module!(Mlp { fc1, fc2 });

impl Mlp {
    pub fn new<R: Rng + ?Sized>(name: &str, c: usize, ratio: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(&format!("{name}.fc1"), c, c * ratio, rng),
            fc2: Linear::new(&format!("{name}.fc2"), c * ratio, c, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(tape, x)?.silu();
        self.fc2.forward(tape, h)
    }
}
