use rand::Rng;

use crate::error::{Error, Result};
use crate::impl_module;
use crate::numerics::{ConvNormAct, Tape, Tensor, Var};

pub const STAGE_CHANNELS: [usize; 4] = [32, 64, 128, 256];
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone)]
pub struct Stage {
    pub first: ConvNormAct,
    pub second: ConvNormAct,
}
impl_module!(Stage { first, second });

/// Outputs of the four stages, strides 4/8/16/32.
#[derive(Debug, Clone, Copy)]
pub struct Stages<'t> {
    pub res2: Var<'t>,
    pub res3: Var<'t>,
    pub res4: Var<'t>,
    pub res5: Var<'t>,
}

/// Small CNN stem: four stages of two conv → norm → SiLU units.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stages: Vec<Stage>,
}
impl_module!(Backbone { stages });

impl Backbone {
    pub fn new<R: Rng + ?Sized>(name: &str, rng: &mut R) -> Self {
        Self::with_channels(name, 1, STAGE_CHANNELS, rng)
    }

    pub fn with_channels<R: Rng + ?Sized>(name: &str, cin: usize, widths: [usize; 4], rng: &mut R) -> Self {
        let mut prev = cin;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                // the first stage reaches stride 4 with two stride-2 convs
                let second_stride = if i == 0 { 2 } else { 1 };
                let s = Stage {
                    first: ConvNormAct::new(&format!("{name}.s{}.a", i + 2), prev, c, 2, rng),
                    second: ConvNormAct::new(&format!("{name}.s{}.b", i + 2), c, c, second_stride, rng),
                };
                prev = c;
                s
            })
            .collect();
        Self { stages }
    }

    pub fn channels(&self) -> [usize; 4] {
        let mut out = [0; 4];
        for (o, s) in out.iter_mut().zip(&self.stages) {
            *o = s.second.conv.kernel.value.shape()[0];
        }
        out
    }

    pub fn forward<'t>(&self, tape: &'t Tape, img: Var<'t>) -> Result<Stages<'t>> {
        let (_, h, w) = img.value().dims3()?;
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("image {h}x{w} must have sides divisible by 32")));
        }
        let mut x = img;
        let mut outs = Vec::with_capacity(4);
        for s in &self.stages {
            x = s.second.forward(tape, s.first.forward(tape, x)?)?;
            outs.push(x);
        }
        Ok(Stages { res2: outs[0], res3: outs[1], res4: outs[2], res5: outs[3] })
    }

    pub fn apply(&self, img: &Tensor) -> Result<[Tensor; 4]> {
        let tape = Tape::no_grad();
        let s = self.forward(&tape, tape.constant(img.clone()))?;
        Ok([s.res2, s.res3, s.res4, s.res5].map(|v| (*v.value()).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Module;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stage_shapes_at_128() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = Backbone::new("bb", &mut rng);
        let out = b.apply(&Tensor::randn(&[1, 128, 128], &mut rng)).unwrap();
        let shapes: Vec<&[usize]> = out.iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, vec![&[32, 32, 32][..], &[64, 16, 16], &[128, 8, 8], &[256, 4, 4]]);
    }

    #[test]
    fn zero_image_zero_bias_is_zero_and_output_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Backbone::new("bb", &mut rng);
        for t in b.apply(&Tensor::zeros(&[1, 64, 64])).unwrap() {
            assert_eq!(t.max_abs(), 0.0);
        }
        let img = Tensor::randn(&[1, 64, 32], &mut rng);
        assert_eq!(b.apply(&img).unwrap(), b.apply(&img).unwrap());
    }

    #[test]
    fn indivisible_size_is_config_error() {
        let b = Backbone::new("bb", &mut ChaCha8Rng::seed_from_u64(2));
        assert!(matches!(b.apply(&Tensor::zeros(&[1, 48, 64])), Err(Error::Config(_))));
        assert!(b.param_count() > 0);
    }
}
