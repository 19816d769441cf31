use rand::Rng;

use crate::error::{Error, Result};
use crate::impl_module;
use crate::numerics::{Conv2d, Tape, Tensor, Var};

pub const FPN_WIDTH: usize = 64;
pub const PYRAMID_STRIDES: [usize; 3] = [8, 16, 32];

/// Feature grids keyed by stride, finest first. `T` is a [`Tensor`] or a
/// tape [`Var`].
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T = Tensor> {
    pub levels: [T; 3],
}

impl<T> FeaturePyramid<T> {
    pub fn strides(&self) -> [usize; 3] {
        PYRAMID_STRIDES
    }

    pub fn get(&self, stride: usize) -> Option<&T> {
        PYRAMID_STRIDES.iter().position(|&s| s == stride).map(|i| &self.levels[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &T)> {
        PYRAMID_STRIDES.iter().copied().zip(self.levels.iter())
    }
}

impl<'t> FeaturePyramid<Var<'t>> {
    pub fn values(&self) -> FeaturePyramid<Tensor> {
        FeaturePyramid { levels: self.levels.each_ref().map(|v| (*v.value()).clone()) }
    }
}

#[derive(Debug, Clone)]
pub struct Fpn {
    pub lateral: Vec<Conv2d>,
    pub smooth: Vec<Conv2d>,
}
impl_module!(Fpn { lateral, smooth });

impl Fpn {
    /// `in_channels` are the widths of the stride 8/16/32 inputs.
    pub fn new<R: Rng + ?Sized>(name: &str, in_channels: [usize; 3], width: usize, rng: &mut R) -> Self {
        let lateral = in_channels
            .iter()
            .zip(PYRAMID_STRIDES)
            .map(|(&c, s)| Conv2d::new(&format!("{name}.lat{s}"), c, width, 1, 1, rng))
            .collect();
        let smooth = PYRAMID_STRIDES
            .iter()
            .map(|s| Conv2d::new(&format!("{name}.smooth{s}"), width, width, 3, 1, rng))
            .collect();
        Self { lateral, smooth }
    }

    pub fn width(&self) -> usize {
        self.smooth[0].kernel.value.shape()[0]
    }

    /// Lateral 1×1 convs, a nearest-2× top-down pathway, then 3×3 smoothing.
    pub fn forward<'t>(&self, tape: &'t Tape, inputs: [Var<'t>; 3]) -> Result<FeaturePyramid<Var<'t>>> {
        let lat: Vec<Var<'t>> = self
            .lateral
            .iter()
            .zip(inputs)
            .map(|(l, x)| l.forward(tape, x))
            .collect::<Result<_>>()?;
        let mut merged = [lat[0], lat[1], lat[2]];
        for i in (0..2).rev() {
            let up = merged[i + 1].upsample_nearest2()?;
            if up.shape() != merged[i].shape() {
                return Err(Error::dim(format!(
                    "pyramid level {:?} does not upsample onto {:?}",
                    merged[i + 1].shape(),
                    merged[i].shape()
                )));
            }
            merged[i] = merged[i].add(up)?;
        }
        let mut levels = merged;
        for (lvl, s) in levels.iter_mut().zip(&self.smooth) {
            *lvl = s.forward(tape, *lvl)?;
        }
        Ok(FeaturePyramid { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Module;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(fpn: &Fpn, inputs: [Tensor; 3]) -> FeaturePyramid {
        let tape = Tape::no_grad();
        fpn.forward(&tape, inputs.map(|t| tape.constant(t))).unwrap().values()
    }

    #[test]
    fn zero_laterals_give_zero_levels_with_stride_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fpn = Fpn::new("fpn", [4, 6, 8], 5, &mut rng);
        fpn.lateral.iter_mut().for_each(|l| l.visit_mut(&mut |p| p.value.fill(0.0)));
        let img = 64;
        let inputs = [
            Tensor::randn(&[4, img / 8, img / 8], &mut rng),
            Tensor::randn(&[6, img / 16, img / 16], &mut rng),
            Tensor::randn(&[8, img / 32, img / 32], &mut rng),
        ];
        let pyr = run(&fpn, inputs);
        for (s, t) in pyr.iter() {
            assert_eq!(t.shape(), &[5, img / s, img / s]);
            assert_eq!(t.max_abs(), 0.0);
        }
    }

    #[test]
    fn top_level_propagates_down() {
        // identity laterals and smoothing: each level is the sum of the
        // upsampled coarser levels, traced by hand
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut fpn = Fpn::new("fpn", [1, 1, 1], 1, &mut rng);
        for c in fpn.lateral.iter_mut().chain(fpn.smooth.iter_mut()) {
            c.bias.value.fill(0.0);
            let k = c.kernel.value.shape()[2];
            c.kernel.value.fill(0.0);
            c.kernel.value.set(&[0, 0, k / 2, k / 2], 1.0);
        }
        let top = Tensor::new(&[1, 1, 2], vec![3.0, -1.0]).unwrap();
        let pyr = run(&fpn, [Tensor::zeros(&[1, 4, 8]), Tensor::zeros(&[1, 2, 4]), top.clone()]);
        assert_eq!(*pyr.get(32).unwrap(), top);
        assert_eq!(pyr.get(16).unwrap().data(), &[3.0, 3.0, -1.0, -1.0, 3.0, 3.0, -1.0, -1.0]);
        let fine = pyr.get(8).unwrap();
        for y in 0..4 {
            for x in 0..8 {
                assert_eq!(fine.at(&[0, y, x]), if x < 4 { 3.0 } else { -1.0 });
            }
        }
        assert!(pyr.get(4).is_none());
    }
}
