//! MambaSAR feature mixer plus the CNN stem and feature pyramid it plugs into.

mod backbone;
mod block;
mod fpn;
mod mixer;

pub use backbone::{Backbone, Stage, Stages, STAGE_CHANNELS, STAGE_STRIDES};
pub use block::{MambaBlock, CONV_WIDTH};
pub use fpn::{FeaturePyramid, Fpn, FPN_WIDTH, PYRAMID_STRIDES};
pub use mixer::{fuse_res4, LayerKind, MambaSar, MambaSarConfig, MixerLayer, TokenMixer, DEFAULT_LAYOUT};

use rand::Rng;

use crate::error::Result;
use crate::impl_module;
use crate::numerics::{Tape, Tensor, Var};

/// Image → feature pyramid. Without a mixer this is the plain CNN + FPN.
#[derive(Debug, Clone)]
pub struct Neck {
    pub backbone: Backbone,
    pub mixer: Option<MambaSar>,
    pub fpn: Fpn,
}
impl_module!(Neck { backbone, mixer, fpn });

impl Neck {
    pub fn new<R: Rng + ?Sized>(mixer: Option<MambaSarConfig>, fpn_width: usize, rng: &mut R) -> Result<Self> {
        let backbone = Backbone::new("backbone", rng);
        let [_, c3, c4, c5] = backbone.channels();
        let mixer = match mixer {
            Some(cfg) => Some(MambaSar::new("mambasar", MambaSarConfig { in_channels: c3, channels: c4, ..cfg }, rng)?),
            None => None,
        };
        let fpn = Fpn::new("fpn", [c3, c4, c5], fpn_width, rng);
        Ok(Self { backbone, mixer, fpn })
    }

    /// Res5 comes from the stem's own Res4; only the stride-16 pyramid input
    /// is the fused one.
    pub fn forward<'t>(&self, tape: &'t Tape, img: Var<'t>) -> Result<FeaturePyramid<Var<'t>>> {
        let s = self.backbone.forward(tape, img)?;
        let res4 = match &self.mixer {
            Some(m) => fuse_res4(tape, s.res4, s.res3, m)?,
            None => s.res4,
        };
        self.fpn.forward(tape, [s.res3, res4, s.res5])
    }

    pub fn apply(&self, img: &Tensor) -> Result<FeaturePyramid> {
        let tape = Tape::no_grad();
        Ok(self.forward(&tape, tape.constant(img.clone()))?.values())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Module;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn neck_with_and_without_mixer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::randn(&[1, 64, 64], &mut rng);
        let plain = Neck::new(None, 8, &mut rng).unwrap();
        let mixed = Neck::new(Some(MambaSarConfig::default()), 8, &mut rng).unwrap();
        assert!(mixed.param_count() > plain.param_count());
        for n in [&plain, &mixed] {
            let p = n.apply(&img).unwrap();
            for (s, t) in p.iter() {
                assert_eq!(t.shape(), &[8, 64 / s, 64 / s]);
                assert!(t.all_finite());
            }
        }
    }
}
