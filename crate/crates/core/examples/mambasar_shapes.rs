//! Runs the backbone and MambaSAR fusion on a 128×128 image and prints the
//! shapes along the way.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sardiff::mambasar::{MambaSarConfig, Neck, FPN_WIDTH};
use sardiff::{Tape, Tensor};

fn main() -> sardiff::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let neck = Neck::new(Some(MambaSarConfig::default()), FPN_WIDTH, &mut rng)?;
    let img = Tensor::randn(&[1, 128, 128], &mut rng);

    let tape = Tape::no_grad();
    let stages = neck.backbone.forward(&tape, tape.constant(img.clone()))?;
    for (name, s) in [("res2", stages.res2), ("res3", stages.res3), ("res4", stages.res4), ("res5", stages.res5)] {
        println!("{name}: {:?}", s.shape());
    }
    if let Some(mixer) = &neck.mixer {
        mixer.forward_traced(&tape, stages.res3, &mut |shape| println!("  mixer: {shape:?}"))?;
    }
    for (stride, level) in neck.apply(&img)?.iter() {
        println!("P stride {stride}: {:?}", level.shape());
    }
    Ok(())
}
