//! The cosine schedule, forward corruption of a box, and one exact DDIM
//! step back when the clean box is known.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sardiff::diffusion::{corrupt_boxes, ddim_step, BoxSet, Schedule};

fn main() -> sardiff::Result<()> {
    let sched = Schedule::default();
    for t in [0, 1, 250, 500, 750, 999, 1000] {
        println!("t={t:4}  alpha_bar {:.6e}", sched.alpha_bar[t]);
    }

    let gt = BoxSet::ground_truth(vec![[0.4, 0.5, 0.2, 0.1]], vec![0])?;
    let z0 = sched.boxes_to_scaled(&gt.boxes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let zt = corrupt_boxes(&gt, 500, &sched, &mut rng)?;
    println!("z0        {:?}", z0.data());
    println!("z500      {:?}", zt.data());
    // with the true z0 as the prediction, a DDIM jump to 0 lands exactly on it
    let back = ddim_step(&zt, &z0, 500, 0, &sched)?;
    println!("ddim→0    {:?}", back.data());
    println!("as box    {:?}", sched.scaled_to_boxes(&back)?[0]);
    Ok(())
}
