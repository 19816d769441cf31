//! Agent attention against full softmax attention: cost and output gap.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sardiff::attention::{agent_attention, agent_pool, softmax_attention};
use sardiff::Tensor;

fn main() -> sardiff::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [256, 1024, 4096] {
        let q = Tensor::randn(&[n, 32], &mut rng);
        let k = Tensor::randn(&[n, 32], &mut rng);
        let v = Tensor::randn(&[n, 32], &mut rng);
        let t0 = Instant::now();
        let agents = agent_pool(&q, 16)?;
        let fast = agent_attention(&q, &k, &v, &agents, 4)?;
        let t1 = Instant::now();
        let full = softmax_attention(&q, &k, &v, 4)?;
        let t2 = Instant::now();
        println!(
            "N={n:5}  agent {:>9.2?}  softmax {:>9.2?}  mean |diff| {:.3}",
            t1 - t0,
            t2 - t1,
            fast.zip_map(&full, |a, b| (a - b).abs())?.mean()
        );
    }
    Ok(())
}
