//! Sequential and chunked parallel selective scans agree to rounding error.
//! Timings are printed for both; the chunked form only pays off with threads.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sardiff::ssm_scan::{s6_scan_parallel, s6_scan_seq, SsmParams, DEFAULT_CHUNK};
use sardiff::Tensor;

fn main() -> sardiff::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = SsmParams::new("demo", 8, 16, &mut rng)?;
    for l in [64, 1024, 4096] {
        let u = Tensor::randn(&[l, 8], &mut rng);
        let t0 = Instant::now();
        let seq = s6_scan_seq(&u, &p)?;
        let t1 = Instant::now();
        let par = s6_scan_parallel(&u, &p, DEFAULT_CHUNK)?;
        let t2 = Instant::now();
        println!(
            "L={l:5}  seq {:>8.2?}  parallel {:>8.2?}  max diff {:.2e}",
            t1 - t0,
            t2 - t1,
            par.max_abs_diff(&seq)
        );
    }
    Ok(())
}
