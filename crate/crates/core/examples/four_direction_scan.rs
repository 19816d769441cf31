//! The four raster orders of a 2×2 grid, and a tied-parameter scan that
//! commutes with 180° rotation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sardiff::ssm_scan::{scan_expand4, SarScan, ScanDirection, SsmParams};
use sardiff::Tensor;

fn main() -> sardiff::Result<()> {
    let grid = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])?;
    let seqs = scan_expand4(&grid)?;
    for (d, s) in ScanDirection::ALL.iter().zip(&seqs) {
        println!("{d:?}: {:?}", s.data());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scan = SarScan::tied(SsmParams::new("tied", 2, 4, &mut rng)?);
    let x = Tensor::randn(&[2, 6, 6], &mut rng);
    let rot = |t: &Tensor| {
        let mut d = t.data().to_vec();
        // per channel, reversing the flat grid is a 180° rotation
        d.chunks_mut(36).for_each(|c| c.reverse());
        Tensor::new(t.shape(), d)
    };
    let a = scan.apply_grid(&rot(&x)?)?;
    let b = rot(&scan.apply_grid(&x)?)?;
    println!("rot180 equivariance error: {:.2e}", a.max_abs_diff(&b));
    Ok(())
}
