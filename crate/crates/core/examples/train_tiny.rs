//! A few hundred steps on a handful of scenes with a slim detector, then
//! detection on a training scene. Shows the loss falling; not a benchmark.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sardiff::detect_head::{train, Detector, DetectorConfig, TrainConfig};
use sardiff::diffusion::SampleOptions;
use sardiff::synthdata::gen_scene;

fn main() -> sardiff::Result<()> {
    let data: Vec<_> = (0..4).map(|s| gen_scene(s, 64, 64, 3).map(|x| (x.image, x.gt))).collect::<Result<_, _>>()?;
    let cfg = DetectorConfig { mambasar: None, fpn_width: 16, hidden: 64, ..Default::default() };
    let mut det = Detector::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let tc = TrainConfig { steps: 300, lr: 2e-3, ..Default::default() };
    let rows = train(&mut det, &data, &tc, None)?;
    for chunk in rows.chunks(50) {
        let mean = chunk.iter().map(|r| r.loss.total).sum::<f64>() / chunk.len() as f64;
        println!("steps {:3}..{:3}  mean loss {mean:.3}", chunk[0].step, chunk[chunk.len() - 1].step);
    }
    let dets = det.detect(&data[0].0, &SampleOptions::default(), &mut ChaCha8Rng::seed_from_u64(1))?;
    println!("scene 0: {} targets, top detections:", data[0].1.len());
    for i in 0..dets.len().min(5) {
        println!("  class {} score {:.3} box {:.3?}", dets.labels[i], dets.scores[i], dets.boxes[i]);
    }
    Ok(())
}
