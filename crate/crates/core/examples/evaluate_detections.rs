//! IoU matching, AP and P/R/F1 on a hand-made image.

use sardiff::diffusion::BoxSet;
use sardiff::evalkit::{evaluate, iou, write_metrics_csv, ImageEval};

fn main() -> sardiff::Result<()> {
    let gts = BoxSet::ground_truth(vec![[0.25, 0.25, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]], vec![0, 1])?;
    let dets = BoxSet::new(
        vec![[0.26, 0.25, 0.2, 0.2], [0.5, 0.5, 0.1, 0.1], [0.7, 0.72, 0.2, 0.2]],
        vec![0, 0, 1],
        vec![0.9, 0.8, 0.4],
    )?;
    println!("IoU(det0, gt0) = {:.4}", iou(dets.boxes[0], gts.boxes[0]));
    let rows = evaluate(&[ImageEval { dets, gts }], &["cross", "line"], 0.5);
    write_metrics_csv(&rows, std::io::stdout().lock())
}
