//! Binary graymap (P5) overlays: the image scaled to 0..=254, box outlines
//! at 255 so they never blend with image content.

use std::path::Path;

use crate::diffusion::Box4;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const BOX_LEVEL: u8 = 255;

/// Pixel rectangle `[x0, y0, x1, y1]` (inclusive) of a normalised box.
fn pixel_rect(b: Box4, h: usize, w: usize) -> [usize; 4] {
    let px = |v: f64, n: usize| ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
    let [cx, cy, bw, bh] = b;
    [px(cx - bw / 2.0, w), px(cy - bh / 2.0, h), px(cx + bw / 2.0, w), px(cy + bh / 2.0, h)]
}

/// Renders a `[1, H, W]` image with box outlines as a P5 graymap.
pub fn render(image: &Tensor, boxes: &[Box4]) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [1, h, w] if *h > 0 && *w > 0 => (*h, *w),
        s => return Err(Error::dim(format!("overlay needs a [1, H, W] image, got {s:?}"))),
    };
    let data = image.data();
    let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut px: Vec<u8> = data.iter().map(|&x| ((x - lo) / span * 254.0).round() as u8).collect();
    for &b in boxes {
        let [x0, y0, x1, y1] = pixel_rect(b, h, w);
        for x in x0..=x1 {
            px[y0 * w + x] = BOX_LEVEL;
            px[y1 * w + x] = BOX_LEVEL;
        }
        for y in y0..=y1 {
            px[y * w + x0] = BOX_LEVEL;
            px[y * w + x1] = BOX_LEVEL;
        }
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(px);
    Ok(out)
}

pub fn write(path: &Path, image: &Tensor, boxes: &[Box4]) -> Result<()> {
    std::fs::write(path, render(image, boxes)?).map_err(|e| Error::io(path, e))
}
