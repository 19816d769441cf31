//! Generates one scene and writes it, with its ground-truth boxes, as a
//! graymap: `cargo run --example synthetic_scene -- out.pgm`.

use sardiff::cli::overlay;
use sardiff::synthdata::{gen_scene, CLASS_NAMES};

fn main() -> sardiff::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "scene.pgm".into());
    let scene = gen_scene(7, 128, 128, 3)?;
    for (b, &l) in scene.gt.boxes.iter().zip(&scene.gt.labels) {
        println!("{:<6} {b:.3?}", CLASS_NAMES[l]);
    }
    let (lo, hi) = scene.image.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    println!("intensity range {lo:.3} .. {hi:.3}");
    overlay::write(path.as_ref(), &scene.image, &scene.gt.boxes)?;
    println!("wrote {path}");
    Ok(())
}
