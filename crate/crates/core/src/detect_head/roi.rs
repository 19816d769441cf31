use std::rc::Rc;

use crate::diffusion::Box4;
use crate::error::{Error, Result};
use crate::mambasar::FeaturePyramid;
use crate::numerics::{Tensor, Var};

/// Level of a box whose side is the canonical scale.
pub const K0: f64 = 4.0;
pub const CANONICAL_SCALE: f64 = 224.0;

/// Pyramid stride for a normalised box on an `img_h × img_w` image:
/// `k = floor(k0 + log2(√(w·h·H·W)/224))`, clamped to the available levels.
pub fn roi_level_stride(b: Box4, img_h: usize, img_w: usize, strides: &[usize]) -> usize {
    let side = (b[2] * b[3] * img_h as f64 * img_w as f64).sqrt();
    let k = (K0 + (side / CANONICAL_SCALE).log2()).floor();
    let lo = strides[0].trailing_zeros() as f64;
    let hi = strides[strides.len() - 1].trailing_zeros() as f64;
    let k = if k.is_finite() { k.clamp(lo, hi) } else { lo };
    1usize << (k as u32)
}

/// Four bilinear taps `(flat spatial offset, weight)` at a pixel position
/// `(py, px)`, where pixel centres sit at integers.
fn taps(py: f64, px: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let py = py.clamp(0.0, (h - 1) as f64);
    let px = px.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (py.floor() as usize, px.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (py - y0 as f64, px - x0 as f64);
    [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

/// Taps of the `g × g` cell centres of `b` on an `h × w` grid, row-major.
fn box_taps(b: Box4, g: usize, h: usize, w: usize) -> Vec<[(usize, f64); 4]> {
    let (x0, y0) = (b[0] - b[2] / 2.0, b[1] - b[3] / 2.0);
    let mut out = Vec::with_capacity(g * g);
    for gy in 0..g {
        for gx in 0..g {
            let x = x0 + (gx as f64 + 0.5) * b[2] / g as f64;
            let y = y0 + (gy as f64 + 0.5) * b[3] / g as f64;
            out.push(taps(y * h as f64 - 0.5, x * w as f64 - 0.5, h, w));
        }
    }
    out
}

/// Bilinear ROI pooling of one box from a single `[C, H, W]` map; returns
/// `[G, G, C]`.
pub fn roi_pool(map: &Tensor, b: Box4, g: usize) -> Result<Tensor> {
    let (c, h, w) = map.dims3()?;
    if g == 0 {
        return Err(Error::config("ROI grid must be >= 1"));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(g * g * c);
    for tp in box_taps(b, g, h, w) {
        for ch in 0..c {
            out.push(tp.iter().map(|&(o, wt)| wt * map.data()[ch * hw + o]).sum());
        }
    }
    Tensor::new(&[g, g, c], out)
}

struct Plan {
    level: usize,
    taps: Vec<[(usize, f64); 4]>,
}

/// Pools every box from its assigned level; returns `[N, G·G·C]` with each
/// row laid out `(gy, gx, c)`. Gradients flow into the pyramid only.
pub fn roi_pool_var<'t>(fp: &FeaturePyramid<Var<'t>>, boxes: &[Box4], g: usize) -> Result<Var<'t>> {
    if g == 0 {
        return Err(Error::config("ROI grid must be >= 1"));
    }
    if boxes.is_empty() {
        return Err(Error::dim("ROI pooling needs at least one box"));
    }
    let strides = fp.strides();
    let values: Vec<Rc<Tensor>> = fp.levels.iter().map(|v| v.value()).collect();
    let dims: Vec<(usize, usize, usize)> = values.iter().map(|v| v.dims3()).collect::<Result<_>>()?;
    let c = dims[0].0;
    if dims.iter().any(|d| d.0 != c) {
        return Err(Error::dim(format!("pyramid levels disagree on width: {dims:?}")));
    }
    let (img_h, img_w) = (dims[0].1 * strides[0], dims[0].2 * strides[0]);
    let plans: Vec<Plan> = boxes
        .iter()
        .map(|&b| {
            let s = roi_level_stride(b, img_h, img_w, &strides);
            let level = strides.iter().position(|&x| x == s).expect("stride comes from the list");
            let (_, h, w) = dims[level];
            Plan { level, taps: box_taps(b, g, h, w) }
        })
        .collect();
    let row = g * g * c;
    let mut out = vec![0.0; boxes.len() * row];
    for (n, plan) in plans.iter().enumerate() {
        let (_, h, w) = dims[plan.level];
        let data = values[plan.level].data();
        for (p, tp) in plan.taps.iter().enumerate() {
            for ch in 0..c {
                out[n * row + p * c + ch] = tp.iter().map(|&(o, wt)| wt * data[ch * h * w + o]).sum();
            }
        }
    }
    let value = Tensor::new(&[boxes.len(), row], out)?;
    let tape = fp.levels[0].tape();
    Ok(tape.custom(value, &fp.levels, move |grad| {
        let mut grads: Vec<Tensor> = dims.iter().map(|&(c, h, w)| Tensor::zeros(&[c, h, w])).collect();
        let gd = grad.data();
        for (n, plan) in plans.iter().enumerate() {
            let (_, h, w) = dims[plan.level];
            let dst = grads[plan.level].data_mut();
            for (p, tp) in plan.taps.iter().enumerate() {
                for ch in 0..c {
                    let gv = gd[n * row + p * c + ch];
                    for &(o, wt) in tp {
                        dst[ch * h * w + o] += wt * gv;
                    }
                }
            }
        }
        grads
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions, Module, Param, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_map_pools_constant() {
        let map = Tensor::full(&[2, 5, 7], 3.5);
        let p = roi_pool(&map, [0.4, 0.6, 0.3, 0.5], 3).unwrap();
        assert!(p.data().iter().all(|&v| (v - 3.5).abs() < 1e-15));
        assert_eq!(p.shape(), &[3, 3, 2]);
    }

    #[test]
    fn full_image_centre_sample_averages_four_cells() {
        let map = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 10.0]).unwrap();
        let p = roi_pool(&map, [0.5, 0.5, 1.0, 1.0], 1).unwrap();
        assert!((p.data()[0] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn tiny_box_collapses_to_centre_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let map = Tensor::randn(&[3, 8, 8], &mut rng);
        let b = [0.37, 0.61, 1e-7, 1e-7];
        let centre = roi_pool(&map, [b[0], b[1], 0.0, 0.0], 1).unwrap();
        let p = roi_pool(&map, b, 3).unwrap();
        for cell in 0..9 {
            for c in 0..3 {
                assert!((p.data()[cell * 3 + c] - centre.data()[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn level_assignment() {
        let s = [8, 16, 32];
        // a 224-pixel box is level 4
        assert_eq!(roi_level_stride([0.5, 0.5, 224.0 / 896.0, 224.0 / 896.0], 896, 896, &s), 16);
        assert_eq!(roi_level_stride([0.5, 0.5, 1.0, 1.0], 896, 896, &s), 32);
        assert_eq!(roi_level_stride([0.5, 0.5, 0.01, 0.01], 896, 896, &s), 8);
        assert_eq!(roi_level_stride([0.5, 0.5, 1.0, 1.0], 128, 128, &s), 8);
    }

    #[test]
    fn pyramid_pool_matches_single_map_and_has_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        struct Levels(Vec<Param>);
        impl Module for Levels {
            fn visit(&self, f: &mut dyn FnMut(&Param)) {
                self.0.iter().for_each(|p| f(p))
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
                self.0.iter_mut().for_each(|p| f(p))
            }
        }
        // 896 image: boxes land on different levels
        let mut lv = Levels([112, 56, 28].map(|s| Param::new(format!("l{s}"), Tensor::randn(&[2, s, s], &mut rng))).to_vec());
        let boxes = vec![[0.5, 0.5, 0.9, 0.8], [0.2, 0.3, 0.01, 0.02], [0.6, 0.4, 0.25, 0.25]];
        let tape = Tape::no_grad();
        let fp = FeaturePyramid { levels: [0, 1, 2].map(|i| tape.constant(lv.0[i].value.clone())) };
        let pooled = roi_pool_var(&fp, &boxes, 2).unwrap().value();
        for (n, &b) in boxes.iter().enumerate() {
            let s = roi_level_stride(b, 896, 896, &[8, 16, 32]);
            let level = [8, 16, 32].iter().position(|&x| x == s).unwrap();
            let single = roi_pool(&lv.0[level].value, b, 2).unwrap();
            assert_eq!(pooled.row(n), single.data());
        }
        let w = Tensor::randn(&[3, 8], &mut rng);
        let r = grad_check(
            &mut lv,
            move |m: &Levels, t| {
                let fp = FeaturePyramid { levels: [0, 1, 2].map(|i| t.param(&m.0[i])) };
                Ok(roi_pool_var(&fp, &boxes, 2)?.mul_const(&w)?.sum())
            },
            GradCheckOptions { max_elems: Some(40), ..Default::default() },
        )
        .unwrap();
        assert!(r.max_error() <= 1e-4);
    }
}
