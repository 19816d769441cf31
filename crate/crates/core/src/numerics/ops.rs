//! Forward kernels and their hand-written adjoints.
//!
//! Every function here is pure. The tape in [`super::tape`] wires the
//! forward kernels to the matching `*_backward` functions.

use crate::error::{Error, Result};

use super::Tensor;

/// `c = a · b (+ c if accumulate)` for row-major slices with optional transposes.
///
/// `a` is `[m, k]` (or `[k, m]` when `ta`), `b` is `[k, n]` (or `[n, k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `y[..., j] = Σ_i x[..., i]·w[i, j] + b[j]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (cin, cout) = w.dims2()?;
    if x.last_dim() != cin || b.shape() != [cout] {
        return Err(Error::dim(format!(
            "linear input {:?} with weight {:?} and bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows * cout);
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    gemm(rows, cin, cout, x.data(), false, w.data(), false, &mut out, true);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Ok(Tensor::from_parts(shape, out))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

pub(crate) fn silu_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

pub fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

/// Cached per-row statistics for the layer-norm adjoint.
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_fwd(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let c = x.last_dim();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(format!(
            "layer_norm over {:?} with gamma {:?}, beta {:?}",
            x.shape(),
            gamma.shape(),
            beta.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::config("layer_norm eps must be positive"));
    }
    let rows = x.rows();
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    let (g, b) = (gamma.data(), beta.data());
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[r * c + j] = h;
            out[r * c + j] = h * g[j] + b[j];
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), NormCache { xhat, rstd }))
}

/// Per last-axis row: `(x − mean)/sqrt(var + eps)·gamma + beta`, population variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_fwd(x, gamma, beta, eps).map(|(y, _)| y)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward(
    dy: &Tensor,
    gamma: &Tensor,
    cache: &NormCache,
) -> (Tensor, Tensor, Tensor) {
    let c = dy.last_dim();
    let rows = dy.rows();
    let g = gamma.data();
    let mut dx = vec![0.0; dy.len()];
    let mut dg = vec![0.0; c];
    let mut db = vec![0.0; c];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = &cache.xhat[r * c..(r + 1) * c];
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for j in 0..c {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            let dxh = dyr[j] * g[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
        }
        let rs = cache.rstd[r];
        let inv_c = 1.0 / c as f64;
        for j in 0..c {
            let dxh = dyr[j] * g[j];
            dx[r * c + j] = rs * (dxh - inv_c * sum_dxh - xh[j] * inv_c * sum_dxh_xh);
        }
    }
    (
        Tensor::from_parts(dy.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dg),
        Tensor::from_parts(vec![c], db),
    )
}

/// Numerically stable softmax along the last axis.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let c = y.last_dim();
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y
        .data()
        .chunks(c)
        .zip(dy.data().chunks(c))
        .zip(dx.chunks_mut(c))
    {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            dxr[j] = yr[j] * (dyr[j] - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

/// Geometry of a 2D convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (cin, h, w) = x.dims3()?;
        let [cout, kcin, kh, kw] = k.shape() else {
            return Err(Error::dim(format!("conv kernel must be rank 4, got {:?}", k.shape())));
        };
        let (cout, kcin, kh, kw) = (*cout, *kcin, *kh, *kw);
        if kcin != cin || b.shape() != [cout] {
            return Err(Error::dim(format!(
                "conv2d input {:?}, kernel {:?}, bias {:?}",
                x.shape(),
                k.shape(),
                b.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv stride must be >= 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { cin, h, w, cout, kh, kw, stride, pad, ho, wo })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.ho * self.wo;
        let mut cols = vec![0.0; self.patch() * n];
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let src = &x[(c * self.h + ii as usize) * self.w..];
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dst[oi * self.wo + oj] = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let n = self.ho * self.wo;
        let mut x = vec![0.0; self.cin * self.h * self.w];
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + ii as usize) * self.w;
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                x[base + jj as usize] += src[oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Zero-padded cross-correlation of `x[C_in, H, W]` with `k[C_out, C_in, kh, kw]`.
///
/// Output size is `floor((H + 2·pad − kh)/stride) + 1` per axis.
pub fn conv2d(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x, k, b, stride, pad)?;
    Ok(conv2d_with(&g, x, k, b))
}

pub(crate) fn conv2d_with(g: &ConvGeom, x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
    let n = g.ho * g.wo;
    let mut out = vec![0.0; g.cout * n];
    for (o, row) in out.chunks_mut(n).enumerate() {
        row.fill(b.data()[o]);
    }
    if g.is_pointwise() {
        gemm(g.cout, g.cin, n, k.data(), false, x.data(), false, &mut out, true);
    } else {
        let cols = g.im2col(x.data());
        gemm(g.cout, g.patch(), n, k.data(), false, &cols, false, &mut out, true);
    }
    Tensor::from_parts(vec![g.cout, g.ho, g.wo], out)
}

/// Returns `(dx, dk, db)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &Tensor,
    k: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let n = g.ho * g.wo;
    let p = g.patch();
    let db: Vec<f64> = dy.data().chunks(n).map(|r| r.iter().sum()).collect();
    let mut dk = vec![0.0; g.cout * p];
    let dx = if g.is_pointwise() {
        gemm(g.cout, n, p, dy.data(), false, x.data(), true, &mut dk, false);
        let mut dx = vec![0.0; p * n];
        gemm(p, g.cout, n, k.data(), true, dy.data(), false, &mut dx, false);
        dx
    } else {
        let cols = g.im2col(x.data());
        gemm(g.cout, n, p, dy.data(), false, &cols, true, &mut dk, false);
        let mut dcols = vec![0.0; p * n];
        gemm(p, g.cout, n, k.data(), true, dy.data(), false, &mut dcols, false);
        g.col2im(&dcols)
    };
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(k.shape().to_vec(), dk),
        Tensor::from_parts(vec![g.cout], db),
    )
}

fn depthwise_dims(x: &Tensor, k: &Tensor) -> Result<(usize, usize, usize)> {
    let (l, c) = x.dims2()?;
    let (kc, kw) = k.dims2()?;
    if kc != c {
        return Err(Error::dim(format!(
            "depthwise conv input {:?} with kernel {:?}",
            x.shape(),
            k.shape()
        )));
    }
    if kw % 2 == 0 {
        return Err(Error::config(format!("depthwise kernel width {kw} must be odd")));
    }
    Ok((l, c, kw))
}

/// Length-preserving per-channel cross-correlation along the sequence axis of `x[L, C]`.
pub fn conv1d_depthwise(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (l, c, kw) = depthwise_dims(x, k)?;
    let pad = (kw - 1) / 2;
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; l * c];
    for t in 0..l {
        for j in 0..kw {
            let s = t as isize + j as isize - pad as isize;
            if s < 0 || s >= l as isize {
                continue;
            }
            let src = &xd[s as usize * c..(s as usize + 1) * c];
            let dst = &mut out[t * c..(t + 1) * c];
            for ch in 0..c {
                dst[ch] += kd[ch * kw + j] * src[ch];
            }
        }
    }
    Ok(Tensor::from_parts(vec![l, c], out))
}

pub(crate) fn conv1d_depthwise_backward(x: &Tensor, k: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (l, c) = (x.shape()[0], x.shape()[1]);
    let kw = k.shape()[1];
    let pad = (kw - 1) / 2;
    let (xd, kd, dyd) = (x.data(), k.data(), dy.data());
    let mut dx = vec![0.0; l * c];
    let mut dk = vec![0.0; c * kw];
    for t in 0..l {
        for j in 0..kw {
            let s = t as isize + j as isize - pad as isize;
            if s < 0 || s >= l as isize {
                continue;
            }
            let s = s as usize;
            for ch in 0..c {
                let g = dyd[t * c + ch];
                dk[ch * kw + j] += g * xd[s * c + ch];
                dx[s * c + ch] += g * kd[ch * kw + j];
            }
        }
    }
    (
        Tensor::from_parts(vec![l, c], dx),
        Tensor::from_parts(vec![c, kw], dk),
    )
}

/// Nearest-neighbour 2× upsampling of `x[C, H, W]`.
pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                out[(ch * h2 + i) * w2 + j] = x.data()[(ch * h + i / 2) * w + j / 2];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h2, w2], out))
}

pub(crate) fn upsample_nearest2_backward(dy: &Tensor, c: usize, h: usize, w: usize) -> Tensor {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                dx[(ch * h + i / 2) * w + j / 2] += dy.data()[(ch * h2 + i) * w2 + j];
            }
        }
    }
    Tensor::from_parts(vec![c, h, w], dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_scalar() {
        let x = t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 4.0, -1.0]);
        let y = linear(&x, &Tensor::identity(3), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);

        let y = linear(&t(&[1], &[3.0]), &t(&[1, 1], &[2.0]), &t(&[1], &[1.0])).unwrap();
        assert_eq!(y.data(), &[7.0]);

        let b = t(&[2], &[0.25, -4.0]);
        let y = linear(&Tensor::zeros(&[3, 2]), &Tensor::ones(&[2, 2]), &b).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), b.data());
        }
    }

    #[test]
    fn linear_shape_error_names_shapes() {
        let err = linear(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[2]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn silu_values() {
        let y = silu(&t(&[3], &[0.0, 20.0, -20.0]));
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 20.0).abs() < 1e-7);
        assert!(y.data()[2].abs() < 1e-7);
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::ones(&[2]);
        let zeros = Tensor::zeros(&[2]);
        let y = layer_norm(&t(&[1, 2], &[5.0, 5.0]), &ones, &zeros, 1e-5).unwrap();
        assert!(y.max_abs() < 1e-12);
        let y = layer_norm(&t(&[1, 2], &[1.0, -1.0]), &ones, &zeros, 1e-5).unwrap();
        // var = 1 so the row is scaled by 1/sqrt(1 + 1e-5)
        assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);
        let beta = t(&[2], &[0.3, -0.7]);
        let y = layer_norm(&t(&[1, 2], &[2.0, 9.0]), &zeros, &beta, 1e-5).unwrap();
        assert_eq!(y.data(), beta.data());
    }

    #[test]
    fn layer_norm_row_statistics() {
        let mut rng = rand::rng();
        let x = Tensor::randn(&[6, 16], &mut rng).scale(10.0);
        let y = layer_norm(&x, &Tensor::ones(&[16]), &Tensor::zeros(&[16]), 1e-5).unwrap();
        for r in 0..6 {
            let row = y.row(r);
            let m = row.iter().sum::<f64>() / 16.0;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_cases() {
        let y = softmax_rows(&Tensor::full(&[1, 4], 0.3));
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let y = softmax_rows(&t(&[2], &[0.0, 2f64.ln()]));
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = rand::rng();
        let x = Tensor::randn(&[5, 7], &mut rng).scale(20.0);
        let y = softmax_rows(&x);
        for r in 0..5 {
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = softmax_rows(&x.map(|v| v + 123.0));
        assert!(y.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn conv2d_identity_kernels() {
        let mut rng = rand::rng();
        let x = Tensor::randn(&[3, 5, 4], &mut rng);
        let mut k1 = Tensor::zeros(&[3, 3, 1, 1]);
        let mut k3 = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            k1.set(&[c, c, 0, 0], 1.0);
            k3.set(&[c, c, 1, 1], 1.0);
        }
        let b = Tensor::zeros(&[3]);
        assert_eq!(conv2d(&x, &k1, &b, 1, 0).unwrap(), x);
        assert_eq!(conv2d(&x, &k3, &b, 1, 1).unwrap(), x);
    }

    #[test]
    fn conv2d_hand_sum_and_errors() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = Tensor::ones(&[1, 1, 2, 2]);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);

        let big = Tensor::ones(&[1, 1, 5, 5]);
        assert!(matches!(
            conv2d(&x, &big, &Tensor::zeros(&[1]), 1, 0),
            Err(Error::Dim(_))
        ));
        assert!(matches!(
            conv2d(&x, &k, &Tensor::zeros(&[2]), 1, 0),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn conv2d_matches_naive_loop() {
        let mut rng = rand::rng();
        let x = Tensor::randn(&[2, 7, 6], &mut rng);
        let k = Tensor::randn(&[3, 2, 3, 3], &mut rng);
        let b = Tensor::randn(&[3], &mut rng);
        let y = conv2d(&x, &k, &b, 2, 1).unwrap();
        let (ho, wo) = (y.shape()[1], y.shape()[2]);
        assert_eq!((ho, wo), (4, 3));
        for o in 0..3 {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = b.data()[o];
                    for c in 0..2 {
                        for a in 0..3 {
                            for bb in 0..3 {
                                let (ii, jj) = ((2 * i + a) as isize - 1, (2 * j + bb) as isize - 1);
                                if ii >= 0 && ii < 7 && jj >= 0 && jj < 6 {
                                    s += k.at(&[o, c, a, bb]) * x.at(&[c, ii as usize, jj as usize]);
                                }
                            }
                        }
                    }
                    assert!((y.at(&[o, i, j]) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn depthwise_cases() {
        let mut rng = rand::rng();
        let x = Tensor::randn(&[6, 2], &mut rng);
        let delta = t(&[2, 3], &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(conv1d_depthwise(&x, &delta).unwrap(), x);

        let c = t(&[5, 1], &[2.0; 5]);
        let k = t(&[1, 3], &[0.5, 1.0, 1.5]);
        let y = conv1d_depthwise(&c, &k).unwrap();
        for i in 1..4 {
            assert!((y.data()[i] - 3.0 * 2.0).abs() < 1e-15);
        }

        let y = conv1d_depthwise(&x, &Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(y.max_abs(), 0.0);

        assert!(matches!(
            conv1d_depthwise(&x, &Tensor::zeros(&[2, 2])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn upsample_repeats_cells() {
        let x = t(&[1, 1, 2], &[1.0, 2.0]);
        let y = upsample_nearest2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4]);
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
