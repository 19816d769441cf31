//! Selective state-space scan (S6) and its four-direction grid wrapper.
//!
//! Per channel `c` and state index `s`, with `A = −exp(A_log)`:
//!
//! ```text
//! Ā_t = exp(Δ_t[c]·A[c,s])      B̄_t·u = Δ_t[c]·B_t[s]·u_t[c]
//! h_t = Ā_t·h_{t−1} + B̄_t·u     y_t[c] = Σ_s C_t[s]·h_t[c,s] + D[c]·u_t[c]
//! ```
//!
//! The recurrence is a first-order linear map, so pairs `(Ā, B̄u)` compose
//! associatively and the whole sequence can be evaluated as a prefix scan.

use std::rc::Rc;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::impl_module;
use crate::numerics::{ops, Param, Tape, Tensor, Var};

pub const DEFAULT_STATE: usize = 16;
pub const DEFAULT_CHUNK: usize = 64;

/// Parameters of one selective scan over `C` channels with state size `S`.
#[derive(Debug, Clone)]
pub struct SsmParams {
    /// `[C, S]`; the state matrix diagonal is `−exp(a_log)`.
    pub a_log: Param,
    /// `[C]` skip gain.
    pub d: Param,
    pub w_delta: Param,
    pub b_delta: Param,
    pub w_b: Param,
    pub w_c: Param,
}
impl_module!(SsmParams { a_log, d, w_delta, b_delta, w_b, w_c });

impl SsmParams {
    /// Standard selective-scan init: `A = −[1..S]`, `D = 1`, step sizes
    /// spread log-uniformly in `[1e-3, 1e-1]` through the bias.
    pub fn new<R: Rng + ?Sized>(name: &str, c: usize, s: usize, rng: &mut R) -> Result<Self> {
        if s == 0 || c == 0 {
            return Err(Error::config("SSM needs at least one channel and one state"));
        }
        let a_log = (0..c * s).map(|i| ((i % s) as f64 + 1.0).ln()).collect();
        let b_delta = (0..c)
            .map(|_| {
                let dt: f64 = (rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
                // inverse softplus
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        Ok(Self {
            a_log: Param::new(format!("{name}.a_log"), Tensor::new(&[c, s], a_log)?),
            d: Param::new(format!("{name}.d"), Tensor::ones(&[c])),
            w_delta: Param::xavier(format!("{name}.w_delta"), &[c, c], c, c, rng),
            b_delta: Param::new(format!("{name}.b_delta"), Tensor::from_vec(b_delta)),
            w_b: Param::xavier(format!("{name}.w_b"), &[c, s], c, s, rng),
            w_c: Param::xavier(format!("{name}.w_c"), &[c, s], c, s, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.a_log.value.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.a_log.value.shape()[1]
    }

    fn check_input(&self, u: &Tensor) -> Result<(usize, usize)> {
        let (l, c) = u.dims2()?;
        if c != self.channels() {
            return Err(Error::dim(format!(
                "scan input {:?} for {} channels",
                u.shape(),
                self.channels()
            )));
        }
        Ok((l, c))
    }
}

/// Input-dependent step size and projections for `u[L, C]`.
pub struct Selective {
    /// `[L, C]`, strictly positive.
    pub delta: Tensor,
    /// `[L, S]`
    pub b: Tensor,
    /// `[L, S]`
    pub c: Tensor,
}

/// `Δ = softplus(u·W_Δ + b_Δ)`, `B = u·W_B`, `C = u·W_C`.
pub fn selective_params(u: &Tensor, p: &SsmParams) -> Result<Selective> {
    p.check_input(u)?;
    let s = p.state();
    let delta = ops::softplus(&ops::linear(u, &p.w_delta.value, &p.b_delta.value)?);
    let zeros = Tensor::zeros(&[s]);
    let b = ops::linear(u, &p.w_b.value, &zeros)?;
    let c = ops::linear(u, &p.w_c.value, &zeros)?;
    Ok(Selective { delta, b, c })
}

/// Element of the scan monoid: the affine map `h ↦ a·h + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanElem {
    pub a: f64,
    pub b: f64,
}

impl ScanElem {
    pub const IDENTITY: ScanElem = ScanElem { a: 1.0, b: 0.0 };

    /// `self` applied first, then `next`: `(a, b)∘(a', b') = (a·a', a'·b + b')`.
    #[inline]
    pub fn then(self, next: ScanElem) -> ScanElem {
        ScanElem { a: self.a * next.a, b: next.a * self.b + next.b }
    }
}

/// Work-efficient (Blelloch) exclusive scan in place: afterwards `xs[i]` is
/// the composition of the original `xs[..i]`.
pub fn blelloch_exclusive_scan<T: Clone>(xs: &mut [T], identity: T, combine: impl Fn(&T, &T) -> T) {
    let n = xs.len();
    if n == 0 {
        return;
    }
    let size = n.next_power_of_two();
    let mut tree: Vec<T> = xs.to_vec();
    tree.resize(size, identity.clone());
    // up-sweep
    let mut step = 1;
    while step < size {
        for i in (2 * step - 1..size).step_by(2 * step) {
            tree[i] = combine(&tree[i - step], &tree[i]);
        }
        step *= 2;
    }
    // down-sweep
    tree[size - 1] = identity;
    let mut step = size / 2;
    while step >= 1 {
        for i in (2 * step - 1..size).step_by(2 * step) {
            let left = tree[i - step].clone();
            tree[i - step] = tree[i].clone();
            tree[i] = combine(&tree[i], &left);
        }
        step /= 2;
    }
    xs.clone_from_slice(&tree[..n]);
}

/// Borrowed, discretisation-ready scan inputs.
struct Kernel<'a> {
    l: usize,
    ch: usize,
    s: usize,
    u: &'a [f64],
    delta: &'a [f64],
    /// `A = −exp(A_log)`, `[C, S]`
    a: Vec<f64>,
    b: &'a [f64],
    c: &'a [f64],
    d: &'a [f64],
}

impl<'a> Kernel<'a> {
    fn new(
        u: &'a Tensor,
        delta: &'a Tensor,
        a_log: &'a Tensor,
        b: &'a Tensor,
        c: &'a Tensor,
        d: &'a Tensor,
    ) -> Result<Self> {
        let (l, ch) = u.dims2()?;
        let (ach, s) = a_log.dims2()?;
        let ok = delta.shape() == [l, ch]
            && ach == ch
            && b.shape() == [l, s]
            && c.shape() == [l, s]
            && d.shape() == [ch];
        if !ok {
            return Err(Error::dim(format!(
                "scan shapes u {:?} delta {:?} a_log {:?} b {:?} c {:?} d {:?}",
                u.shape(),
                delta.shape(),
                a_log.shape(),
                b.shape(),
                c.shape(),
                d.shape()
            )));
        }
        Ok(Self {
            l,
            ch,
            s,
            u: u.data(),
            delta: delta.data(),
            a: a_log.data().iter().map(|v| -v.exp()).collect(),
            b: b.data(),
            c: c.data(),
            d: d.data(),
        })
    }

    #[inline]
    fn elem(&self, t: usize, c: usize, s: usize) -> ScanElem {
        let dt = self.delta[t * self.ch + c];
        ScanElem {
            a: (dt * self.a[c * self.s + s]).exp(),
            b: dt * self.b[t * self.s + s] * self.u[t * self.ch + c],
        }
    }

    /// Runs steps `t0..t1` starting from `h` (`[C, S]`), writing `y` rows
    /// `t0..t1` into `out` (which starts at row `t0`). Optionally records states.
    fn run(&self, t0: usize, t1: usize, h: &mut [f64], out: &mut [f64], mut states: Option<&mut [f64]>) {
        let (ch, s) = (self.ch, self.s);
        for t in t0..t1 {
            let crow = &self.c[t * s..(t + 1) * s];
            for c in 0..ch {
                let hc = &mut h[c * s..(c + 1) * s];
                let mut acc = 0.0;
                for (j, hj) in hc.iter_mut().enumerate() {
                    let e = self.elem(t, c, j);
                    *hj = e.a * *hj + e.b;
                    acc += crow[j] * *hj;
                }
                out[(t - t0) * ch + c] = acc + self.d[c] * self.u[t * ch + c];
            }
            if let Some(st) = states.as_deref_mut() {
                st[t * ch * s..(t + 1) * ch * s].copy_from_slice(h);
            }
        }
    }

    fn sequential(&self, states: Option<&mut [f64]>) -> Vec<f64> {
        let mut h = vec![0.0; self.ch * self.s];
        let mut out = vec![0.0; self.l * self.ch];
        self.run(0, self.l, &mut h, &mut out, states);
        out
    }

    fn parallel(&self, chunk: usize) -> Vec<f64> {
        let (ch, s) = (self.ch, self.s);
        let bounds: Vec<(usize, usize)> = (0..self.l)
            .step_by(chunk)
            .map(|t0| (t0, (t0 + chunk).min(self.l)))
            .collect();
        // per-chunk composition of its affine maps
        let mut summaries: Vec<Vec<ScanElem>> = bounds
            .par_iter()
            .map(|&(t0, t1)| {
                let mut acc = vec![ScanElem::IDENTITY; ch * s];
                for t in t0..t1 {
                    for c in 0..ch {
                        for j in 0..s {
                            let k = c * s + j;
                            acc[k] = acc[k].then(self.elem(t, c, j));
                        }
                    }
                }
                acc
            })
            .collect();
        blelloch_exclusive_scan(&mut summaries, vec![ScanElem::IDENTITY; ch * s], |x, y| {
            x.iter().zip(y).map(|(p, q)| p.then(*q)).collect()
        });
        let mut out = vec![0.0; self.l * ch];
        out.par_chunks_mut(chunk * ch)
            .zip(summaries.par_iter())
            .zip(bounds.par_iter())
            .for_each(|((dst, carry), &(t0, t1))| {
                // zero initial state, so the carried state is the offset term
                let mut h: Vec<f64> = carry.iter().map(|e| e.b).collect();
                self.run(t0, t1, &mut h, dst, None);
            });
        out
    }
}

/// Sequential reference scan of `u[L, C]`.
pub fn s6_scan_seq(u: &Tensor, p: &SsmParams) -> Result<Tensor> {
    let (l, c) = p.check_input(u)?;
    let sel = selective_params(u, p)?;
    let k = Kernel::new(u, &sel.delta, &p.a_log.value, &sel.b, &sel.c, &p.d.value)?;
    Ok(Tensor::from_parts(vec![l, c], k.sequential(None)))
}

/// Chunked parallel scan; matches [`s6_scan_seq`] up to rounding and is
/// bit-identical when `chunk >= L`.
pub fn s6_scan_parallel(u: &Tensor, p: &SsmParams, chunk: usize) -> Result<Tensor> {
    if chunk == 0 {
        return Err(Error::config("scan chunk must be >= 1"));
    }
    let (l, c) = p.check_input(u)?;
    let sel = selective_params(u, p)?;
    let k = Kernel::new(u, &sel.delta, &p.a_log.value, &sel.b, &sel.c, &p.d.value)?;
    Ok(Tensor::from_parts(vec![l, c], k.parallel(chunk)))
}

/// Fused scan on the tape, differentiable in every input.
pub fn s6_scan_var<'t>(
    u: Var<'t>,
    delta: Var<'t>,
    a_log: Var<'t>,
    b: Var<'t>,
    c: Var<'t>,
    d: Var<'t>,
) -> Result<Var<'t>> {
    let (uv, dv, av, bv, cv, ddv) = (u.value(), delta.value(), a_log.value(), b.value(), c.value(), d.value());
    let k = Kernel::new(&uv, &dv, &av, &bv, &cv, &ddv)?;
    let (l, ch, s) = (k.l, k.ch, k.s);
    let mut states = vec![0.0; l * ch * s];
    let y = k.sequential(Some(&mut states));
    drop(k);
    let value = Tensor::from_parts(vec![l, ch], y);
    Ok(u.tape().custom(value, &[u, delta, a_log, b, c, d], move |dy| {
        let k = Kernel::new(&uv, &dv, &av, &bv, &cv, &ddv).expect("shapes checked in forward");
        let dy = dy.data();
        let mut du = vec![0.0; l * ch];
        let mut ddelta = vec![0.0; l * ch];
        let mut da = vec![0.0; ch * s];
        let mut db = vec![0.0; l * s];
        let mut dc = vec![0.0; l * s];
        let mut dd = vec![0.0; ch];
        let mut g = vec![0.0; ch * s];
        for t in (0..l).rev() {
            for cc in 0..ch {
                let i = t * ch + cc;
                let gy = dy[i];
                let dt = k.delta[i];
                let ut = k.u[i];
                du[i] += k.d[cc] * gy;
                dd[cc] += gy * ut;
                for j in 0..s {
                    let kk = cc * s + j;
                    let h_t = states[t * ch * s + kk];
                    let h_prev = if t > 0 { states[(t - 1) * ch * s + kk] } else { 0.0 };
                    dc[t * s + j] += gy * h_t;
                    g[kk] += k.c[t * s + j] * gy;
                    let a = k.a[kk];
                    let abar = (dt * a).exp();
                    let bt = k.b[t * s + j];
                    let d_abar = g[kk] * h_prev * abar;
                    ddelta[i] += d_abar * a + g[kk] * bt * ut;
                    da[kk] += d_abar * dt;
                    db[t * s + j] += g[kk] * dt * ut;
                    du[i] += g[kk] * dt * bt;
                    g[kk] *= abar;
                }
            }
        }
        let da_log: Vec<f64> = da.iter().zip(&k.a).map(|(g, a)| g * a).collect();
        vec![
            Tensor::from_parts(vec![l, ch], du),
            Tensor::from_parts(vec![l, ch], ddelta),
            Tensor::from_parts(vec![ch, s], da_log),
            Tensor::from_parts(vec![l, s], db),
            Tensor::from_parts(vec![l, s], dc),
            Tensor::from_parts(vec![ch], dd),
        ]
    }))
}

impl SsmParams {
    /// Selective projections and scan of `u[L, C]` on the tape.
    pub fn forward<'t>(&self, tape: &'t Tape, u: Var<'t>) -> Result<Var<'t>> {
        let delta = u.linear(tape.param(&self.w_delta), tape.param(&self.b_delta))?.softplus();
        let b = u.matmul(tape.param(&self.w_b))?;
        let c = u.matmul(tape.param(&self.w_c))?;
        s6_scan_var(u, delta, tape.param(&self.a_log), b, c, tape.param(&self.d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    LeftToRight,
    TopDown,
    BottomUp,
    RightToLeft,
}

impl ScanDirection {
    /// Merge-argument order.
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::LeftToRight,
        ScanDirection::TopDown,
        ScanDirection::BottomUp,
        ScanDirection::RightToLeft,
    ];

    /// `order[k]` is the row-major grid cell visited at sequence position `k`.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let n = h * w;
        let column_major = |k: usize| (k % h) * w + k / h;
        match self {
            ScanDirection::LeftToRight => (0..n).collect(),
            ScanDirection::RightToLeft => (0..n).rev().collect(),
            ScanDirection::TopDown => (0..n).map(column_major).collect(),
            ScanDirection::BottomUp => (0..n).rev().map(column_major).collect(),
        }
    }

    /// `inverse[cell]` is the sequence position of grid cell `cell`.
    pub fn inverse(self, h: usize, w: usize) -> Vec<usize> {
        let order = self.order(h, w);
        let mut inv = vec![0; order.len()];
        for (k, &cell) in order.iter().enumerate() {
            inv[cell] = k;
        }
        inv
    }
}

/// Unfolds `x[C, H, W]` into four `[H·W, C]` sequences in [`ScanDirection::ALL`] order.
pub fn scan_expand4(x: &Tensor) -> Result<[Tensor; 4]> {
    let (c, h, w) = x.dims3()?;
    let tokens = x.reshape(&[c, h * w])?.t()?;
    Ok(ScanDirection::ALL.map(|d| {
        let mut out = Vec::with_capacity(h * w * c);
        for cell in d.order(h, w) {
            out.extend_from_slice(tokens.row(cell));
        }
        Tensor::from_parts(vec![h * w, c], out)
    }))
}

/// Maps each direction's sequence back to grid cells and sums the four grids.
pub fn scan_merge4(
    y_lr: &Tensor,
    y_td: &Tensor,
    y_bu: &Tensor,
    y_rl: &Tensor,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let ys = [y_lr, y_td, y_bu, y_rl];
    let (n, c) = y_lr.dims2()?;
    if n != h * w || ys.iter().any(|y| y.shape() != [n, c]) {
        return Err(Error::dim(format!(
            "merge of {:?} {:?} {:?} {:?} into {h}x{w}",
            y_lr.shape(),
            y_td.shape(),
            y_bu.shape(),
            y_rl.shape()
        )));
    }
    let mut grid = vec![0.0; c * n];
    for (d, y) in ScanDirection::ALL.iter().zip(ys) {
        for (k, cell) in d.order(h, w).into_iter().enumerate() {
            for ch in 0..c {
                grid[ch * n + cell] += y.data()[k * c + ch];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], grid))
}

/// Per-direction parameters of the four-branch scan.
#[derive(Debug, Clone)]
pub enum SsmBranches {
    /// One parameter set per direction, in [`ScanDirection::ALL`] order.
    Independent(Vec<SsmParams>),
    /// All four directions share one set.
    Tied(SsmParams),
}

impl crate::numerics::Module for SsmBranches {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            SsmBranches::Independent(v) => v.visit(f),
            SsmBranches::Tied(p) => p.visit(f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            SsmBranches::Independent(v) => v.visit_mut(f),
            SsmBranches::Tied(p) => p.visit_mut(f),
        }
    }
}

/// Scan expansion → S6 per direction → scan merge, over grid tokens.
#[derive(Debug, Clone)]
pub struct SarScan {
    pub branches: SsmBranches,
}
impl_module!(SarScan { branches });

impl SarScan {
    pub fn new<R: Rng + ?Sized>(name: &str, c: usize, s: usize, rng: &mut R) -> Result<Self> {
        let branches = ScanDirection::ALL
            .iter()
            .map(|d| SsmParams::new(&format!("{name}.{d:?}"), c, s, rng))
            .collect::<Result<_>>()?;
        Ok(Self { branches: SsmBranches::Independent(branches) })
    }

    pub fn tied(p: SsmParams) -> Self {
        Self { branches: SsmBranches::Tied(p) }
    }

    pub fn branch(&self, d: ScanDirection) -> &SsmParams {
        match &self.branches {
            SsmBranches::Tied(p) => p,
            SsmBranches::Independent(v) => &v[ScanDirection::ALL.iter().position(|&x| x == d).unwrap()],
        }
    }

    /// `x` holds `H·W` row-major grid tokens `[H·W, C]`; output has the same layout.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        let mut acc: Option<Var<'t>> = None;
        for d in ScanDirection::ALL {
            let seq = x.gather_rows(Rc::new(d.order(h, w)))?;
            let y = self.branch(d).forward(tape, seq)?;
            let back = y.gather_rows(Rc::new(d.inverse(h, w)))?;
            acc = Some(match acc {
                None => back,
                Some(a) => a.add(back)?,
            });
        }
        Ok(acc.expect("four directions"))
    }

    /// Pure evaluation on a `[C, H, W]` grid.
    pub fn apply_grid(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w) = x.dims3()?;
        let tape = Tape::no_grad();
        let tokens = tape.constant(x.clone()).grid_to_tokens()?;
        let y = self.forward(&tape, tokens, h, w)?.tokens_to_grid(h, w)?;
        Ok((*y.value()).clone())
    }
}
