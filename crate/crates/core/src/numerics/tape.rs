//! Reverse-mode tape over [`Tensor`] values.
//!
//! Forward ops push a node holding the result and a closure mapping the
//! output gradient to one gradient per parent. [`Tape::backward`] walks the
//! nodes in reverse creation order, which is a valid topological order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::ops::{self, ConvGeom};
use super::param::{Param, ParamId};
use super::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::default(), params: RefCell::default(), record: true }
    }

    /// A tape that evaluates values only; `backward` on it yields no gradients.
    pub fn no_grad() -> Self {
        Self { record: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var<'_> {
        debug_assert!(value.all_finite(), "non-finite value produced on tape");
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let backward = if self.record { backward } else { None };
        nodes.push(Node { value: Rc::new(value), parents, backward });
        Var { tape: self, id }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None)
    }

    /// Registers a parameter as a leaf. Registering the same parameter twice
    /// returns the same variable, so tied weights accumulate one gradient.
    /// The value is copied on first registration; later edits to `p` are not
    /// seen by this tape.
    pub fn param(&self, p: &Param) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(&p.id()) {
            return Var { tape: self, id };
        }
        let v = self.push(p.value.clone(), Vec::new(), None);
        self.params.borrow_mut().insert(p.id(), v.id);
        v
    }

    /// Records a fused op. `backward` receives the output gradient and must
    /// return one gradient per parent, each shaped like that parent.
    pub fn custom<'t>(
        &'t self,
        value: Tensor,
        parents: &[Var<'t>],
        backward: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Var<'t> {
        self.push(value, parents.iter().map(|p| p.id).collect(), Some(Box::new(backward)))
    }

    pub fn value(&self, v: Var<'_>) -> Rc<Tensor> {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Gradients of a scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            let Some(bw) = nodes[id].backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_grads = bw(&g);
            debug_assert_eq!(parent_grads.len(), nodes[id].parents.len());
            for (&pid, pg) in nodes[id].parents.iter().zip(parent_grads) {
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape(), "grad shape of node {pid}");
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Grads { grads, params: self.params.borrow().clone() }
    }
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, usize>,
}

impl Grads {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads[v.id].as_ref()
    }

    pub fn of_param(&self, p: &Param) -> Option<&Tensor> {
        self.params.get(&p.id()).and_then(|&id| self.grads[id].as_ref())
    }

    /// Adds every parameter gradient into `Param::grad`.
    pub fn accumulate(&self, module: &mut dyn super::Module) {
        module.visit_mut(&mut |p| {
            if let Some(g) = self.of_param(p) {
                p.grad.add_assign(g);
            }
        });
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(
        self,
        value: Tensor,
        backward: impl Fn(&Tensor) -> Tensor + 'static,
    ) -> Var<'t> {
        self.tape.custom(value, &[self], move |g| vec![backward(g)])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self.tape.custom(v, &[self, other], |g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.tape.custom(v, &[self, other], |g| vec![g.clone(), g.scale(-1.0)]))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape.custom(v, &[self, other], move |g| {
            vec![
                g.zip_map(&b, |gi, y| gi * y).unwrap(),
                g.zip_map(&a, |gi, x| gi * x).unwrap(),
            ]
        }))
    }

    /// Elementwise product with a constant tensor (masks, fixed gains).
    pub fn mul_const(self, c: &Tensor) -> Result<Var<'t>> {
        let v = self.value().zip_map(c, |x, y| x * y)?;
        let c = c.clone();
        Ok(self.unary(v, move |g| g.zip_map(&c, |gi, y| gi * y).unwrap()))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.unary(v, move |g| g.scale(s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x + s);
        self.unary(v, |g| g.clone())
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum()), move |g| Tensor::full(&shape, g.data()[0]))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn silu(self) -> Var<'t> {
        let x = self.value();
        let v = ops::silu(&x);
        self.unary(v, move |g| g.zip_map(&x, |gi, xi| gi * ops::silu_grad(xi)).unwrap())
    }

    pub fn softplus(self) -> Var<'t> {
        let x = self.value();
        let v = ops::softplus(&x);
        self.unary(v, move |g| g.zip_map(&x, |gi, xi| gi * ops::sigmoid(xi)).unwrap())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let v = x.reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.unary(v, move |g| g.reshape(&orig).unwrap()))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value().t()?;
        Ok(self.unary(v, |g| g.t().unwrap()))
    }

    /// `[C, H, W]` grid to `[H·W, C]` row-major tokens.
    pub fn grid_to_tokens(self) -> Result<Var<'t>> {
        let (c, h, w) = self.value().dims3()?;
        self.reshape(&[c, h * w])?.transpose()
    }

    /// `[H·W, C]` row-major tokens to a `[C, H, W]` grid.
    pub fn tokens_to_grid(self, h: usize, w: usize) -> Result<Var<'t>> {
        let (l, c) = self.value().dims2()?;
        if l != h * w {
            return Err(Error::dim(format!("{l} tokens do not form a {h}x{w} grid")));
        }
        self.transpose()?.reshape(&[c, h, w])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_t(other, false)
    }

    /// `self · otherᵀ` when `transpose_rhs`, else `self · other`.
    pub fn matmul_t(self, other: Var<'t>, transpose_rhs: bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2()?;
        let (br, bc) = b.dims2()?;
        let (kb, n) = if transpose_rhs { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::dim(format!(
                "matmul of {:?} and {:?}{}",
                a.shape(),
                b.shape(),
                if transpose_rhs { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        ops::gemm(m, k, n, a.data(), false, b.data(), transpose_rhs, &mut out, false);
        let v = Tensor::from_parts(vec![m, n], out);
        Ok(self.tape.custom(v, &[self, other], move |g| {
            let mut da = vec![0.0; m * k];
            // dA = G · Bᵀ (or G · B when B was used transposed)
            ops::gemm(m, n, k, g.data(), false, b.data(), !transpose_rhs, &mut da, false);
            let mut db = vec![0.0; k * n];
            if transpose_rhs {
                // dB = Gᵀ · A, shape [n, k]
                ops::gemm(n, m, k, g.data(), true, a.data(), false, &mut db, false);
            } else {
                ops::gemm(k, m, n, a.data(), true, g.data(), false, &mut db, false);
            }
            vec![
                Tensor::from_parts(vec![m, k], da),
                Tensor::from_parts(b.shape().to_vec(), db),
            ]
        }))
    }

    pub fn linear(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (x, wv) = (self.value(), w.value());
        let v = ops::linear(&x, &wv, &b.value())?;
        let (cin, cout) = wv.dims2()?;
        let rows = x.rows();
        Ok(self.tape.custom(v, &[self, w, b], move |g| {
            let mut dx = vec![0.0; rows * cin];
            ops::gemm(rows, cout, cin, g.data(), false, wv.data(), true, &mut dx, false);
            let mut dw = vec![0.0; cin * cout];
            ops::gemm(cin, rows, cout, x.data(), true, g.data(), false, &mut dw, false);
            let mut db = vec![0.0; cout];
            for r in g.data().chunks(cout) {
                for (d, v) in db.iter_mut().zip(r) {
                    *d += v;
                }
            }
            vec![
                Tensor::from_parts(x.shape().to_vec(), dx),
                Tensor::from_parts(vec![cin, cout], dw),
                Tensor::from_parts(vec![cout], db),
            ]
        }))
    }

    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let gv = gamma.value();
        let (v, cache) = ops::layer_norm_fwd(&self.value(), &gv, &beta.value(), eps)?;
        Ok(self.tape.custom(v, &[self, gamma, beta], move |g| {
            let (dx, dg, db) = ops::layer_norm_backward(g, &gv, &cache);
            vec![dx, dg, db]
        }))
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let y = Rc::new(ops::softmax_rows(&self.value()));
        let yc = y.clone();
        self.unary((*y).clone(), move |g| ops::softmax_rows_backward(&yc, g))
    }

    pub fn conv2d(self, k: Var<'t>, b: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (x, kv) = (self.value(), k.value());
        let geom = ConvGeom::new(&x, &kv, &b.value(), stride, pad)?;
        let v = ops::conv2d_with(&geom, &x, &kv, &b.value());
        Ok(self.tape.custom(v, &[self, k, b], move |g| {
            let (dx, dk, db) = ops::conv2d_backward(&geom, &x, &kv, g);
            vec![dx, dk, db]
        }))
    }

    pub fn conv1d_depthwise(self, k: Var<'t>) -> Result<Var<'t>> {
        let (x, kv) = (self.value(), k.value());
        let v = ops::conv1d_depthwise(&x, &kv)?;
        Ok(self.tape.custom(v, &[self, k], move |g| {
            let (dx, dk) = ops::conv1d_depthwise_backward(&x, &kv, g);
            vec![dx, dk]
        }))
    }

    pub fn upsample_nearest2(self) -> Result<Var<'t>> {
        let x = self.value();
        let (c, h, w) = x.dims3()?;
        let v = ops::upsample_nearest2(&x)?;
        Ok(self.unary(v, move |g| ops::upsample_nearest2_backward(g, c, h, w)))
    }

    /// `out[i] = self[index[i]]` over rows of a rank-2 value.
    pub fn gather_rows(self, index: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let (l, c) = x.dims2()?;
        if let Some(&bad) = index.iter().find(|&&i| i >= l) {
            return Err(Error::dim(format!("row index {bad} out of range for {l} rows")));
        }
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            out.extend_from_slice(x.row(i));
        }
        let v = Tensor::from_parts(vec![index.len(), c], out);
        Ok(self.unary(v, move |g| {
            let mut dx = vec![0.0; l * c];
            for (r, &i) in index.iter().enumerate() {
                for j in 0..c {
                    dx[i * c + j] += g.data()[r * c + j];
                }
            }
            Tensor::from_parts(vec![l, c], dx)
        }))
    }

    /// Concatenates rank-2 values along the last axis.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?.tape;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].dims2()?.0;
        let mut widths = Vec::with_capacity(vals.len());
        for v in &vals {
            let (r, c) = v.dims2()?;
            if r != rows {
                return Err(Error::dim(format!("concat rows {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                out.extend_from_slice(v.row(r));
            }
        }
        let v = Tensor::from_parts(vec![rows, total], out);
        Ok(tape.custom(v, parts, move |g| {
            let mut off = 0;
            widths
                .iter()
                .map(|&w| {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    off += w;
                    Tensor::from_parts(vec![rows, w], d)
                })
                .collect()
        }))
    }

    /// Columns `start..start + len` of a rank-2 value.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, c) = x.dims2()?;
        if start + len > c || len == 0 {
            return Err(Error::dim(format!("column slice {start}+{len} of width {c}")));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let v = Tensor::from_parts(vec![rows, len], out);
        Ok(self.unary(v, move |g| {
            let mut dx = vec![0.0; rows * c];
            for r in 0..rows {
                dx[r * c + start..r * c + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            Tensor::from_parts(vec![rows, c], dx)
        }))
    }

    /// Per-row cross-entropy of logits `[N, K]` against integer labels; returns `[N]`.
    pub fn cross_entropy_rows(self, labels: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (n, k) = x.dims2()?;
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::dim(format!("{} labels for logits {:?}", labels.len(), x.shape())));
        }
        let p = ops::softmax_rows(&x);
        let loss: Vec<f64> = (0..n)
            .map(|r| {
                let row = x.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[labels[r]]
            })
            .collect();
        let labels = labels.to_vec();
        Ok(self.unary(Tensor::from_parts(vec![n], loss), move |g| {
            let mut d = p.data().to_vec();
            for r in 0..n {
                d[r * k + labels[r]] -= 1.0;
                for j in 0..k {
                    d[r * k + j] *= g.data()[r];
                }
            }
            Tensor::from_parts(vec![n, k], d)
        }))
    }
}
