//! Multi-head softmax attention and two-stage agent attention.
//!
//! Agent attention first lets `n` agent tokens attend over the keys and
//! values, then lets every query attend over the agents:
//! `Atten(Q, A, Atten(A, K, V))`. For fixed `n` the cost is linear in the
//! token count.

use rand::Rng;

use crate::error::{Error, Result};
use crate::impl_module;
use crate::numerics::{ops, Linear, Tape, Tensor, Var};

pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_AGENTS: usize = 16;

/// Scaled dot-product attention per head; heads are column blocks of
/// `q`/`k` and `v` and are concatenated in order.
pub fn softmax_attention_var<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let (nq, ck) = q.value().dims2()?;
    let (nk, ck2) = k.value().dims2()?;
    let (nv, cv) = v.value().dims2()?;
    if ck != ck2 || nk != nv {
        return Err(Error::dim(format!(
            "attention q {:?}, k {:?}, v {:?}",
            [nq, ck],
            [nk, ck2],
            [nv, cv]
        )));
    }
    if heads == 0 || ck % heads != 0 || cv % heads != 0 {
        return Err(Error::config(format!(
            "{heads} heads do not divide key width {ck} and value width {cv}"
        )));
    }
    let (dk, dv) = (ck / heads, cv / heads);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (q.slice_cols(h * dk, dk)?, k.slice_cols(h * dk, dk)?, v.slice_cols(h * dv, dv)?)
        };
        let weights = qh.matmul_t(kh, true)?.scale(scale).softmax_rows();
        outs.push(weights.matmul(vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        Var::concat_cols(&outs)
    }
}

/// Row `i` of the `[n, N]` matrix averages the `i`-th contiguous segment;
/// the first `N mod n` segments get one extra token.
pub fn agent_pool_matrix(tokens: usize, n: usize) -> Result<Tensor> {
    if n == 0 || n > tokens {
        return Err(Error::config(format!("{n} agents for {tokens} tokens")));
    }
    let (base, rem) = (tokens / n, tokens % n);
    let mut m = Tensor::zeros(&[n, tokens]);
    let mut start = 0;
    for i in 0..n {
        let len = base + usize::from(i < rem);
        for j in start..start + len {
            m.set(&[i, j], 1.0 / len as f64);
        }
        start += len;
    }
    Ok(m)
}

pub fn agent_pool_var<'t>(q: Var<'t>, n: usize) -> Result<Var<'t>> {
    let (tokens, _) = q.value().dims2()?;
    let pool = q.tape().constant(agent_pool_matrix(tokens, n)?);
    pool.matmul(q)
}

pub fn agent_attention_var<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    agents: Var<'t>,
    heads: usize,
) -> Result<Var<'t>> {
    let agent_values = softmax_attention_var(agents, k, v, heads)?;
    softmax_attention_var(q, agents, agent_values, heads)
}

fn head_block(x: &Tensor, h: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.rows() * width);
    for r in 0..x.rows() {
        out.extend_from_slice(&x.row(r)[h * width..(h + 1) * width]);
    }
    out
}

const QUERY_BLOCK: usize = 256;

/// `Softmax(QKᵀ/√d)V` per head, `d` the per-head key width.
///
/// Evaluated in query blocks so the score matrix never exceeds
/// `QUERY_BLOCK × N_k` per head.
pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (nq, ck) = q.dims2()?;
    let (nk, ck2) = k.dims2()?;
    let (nv, cv) = v.dims2()?;
    if ck != ck2 || nk != nv {
        return Err(Error::dim(format!(
            "attention q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || ck % heads != 0 || cv % heads != 0 {
        return Err(Error::config(format!(
            "{heads} heads do not divide key width {ck} and value width {cv}"
        )));
    }
    let (dk, dv) = (ck / heads, cv / heads);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = vec![0.0; nq * cv];
    let mut scores = vec![0.0; QUERY_BLOCK.min(nq) * nk];
    let mut mixed = vec![0.0; QUERY_BLOCK.min(nq) * dv];
    for h in 0..heads {
        let (qh, kh, vh) = (head_block(q, h, dk), head_block(k, h, dk), head_block(v, h, dv));
        for r0 in (0..nq).step_by(QUERY_BLOCK) {
            let rows = QUERY_BLOCK.min(nq - r0);
            let s = &mut scores[..rows * nk];
            ops::gemm(rows, dk, nk, &qh[r0 * dk..(r0 + rows) * dk], false, &kh, true, s, false);
            for row in s.chunks_mut(nk) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * scale;
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x * scale - m).exp();
                    sum += *x;
                }
                row.iter_mut().for_each(|x| *x /= sum);
            }
            let mx = &mut mixed[..rows * dv];
            ops::gemm(rows, nk, dv, s, false, &vh, false, mx, false);
            for (i, src) in mx.chunks(dv).enumerate() {
                out[(r0 + i) * cv + h * dv..(r0 + i) * cv + (h + 1) * dv].copy_from_slice(src);
            }
        }
    }
    Ok(Tensor::from_parts(vec![nq, cv], out))
}

/// Segment means of the rows of `q[N, C]` into `n` agent tokens.
pub fn agent_pool(q: &Tensor, n: usize) -> Result<Tensor> {
    let (tokens, c) = q.dims2()?;
    if n == 0 || n > tokens {
        return Err(Error::config(format!("{n} agents for {tokens} tokens")));
    }
    let (base, rem) = (tokens / n, tokens % n);
    let mut out = Vec::with_capacity(n * c);
    let mut start = 0;
    for i in 0..n {
        let len = base + usize::from(i < rem);
        let mut acc = vec![0.0; c];
        for r in start..start + len {
            acc.iter_mut().zip(q.row(r)).for_each(|(a, x)| *a += x);
        }
        out.extend(acc.into_iter().map(|a| a / len as f64));
        start += len;
    }
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn agent_attention(q: &Tensor, k: &Tensor, v: &Tensor, agents: &Tensor, heads: usize) -> Result<Tensor> {
    let agent_values = softmax_attention(agents, k, v, heads)?;
    softmax_attention(q, agents, &agent_values, heads)
}

/// Projections, pooled agents, and output projection around agent attention.
#[derive(Debug, Clone)]
pub struct AgentAttentionBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub agents: usize,
}
impl_module!(AgentAttentionBlock { wq, wk, wv, wo });

impl AgentAttentionBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, c: usize, heads: usize, agents: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::config(format!("{heads} heads do not divide width {c}")));
        }
        if agents == 0 {
            return Err(Error::config("agent count must be >= 1"));
        }
        Ok(Self {
            wq: Linear::new(&format!("{name}.wq"), c, c, rng),
            wk: Linear::new(&format!("{name}.wk"), c, c, rng),
            wv: Linear::new(&format!("{name}.wv"), c, c, rng),
            wo: Linear::new(&format!("{name}.wo"), c, c, rng),
            heads,
            agents,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let q = self.wq.forward(tape, x)?;
        let k = self.wk.forward(tape, x)?;
        let v = self.wv.forward(tape, x)?;
        let agents = agent_pool_var(q, self.agents)?;
        let mixed = agent_attention_var(q, k, v, agents, self.heads)?;
        self.wo.forward(tape, mixed)
    }
}
