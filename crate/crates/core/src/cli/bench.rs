//! Scan and attention timings. Rows are `L,S,C,variant,wall_ns`; for the
//! attention rows `L` is the token count and `S` the agent count (0 for
//! full softmax attention).

use std::io::Write;
use std::time::Instant;

use rand::Rng;

use crate::attention::{agent_attention, agent_pool, softmax_attention, DEFAULT_HEADS};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::ssm_scan::{s6_scan_parallel, s6_scan_seq, SsmParams, DEFAULT_CHUNK};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub l: usize,
    pub s: usize,
    pub c: usize,
    pub variant: &'static str,
    pub wall_ns: u128,
}

/// The equivalence grid of the scan: every `(L, C, S)` combination.
pub const SCAN_L: [usize; 5] = [1, 2, 7, 64, 1024];
pub const SCAN_C: [usize; 2] = [1, 8];
pub const SCAN_S: [usize; 3] = [1, 4, 16];

pub const ATTN_TOKENS: [usize; 2] = [1024, 4096];
pub const ATTN_AGENTS: usize = 16;
pub const ATTN_WIDTH: usize = 64;

pub fn median(mut xs: Vec<u128>) -> u128 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

fn time_median<T>(runs: usize, mut f: impl FnMut() -> Result<T>) -> Result<(u128, T)> {
    let mut times = Vec::with_capacity(runs);
    let mut last = None;
    for _ in 0..runs.max(1) {
        let start = Instant::now();
        let out = f()?;
        times.push(start.elapsed().as_nanos());
        last = Some(out);
    }
    Ok((median(times), last.expect("at least one run")))
}

/// `max |par − seq| / max(|seq|, 1)`.
pub fn scan_relative_error(par: &Tensor, seq: &Tensor) -> f64 {
    par.data().iter().zip(seq.data()).map(|(a, b)| (a - b).abs() / b.abs().max(1.0)).fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct ScanBench {
    pub seq: BenchRow,
    pub parallel: BenchRow,
    pub max_rel_err: f64,
}

pub fn bench_scan<R: Rng + ?Sized>(l: usize, c: usize, s: usize, runs: usize, rng: &mut R) -> Result<ScanBench> {
    let p = SsmParams::new("bench", c, s, rng)?;
    let u = Tensor::randn(&[l, c], rng);
    let (seq_ns, seq) = time_median(runs, || s6_scan_seq(&u, &p))?;
    let (par_ns, par) = time_median(runs, || s6_scan_parallel(&u, &p, DEFAULT_CHUNK))?;
    let row = |variant, wall_ns| BenchRow { l, s, c, variant, wall_ns };
    Ok(ScanBench { seq: row("seq", seq_ns), parallel: row("parallel", par_ns), max_rel_err: scan_relative_error(&par, &seq) })
}

/// Agent attention with `agents` pooled agents, and full softmax attention,
/// on the same random `q, k, v` of `tokens × width`.
pub fn bench_attention<R: Rng + ?Sized>(
    tokens: usize,
    agents: usize,
    width: usize,
    runs: usize,
    rng: &mut R,
) -> Result<[BenchRow; 2]> {
    let [q, k, v] = [(); 3].map(|_| Tensor::randn(&[tokens, width], rng));
    let (agent_ns, _) = time_median(runs, || agent_attention(&q, &k, &v, &agent_pool(&q, agents)?, DEFAULT_HEADS))?;
    let (soft_ns, _) = time_median(runs, || softmax_attention(&q, &k, &v, DEFAULT_HEADS))?;
    Ok([
        BenchRow { l: tokens, s: agents, c: width, variant: "agent", wall_ns: agent_ns },
        BenchRow { l: tokens, s: 0, c: width, variant: "softmax", wall_ns: soft_ns },
    ])
}

/// Wall-time ratios `t(N=4096) / t(N=1024)` for agent and softmax attention.
pub fn attention_scaling(rows: &[BenchRow]) -> Option<(f64, f64)> {
    let get = |variant: &str, l: usize| rows.iter().find(|r| r.variant == variant && r.l == l).map(|r| r.wall_ns as f64);
    let [lo, hi] = ATTN_TOKENS;
    Some((get("agent", hi)? / get("agent", lo)?, get("softmax", hi)? / get("softmax", lo)?))
}

pub fn write_csv<W: Write>(rows: &[BenchRow], mut out: W) -> Result<()> {
    let io = |e| Error::io("bench output", e);
    writeln!(out, "L,S,C,variant,wall_ns").map_err(io)?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.l, r.s, r.c, r.variant, r.wall_ns).map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn median_of_three() {
        assert_eq!(median(vec![5, 1, 3]), 3);
        assert_eq!(median(vec![7]), 7);
    }

    #[test]
    fn scan_bench_agrees() {
        let b = bench_scan(100, 2, 4, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(b.max_rel_err <= 1e-5);
        assert_eq!((b.seq.variant, b.parallel.variant), ("seq", "parallel"));
    }

    #[test]
    fn csv_layout() {
        let rows = bench_attention(64, 4, 8, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut out = Vec::new();
        write_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "L,S,C,variant,wall_ns");
        assert!(lines[1].starts_with("64,4,8,agent,"));
        assert!(lines[2].starts_with("64,0,8,softmax,"));
    }
}
