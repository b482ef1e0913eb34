//! Network building blocks on top of [`crate::autodiff`]: linear layers and
//! pre-normalization transformer blocks with single-head attention.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, ParamSet, Tensor, Var};
use crate::error::Result;

pub fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor { rows, cols, data }
}

/// Registers `{name}.w` (`fan_in × fan_out`, std `gain/√fan_in`) and `{name}.b`.
pub fn init_linear(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
    p.insert(&format!("{name}.w"), normal_tensor(rng, fan_in, fan_out, gain / (fan_in as f64).sqrt()));
    p.insert(&format!("{name}.b"), Tensor::zeros(1, fan_out));
}

pub fn linear(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    let h = g.matmul(x, w)?;
    g.add_row(h, b)
}

/// Registers one transformer block of width `d`. With `zero_out` the two
/// residual output projections start at zero, so the block is the identity.
pub fn init_block(p: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, d: usize, ffn_mult: usize, zero_out: bool) {
    let std = 1.0 / (d as f64).sqrt();
    p.insert(&format!("{prefix}.ln1"), Tensor::filled(1, d, 1.0));
    for m in ["wq", "wk", "wv"] {
        p.insert(&format!("{prefix}.{m}"), normal_tensor(rng, d, d, std));
    }
    let out_std = if zero_out { 0.0 } else { std };
    p.insert(&format!("{prefix}.wo"), normal_tensor(rng, d, d, out_std));
    p.insert(&format!("{prefix}.ln2"), Tensor::filled(1, d, 1.0));
    init_linear(p, rng, &format!("{prefix}.ff1"), d, ffn_mult * d, 1.0);
    init_linear(p, rng, &format!("{prefix}.ff2"), ffn_mult * d, d, if zero_out { 0.0 } else { 1.0 });
}

/// Single-head softmax attention, over all rows or within consecutive
/// windows of `window` rows (the last window may be shorter).
pub fn attention(g: &mut Graph, x: Var, prefix: &str, window: Option<usize>) -> Result<Var> {
    let wq = g.param(&format!("{prefix}.wq"))?;
    let wk = g.param(&format!("{prefix}.wk"))?;
    let wv = g.param(&format!("{prefix}.wv"))?;
    let wo = g.param(&format!("{prefix}.wo"))?;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let (n, d) = g.value(x).shape();
    let scale = 1.0 / (d as f64).sqrt();
    let win = window.unwrap_or(n).max(1);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = win.min(n - start);
        let (qs, ks, vs) = if len == n {
            (q, k, v)
        } else {
            (g.slice_rows(q, start, len)?, g.slice_rows(k, start, len)?, g.slice_rows(v, start, len)?)
        };
        let s = g.matmul_nt(qs, ks)?;
        let s = g.scale(s, scale);
        let a = g.row_softmax(s);
        parts.push(g.matmul(a, vs)?);
        start += len;
    }
    let o = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
    g.matmul(o, wo)
}

/// `t' = t + Attn(LN(t)); t'' = t' + FFN(LN(t'))`.
pub fn block(g: &mut Graph, x: Var, prefix: &str, window: Option<usize>) -> Result<Var> {
    let ln1 = g.param(&format!("{prefix}.ln1"))?;
    let h = g.layer_norm(x, ln1)?;
    let a = attention(g, h, prefix, window)?;
    let x = g.add(x, a)?;
    let ln2 = g.param(&format!("{prefix}.ln2"))?;
    let h = g.layer_norm(x, ln2)?;
    let h = linear(g, h, &format!("{prefix}.ff1"))?;
    let h = g.gelu(h);
    let h = linear(g, h, &format!("{prefix}.ff2"))?;
    g.add(x, h)
}
