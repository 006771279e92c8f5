//! Layers shared by the encoder, decoder and transfer components.

use rand::Rng;

use crate::diff::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

pub(crate) fn init_linear<R: Rng>(
    p: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    rng: &mut R,
) -> Result<()> {
    p.insert_glorot(format!("{prefix}.w"), fan_in, fan_out, rng)?;
    if bias {
        p.insert_const(format!("{prefix}.b"), &[fan_out], 0.0)?;
    }
    Ok(())
}

pub(crate) fn init_layer_norm(p: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    p.insert_const(format!("{prefix}.g"), &[d], 1.0)?;
    p.insert_const(format!("{prefix}.b"), &[d], 0.0)
}

pub(crate) fn init_mha<R: Rng>(p: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Result<()> {
    // No key bias: attention weights are invariant to it.
    for m in ["q", "k", "v", "o"] {
        init_linear(p, &format!("{prefix}.{m}"), d, d, m != "k", rng)?;
    }
    Ok(())
}

pub(crate) fn init_ffn<R: Rng>(
    p: &mut ParamStore,
    prefix: &str,
    d: usize,
    d_ff: usize,
    rng: &mut R,
) -> Result<()> {
    init_linear(p, &format!("{prefix}.1"), d, d_ff, true, rng)?;
    init_linear(p, &format!("{prefix}.2"), d_ff, d, true, rng)
}

/// `x · W (+ b)` over the last axis.
pub fn linear(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{prefix}.w"))?;
    let y = g.matmul(x, w)?;
    let bias = format!("{prefix}.b");
    if p.get(&bias).is_some() {
        let b = g.param(p, &bias)?;
        g.add(y, b)
    } else {
        Ok(y)
    }
}

pub fn layer_norm(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let n = g.layer_norm(x, 1e-5);
    let gain = g.param(p, &format!("{prefix}.g"))?;
    let bias = g.param(p, &format!("{prefix}.b"))?;
    let y = g.mul(n, gain)?;
    g.add(y, bias)
}

pub fn ffn(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.1"), x)?;
    let h = g.relu(h);
    linear(g, p, &format!("{prefix}.2"), h)
}

/// Multi-head attention of `q_in [B, Tq, d]` over `kv_in [B, Tk, d]`.
/// An empty key set yields a zero output.
pub fn mha(
    g: &mut Graph,
    p: &ParamStore,
    prefix: &str,
    heads: usize,
    q_in: Var,
    kv_in: Var,
) -> Result<Var> {
    let qs = g.shape(q_in).to_vec();
    let tk = g.shape(kv_in)[1];
    if tk == 0 {
        return Ok(g.constant(Tensor::zeros(&qs)));
    }
    let d = qs[2];
    let dh = d / heads;
    let q = linear(g, p, &format!("{prefix}.q"), q_in)?;
    let k = linear(g, p, &format!("{prefix}.k"), kv_in)?;
    let v = linear(g, p, &format!("{prefix}.v"), kv_in)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 2, h * dh, dh)?;
        let kh = g.slice(k, 2, h * dh, dh)?;
        let vh = g.slice(v, 2, h * dh, dh)?;
        let kt = g.transpose_last2(kh)?;
        let s = g.batch_matmul(qh, kt)?;
        let s = g.scale(s, 1.0 / (dh as f64).sqrt());
        let a = g.softmax(s);
        outs.push(g.batch_matmul(a, vh)?);
    }
    let o = if heads == 1 { outs[0] } else { g.concat(&outs, 2)? };
    linear(g, p, &format!("{prefix}.o"), o)
}

/// Sinusoidal encodings for positions `offset..offset + len`, row-major `[len, d]`.
pub fn positional_encoding(offset: usize, len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for r in 0..len {
        let pos = (offset + r) as f64;
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            out[r * d + i] = if i % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            };
        }
    }
    out
}
