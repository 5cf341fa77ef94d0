//! Layer helpers over the tape: seeded initialisation, named linear and
//! layer-norm layers, and multi-head attention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result, TensorError};
use crate::graph::{BoundParams, Graph, Var};
use crate::tensor::{ParamSet, Tensor};

pub const INIT_STD: f64 = 0.02;

/// RNG for one named parameter. Depends only on `(seed, name)`, so adding or
/// removing other parameters never changes an existing parameter's values.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

/// Normal(0, std) samples truncated to two standard deviations.
pub fn trunc_normal(dims: &[usize], std: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let n = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            data.push(z * std);
        }
    }
    Tensor::new(dims.to_vec(), data)
}

pub fn init_trunc_normal(
    params: &mut ParamSet,
    name: &str,
    dims: &[usize],
    seed: u64,
) -> Result<()> {
    let t = trunc_normal(dims, INIT_STD, &mut param_rng(seed, name))?;
    params.insert(name, t)
}

/// `{prefix}.weight (out,in)` truncated-normal and `{prefix}.bias (out)` zero.
pub fn init_linear(
    params: &mut ParamSet,
    prefix: &str,
    d_out: usize,
    d_in: usize,
    seed: u64,
) -> Result<()> {
    init_trunc_normal(params, &format!("{prefix}.weight"), &[d_out, d_in], seed)?;
    params.insert(format!("{prefix}.bias"), Tensor::zeros(vec![d_out])?)
}

pub fn init_layer_norm(params: &mut ParamSet, prefix: &str, d: usize) -> Result<()> {
    params.insert(format!("{prefix}.weight"), Tensor::ones(vec![d])?)?;
    params.insert(format!("{prefix}.bias"), Tensor::zeros(vec![d])?)
}

/// Query/key/value/output projections of an attention block, all `d x d`.
pub fn init_attention(params: &mut ParamSet, prefix: &str, d: usize, seed: u64) -> Result<()> {
    for proj in ["q", "k", "v", "out"] {
        init_linear(params, &format!("{prefix}.{proj}"), d, d, seed)?;
    }
    Ok(())
}

/// Applies `{prefix}.weight` / `{prefix}.bias` (bias optional).
pub fn linear(g: &mut Graph, x: Var, params: &BoundParams, prefix: &str) -> Result<Var> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let bias = format!("{prefix}.bias");
    let b = if params.contains(&bias) {
        Some(params.get(&bias)?)
    } else {
        None
    };
    g.linear(x, w, b)
}

pub fn layer_norm(g: &mut Graph, x: Var, params: &BoundParams, prefix: &str) -> Result<Var> {
    let gamma = params.get(&format!("{prefix}.weight"))?;
    let beta = params.get(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gamma, beta)
}

/// Scaled dot-product multi-head attention with output projection.
///
/// `q_tokens` is `(n_q, d)` and `kv_tokens` `(n_kv, d)`; passing the same var
/// for both gives self-attention.
pub fn attention_block(
    g: &mut Graph,
    q_tokens: Var,
    kv_tokens: Var,
    params: &BoundParams,
    prefix: &str,
    heads: usize,
) -> Result<Var> {
    let (_, d) = g.value(q_tokens).rows_cols()?;
    let (_, dkv) = g.value(kv_tokens).rows_cols()?;
    if d != dkv {
        return shape_err("attention_block", g.dims(q_tokens), g.dims(kv_tokens));
    }
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Geometry {
            op: "attention_block",
            msg: format!("{heads} heads do not divide embedding dim {d}"),
        });
    }
    let q = linear(g, q_tokens, params, &format!("{prefix}.q"))?;
    let k = linear(g, kv_tokens, params, &format!("{prefix}.k"))?;
    let v = linear(g, kv_tokens, params, &format!("{prefix}.v"))?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.narrow(q, 1, h * dh, dh)?,
                g.narrow(k, 1, h * dh, dh)?,
                g.narrow(v, 1, h * dh, dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.mul_const(scores, scale)?;
        let attn = g.softmax(scores)?;
        outs.push(g.matmul(attn, vh)?);
    }
    let merged = if heads == 1 {
        outs[0]
    } else {
        g.concat(&outs, 1)?
    };
    linear(g, merged, params, &format!("{prefix}.out"))
}
