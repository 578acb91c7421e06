//! Layer building blocks over [`Graph`], parameterised by name prefixes in
//! a [`ParameterStore`].

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::params::ParameterStore;

pub fn param(g: &mut Graph, params: &ParameterStore, name: &str) -> Result<Var> {
    Ok(g.param(name, params.get(name)?))
}

pub fn init_linear(store: &mut ParameterStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) {
    store.init_weight(&format!("{prefix}.w"), d_in, d_out, rng);
    store.init_zeros(&format!("{prefix}.b"), 1, d_out);
}

pub fn linear(g: &mut Graph, params: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let w = param(g, params, &format!("{prefix}.w"))?;
    let b = param(g, params, &format!("{prefix}.b"))?;
    let (x_cols, w_rows) = (g.value(x).ncols(), g.value(w).nrows());
    if x_cols != w_rows {
        return Err(Error::Shape(format!(
            "{prefix}: input width {x_cols} but weight expects {w_rows}"
        )));
    }
    let h = g.matmul(x, w);
    Ok(g.add_row(h, b))
}

pub fn init_layer_norm(store: &mut ParameterStore, prefix: &str, dim: usize) {
    store.init_const(&format!("{prefix}.g"), 1, dim, 1.0);
    store.init_zeros(&format!("{prefix}.b"), 1, dim);
}

pub fn layer_norm(g: &mut Graph, params: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let gain = param(g, params, &format!("{prefix}.g"))?;
    let bias = param(g, params, &format!("{prefix}.b"))?;
    let n = g.layer_norm_rows(x, 1e-5);
    let n = g.mul_row(n, gain);
    Ok(g.add_row(n, bias))
}

/// 1-D convolution without padding, input `T x C_in`, weight `(k*C_in) x C_out`.
pub fn conv1d(
    g: &mut Graph,
    params: &ParameterStore,
    prefix: &str,
    x: Var,
    kernel: usize,
    stride: usize,
) -> Result<Var> {
    let rows = g.value(x).nrows();
    if rows < kernel {
        return Err(Error::Shape(format!(
            "{prefix}: {rows} input frames shorter than kernel {kernel}"
        )));
    }
    let u = g.unfold(x, kernel, stride);
    linear(g, params, prefix, u)
}

/// Stride-1 convolution with `kernel / 2` zero rows of padding on each
/// side, so `T` is preserved. `kernel` must be odd.
pub fn conv1d_same(g: &mut Graph, params: &ParameterStore, prefix: &str, x: Var, kernel: usize) -> Result<Var> {
    let t = g.value(x).nrows();
    let half = (kernel / 2) as i64;
    let taps: Vec<Var> = (0..kernel as i64)
        .map(|j| {
            let shift = Mat::from_shape_fn((t, t), |(r, c)| if c as i64 == r as i64 + j - half { 1.0 } else { 0.0 });
            let s = g.constant(shift);
            g.matmul(s, x)
        })
        .collect();
    let u = g.concat_cols(&taps);
    linear(g, params, prefix, u)
}

pub fn init_conv1d(
    store: &mut ParameterStore,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    rng: &mut ChaCha8Rng,
) {
    init_linear(store, prefix, kernel * c_in, c_out, rng);
}

/// Fixed sinusoidal position table, `T x d`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Mat {
    Mat::from_shape_fn((t, d), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub fn init_attention(store: &mut ParameterStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    for name in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{name}"), d, d, rng);
    }
}

pub fn self_attention(g: &mut Graph, params: &ParameterStore, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let d = g.value(x).ncols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = linear(g, params, &format!("{prefix}.q"), x)?;
    let k = linear(g, params, &format!("{prefix}.k"), x)?;
    let v = linear(g, params, &format!("{prefix}.v"), x)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let att = g.softmax_rows(scores);
        outs.push(g.matmul(att, vh));
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    linear(g, params, &format!("{prefix}.o"), merged)
}

pub fn init_transformer_block(store: &mut ParameterStore, prefix: &str, d: usize, ffn: usize, rng: &mut ChaCha8Rng) {
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    init_attention(store, &format!("{prefix}.attn"), d, rng);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
    init_linear(store, &format!("{prefix}.ffn1"), d, ffn, rng);
    init_linear(store, &format!("{prefix}.ffn2"), ffn, d, rng);
}

/// Pre-norm block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
pub fn transformer_block(g: &mut Graph, params: &ParameterStore, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let n = layer_norm(g, params, &format!("{prefix}.ln1"), x)?;
    let a = self_attention(g, params, &format!("{prefix}.attn"), n, heads)?;
    let x = g.add(x, a);
    let n = layer_norm(g, params, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, params, &format!("{prefix}.ffn1"), n)?;
    let h = g.gelu(h);
    let h = linear(g, params, &format!("{prefix}.ffn2"), h)?;
    Ok(g.add(x, h))
}
