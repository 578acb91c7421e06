use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::nn::{self, param};
use crate::params::ParameterStore;

use super::EncoderConfig;

pub(crate) const QUANT_PREFIX: &str = "ssl.quant";

/// Pre-sampled standard Gumbel noise, `T x (G*V)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise(pub Mat);

pub fn gumbel_noise(frames: usize, groups: usize, entries: usize, rng: &mut ChaCha8Rng) -> GumbelNoise {
    GumbelNoise(Mat::from_shape_fn((frames, groups * entries), |_| {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        -(-u.ln()).ln()
    }))
}

/// Quantizer weights together with the selection temperature.
#[derive(Clone, Debug)]
pub struct QuantizerState {
    pub groups: usize,
    pub entries: usize,
    pub code_dim: usize,
    pub temperature: f64,
    params: ParameterStore,
}

impl QuantizerState {
    pub fn new(cfg: &EncoderConfig, params: &ParameterStore, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Temperature(temperature));
        }
        let sub = params.subset(QUANT_PREFIX);
        sub.get(&format!("{QUANT_PREFIX}.logits.w"))?;
        Ok(Self {
            groups: cfg.groups,
            entries: cfg.entries,
            code_dim: cfg.code_dim,
            temperature,
            params: sub,
        })
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }
}

#[derive(Clone, Debug)]
pub struct QuantizerOutput {
    /// `T x code_dim`.
    pub q: Mat,
    /// Noise-free softmax of the logits, `T x (G*V)`; each group block sums to 1.
    pub probs: Mat,
    /// Selection weights actually applied to the codebooks.
    pub selection: Mat,
}

pub(crate) fn init_quantizer(store: &mut ParameterStore, cfg: &EncoderConfig, d_z: usize, rng: &mut ChaCha8Rng) {
    let gv = cfg.groups * cfg.entries;
    nn::init_linear(store, &format!("{QUANT_PREFIX}.logits"), d_z, gv, rng);
    let per_group = cfg.code_dim / cfg.groups;
    for g in 0..cfg.groups {
        store.init_uniform(&format!("{QUANT_PREFIX}.codebook{g}"), cfg.entries, per_group, 1.0, rng);
    }
    nn::init_linear(store, &format!("{QUANT_PREFIX}.out"), cfg.code_dim, cfg.code_dim, rng);
}

pub(crate) struct QuantizerVars {
    pub q: Var,
    pub probs: Var,
    pub selection: Mat,
}

fn hard_selection(scores: &Mat, groups: usize, entries: usize) -> Mat {
    let mut out = Mat::zeros(scores.dim());
    for (r, row) in scores.rows().into_iter().enumerate() {
        for g in 0..groups {
            let mut best = g * entries;
            for v in g * entries..(g + 1) * entries {
                if row[v] > row[best] {
                    best = v;
                }
            }
            out[[r, best]] = 1.0;
        }
    }
    out
}

/// Quantizer on the tape. With `hard` the selection is a constant one-hot
/// at `argmax(logit + noise)`; otherwise it is the Gumbel softmax at
/// temperature `tau`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn quantize_graph(
    g: &mut Graph,
    params: &ParameterStore,
    groups: usize,
    entries: usize,
    z: Var,
    noise: Option<&Mat>,
    tau: f64,
    hard: bool,
) -> Result<QuantizerVars> {
    if !(tau > 0.0) {
        return Err(Error::Temperature(tau));
    }
    let logits = nn::linear(g, params, &format!("{QUANT_PREFIX}.logits"), z)?;
    let frames = g.value(logits).nrows();
    if let Some(n) = noise {
        if n.dim() != (frames, groups * entries) {
            return Err(Error::Shape(format!(
                "gumbel noise {:?} for {frames} frames x {} logits",
                n.dim(),
                groups * entries
            )));
        }
    }
    let scores = match noise {
        Some(n) => {
            let nv = g.constant(n.clone());
            g.add(logits, nv)
        }
        None => logits,
    };
    let mut prob_parts = Vec::with_capacity(groups);
    let mut code_parts = Vec::with_capacity(groups);
    let mut selection = Mat::zeros((frames, groups * entries));
    let hard_sel = hard.then(|| hard_selection(g.value(scores), groups, entries));
    for gi in 0..groups {
        let lg = g.slice_cols(logits, gi * entries, entries);
        prob_parts.push(g.softmax_rows(lg));
        let sel = match &hard_sel {
            Some(h) => g.constant(h.slice(ndarray::s![.., gi * entries..(gi + 1) * entries]).to_owned()),
            None => {
                let sg = g.slice_cols(scores, gi * entries, entries);
                let sg = g.scale(sg, 1.0 / tau);
                g.softmax_rows(sg)
            }
        };
        selection
            .slice_mut(ndarray::s![.., gi * entries..(gi + 1) * entries])
            .assign(g.value(sel));
        let book = param(g, params, &format!("{QUANT_PREFIX}.codebook{gi}"))?;
        code_parts.push(g.matmul(sel, book));
    }
    let probs = if groups == 1 { prob_parts[0] } else { g.concat_cols(&prob_parts) };
    let codes = if groups == 1 { code_parts[0] } else { g.concat_cols(&code_parts) };
    let q = nn::linear(g, params, &format!("{QUANT_PREFIX}.out"), codes)?;
    Ok(QuantizerVars { q, probs, selection })
}

/// Quantizes encoder outputs `z` (`T x d_z`). `noise = None` disables the
/// Gumbel perturbation.
pub fn gumbel_quantize(
    z: &Mat,
    state: &QuantizerState,
    noise: Option<&GumbelNoise>,
    hard: bool,
) -> Result<QuantizerOutput> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let vars = quantize_graph(
        &mut g,
        &state.params,
        state.groups,
        state.entries,
        zv,
        noise.map(|n| &n.0),
        state.temperature,
        hard,
    )?;
    Ok(QuantizerOutput {
        q: g.value(vars.q).clone(),
        probs: g.value(vars.probs).clone(),
        selection: vars.selection,
    })
}
