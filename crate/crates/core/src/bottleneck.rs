//! Adapter between the context network and the back-end: a transposed conv
//! doubles the frame rate, a narrow FC block yields the exported features,
//! then a strided conv and a wide FC block restore the original shape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::graph::{Graph, Mat, Var};
use crate::nn;
use crate::params::{ParameterStore, UpdateMask};
use crate::training::{sum_ordered, train_loop, TrainOptions, TrainReport};

pub const BN_PREFIX: &str = "bn";
pub const BN_LABEL: &str = "w2v-bn";
const STRIDE: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BottleneckConfig {
    pub d_in: usize,
    pub d_bn: usize,
    pub dropout: f64,
    /// Apply ReLU to the restored output as well. Off by default so the
    /// restoration can reach the negative half of layer-normed inputs.
    pub restore_relu: bool,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self {
            d_in: 1024,
            d_bn: 256,
            dropout: 0.1,
            restore_relu: false,
        }
    }
}

impl BottleneckConfig {
    pub fn new(d_in: usize, d_bn: usize) -> Self {
        Self {
            d_in,
            d_bn,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_bn == 0 || self.d_bn >= self.d_in {
            return Err(Error::Config(format!(
                "bottleneck width {} must be in 1..{}",
                self.d_bn, self.d_in
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

pub fn init_bottleneck(store: &mut ParameterStore, cfg: &BottleneckConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    for j in 0..STRIDE {
        nn::init_linear(store, &format!("{BN_PREFIX}.deconv{j}"), cfg.d_in, cfg.d_in, rng);
    }
    nn::init_linear(store, &format!("{BN_PREFIX}.fc1"), cfg.d_in, cfg.d_bn, rng);
    nn::init_conv1d(store, &format!("{BN_PREFIX}.conv"), cfg.d_bn, cfg.d_bn, STRIDE, rng);
    nn::init_linear(store, &format!("{BN_PREFIX}.fc2"), cfg.d_bn, cfg.d_in, rng);
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct BottleneckVars {
    pub bn: Var,
    pub restored: Var,
}

fn dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask = Mat::from_shape_fn(g.value(x).dim(), |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
            let m = g.constant(mask);
            g.mul(x, m)
        }
        _ => x,
    }
}

/// Adapter on the tape. Dropout is applied only when `rng` is given.
pub fn bottleneck_graph(
    g: &mut Graph,
    params: &ParameterStore,
    cfg: &BottleneckConfig,
    c: Var,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<BottleneckVars> {
    let (t, d) = g.value(c).dim();
    if t == 0 || d != cfg.d_in {
        return Err(Error::Shape(format!("bottleneck expects T x {}, got {t} x {d}", cfg.d_in)));
    }
    let phases: Vec<Var> = (0..STRIDE)
        .map(|j| nn::linear(g, params, &format!("{BN_PREFIX}.deconv{j}"), c))
        .collect::<Result<_>>()?;
    let up = g.interleave_rows(&phases);
    let h = nn::linear(g, params, &format!("{BN_PREFIX}.fc1"), up)?;
    let h = g.relu(h);
    let bn = dropout(g, h, cfg.dropout, rng.as_deref_mut());
    let down = nn::conv1d(g, params, &format!("{BN_PREFIX}.conv"), bn, STRIDE, STRIDE)?;
    let down = g.relu(down);
    let mut restored = nn::linear(g, params, &format!("{BN_PREFIX}.fc2"), down)?;
    if cfg.restore_relu {
        restored = g.relu(restored);
        restored = dropout(g, restored, cfg.dropout, rng);
    }
    Ok(BottleneckVars { bn, restored })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckOutput {
    /// `2T x d_bn` at half the input frame shift.
    pub bn: Mat,
    /// `T x d_in` at the input frame shift.
    pub restored: Mat,
}

pub fn bottleneck_forward(c: &Mat, cfg: &BottleneckConfig, params: &ParameterStore) -> Result<BottleneckOutput> {
    let mut g = Graph::new();
    let cv = g.constant(c.clone());
    let vars = bottleneck_graph(&mut g, params, cfg, cv, None)?;
    Ok(BottleneckOutput {
        bn: g.value(vars.bn).clone(),
        restored: g.value(vars.restored).clone(),
    })
}

/// Exported speech representation: first FC block activations, labelled
/// `w2v-bn`, at half of `frame_shift_us`.
pub fn extract_bn_features(
    c: &Mat,
    frame_shift_us: u32,
    cfg: &BottleneckConfig,
    params: &ParameterStore,
) -> Result<FeatureMatrix> {
    if frame_shift_us % STRIDE as u32 != 0 {
        return Err(Error::NonIntegerRatio {
            from_us: frame_shift_us,
            to_us: frame_shift_us / STRIDE as u32,
        });
    }
    let out = bottleneck_forward(c, cfg, params)?;
    FeatureMatrix::from_f64(&out.bn, frame_shift_us / STRIDE as u32, BN_LABEL)
}

/// Mean squared error between the restored output and the input.
pub fn reconstruction_graph(
    g: &mut Graph,
    params: &ParameterStore,
    cfg: &BottleneckConfig,
    c: &Mat,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let cv = g.constant(c.clone());
    let vars = bottleneck_graph(g, params, cfg, cv, rng)?;
    let diff = g.sub(vars.restored, cv);
    let sq = g.mul(diff, diff);
    Ok(g.mean_all(sq))
}

pub fn reconstruction_mse(c: &Mat, cfg: &BottleneckConfig, params: &ParameterStore) -> Result<f64> {
    let mut g = Graph::new();
    let loss = reconstruction_graph(&mut g, params, cfg, c, None)?;
    Ok(g.scalar(loss))
}

/// Standalone training on reconstruction MSE. Missing adapter parameters
/// are initialised from `opts.seed`.
pub fn train_adapter(
    data: &[Mat],
    cfg: &BottleneckConfig,
    opts: &TrainOptions,
    mut params: ParameterStore,
) -> Result<(ParameterStore, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Config("adapter training set is empty".into()));
    }
    if !params.contains(&format!("{BN_PREFIX}.fc1.w")) {
        init_bottleneck(&mut params, cfg, &mut ChaCha8Rng::seed_from_u64(opts.seed))?;
    }
    let eval = |p: &ParameterStore| -> Result<f64> {
        let mut total = 0.0;
        for c in data {
            total += reconstruction_mse(c, cfg, p)?;
        }
        Ok(total / data.len() as f64)
    };
    let batch = |p: &ParameterStore, idx: &[usize], _epoch: usize, seed: u64| {
        let items: Vec<(usize, u64)> = idx.iter().enumerate().map(|(k, &i)| (i, seed.wrapping_add(k as u64))).collect();
        let (loss, mut grads) = sum_ordered(&items, |&(i, s)| {
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let l = reconstruction_graph(&mut g, p, cfg, &data[i], Some(&mut rng))?;
            Ok((g.scalar(l), g.backward(l)))
        })?;
        let n = idx.len() as f64;
        grads.scale(1.0 / n);
        Ok((loss / n, grads))
    };
    let mask = UpdateMask::only([format!("{BN_PREFIX}.")]);
    let report = train_loop(&mut params, data.len(), opts, &mask, batch, eval)?;
    Ok((params, report))
}
