//! Mixture density network for acoustic-to-articulatory inversion.

use std::f64::consts::PI;

use ndarray::{s, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{ARTIC_DIM, ARTIC_LABEL};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::graph::{log_softmax_rows, Gradients, Graph, Mat};
use crate::nn;
use crate::params::{ParameterStore, UpdateMask};
use crate::training::{sum_ordered, train_loop, TrainOptions, TrainReport};

pub const MDN_PREFIX: &str = "mdn";
const NORM_MEAN: &str = "mdn.norm.mean";
const NORM_STD: &str = "mdn.norm.std";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdnConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub components: usize,
    pub output_dim: usize,
    /// Linear path from the normalised input straight to the means.
    pub skip: bool,
}

impl Default for MdnConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden: 64,
            components: 2,
            output_dim: ARTIC_DIM,
            skip: true,
        }
    }
}

impl MdnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.components == 0 || self.output_dim == 0 {
            return Err(Error::Config(format!("all MDN sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// One frame's diagonal Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    /// M × d_a.
    pub means: Mat,
    /// M × d_a standard deviations.
    pub sigmas: Mat,
}

impl MixtureParams {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidDistribution(format!("mixture weights sum to {sum}")));
        }
        if self.means.dim() != self.sigmas.dim() || self.means.nrows() != self.weights.len() {
            return Err(Error::Shape("mixture component shapes disagree".into()));
        }
        if self.sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidDistribution("non-positive or non-finite standard deviation".into()));
        }
        Ok(())
    }

    pub fn mean(&self) -> Vec<f64> {
        self.means.t().dot(&ndarray::Array1::from(self.weights.clone())).to_vec()
    }

    /// −log p(x).
    pub fn nll(&self, x: &[f64]) -> f64 {
        let comps: Vec<f64> = (0..self.weights.len())
            .map(|m| self.weights[m].ln() + diag_log_normal(x, self.means.row(m), self.sigmas.row(m)))
            .collect();
        -crate::graph::log_sum_exp(comps.iter().copied())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut m = self.weights.len() - 1;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                m = k;
                break;
            }
        }
        (0..self.means.ncols())
            .map(|d| {
                let e: f64 = StandardNormal.sample(rng);
                self.means[[m, d]] + self.sigmas[[m, d]] * e
            })
            .collect()
    }
}

fn diag_log_normal(x: &[f64], mu: ndarray::ArrayView1<f64>, sigma: ndarray::ArrayView1<f64>) -> f64 {
    x.iter()
        .zip(mu.iter().zip(sigma.iter()))
        .map(|(&x, (&m, &s))| {
            let z = (x - m) / s;
            -s.ln() - 0.5 * (2.0 * PI).ln() - 0.5 * z * z
        })
        .sum()
}

/// Mixtures for every frame of an utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSequence {
    /// T × M.
    pub weights: Mat,
    /// T × (M·d_a), component-major.
    pub means: Mat,
    pub sigmas: Mat,
    pub components: usize,
    pub frame_shift_us: u32,
}

impl MixtureSequence {
    pub fn frames(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols() / self.components
    }

    pub fn frame(&self, t: usize) -> MixtureParams {
        let (m, d) = (self.components, self.dim());
        let reshape = |x: &Mat| Mat::from_shape_fn((m, d), |(i, j)| x[[t, i * d + j]]);
        MixtureParams {
            weights: self.weights.row(t).to_vec(),
            means: reshape(&self.means),
            sigmas: reshape(&self.sigmas),
        }
    }

    pub fn validate(&self) -> Result<()> {
        (0..self.frames()).try_for_each(|t| self.frame(t).validate())
    }
}

pub fn init_mdn(cfg: &MdnConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let md = cfg.components * cfg.output_dim;
    nn::init_linear(&mut store, "mdn.h", cfg.input_dim, cfg.hidden, &mut rng);
    nn::init_linear(&mut store, "mdn.logits", cfg.hidden, cfg.components, &mut rng);
    nn::init_linear(&mut store, "mdn.mu", cfg.hidden, md, &mut rng);
    nn::init_linear(&mut store, "mdn.logsig", cfg.hidden, md, &mut rng);
    if cfg.skip {
        nn::init_linear(&mut store, "mdn.skip", cfg.input_dim, md, &mut rng);
    }
    store.init_zeros(NORM_MEAN, 1, cfg.input_dim);
    store.init_const(NORM_STD, 1, cfg.input_dim, 1.0);
    Ok(store)
}

struct MdnVars {
    logits: crate::graph::Var,
    mu: crate::graph::Var,
    logsig: crate::graph::Var,
}

fn mdn_graph(g: &mut Graph, params: &ParameterStore, cfg: &MdnConfig, f: &FeatureMatrix) -> Result<MdnVars> {
    if f.dim() != cfg.input_dim {
        return Err(Error::Shape(format!("MDN expects {} input columns, got {}", cfg.input_dim, f.dim())));
    }
    let mean = params.get(NORM_MEAN)?.row(0).to_owned();
    let std = params.get(NORM_STD)?.row(0).to_owned();
    let x = g.constant((f.to_f64() - &mean) / &std);
    let h = nn::linear(g, params, "mdn.h", x)?;
    let h = g.tanh(h);
    let logits = nn::linear(g, params, "mdn.logits", h)?;
    let mut mu = nn::linear(g, params, "mdn.mu", h)?;
    if cfg.skip {
        let direct = nn::linear(g, params, "mdn.skip", x)?;
        mu = g.add(mu, direct);
    }
    let logsig = nn::linear(g, params, "mdn.logsig", h)?;
    Ok(MdnVars { logits, mu, logsig })
}

pub fn mdn_forward(f: &FeatureMatrix, cfg: &MdnConfig, params: &ParameterStore) -> Result<MixtureSequence> {
    let mut g = Graph::new();
    let v = mdn_graph(&mut g, params, cfg, f)?;
    Ok(MixtureSequence {
        weights: log_softmax_rows(g.value(v.logits)).mapv(f64::exp),
        means: g.value(v.mu).clone(),
        sigmas: g.value(v.logsig).mapv(f64::exp),
        components: cfg.components,
        frame_shift_us: f.frame_shift_us(),
    })
}

fn check_targets(mix_frames: usize, dim: usize, targets: &FeatureMatrix) -> Result<()> {
    if targets.frames() != mix_frames || targets.dim() != dim {
        return Err(Error::Shape(format!(
            "targets {}x{} against a {}x{} mixture sequence",
            targets.frames(),
            targets.dim(),
            mix_frames,
            dim
        )));
    }
    Ok(())
}

/// Mean per-frame negative log-likelihood.
pub fn mdn_nll(mix: &MixtureSequence, targets: &FeatureMatrix) -> Result<f64> {
    check_targets(mix.frames(), mix.dim(), targets)?;
    let x = targets.to_f64();
    let total: f64 = (0..mix.frames())
        .map(|t| mix.frame(t).nll(x.row(t).as_slice().unwrap()))
        .sum();
    Ok(total / mix.frames() as f64)
}

/// Mean NLL from raw network outputs plus gradients with respect to the
/// weight logits, the means and the log standard deviations.
pub fn mdn_nll_raw(logits: &Mat, mu: &Mat, logsig: &Mat, x: &Mat) -> Result<(f64, [Mat; 3])> {
    let (t, m) = logits.dim();
    let d = x.ncols();
    if mu.dim() != (t, m * d) || logsig.dim() != (t, m * d) || x.nrows() != t {
        return Err(Error::Shape("MDN outputs and targets disagree".into()));
    }
    let logw = log_softmax_rows(logits);
    let mut ga = Mat::zeros((t, m));
    let mut gmu = Mat::zeros((t, m * d));
    let mut gs = Mat::zeros((t, m * d));
    let mut total = 0.0;
    let inv_t = 1.0 / t as f64;
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    for r in 0..t {
        let mut comp = vec![0.0; m];
        for (k, c) in comp.iter_mut().enumerate() {
            let mut lp = logw[[r, k]];
            for j in 0..d {
                let s = logsig[[r, k * d + j]];
                let z = (x[[r, j]] - mu[[r, k * d + j]]) * (-s).exp();
                lp -= s + half_log_2pi + 0.5 * z * z;
            }
            *c = lp;
        }
        let lse = crate::graph::log_sum_exp(comp.iter().copied());
        total -= lse;
        for k in 0..m {
            let resp = (comp[k] - lse).exp();
            ga[[r, k]] = (logw[[r, k]].exp() - resp) * inv_t;
            for j in 0..d {
                let s = logsig[[r, k * d + j]];
                let inv_sigma = (-s).exp();
                let z = (x[[r, j]] - mu[[r, k * d + j]]) * inv_sigma;
                gmu[[r, k * d + j]] = -resp * z * inv_sigma * inv_t;
                gs[[r, k * d + j]] = resp * (1.0 - z * z) * inv_t;
            }
        }
    }
    Ok((total * inv_t, [ga, gmu, gs]))
}

/// Expected value per frame, labelled as articulatory features.
pub fn mdn_predict(mix: &MixtureSequence) -> Result<FeatureMatrix> {
    let (t, d) = (mix.frames(), mix.dim());
    let mut out = Mat::zeros((t, d));
    for k in 0..mix.components {
        let w = mix.weights.slice(s![.., k..k + 1]);
        out += &(&mix.means.slice(s![.., k * d..(k + 1) * d]) * &w);
    }
    FeatureMatrix::from_f64(&out, mix.frame_shift_us, ARTIC_LABEL)
}

/// Root-mean-square error over all frames and dimensions.
pub fn rmse(pred: &FeatureMatrix, target: &FeatureMatrix) -> Result<f64> {
    check_targets(pred.frames(), pred.dim(), target)?;
    let diff = pred.to_f64() - target.to_f64();
    Ok(diff.mapv(|v| v * v).mean().unwrap_or(0.0).sqrt())
}

fn utterance_loss(params: &ParameterStore, cfg: &MdnConfig, f: &FeatureMatrix, y: &FeatureMatrix) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let v = mdn_graph(&mut g, params, cfg, f)?;
    let sigmas = g.value(v.logsig).mapv(f64::exp);
    let weights = log_softmax_rows(g.value(v.logits)).mapv(f64::exp);
    let mix = MixtureSequence {
        weights,
        means: g.value(v.mu).clone(),
        sigmas,
        components: cfg.components,
        frame_shift_us: f.frame_shift_us(),
    };
    mix.validate()?;
    let (loss, [ga, gmu, gs]) = mdn_nll_raw(g.value(v.logits), g.value(v.mu), g.value(v.logsig), &y.to_f64())?;
    let l = g.custom_scalar(&[v.logits, v.mu, v.logsig], loss, vec![ga, gmu, gs]);
    Ok((loss, g.backward(l)))
}

/// Fits the inversion model on frame-aligned (representation, articulatory)
/// pairs. Input normalisation statistics are taken from the training data
/// when `params` is `None`. Every forward pass checks mixture validity, so
/// each update is followed by a check on the next batch or the final
/// evaluation.
pub fn train_inversion(
    data: &[(FeatureMatrix, FeatureMatrix)],
    cfg: &MdnConfig,
    opts: &TrainOptions,
    params: Option<ParameterStore>,
) -> Result<(ParameterStore, TrainReport)> {
    for (f, y) in data {
        if f.dim() != cfg.input_dim {
            return Err(Error::Shape(format!("MDN expects {} input columns, got {}", cfg.input_dim, f.dim())));
        }
        check_targets(f.frames(), cfg.output_dim, y)?;
    }
    let mut params = match params {
        Some(p) => p,
        None => {
            let mut p = init_mdn(cfg, opts.seed)?;
            if !data.is_empty() {
                let (mean, std) = input_stats(data);
                p.insert(NORM_MEAN, mean);
                p.insert(NORM_STD, std);
            }
            p
        }
    };
    let all: Vec<usize> = (0..data.len()).collect();
    let eval = |p: &ParameterStore| -> Result<f64> {
        let (total, _) = sum_ordered(&all, |&i| utterance_loss(p, cfg, &data[i].0, &data[i].1))?;
        Ok(total / data.len() as f64)
    };
    let step = |p: &ParameterStore, idx: &[usize], _epoch: usize, _seed: u64| {
        let (loss, mut grads) = sum_ordered(idx, |&i| utterance_loss(p, cfg, &data[i].0, &data[i].1))?;
        let n = idx.len() as f64;
        grads.scale(1.0 / n);
        Ok((loss / n, grads))
    };
    let mask = UpdateMask::only([format!("{MDN_PREFIX}.")]).excluding(["mdn.norm."]);
    let report = train_loop(&mut params, data.len(), opts, &mask, step, eval)?;
    Ok((params, report))
}

fn input_stats(data: &[(FeatureMatrix, FeatureMatrix)]) -> (Mat, Mat) {
    let stacked = ndarray::concatenate(
        Axis(0),
        &data.iter().map(|(f, _)| f.data().view()).collect::<Vec<_>>(),
    )
    .expect("equal widths checked")
    .mapv(f64::from);
    let mean = stacked.mean_axis(Axis(0)).unwrap();
    let std = stacked.var_axis(Axis(0), 0.0).mapv(|v| (v + 1e-8).sqrt());
    (mean.insert_axis(Axis(0)), std.insert_axis(Axis(0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(t: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::from_f64(&Mat::from_shape_fn((t, d), |_| rng.gen_range(-1.0..1.0)), 10_000, "w2v-bn").unwrap()
    }

    #[test]
    fn forward_is_valid_and_deterministic() {
        let cfg = MdnConfig {
            input_dim: 5,
            ..MdnConfig::default()
        };
        let p = init_mdn(&cfg, 1).unwrap();
        let f = feats(9, 5, 2);
        let a = mdn_forward(&f, &cfg, &p).unwrap();
        assert_eq!(a, mdn_forward(&f, &cfg, &p).unwrap());
        a.validate().unwrap();
        let pred = mdn_predict(&a).unwrap();
        assert_eq!((pred.frames(), pred.dim(), pred.label()), (9, ARTIC_DIM, ARTIC_LABEL));
        assert!(mdn_forward(&feats(9, 4, 2), &cfg, &p).is_err());
    }

    #[test]
    fn single_component_matches_closed_form() {
        let mix = MixtureParams {
            weights: vec![1.0],
            means: Mat::from_shape_vec((1, 2), vec![0.5, -1.0]).unwrap(),
            sigmas: Mat::from_shape_vec((1, 2), vec![0.3, 2.0]).unwrap(),
        };
        let x = [0.1, 0.4];
        let closed: f64 = [(0.1f64, 0.5, 0.3), (0.4, -1.0, 2.0)]
            .iter()
            .map(|&(x, m, s): &(f64, f64, f64)| s.ln() + 0.5 * (2.0 * PI).ln() + 0.5 * ((x - m) / s).powi(2))
            .sum();
        assert!((mix.nll(&x) - closed).abs() < 1e-12);
        assert_eq!(mix.mean(), vec![0.5, -1.0]);
    }

    #[test]
    fn raw_nll_agrees_with_mixture_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t, m, d) = (5, 3, 2);
        let mut r = |r: usize, c: usize| Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0));
        let (a, mu, s, x) = (r(t, m), r(t, m * d), r(t, m * d), r(t, d));
        let (loss, _) = mdn_nll_raw(&a, &mu, &s, &x).unwrap();
        let mix = MixtureSequence {
            weights: log_softmax_rows(&a).mapv(f64::exp),
            means: mu,
            sigmas: s.mapv(f64::exp),
            components: m,
            frame_shift_us: 10_000,
        };
        let y = FeatureMatrix::from_f64(&x, 10_000, "artic").unwrap();
        let direct = mdn_nll(&mix, &y).unwrap();
        assert!((loss - direct).abs() < 1e-4);
    }

    #[test]
    fn symmetric_mixture_predicts_zero() {
        let mix = MixtureSequence {
            weights: Mat::from_elem((1, 2), 0.5),
            means: Mat::from_shape_vec((1, 4), vec![-1.0, -1.0, 1.0, 1.0]).unwrap(),
            sigmas: Mat::ones((1, 4)),
            components: 2,
            frame_shift_us: 10_000,
        };
        let p = mdn_predict(&mix).unwrap();
        assert!(p.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_epochs_keeps_init_and_shape_errors() {
        let cfg = MdnConfig {
            input_dim: 3,
            hidden: 8,
            ..MdnConfig::default()
        };
        let data = vec![(feats(10, 3, 0), feats(10, ARTIC_DIM, 1))];
        let init = init_mdn(&cfg, 5).unwrap();
        let (p, r) = train_inversion(&data, &cfg, &TrainOptions::new(0, 5), Some(init.clone())).unwrap();
        assert_eq!(p, init);
        assert_eq!(r.initial_loss, r.final_loss);
        let bad = vec![(feats(10, 3, 0), feats(9, ARTIC_DIM, 1))];
        assert!(train_inversion(&bad, &cfg, &TrainOptions::new(1, 5), None).is_err());
    }
}
