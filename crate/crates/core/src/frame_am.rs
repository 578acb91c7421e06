//! Context-spliced feed-forward frame classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_forced_align, PosteriorStream, BLANK};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::graph::{log_sum_exp, Graph, Mat, Var};
use crate::nn;
use crate::params::{ParameterStore, UpdateMask};
use crate::training::{sum_ordered, train_loop, TrainOptions, TrainReport};

pub const AM_PREFIX: &str = "am";
const NORM_MEAN: &str = "am.norm.mean";
const NORM_STD: &str = "am.norm.std";

/// Appends the `aux` trailing input columns to the activations of hidden
/// layer `layer` instead of splicing them at the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenFusion {
    pub layer: usize,
    pub aux: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputNorm {
    /// Mean and variance taken from the training set and stored with the
    /// parameters.
    #[default]
    Global,
    /// Mean and variance of each utterance on its own.
    Utterance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpliceConfig {
    pub offsets: Vec<i32>,
    pub hidden: Vec<usize>,
    pub hidden_fusion: Option<HiddenFusion>,
    pub normalization: InputNorm,
}

impl Default for SpliceConfig {
    fn default() -> Self {
        Self {
            offsets: (-2..=2).collect(),
            hidden: vec![128, 128],
            hidden_fusion: None,
            normalization: InputNorm::default(),
        }
    }
}

impl SpliceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.offsets.is_empty() || self.offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("offsets must be sorted and unique: {:?}", self.offsets)));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("at least one non-empty hidden layer required".into()));
        }
        if let Some(h) = self.hidden_fusion {
            if h.layer >= self.hidden.len() || h.aux == 0 {
                return Err(Error::Config(format!("hidden fusion {h:?} outside {} layers", self.hidden.len())));
            }
        }
        Ok(())
    }
}

/// Row `t` becomes the concatenation of rows `t + o` for each offset,
/// clamping indices at the edges.
pub fn splice_context(f: &FeatureMatrix, offsets: &[i32]) -> Result<FeatureMatrix> {
    let m = splice_mat(&f.to_f64(), offsets);
    FeatureMatrix::from_f64(&m, f.frame_shift_us(), f.label())
}

fn splice_mat(x: &Mat, offsets: &[i32]) -> Mat {
    let (t, d) = x.dim();
    let last = t as i64 - 1;
    Mat::from_shape_fn((t, offsets.len() * d), |(r, c)| {
        let o = offsets[c / d] as i64;
        let src = (r as i64 + o).clamp(0, last) as usize;
        x[[src, c % d]]
    })
}

/// Per-utterance mean and variance normalisation of every column.
pub fn normalize_utterance(x: &Mat) -> Mat {
    let mean = x.mean_axis(ndarray::Axis(0)).expect("at least one frame");
    let centered = x - &mean;
    let var = centered.mapv(|v| v * v).mean_axis(ndarray::Axis(0)).unwrap();
    let inv = var.mapv(|v| 1.0 / (v + 1e-8).sqrt());
    centered * &inv
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmModel {
    pub splice: SpliceConfig,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl AmModel {
    pub fn new(splice: SpliceConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        splice.validate()?;
        let aux = splice.hidden_fusion.map_or(0, |h| h.aux);
        if aux >= input_dim {
            return Err(Error::Config(format!("{aux} fused columns leave no spliced input of {input_dim}")));
        }
        if num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        Ok(Self {
            splice,
            input_dim,
            num_classes,
        })
    }

    fn spliced_dim(&self) -> usize {
        (self.input_dim - self.splice.hidden_fusion.map_or(0, |h| h.aux)) * self.splice.offsets.len()
    }

    pub fn init(&self, seed: u64) -> ParameterStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let mut width = self.spliced_dim();
        for (i, &h) in self.splice.hidden.iter().enumerate() {
            nn::init_linear(&mut store, &format!("{AM_PREFIX}.h{i}"), width, h, &mut rng);
            width = h;
            if let Some(f) = self.splice.hidden_fusion.filter(|f| f.layer == i) {
                width += f.aux;
            }
        }
        nn::init_linear(&mut store, &format!("{AM_PREFIX}.out"), width, self.num_classes, &mut rng);
        if self.splice.normalization == InputNorm::Global {
            store.init_zeros(NORM_MEAN, 1, self.input_dim);
            store.init_const(NORM_STD, 1, self.input_dim, 1.0);
        }
        store
    }

    /// Stores global normalisation statistics of `inputs`.
    pub fn set_input_stats(&self, params: &mut ParameterStore, inputs: &[&FeatureMatrix]) -> Result<()> {
        if self.splice.normalization != InputNorm::Global || inputs.is_empty() {
            return Ok(());
        }
        let views: Vec<_> = inputs.iter().map(|f| f.data().view()).collect();
        let stacked = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| Error::Shape(e.to_string()))?
            .mapv(f64::from);
        let mean = stacked.mean_axis(ndarray::Axis(0)).unwrap();
        let std = stacked.var_axis(ndarray::Axis(0), 0.0).mapv(|v| (v + 1e-8).sqrt());
        params.insert(NORM_MEAN, mean.insert_axis(ndarray::Axis(0)));
        params.insert(NORM_STD, std.insert_axis(ndarray::Axis(0)));
        Ok(())
    }

    /// Log-posteriors on the tape for one utterance.
    pub fn graph(&self, g: &mut Graph, params: &ParameterStore, f: &FeatureMatrix) -> Result<Var> {
        if f.dim() != self.input_dim {
            return Err(Error::Shape(format!(
                "acoustic model expects {} input columns, got {}",
                self.input_dim,
                f.dim()
            )));
        }
        let x = match self.splice.normalization {
            InputNorm::Utterance => normalize_utterance(&f.to_f64()),
            InputNorm::Global => {
                let mean = params.get(NORM_MEAN)?.row(0).to_owned();
                let std = params.get(NORM_STD)?.row(0).to_owned();
                (f.to_f64() - &mean) / &std
            }
        };
        let aux = self.splice.hidden_fusion.map_or(0, |h| h.aux);
        let main_cols = self.input_dim - aux;
        let main = x.slice(ndarray::s![.., ..main_cols]).to_owned();
        let mut h = g.constant(splice_mat(&main, &self.splice.offsets));
        for i in 0..self.splice.hidden.len() {
            h = nn::linear(g, params, &format!("{AM_PREFIX}.h{i}"), h)?;
            h = g.relu(h);
            if self.splice.hidden_fusion.is_some_and(|fu| fu.layer == i) {
                let extra = g.constant(x.slice(ndarray::s![.., main_cols..]).to_owned());
                h = g.concat_cols(&[h, extra]);
            }
        }
        let logits = nn::linear(g, params, &format!("{AM_PREFIX}.out"), h)?;
        Ok(g.log_softmax_rows(logits))
    }
}

pub fn am_posteriors(f: &FeatureMatrix, model: &AmModel, params: &ParameterStore) -> Result<PosteriorStream> {
    let mut g = Graph::new();
    let logp = model.graph(&mut g, params, f)?;
    PosteriorStream::new(g.value(logp).clone(), f.frame_shift_us(), f.label())
}

/// Mean frame cross-entropy and its gradient with respect to `logp`.
pub fn frame_cross_entropy(logp: &Mat, labels: &[usize]) -> Result<(f64, Mat)> {
    let (t, v) = logp.dim();
    if labels.len() != t {
        return Err(Error::Shape(format!("{} labels for {t} frames", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= v) {
        return Err(Error::LabelOutOfRange { label: bad, classes: v });
    }
    let mut grad = Mat::zeros((t, v));
    let mut loss = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        loss -= logp[[r, l]];
        grad[[r, l]] = -1.0 / t as f64;
    }
    Ok((loss / t as f64, grad))
}

fn utterance_ce(model: &AmModel, params: &ParameterStore, f: &FeatureMatrix, labels: &[usize]) -> Result<(f64, crate::graph::Gradients)> {
    let mut g = Graph::new();
    let logp = model.graph(&mut g, params, f)?;
    let (loss, grad) = frame_cross_entropy(g.value(logp), labels)?;
    let l = g.custom_scalar(&[logp], loss, vec![grad]);
    Ok((loss, g.backward(l)))
}

/// Frame cross-entropy training. Without `params` the model is initialised
/// from `opts.seed` and global input statistics come from `data`.
pub fn train_am(
    data: &[(FeatureMatrix, Vec<usize>)],
    model: &AmModel,
    opts: &TrainOptions,
    params: Option<ParameterStore>,
) -> Result<(ParameterStore, TrainReport)> {
    for (f, l) in data {
        if l.len() != f.frames() {
            return Err(Error::Shape(format!("{} labels for {} frames", l.len(), f.frames())));
        }
        if let Some(&bad) = l.iter().find(|&&x| x >= model.num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: model.num_classes,
            });
        }
    }
    let mut params = match params {
        Some(p) => p,
        None => {
            let mut p = model.init(opts.seed);
            model.set_input_stats(&mut p, &data.iter().map(|(f, _)| f).collect::<Vec<_>>())?;
            p
        }
    };
    let all: Vec<usize> = (0..data.len()).collect();
    let eval = |p: &ParameterStore| -> Result<f64> {
        let (total, _) = sum_ordered(&all, |&i| utterance_ce(model, p, &data[i].0, &data[i].1))?;
        Ok(total / data.len() as f64)
    };
    let step = |p: &ParameterStore, idx: &[usize], _epoch: usize, _seed: u64| {
        let (loss, mut grads) = sum_ordered(idx, |&i| utterance_ce(model, p, &data[i].0, &data[i].1))?;
        let n = idx.len() as f64;
        grads.scale(1.0 / n);
        Ok((loss / n, grads))
    };
    let report = train_loop(
        &mut params,
        data.len(),
        opts,
        &UpdateMask::only([format!("{AM_PREFIX}.")]).excluding(["am.norm."]),
        step,
        eval,
    )?;
    Ok((params, report))
}

/// Fraction of frames whose argmax equals the label.
pub fn frame_accuracy(stream: &PosteriorStream, labels: &[usize]) -> f64 {
    let hits = stream
        .logp()
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &l)| {
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            best == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Flat alignment: frames outside `[start, end)` are blank, the span is cut
/// into equal consecutive segments, one per token.
pub fn uniform_alignment(frames: usize, tokens: &[usize], start: usize, end: usize) -> Result<Vec<usize>> {
    let end = end.min(frames);
    if tokens.is_empty() || start >= end || end - start < tokens.len() {
        return Err(Error::Unsatisfiable {
            target_len: tokens.len(),
            frames: end.saturating_sub(start),
        });
    }
    let span = end - start;
    let mut labels = vec![BLANK; frames];
    for (i, l) in labels.iter_mut().enumerate().take(end).skip(start) {
        let k = (i - start) * tokens.len() / span;
        *l = tokens[k];
    }
    Ok(labels)
}

/// Active span of an utterance: first and one-past-last frame whose log
/// energy (log-sum-exp over bands) lies above `floor + fraction * (peak - floor)`.
pub fn active_span(f: &FeatureMatrix, fraction: f64) -> (usize, usize) {
    let energy: Vec<f64> = f
        .data()
        .rows()
        .into_iter()
        .map(|r| log_sum_exp(r.iter().map(|&v| v as f64)))
        .collect();
    let peak = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let floor = energy.iter().cloned().fold(f64::INFINITY, f64::min);
    let threshold = floor + fraction * (peak - floor);
    let active: Vec<usize> = (0..energy.len()).filter(|&t| energy[t] >= threshold).collect();
    match (active.first(), active.last()) {
        (Some(&a), Some(&b)) => (a, b + 1),
        _ => (0, energy.len()),
    }
}

/// Frame labels from a CTC forced alignment on another stream, resampled to
/// `frames` frames at `target_shift_us`. Blanks between two emitted tokens
/// are relabelled with the nearer token.
pub fn labels_from_ctc(
    stream: &PosteriorStream,
    tokens: &[usize],
    target_shift_us: u32,
    frames: usize,
) -> Result<Vec<usize>> {
    let path = ctc_forced_align(stream.logp(), tokens)?;
    let ratio = stream.frame_shift_us() / target_shift_us.max(1);
    if ratio == 0 || stream.frame_shift_us() % target_shift_us != 0 {
        return Err(Error::NonIntegerRatio {
            from_us: stream.frame_shift_us(),
            to_us: target_shift_us,
        });
    }
    let r = ratio as usize;
    let widened = widen_runs(&path);
    Ok((0..frames).map(|t| widened[(t / r).min(widened.len() - 1)]).collect())
}

/// Blank frames strictly between two token frames take the label of the
/// nearer one (ties go to the earlier token).
fn widen_runs(path: &[usize]) -> Vec<usize> {
    let tok: Vec<usize> = (0..path.len()).filter(|&t| path[t] != BLANK).collect();
    let mut out = path.to_vec();
    for w in tok.windows(2) {
        let (a, b) = (w[0], w[1]);
        for (t, o) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            *o = if t - a <= b - t { path[a] } else { path[b] };
        }
    }
    out
}
