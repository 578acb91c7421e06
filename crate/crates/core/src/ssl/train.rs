use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::bottleneck::{bottleneck_graph, init_bottleneck, BottleneckConfig, BN_PREFIX};
use crate::ctc::{ctc_loss, greedy_decode, PosteriorStream, TokenVocab};
use crate::error::{Error, Result};
use crate::eval::edit_distance;
use crate::graph::{Gradients, Graph, Mat, Var};
use crate::nn;
use crate::params::{ParameterStore, UpdateMask};
use crate::training::{sum_ordered, train_loop, TrainOptions, TrainReport};

use super::encoder::{context_graph, feature_encoder_graph};
use super::losses::{contrastive_loss, diversity_loss};
use super::masking::{compute_mask, sample_distractors, DistractorSample, MaskSample};
use super::quantizer::{gumbel_noise, quantize_graph, GumbelNoise};
use super::EncoderConfig;

pub const CTC_HEAD_PREFIX: &str = "ctc";
const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

/// Random draws for one pretraining example.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSample {
    pub mask: MaskSample,
    pub distractors: DistractorSample,
    pub noise: GumbelNoise,
}

impl PretrainSample {
    pub fn draw(frames: usize, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let mask = compute_mask(frames, cfg.mask_prob, cfg.mask_span, rng);
        let distractors = sample_distractors(&mask.masked, cfg.distractors, rng);
        let noise = gumbel_noise(frames, cfg.groups, cfg.entries, rng);
        Self {
            mask,
            distractors,
            noise,
        }
    }
}

/// Forward graph of one utterance, kept alive until the batch-level
/// diversity gradient is known.
struct PretrainPass {
    graph: Graph,
    contrastive: Var,
    probs: Var,
    contrastive_value: f64,
}

fn pretrain_pass(
    audio: &AudioBuffer,
    sample: &PretrainSample,
    cfg: &EncoderConfig,
    params: &ParameterStore,
    tau: f64,
) -> Result<PretrainPass> {
    let mut g = Graph::new();
    let z = feature_encoder_graph(&mut g, params, cfg, audio)?;
    let frames = g.value(z).nrows();
    if sample.noise.0.nrows() != frames {
        return Err(Error::Shape(format!(
            "pretraining sample drawn for {} frames, utterance has {frames}",
            sample.noise.0.nrows()
        )));
    }
    let fwd = context_graph(&mut g, params, cfg, z, &sample.mask.masked)?;
    let cp = nn::linear(&mut g, params, "ssl.final_proj", fwd.c)?;
    let qv = quantize_graph(&mut g, params, cfg.groups, cfg.entries, z, Some(&sample.noise.0), tau, false)?;
    let out = contrastive_loss(
        g.value(cp),
        g.value(qv.q),
        &sample.mask.masked,
        &sample.distractors,
        cfg.contrastive_temperature,
    )?;
    let contrastive = g.custom_scalar(&[cp, qv.q], out.loss, vec![out.grad_context, out.grad_quantized]);
    Ok(PretrainPass {
        graph: g,
        contrastive,
        probs: qv.probs,
        contrastive_value: out.loss,
    })
}

/// Batch objective `mean(L_m) + w * L_d`, with the diversity term computed
/// over the code distribution averaged across every frame of the batch.
pub fn pretrain_batch_loss(
    batch: &[(&AudioBuffer, &PretrainSample)],
    cfg: &EncoderConfig,
    params: &ParameterStore,
    tau: f64,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Config("empty pretraining batch".into()));
    }
    use rayon::prelude::*;
    let passes: Vec<PretrainPass> = batch
        .par_iter()
        .map(|(a, s)| pretrain_pass(a, s, cfg, params, tau))
        .collect::<Result<_>>()?;
    let views: Vec<_> = passes.iter().map(|p| p.graph.value(p.probs).view()).collect();
    let stacked = ndarray::concatenate(ndarray::Axis(0), &views).expect("probability widths agree");
    let (div, div_grad) = diversity_loss(&stacked, cfg.groups)?;
    let b = batch.len() as f64;
    let mut offsets = Vec::with_capacity(passes.len());
    let mut row = 0;
    for p in &passes {
        offsets.push(row);
        row += p.graph.value(p.probs).nrows();
    }
    let mut items: Vec<(PretrainPass, Mat)> = passes
        .into_iter()
        .zip(offsets)
        .map(|(p, off)| {
            let rows = p.graph.value(p.probs).nrows();
            let slice = div_grad.slice(ndarray::s![off..off + rows, ..]).to_owned();
            (p, slice)
        })
        .collect();
    let grads: Vec<Gradients> = items
        .par_iter_mut()
        .map(|(p, slice)| {
            let g = &mut p.graph;
            // each utterance carries its share of the shared diversity value so the
            // summed tape gradients equal the batch objective's gradients
            let d = g.custom_scalar(&[p.probs], div / b, vec![std::mem::take(slice)]);
            let d = g.scale(d, cfg.diversity_weight);
            let m = g.scale(p.contrastive, 1.0 / b);
            let total = g.add(m, d);
            g.backward(total)
        })
        .collect();
    let mut sum = Gradients::default();
    for g in &grads {
        sum.accumulate(g);
    }
    let contrastive: f64 = items.iter().map(|(p, _)| p.contrastive_value).sum::<f64>() / b;
    Ok((contrastive + cfg.diversity_weight * div, sum))
}

fn draw_samples(
    data: &[AudioBuffer],
    idx: &[usize],
    cfg: &EncoderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PretrainSample>> {
    idx.iter()
        .map(|&i| {
            let frames = cfg.frames_for(data[i].len());
            if frames == 0 {
                return Err(Error::AudioTooShort {
                    samples: data[i].len(),
                    required: cfg.receptive_field(),
                });
            }
            Ok(PretrainSample::draw(frames, cfg, rng))
        })
        .collect()
}

/// Masked contrastive plus diversity pretraining. The report's initial and
/// final losses are evaluated on one fixed set of masks and noise draws.
pub fn pretrain(
    data: &[AudioBuffer],
    cfg: &EncoderConfig,
    opts: &TrainOptions,
    mut params: ParameterStore,
) -> Result<(ParameterStore, TrainReport)> {
    cfg.validate()?;
    let all: Vec<usize> = (0..data.len()).collect();
    let eval_samples = draw_samples(
        data,
        &all,
        cfg,
        &mut ChaCha8Rng::seed_from_u64(opts.seed ^ EVAL_SEED_SALT),
    )?;
    let tau0 = cfg.gumbel_temperature_at(0);
    let batch_size = opts.batch_size.max(1);
    let eval = |p: &ParameterStore| -> Result<f64> {
        let mut total = 0.0;
        for chunk in all.chunks(batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| (&data[i], &eval_samples[i])).collect();
            total += pretrain_batch_loss(&batch, cfg, p, tau0)?.0 * chunk.len() as f64;
        }
        Ok(total / data.len() as f64)
    };
    let step = |p: &ParameterStore, idx: &[usize], epoch: usize, seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = draw_samples(data, idx, cfg, &mut rng)?;
        let batch: Vec<_> = idx.iter().zip(&samples).map(|(&i, s)| (&data[i], s)).collect();
        pretrain_batch_loss(&batch, cfg, p, cfg.gumbel_temperature_at(epoch))
    };
    let mask = UpdateMask::only(["ssl."]);
    let report = train_loop(&mut params, data.len(), opts, &mask, step, eval)?;
    Ok((params, report))
}

/// Which parameters CTC fine-tuning may update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "blocks", rename_all = "snake_case")]
pub enum FinetuneScope {
    Full,
    /// Everything except the conv feature encoder.
    #[default]
    FreezeFeatureEncoder,
    /// Only the first `k` transformer blocks plus head and adapter.
    FirstBlocks(usize),
    /// Only the CTC projection.
    HeadOnly,
}

impl FinetuneScope {
    pub fn mask(&self) -> UpdateMask {
        match *self {
            FinetuneScope::Full => UpdateMask::all(),
            FinetuneScope::FreezeFeatureEncoder => UpdateMask::all().excluding(["ssl.conv", "ssl.feat_ln"]),
            FinetuneScope::FirstBlocks(k) => {
                let mut p: Vec<String> = (0..k).map(|i| format!("ssl.block{i}.")).collect();
                p.push(format!("{CTC_HEAD_PREFIX}."));
                p.push(format!("{BN_PREFIX}."));
                UpdateMask::only(p)
            }
            FinetuneScope::HeadOnly => UpdateMask::only([format!("{CTC_HEAD_PREFIX}.")]),
        }
    }
}

/// Encoder, optional adapter and CTC projection on the tape; returns the
/// `T x (V+1)` log-posteriors.
fn ctc_graph(
    g: &mut Graph,
    audio: &AudioBuffer,
    cfg: &EncoderConfig,
    bottleneck: Option<&BottleneckConfig>,
    params: &ParameterStore,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    params.get(&format!("{CTC_HEAD_PREFIX}.w"))?;
    let z = feature_encoder_graph(g, params, cfg, audio)?;
    let fwd = context_graph(g, params, cfg, z, &[])?;
    let top = match bottleneck {
        Some(bc) => bottleneck_graph(g, params, bc, fwd.c, dropout)?.restored,
        None => fwd.c,
    };
    let logits = nn::linear(g, params, CTC_HEAD_PREFIX, top)?;
    Ok(g.log_softmax_rows(logits))
}

fn utterance_ctc(
    audio: &AudioBuffer,
    labels: &[usize],
    cfg: &EncoderConfig,
    bottleneck: Option<&BottleneckConfig>,
    params: &ParameterStore,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let logp = ctc_graph(&mut g, audio, cfg, bottleneck, params, dropout)?;
    let (loss, grad) = ctc_loss(g.value(logp), labels)?;
    let l = g.custom_scalar(&[logp], loss, vec![grad]);
    Ok((loss, g.backward(l)))
}

/// Adds the CTC projection (and the adapter, when requested) if absent.
pub fn attach_ctc_head(
    params: &mut ParameterStore,
    cfg: &EncoderConfig,
    num_classes: usize,
    bottleneck: Option<&BottleneckConfig>,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(bc) = bottleneck {
        if bc.d_in != cfg.d_model {
            return Err(Error::Config(format!(
                "adapter input width {} differs from d_model {}",
                bc.d_in, cfg.d_model
            )));
        }
        if !params.contains(&format!("{BN_PREFIX}.fc1.w")) {
            init_bottleneck(params, bc, &mut rng)?;
        }
    }
    if !params.contains(&format!("{CTC_HEAD_PREFIX}.w")) {
        nn::init_linear(params, CTC_HEAD_PREFIX, cfg.d_model, num_classes, &mut rng);
    }
    Ok(())
}

/// CTC fine-tuning over `(audio, token transcript)` pairs. A randomly
/// initialised projection to `V+1` classes is added when missing.
pub fn finetune_ctc(
    data: &[(AudioBuffer, Vec<String>)],
    vocab: &TokenVocab,
    cfg: &EncoderConfig,
    bottleneck: Option<&BottleneckConfig>,
    scope: FinetuneScope,
    opts: &TrainOptions,
    mut params: ParameterStore,
) -> Result<(ParameterStore, TrainReport)> {
    let labels: Vec<Vec<usize>> = data.iter().map(|(_, t)| vocab.encode(t)).collect::<Result<_>>()?;
    attach_ctc_head(&mut params, cfg, vocab.num_classes(), bottleneck, opts.seed.wrapping_add(1))?;
    let all: Vec<usize> = (0..data.len()).collect();
    let eval = |p: &ParameterStore| -> Result<f64> {
        let (total, _) = sum_ordered(&all, |&i| utterance_ctc(&data[i].0, &labels[i], cfg, bottleneck, p, None))?;
        Ok(total / data.len() as f64)
    };
    let step = |p: &ParameterStore, idx: &[usize], _epoch: usize, seed: u64| {
        let items: Vec<(usize, u64)> = idx.iter().enumerate().map(|(k, &i)| (i, seed.wrapping_add(k as u64))).collect();
        let (loss, mut grads) = sum_ordered(&items, |&(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            utterance_ctc(&data[i].0, &labels[i], cfg, bottleneck, p, Some(&mut rng))
        })?;
        let n = idx.len() as f64;
        grads.scale(1.0 / n);
        Ok((loss / n, grads))
    };
    let report = train_loop(&mut params, data.len(), opts, &scope.mask(), step, eval)?;
    Ok((params, report))
}

/// CTC head output at the encoder frame shift, labelled `w2v`.
pub fn ssl_frame_posteriors(
    audio: &AudioBuffer,
    cfg: &EncoderConfig,
    bottleneck: Option<&BottleneckConfig>,
    params: &ParameterStore,
) -> Result<PosteriorStream> {
    let mut g = Graph::new();
    let logp = ctc_graph(&mut g, audio, cfg, bottleneck, params, None)?;
    PosteriorStream::new(g.value(logp).clone(), cfg.frame_shift_us(), "w2v")
}

/// Token error rate in percent over greedy decodes.
pub fn token_error_rate(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let errors: usize = hyps.iter().zip(refs).map(|(h, r)| edit_distance(r, h)).sum();
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        0.0
    } else {
        100.0 * errors as f64 / total as f64
    }
}

/// Greedy-decode token error rate of the fine-tuned model on `data`.
pub fn greedy_token_error_rate(
    data: &[(AudioBuffer, Vec<String>)],
    vocab: &TokenVocab,
    cfg: &EncoderConfig,
    bottleneck: Option<&BottleneckConfig>,
    params: &ParameterStore,
) -> Result<f64> {
    use rayon::prelude::*;
    let hyps: Vec<Vec<usize>> = data
        .par_iter()
        .map(|(a, _)| ssl_frame_posteriors(a, cfg, bottleneck, params).map(|s| greedy_decode(&s)))
        .collect::<Result<_>>()?;
    let refs: Vec<Vec<usize>> = data.iter().map(|(_, t)| vocab.encode(t)).collect::<Result<_>>()?;
    Ok(token_error_rate(&hyps, &refs))
}
