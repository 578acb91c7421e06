//! End-to-end experiment on the synthetic corpus: SSL pretraining and CTC
//! fine-tuning, bottleneck feature extraction, frame-level acoustic models
//! on FBK and fused features, joint decoding, N-best rescoring and scoring.

use std::collections::BTreeMap;
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::bottleneck::{extract_bn_features, BottleneckConfig};
use crate::config::{AlignmentSource, Config};
use crate::corpus::{gen_synth_corpus, Corpus, Subset, Utterance};
use crate::ctc::{NBestList, PosteriorStream, TokenVocab};
use crate::error::{Error, Result};
use crate::eval::{partition_report, UttResult, WerReport};
use crate::features::{compute_fbank, fuse_features, FbankConfig, FeatureMatrix};
use crate::frame_am::{active_span, am_posteriors, labels_from_ctc, train_am, uniform_alignment, AmModel};
use crate::graph::Mat;
use crate::joint::{decode, decode_nbest, interpolate_with_mode, CombinationMode, CombinationWeights, Lexicon};
use crate::mdn::{mdn_forward, mdn_predict, train_inversion, MdnConfig};
use crate::params::ParameterStore;
use crate::rescore::{rescore, score_nbest_with_ssl, RescoreWeights};
use crate::ssl::{contextualize, encode_raw, finetune_ctc, init_encoder, pretrain, ssl_frame_posteriors, EncoderConfig};
use crate::training::TrainReport;

pub const SYS_FBK: &str = "fbk";
pub const SYS_FUSED: &str = "fbk+bn";
pub const SYS_ARTIC: &str = "fbk+bn+artic";
pub const SYS_SSL: &str = "w2v";
pub const SYS_JOINT: &str = "joint";
pub const SYS_RESCORED: &str = "rescored";

/// Contextual representations with no masking.
pub fn ssl_context(audio: &AudioBuffer, cfg: &EncoderConfig, params: &ParameterStore) -> Result<Mat> {
    contextualize(&encode_raw(audio, cfg, params)?, &[], cfg, params)
}

/// Per-utterance inputs of every back-end system.
#[derive(Clone, Debug)]
pub struct UtteranceStreams {
    pub fbank: FeatureMatrix,
    pub bn: FeatureMatrix,
    /// CTC posteriors at the encoder frame rate.
    pub ssl: PosteriorStream,
}

pub fn extract_streams(
    audio: &AudioBuffer,
    fbank: &FbankConfig,
    encoder: &EncoderConfig,
    bottleneck: &BottleneckConfig,
    params: &ParameterStore,
) -> Result<UtteranceStreams> {
    let c = ssl_context(audio, encoder, params)?;
    Ok(UtteranceStreams {
        fbank: compute_fbank(audio, fbank)?,
        bn: extract_bn_features(&c, encoder.frame_shift_us(), bottleneck, params)?,
        ssl: ssl_frame_posteriors(audio, encoder, Some(bottleneck), params)?,
    })
}

/// Frame labels for one training utterance at the FBK frame rate.
pub fn frame_labels(
    fbank: &FeatureMatrix,
    tokens: &[usize],
    ssl: &PosteriorStream,
    source: AlignmentSource,
    active_threshold: f64,
) -> Result<Vec<usize>> {
    match source {
        AlignmentSource::Uniform => {
            let (start, end) = active_span(fbank, active_threshold);
            uniform_alignment(fbank.frames(), tokens, start, end)
        }
        AlignmentSource::Ctc => labels_from_ctc(ssl, tokens, fbank.frame_shift_us(), fbank.frames()),
    }
}

/// Interpolates an AM stream with the upsampled SSL stream, truncated to
/// the common length.
pub fn combine_streams(
    am: &PosteriorStream,
    ssl: &PosteriorStream,
    w: &CombinationWeights,
    mode: CombinationMode,
) -> Result<PosteriorStream> {
    let up = ssl.resample(am.frame_shift_us())?;
    let n = am.frames().min(up.frames());
    interpolate_with_mode(&[am.truncated(n), up.truncated(n)], w, mode)
}

fn decode_all<'a>(
    items: impl IntoParallelIterator<Item = (&'a str, &'a PosteriorStream)>,
    lexicon: &Lexicon,
    vocab: &TokenVocab,
) -> Result<Vec<UttResult>> {
    items
        .into_par_iter()
        .map(|(id, s)| {
            Ok(UttResult {
                id: id.to_string(),
                hypothesis: decode(s, lexicon, vocab)?.words,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    /// WER reports on the test subsets, keyed by system name.
    pub systems: BTreeMap<String, WerReport>,
    pub hypotheses: BTreeMap<String, Vec<UttResult>>,
    pub training: BTreeMap<String, TrainReport>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl ExperimentReport {
    pub fn wer(&self, system: &str) -> Option<f64> {
        self.systems.get(system).and_then(|r| r.overall.wer)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (name, r) in &self.systems {
            out.push_str(&format!("== {name}\n{}", r.to_table()));
        }
        out
    }
}

/// Trained artefacts of an experiment run.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub corpus: Corpus,
    pub ssl_params: ParameterStore,
    pub streams: Vec<UtteranceStreams>,
    pub am_fbk: ParameterStore,
    pub am_fused: ParameterStore,
    pub nbest: Vec<NBestList>,
    pub report: ExperimentReport,
}

struct Stopwatch {
    t: Instant,
    timings: BTreeMap<String, f64>,
}

impl Stopwatch {
    fn lap(&mut self, stage: &str) {
        let s = self.t.elapsed().as_secs_f64();
        info!("{stage}: {s:.1}s");
        self.timings.insert(stage.to_string(), s);
        self.t = Instant::now();
    }
}

fn train_system(
    name: &str,
    inputs: &[FeatureMatrix],
    labels: &[Vec<usize>],
    train_idx: &[usize],
    cfg: &Config,
    num_classes: usize,
) -> Result<(AmModel, ParameterStore, TrainReport)> {
    let dim = inputs[0].dim();
    let model = AmModel::new(cfg.am.splice.clone(), dim, num_classes)?;
    let data: Vec<(FeatureMatrix, Vec<usize>)> = train_idx
        .iter()
        .map(|&i| {
            let n = inputs[i].frames().min(labels[i].len());
            Ok((inputs[i].truncated(n)?, labels[i][..n].to_vec()))
        })
        .collect::<Result<_>>()?;
    let (params, report) = train_am(&data, &model, &cfg.am.train, None)?;
    info!("{name} AM loss {:.3} -> {:.3}", report.initial_loss, report.final_loss);
    Ok((model, params, report))
}

fn inversion_inputs(streams: &UtteranceStreams, artic: &FeatureMatrix) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let n = streams.bn.frames().min(artic.frames());
    Ok((streams.bn.truncated(n)?, artic.truncated(n)?))
}

/// Runs every stage and scores all systems on the two test subsets.
pub fn run_experiment(cfg: &Config) -> Result<Experiment> {
    cfg.validate()?;
    let mut clock = Stopwatch {
        t: Instant::now(),
        timings: BTreeMap::new(),
    };
    let mut training = BTreeMap::new();
    let corpus = gen_synth_corpus(&cfg.corpus)?;
    let vocab = &corpus.vocab;
    let lexicon = corpus.lexicon.clone().with_mode(cfg.joint.lexicon_mode);
    let lexicon = Lexicon {
        word_insertion_penalty: cfg.joint.word_insertion_penalty,
        ..lexicon
    };
    clock.lap("corpus");

    let train: Vec<&Utterance> = corpus.subset(Subset::Train).collect();
    let audio: Vec<AudioBuffer> = train.iter().map(|u| u.audio.clone()).collect();
    let (params, report) = pretrain(&audio, &cfg.encoder, &cfg.pretrain, init_encoder(&cfg.encoder, cfg.seed)?)?;
    info!("pretrain loss {:.3} -> {:.3}", report.initial_loss, report.final_loss);
    training.insert("pretrain".to_string(), report);
    clock.lap("pretrain");

    let labelled: Vec<(AudioBuffer, Vec<String>)> = train
        .iter()
        .map(|u| Ok((u.audio.clone(), corpus.tokens_of(&u.record)?)))
        .collect::<Result<_>>()?;
    let bn_cfg = &cfg.bottleneck;
    let (ssl_params, report) = finetune_ctc(
        &labelled,
        vocab,
        &cfg.encoder,
        Some(bn_cfg),
        cfg.finetune.scope,
        &cfg.finetune.train,
        params,
    )?;
    info!("fine-tune loss {:.3} -> {:.3}", report.initial_loss, report.final_loss);
    training.insert("finetune".to_string(), report);
    clock.lap("finetune");

    let streams: Vec<UtteranceStreams> = corpus
        .utterances
        .par_iter()
        .map(|u| extract_streams(&u.audio, &cfg.fbank, &cfg.encoder, bn_cfg, &ssl_params))
        .collect::<Result<_>>()?;
    clock.lap("extract");

    let train_idx: Vec<usize> = (0..corpus.utterances.len())
        .filter(|&i| corpus.utterances[i].record.subset == Subset::Train)
        .collect();
    let test_idx: Vec<usize> = (0..corpus.utterances.len())
        .filter(|&i| corpus.utterances[i].record.subset.is_test())
        .collect();
    let mut labels: Vec<Vec<usize>> = vec![Vec::new(); corpus.utterances.len()];
    for &i in &train_idx {
        let u = &corpus.utterances[i];
        let tokens = vocab.encode(&corpus.tokens_of(&u.record)?)?;
        labels[i] = frame_labels(&streams[i].fbank, &tokens, &streams[i].ssl, cfg.am.alignment, cfg.am.active_threshold)?;
    }

    let fbk_inputs: Vec<FeatureMatrix> = streams.iter().map(|s| s.fbank.clone()).collect();
    let fused_inputs: Vec<FeatureMatrix> = streams
        .iter()
        .map(|s| fuse_features(&[s.fbank.clone(), s.bn.clone()], s.fbank.frame_shift_us()))
        .collect::<Result<_>>()?;
    let (fbk_model, am_fbk, report) = train_system(SYS_FBK, &fbk_inputs, &labels, &train_idx, cfg, vocab.num_classes())?;
    training.insert(SYS_FBK.to_string(), report);
    let (fused_model, am_fused, report) =
        train_system(SYS_FUSED, &fused_inputs, &labels, &train_idx, cfg, vocab.num_classes())?;
    training.insert(SYS_FUSED.to_string(), report);
    clock.lap("train-am");

    let mut artic_system = None;
    if cfg.inversion.enabled {
        let pairs: Vec<(FeatureMatrix, FeatureMatrix)> = train_idx
            .iter()
            .filter_map(|&i| corpus.utterances[i].articulatory.as_ref().map(|a| inversion_inputs(&streams[i], a)))
            .collect::<Result<_>>()?;
        if pairs.is_empty() {
            return Err(Error::Corpus("no articulatory training data".into()));
        }
        let mdn_cfg = MdnConfig {
            input_dim: bn_cfg.d_bn,
            ..cfg.inversion.model.clone()
        };
        let (mdn_params, report) = train_inversion(&pairs, &mdn_cfg, &cfg.inversion.train, None)?;
        info!("inversion NLL {:.3} -> {:.3}", report.initial_loss, report.final_loss);
        training.insert("inversion".to_string(), report);
        let artic_inputs: Vec<FeatureMatrix> = streams
            .par_iter()
            .map(|s| {
                let artic = mdn_predict(&mdn_forward(&s.bn, &mdn_cfg, &mdn_params)?)?;
                fuse_features(&[s.fbank.clone(), s.bn.clone(), artic], s.fbank.frame_shift_us())
            })
            .collect::<Result<_>>()?;
        let (m, p, report) = train_system(SYS_ARTIC, &artic_inputs, &labels, &train_idx, cfg, vocab.num_classes())?;
        training.insert(SYS_ARTIC.to_string(), report);
        artic_system = Some((m, p, artic_inputs));
        clock.lap("inversion");
    }

    let ids: Vec<&str> = test_idx.iter().map(|&i| corpus.utterances[i].record.id.as_str()).collect();
    let posts = |model: &AmModel, params: &ParameterStore, inputs: &[FeatureMatrix]| -> Result<Vec<PosteriorStream>> {
        test_idx.par_iter().map(|&i| am_posteriors(&inputs[i], model, params)).collect()
    };
    let fbk_posts = posts(&fbk_model, &am_fbk, &fbk_inputs)?;
    let fused_posts = posts(&fused_model, &am_fused, &fused_inputs)?;
    let ssl_posts: Vec<PosteriorStream> = test_idx.iter().map(|&i| streams[i].ssl.clone()).collect();
    let mut hypotheses = BTreeMap::new();
    hypotheses.insert(SYS_FBK.to_string(), decode_all(ids.par_iter().copied().zip(&fbk_posts), &lexicon, vocab)?);
    hypotheses.insert(SYS_FUSED.to_string(), decode_all(ids.par_iter().copied().zip(&fused_posts), &lexicon, vocab)?);
    hypotheses.insert(SYS_SSL.to_string(), decode_all(ids.par_iter().copied().zip(&ssl_posts), &lexicon, vocab)?);
    if let Some((m, p, inputs)) = &artic_system {
        let artic_posts = posts(m, p, inputs)?;
        hypotheses.insert(SYS_ARTIC.to_string(), decode_all(ids.par_iter().copied().zip(&artic_posts), &lexicon, vocab)?);
    }

    let w = cfg.joint.combination_weights()?;
    let rw: RescoreWeights = cfg.rescore.weights;
    let passes: Vec<(NBestList, UttResult, UttResult)> = ids
        .par_iter()
        .zip(fused_posts.par_iter().zip(&ssl_posts))
        .map(|(&id, (am, ssl))| {
            let joint = combine_streams(am, ssl, &w, cfg.joint.mode)?;
            let first = decode_nbest(id, &joint, &lexicon, vocab, cfg.rescore.nbest)?;
            let scored = score_nbest_with_ssl(&first, ssl)?;
            let second = rescore(&scored, rw)?;
            let joint_hyp = UttResult {
                id: id.to_string(),
                hypothesis: first.best().map(|e| e.words.clone()).unwrap_or_default(),
            };
            let rescored_hyp = UttResult {
                id: id.to_string(),
                hypothesis: second.best.words.clone(),
            };
            Ok((second.rescored, joint_hyp, rescored_hyp))
        })
        .collect::<Result<_>>()?;
    let mut nbest = Vec::with_capacity(passes.len());
    let (mut joint_h, mut resc_h) = (Vec::new(), Vec::new());
    for (l, j, r) in passes {
        nbest.push(l);
        joint_h.push(j);
        resc_h.push(r);
    }
    hypotheses.insert(SYS_JOINT.to_string(), joint_h);
    hypotheses.insert(SYS_RESCORED.to_string(), resc_h);
    clock.lap("decode");

    let systems = hypotheses
        .iter()
        .map(|(k, h)| Ok((k.clone(), partition_report(h, &corpus.manifest)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let report = ExperimentReport {
        seed: cfg.seed,
        systems,
        hypotheses,
        training,
        timings: clock.timings,
    };
    Ok(Experiment {
        corpus,
        ssl_params,
        streams,
        am_fbk,
        am_fused,
        nbest,
        report,
    })
}
