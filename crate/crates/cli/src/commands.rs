use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ssl_hybrid::config::Config;
use ssl_hybrid::corpus::{gen_synth_corpus, Manifest, ManifestRecord, Subset};
use ssl_hybrid::ctc::{NBestList, PosteriorStream, TokenVocab};
use ssl_hybrid::eval::{partition_report, UttResult};
use ssl_hybrid::features::{fuse_features, read_features, write_features, FeatureMatrix};
use ssl_hybrid::frame_am::{am_posteriors, train_am, AmModel};
use ssl_hybrid::joint::{decode, decode_nbest, interpolate_with_mode, CombinationWeights, Hypothesis, Lexicon};
use ssl_hybrid::mdn::{mdn_forward, mdn_predict, train_inversion, MdnConfig};
use ssl_hybrid::params::ParameterStore;
use ssl_hybrid::pipeline::{extract_streams, frame_labels};
use ssl_hybrid::rescore::{rescore, score_nbest_with_ssl, RescoreWeights};
use ssl_hybrid::ssl::{finetune_ctc, init_encoder, pretrain};
use ssl_hybrid::training::TrainReport;

use crate::corpus_dir::{read_vocab, CorpusDir};
use crate::streams::{align_rates, paired_streams, read_stream, utt_files, FEATURE_EXT, POSTERIOR_EXT};
use crate::{Command, GlobalArgs, System};

const MODEL_FILE: &str = "model.json";
const PARAMS_FILE: &str = "params.bin";

/// One decoded utterance, as emitted by decode, joint-decode and rescore
/// and read back by score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypRecord {
    pub id: String,
    pub words: Vec<String>,
    /// Path or combined cost; absent when infinite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
    /// Rank of the chosen entry in the first-pass list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

impl HypRecord {
    fn from_hypothesis(id: &str, h: Hypothesis) -> Self {
        Self {
            id: id.to_string(),
            words: h.words,
            cost: h.cost.is_finite().then_some(h.cost),
            rank: None,
        }
    }
}

pub fn run(global: &GlobalArgs, command: Command) -> Result<()> {
    if let Some(jobs) = global.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let cfg = load_config(global)?;
    match command {
        Command::GenCorpus { out } => gen_corpus(&cfg, &out),
        Command::Pretrain { corpus, out } => run_pretrain(&cfg, &corpus, &out),
        Command::Finetune { corpus, params, out } => run_finetune(&cfg, &corpus, &params, &out),
        Command::ExtractBn { corpus, params, out } => extract_bn(&cfg, &corpus, &params, &out),
        Command::Invert { corpus, feats, out } => invert(&cfg, &corpus, &feats, &out),
        Command::TrainAm {
            corpus,
            feats,
            system,
            out,
            emit,
        } => run_train_am(&cfg, &corpus, &feats, system, &out, emit),
        Command::Decode {
            streams,
            lexicon,
            vocab,
            out,
        } => run_decode(&cfg, &streams, &lexicon, vocab.as_deref(), out.as_deref()),
        Command::JointDecode {
            streams,
            weights,
            lexicon,
            vocab,
            nbest,
            lists,
            out,
        } => {
            let weights = weights.unwrap_or_else(|| cfg.joint.weights.clone());
            let nbest = nbest.unwrap_or(cfg.rescore.nbest);
            let lex = JointArgs {
                lexicon: &lexicon,
                vocab: vocab.as_deref(),
            };
            run_joint_decode(&cfg, &streams, &weights, lex, nbest, lists.as_deref(), out.as_deref())
        }
        Command::Rescore {
            lists,
            ssl,
            alpha,
            beta,
            weights,
            rescored,
            out,
        } => {
            let w = match (alpha, beta, weights) {
                (Some(a), Some(b), _) => RescoreWeights::new(a, b)?,
                (_, _, Some(ratio)) => RescoreWeights::parse(&ratio)?,
                _ => cfg.rescore.weights,
            };
            run_rescore(&lists, &ssl, w, rescored.as_deref(), out.as_deref())
        }
        Command::Score { hyps, manifest, out } => run_score(&hyps, &manifest, out.as_deref()),
    }
}

fn load_config(global: &GlobalArgs) -> Result<Config> {
    let mut cfg = match &global.config {
        Some(path) => Config::load(path).with_context(|| format!("loading config {}", path.display()))?,
        None => Config::default(),
    };
    if let Some(seed) = global.seed {
        cfg.apply_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// JSON lines to a file, or stdout.
fn write_lines<T: Serialize>(items: &[T], out: Option<&Path>) -> Result<()> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item)?);
        text.push('\n');
    }
    match out {
        Some(path) => write_text(path, &text),
        None => {
            io::stdout().lock().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn print_report(stage: &str, r: &TrainReport) -> Result<()> {
    info!("{stage}: loss {:.4} -> {:.4}", r.initial_loss, r.final_loss);
    println!("{}", serde_json::to_string(r)?);
    Ok(())
}

fn save_params(p: &ParameterStore, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    Ok(p.save(path)?)
}

fn load_params(path: &Path) -> Result<ParameterStore> {
    ParameterStore::load(path).with_context(|| format!("loading parameters {}", path.display()))
}

fn gen_corpus(cfg: &Config, out: &Path) -> Result<()> {
    let corpus = gen_synth_corpus(&cfg.corpus)?;
    create_dir(out)?;
    corpus.write(out)?;
    cfg.save(&out.join("config.json"))?;
    info!("wrote {} utterances to {}", corpus.utterances.len(), out.display());
    Ok(())
}

fn train_audio(corpus: &CorpusDir) -> Result<Vec<&ManifestRecord>> {
    let train = corpus.records(Some(Subset::Train));
    if train.is_empty() {
        bail!("corpus has no training utterances");
    }
    Ok(train)
}

fn run_pretrain(cfg: &Config, corpus: &Path, out: &Path) -> Result<()> {
    let corpus = CorpusDir::open(corpus)?;
    let audio = train_audio(&corpus)?
        .par_iter()
        .map(|r| corpus.audio(r))
        .collect::<Result<Vec<_>>>()?;
    let init = init_encoder(&cfg.encoder, cfg.seed)?;
    let (params, report) = pretrain(&audio, &cfg.encoder, &cfg.pretrain, init)?;
    save_params(&params, out)?;
    print_report("pretrain", &report)
}

fn run_finetune(cfg: &Config, corpus: &Path, params: &Path, out: &Path) -> Result<()> {
    let corpus = CorpusDir::open(corpus)?;
    let data = train_audio(&corpus)?
        .par_iter()
        .map(|r| Ok((corpus.audio(r)?, corpus.tokens(r)?)))
        .collect::<Result<Vec<_>>>()?;
    let bn = cfg.finetune.with_bottleneck.then_some(&cfg.bottleneck);
    let (params, report) = finetune_ctc(
        &data,
        &corpus.vocab,
        &cfg.encoder,
        bn,
        cfg.finetune.scope,
        &cfg.finetune.train,
        load_params(params)?,
    )?;
    save_params(&params, out)?;
    print_report("finetune", &report)
}

fn stream_dir(feats: &Path, name: &str) -> PathBuf {
    feats.join(name)
}

fn feature_path(feats: &Path, name: &str, id: &str) -> PathBuf {
    stream_dir(feats, name).join(format!("{id}.{FEATURE_EXT}"))
}

fn posterior_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.{POSTERIOR_EXT}"))
}

fn extract_bn(cfg: &Config, corpus: &Path, params: &Path, out: &Path) -> Result<()> {
    if !cfg.finetune.with_bottleneck {
        bail!("extract-bn needs a model fine-tuned with the bottleneck adapter");
    }
    let corpus = CorpusDir::open(corpus)?;
    let params = load_params(params)?;
    for name in ["fbk", "bn", "w2v"] {
        create_dir(&stream_dir(out, name))?;
    }
    corpus.records(None).par_iter().try_for_each(|r| -> Result<()> {
        let s = extract_streams(&corpus.audio(r)?, &cfg.fbank, &cfg.encoder, &cfg.bottleneck, &params)?;
        write_features(&s.fbank, &feature_path(out, "fbk", &r.id))?;
        write_features(&s.bn, &feature_path(out, "bn", &r.id))?;
        s.ssl.write(&posterior_path(&stream_dir(out, "w2v"), &r.id))?;
        Ok(())
    })?;
    info!("wrote streams for {} utterances", corpus.manifest.len());
    Ok(())
}

fn read_feat(feats: &Path, name: &str, id: &str) -> Result<FeatureMatrix> {
    let path = feature_path(feats, name, id);
    read_features(&path).with_context(|| format!("reading {}", path.display()))
}

fn mdn_config(cfg: &Config) -> MdnConfig {
    MdnConfig {
        input_dim: cfg.bottleneck.d_bn,
        ..cfg.inversion.model.clone()
    }
}

fn invert(cfg: &Config, corpus: &Path, feats: &Path, out: &Path) -> Result<()> {
    let corpus = CorpusDir::open(corpus)?;
    let mut pairs = Vec::new();
    for r in corpus.records(Some(Subset::Train)) {
        if let Some(artic) = corpus.articulatory(r)? {
            let bn = read_feat(feats, "bn", &r.id)?;
            let n = bn.frames().min(artic.frames());
            pairs.push((bn.truncated(n)?, artic.truncated(n)?));
        }
    }
    if pairs.is_empty() {
        bail!("no training utterance has articulatory data");
    }
    let model = mdn_config(cfg);
    let (params, report) = train_inversion(&pairs, &model, &cfg.inversion.train, None)?;
    create_dir(out)?;
    write_text(&out.join(MODEL_FILE), &serde_json::to_string_pretty(&model)?)?;
    save_params(&params, &out.join(PARAMS_FILE))?;
    create_dir(&stream_dir(feats, "artic"))?;
    corpus.records(None).par_iter().try_for_each(|r| -> Result<()> {
        let bn = read_feat(feats, "bn", &r.id)?;
        let pred = mdn_predict(&mdn_forward(&bn, &model, &params)?)?;
        write_features(&pred, &feature_path(feats, "artic", &r.id))?;
        Ok(())
    })?;
    print_report("invert", &report)
}

fn system_input(feats: &Path, system: System, id: &str) -> Result<FeatureMatrix> {
    let fbank = read_feat(feats, "fbk", id)?;
    let mut parts = vec![fbank.clone()];
    if matches!(system, System::FbkBn | System::FbkBnArtic) {
        parts.push(read_feat(feats, "bn", id)?);
    }
    if system == System::FbkBnArtic {
        parts.push(read_feat(feats, "artic", id)?);
    }
    if parts.len() == 1 {
        return Ok(fbank);
    }
    Ok(fuse_features(&parts, fbank.frame_shift_us())?)
}

#[derive(Serialize, Deserialize)]
struct AmFile {
    system: String,
    model: AmModel,
}

fn run_train_am(cfg: &Config, corpus: &Path, feats: &Path, system: System, out: &Path, emit: bool) -> Result<()> {
    let corpus = CorpusDir::open(corpus)?;
    let train = train_audio(&corpus)?;
    let data: Vec<(FeatureMatrix, Vec<usize>)> = train
        .par_iter()
        .map(|r| {
            let input = system_input(feats, system, &r.id)?;
            let fbank = read_feat(feats, "fbk", &r.id)?;
            let ssl = read_stream(&posterior_path(&stream_dir(feats, "w2v"), &r.id))?;
            let tokens = corpus.vocab.encode(&corpus.tokens(r)?)?;
            let labels = frame_labels(&fbank, &tokens, &ssl, cfg.am.alignment, cfg.am.active_threshold)?;
            let n = input.frames().min(labels.len());
            Ok((input.truncated(n)?, labels[..n].to_vec()))
        })
        .collect::<Result<_>>()?;
    let model = AmModel::new(cfg.am.splice.clone(), data[0].0.dim(), corpus.vocab.num_classes())?;
    let (params, report) = train_am(&data, &model, &cfg.am.train, None)?;
    create_dir(out)?;
    let name = system.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
    let file = AmFile { system: name, model };
    write_text(&out.join(MODEL_FILE), &serde_json::to_string_pretty(&file)?)?;
    save_params(&params, &out.join(PARAMS_FILE))?;
    if emit {
        let post = out.join("post");
        create_dir(&post)?;
        let test: Vec<&ManifestRecord> = corpus.records(None).into_iter().filter(|r| r.subset.is_test()).collect();
        test.par_iter().try_for_each(|r| -> Result<()> {
            let mut s = am_posteriors(&system_input(feats, system, &r.id)?, &file.model, &params)?;
            s = PosteriorStream::new(s.logp().clone(), s.frame_shift_us(), file.system.clone())?;
            s.write(&posterior_path(&post, &r.id))?;
            Ok(())
        })?;
    }
    print_report("train-am", &report)
}

fn decoding_lexicon(cfg: &Config, lexicon: &Path, vocab: Option<&Path>) -> Result<(Lexicon, TokenVocab)> {
    let lex = Lexicon::load(lexicon).with_context(|| format!("loading lexicon {}", lexicon.display()))?;
    let lex = Lexicon {
        word_insertion_penalty: cfg.joint.word_insertion_penalty,
        ..lex.with_mode(cfg.joint.lexicon_mode)
    };
    let vocab_path = match vocab {
        Some(p) => p.to_path_buf(),
        None => lexicon.with_file_name("vocab.json"),
    };
    Ok((lex, read_vocab(&vocab_path)?))
}

fn run_decode(cfg: &Config, streams: &Path, lexicon: &Path, vocab: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (lex, vocab) = decoding_lexicon(cfg, lexicon, vocab)?;
    let streams = paired_streams(&[streams.to_path_buf()])?;
    let hyps: Vec<HypRecord> = streams
        .par_iter()
        .map(|(id, s)| Ok(HypRecord::from_hypothesis(id, decode(&s[0], &lex, &vocab)?)))
        .collect::<Result<_>>()?;
    write_lines(&hyps, out)
}

struct JointArgs<'a> {
    lexicon: &'a Path,
    vocab: Option<&'a Path>,
}

fn run_joint_decode(
    cfg: &Config,
    streams: &[PathBuf],
    weights: &str,
    lex: JointArgs,
    nbest: usize,
    lists: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let w = CombinationWeights::parse(weights)?;
    if w.len() != streams.len() {
        bail!("{} weights for {} streams", w.len(), streams.len());
    }
    if nbest == 0 {
        bail!("--nbest must be at least 1");
    }
    info!("joint weights {} normalized to {:?}", w.ratio_string(), w.normalized());
    let (lexicon, vocab) = decoding_lexicon(cfg, lex.lexicon, lex.vocab)?;
    let paired = paired_streams(streams)?;
    let results: Vec<(HypRecord, NBestList)> = paired
        .par_iter()
        .map(|(id, s)| {
            let joint = interpolate_with_mode(&align_rates(s)?, &w, cfg.joint.mode)?;
            let hyp = decode(&joint, &lexicon, &vocab)?;
            let list = decode_nbest(id, &joint, &lexicon, &vocab, nbest)?;
            Ok((HypRecord::from_hypothesis(id, hyp), list))
        })
        .collect::<Result<_>>()?;
    let (hyps, nbests): (Vec<HypRecord>, Vec<NBestList>) = results.into_iter().unzip();
    if let Some(path) = lists {
        write_lines(&nbests, Some(path))?;
    }
    write_lines(&hyps, out)
}

fn run_rescore(lists: &Path, ssl: &Path, w: RescoreWeights, rescored: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let lists: Vec<NBestList> = read_lines(lists)?;
    let files = utt_files(ssl, POSTERIOR_EXT)?;
    let single = ssl.is_file() && lists.len() == 1;
    let results: Vec<(HypRecord, NBestList)> = lists
        .par_iter()
        .map(|l| {
            let path = if single {
                files.values().next()
            } else {
                files.get(&l.utt_id)
            };
            let path = path.ok_or_else(|| anyhow!("no SSL stream for {}", l.utt_id))?;
            let scored = score_nbest_with_ssl(l, &read_stream(path)?)?;
            let r = rescore(&scored, w)?;
            let hyp = HypRecord {
                id: l.utt_id.clone(),
                words: r.best.words.clone(),
                cost: r.best.combined.is_finite().then_some(r.best.combined),
                rank: Some(r.best_index),
            };
            Ok((hyp, r.rescored))
        })
        .collect::<Result<_>>()?;
    let (hyps, lists): (Vec<HypRecord>, Vec<NBestList>) = results.into_iter().unzip();
    if let Some(path) = rescored {
        write_lines(&lists, Some(path))?;
    }
    write_lines(&hyps, out)
}

fn run_score(hyps: &Path, manifest: &Path, out: Option<&Path>) -> Result<()> {
    let records: Vec<HypRecord> = read_lines(hyps)?;
    let manifest = Manifest::load(manifest)?;
    let mut seen = BTreeMap::new();
    for r in &records {
        if seen.insert(r.id.as_str(), ()).is_some() {
            bail!("utterance {} scored twice", r.id);
        }
    }
    let results: Vec<UttResult> = records
        .into_iter()
        .map(|r| UttResult {
            id: r.id,
            hypothesis: r.words,
        })
        .collect();
    let report = partition_report(&results, &manifest)?;
    print!("{}", report.to_table());
    if let Some(path) = out {
        write_text(path, &report.to_json()?)?;
    }
    Ok(())
}
