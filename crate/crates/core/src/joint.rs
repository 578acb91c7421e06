//! Frame-level posterior combination and lexicon-constrained Viterbi search.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctc::{NBestEntry, NBestList, PosteriorStream, TokenVocab, BLANK};
use crate::error::{Error, Result};
use crate::graph::{log_sum_exp, Mat};

/// System key of first-pass decoder costs in N-best lists.
pub const FIRST_PASS_KEY: &str = "tdnn";

/// Non-negative per-system weights, normalised to sum to one before use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinationWeights {
    raw: Vec<f64>,
}

impl CombinationWeights {
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Config("at least one weight required".into()));
        }
        if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("weights must be finite and non-negative: {raw:?}")));
        }
        if raw.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("all combination weights are zero".into()));
        }
        Ok(Self { raw })
    }

    /// Parses ratio syntax such as `3:2` or `9:1:5`.
    pub fn parse(ratio: &str) -> Result<Self> {
        let raw = ratio
            .split(':')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad weight {p:?} in ratio {ratio:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(raw)
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn normalized(&self) -> Vec<f64> {
        let sum: f64 = self.raw.iter().sum();
        self.raw.iter().map(|w| w / sum).collect()
    }

    pub fn ratio_string(&self) -> String {
        self.raw.iter().map(|w| format!("{w}")).collect::<Vec<_>>().join(":")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationMode {
    /// Weighted sum of probabilities.
    #[default]
    Linear,
    /// Weighted sum of log-probabilities, renormalised per frame.
    LogLinear,
}

fn check_compatible(streams: &[PosteriorStream], w: &CombinationWeights) -> Result<()> {
    if streams.is_empty() {
        return Err(Error::Config("no posterior streams to combine".into()));
    }
    if streams.len() != w.len() {
        return Err(Error::Config(format!("{} streams but {} weights", streams.len(), w.len())));
    }
    let first = &streams[0];
    for s in &streams[1..] {
        if s.frames() != first.frames() || s.num_classes() != first.num_classes() {
            return Err(Error::Shape(format!(
                "stream {:?} is {}x{}, stream {:?} is {}x{}",
                first.source(),
                first.frames(),
                first.num_classes(),
                s.source(),
                s.frames(),
                s.num_classes()
            )));
        }
        if s.frame_shift_us() != first.frame_shift_us() {
            return Err(Error::Config(format!(
                "frame shifts differ: {} vs {} us",
                first.frame_shift_us(),
                s.frame_shift_us()
            )));
        }
    }
    Ok(())
}

pub fn interpolate_posteriors(streams: &[PosteriorStream], w: &CombinationWeights) -> Result<PosteriorStream> {
    interpolate_with_mode(streams, w, CombinationMode::Linear)
}

/// Combines equally shaped streams frame by frame. Zero-weight streams are
/// skipped, so a single active stream is returned unchanged.
pub fn interpolate_with_mode(
    streams: &[PosteriorStream],
    w: &CombinationWeights,
    mode: CombinationMode,
) -> Result<PosteriorStream> {
    check_compatible(streams, w)?;
    let norm = w.normalized();
    let active: Vec<(usize, f64)> = norm.iter().copied().enumerate().filter(|(_, w)| *w > 0.0).collect();
    let source = active
        .iter()
        .map(|(i, _)| streams[*i].source())
        .collect::<Vec<_>>()
        .join("+");
    if active.len() == 1 {
        return Ok(streams[active[0].0].clone());
    }
    let (t, v) = (streams[0].frames(), streams[0].num_classes());
    let out = match mode {
        CombinationMode::Linear => {
            let log_w: Vec<(usize, f64)> = active.iter().map(|&(i, w)| (i, w.ln())).collect();
            Mat::from_shape_fn((t, v), |(r, c)| {
                log_sum_exp(log_w.iter().map(|&(i, lw)| lw + streams[i].logp()[[r, c]]))
            })
        }
        CombinationMode::LogLinear => {
            let scores = Mat::from_shape_fn((t, v), |(r, c)| {
                active.iter().map(|&(i, w)| w * streams[i].logp()[[r, c]]).sum()
            });
            crate::graph::log_softmax_rows(&scores)
        }
    };
    // renormalise against rounding so rows log-sum-exp to zero
    let out = crate::graph::log_softmax_rows(&out);
    PosteriorStream::new(out, streams[0].frame_shift_us(), source)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LexiconMode {
    #[default]
    IsolatedWord,
    WordLoop,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconWord {
    pub word: String,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub words: Vec<LexiconWord>,
    #[serde(default)]
    pub mode: LexiconMode,
    /// Cost added per word entry in word-loop mode.
    #[serde(default)]
    pub word_insertion_penalty: f64,
}

impl Lexicon {
    pub fn new(words: Vec<LexiconWord>, mode: LexiconMode, word_insertion_penalty: f64) -> Result<Self> {
        let lex = Self {
            words,
            mode,
            word_insertion_penalty,
        };
        lex.validate()?;
        Ok(lex)
    }

    pub fn validate(&self) -> Result<()> {
        if self.words.is_empty() {
            return Err(Error::Config("lexicon is empty".into()));
        }
        let mut seen = HashSet::new();
        for w in &self.words {
            if w.tokens.is_empty() {
                return Err(Error::Config(format!("word {:?} has no tokens", w.word)));
            }
            if !seen.insert(w.word.as_str()) {
                return Err(Error::Config(format!("duplicate word {:?}", w.word)));
            }
        }
        if self.word_insertion_penalty.is_nan() || self.word_insertion_penalty < 0.0 {
            return Err(Error::Config("word insertion penalty must be >= 0".into()));
        }
        Ok(())
    }

    pub fn with_mode(mut self, mode: LexiconMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w.word == word)
    }

    pub fn token_ids(&self, vocab: &TokenVocab) -> Result<Vec<Vec<usize>>> {
        self.words.iter().map(|w| vocab.encode(&w.tokens)).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lex: Lexicon = serde_json::from_str(&text)?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub words: Vec<String>,
    pub tokens: Vec<String>,
    /// Negative log path score, including word penalties.
    pub cost: f64,
}

/// Best-path cost of `labels` under CTC topology: optional blanks around
/// and between tokens, self-loops, mandatory blank between repeated tokens.
/// `+inf` when the labels do not fit.
pub fn best_path_cost(logp: &Mat, labels: &[usize]) -> f64 {
    let t_len = logp.nrows();
    let mut ext = vec![BLANK];
    for &k in labels {
        ext.push(k);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let mut prev = vec![f64::INFINITY; s_len];
    prev[0] = -logp[[0, ext[0]]];
    if s_len > 1 {
        prev[1] = -logp[[0, ext[1]]];
    }
    let mut cur = vec![f64::INFINITY; s_len];
    for t in 1..t_len {
        for s in 0..s_len {
            let mut best = prev[s];
            if s >= 1 {
                best = best.min(prev[s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                best = best.min(prev[s - 2]);
            }
            cur[s] = best - logp[[t, ext[s]]];
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let mut end = prev[s_len - 1];
    if s_len > 1 {
        end = end.min(prev[s_len - 2]);
    }
    if end.is_nan() {
        f64::INFINITY
    } else {
        end
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordScore {
    pub index: usize,
    pub cost: f64,
}

/// Every lexicon word scored by its best path, sorted by cost with ties
/// going to the lower lexicon index. Unalignable words are omitted.
pub fn rank_words(stream: &PosteriorStream, lexicon: &Lexicon, vocab: &TokenVocab) -> Result<Vec<WordScore>> {
    check_vocab(stream, vocab)?;
    let ids = lexicon.token_ids(vocab)?;
    let mut scores: Vec<WordScore> = ids
        .iter()
        .enumerate()
        .map(|(index, labels)| WordScore {
            index,
            cost: best_path_cost(stream.logp(), labels),
        })
        .filter(|s| s.cost.is_finite())
        .collect();
    if scores.is_empty() {
        return Err(Error::NoAlignment {
            frames: stream.frames(),
        });
    }
    scores.sort_by(|a, b| a.cost.total_cmp(&b.cost).then(a.index.cmp(&b.index)));
    Ok(scores)
}

fn check_vocab(stream: &PosteriorStream, vocab: &TokenVocab) -> Result<()> {
    if stream.num_classes() != vocab.num_classes() {
        return Err(Error::Shape(format!(
            "stream has {} classes, vocabulary {}",
            stream.num_classes(),
            vocab.num_classes()
        )));
    }
    Ok(())
}

fn hypothesis(lexicon: &Lexicon, words: &[usize], cost: f64) -> Hypothesis {
    Hypothesis {
        words: words.iter().map(|&w| lexicon.words[w].word.clone()).collect(),
        tokens: words.iter().flat_map(|&w| lexicon.words[w].tokens.iter().cloned()).collect(),
        cost,
    }
}

pub fn viterbi_isolated(stream: &PosteriorStream, lexicon: &Lexicon, vocab: &TokenVocab) -> Result<Hypothesis> {
    let best = &rank_words(stream, lexicon, vocab)?[0];
    Ok(hypothesis(lexicon, &[best.index], best.cost))
}

#[derive(Clone, Copy, Debug)]
enum LoopState {
    Silence,
    /// Token position `pos` of word `word`.
    Token { word: usize, pos: usize },
    /// Blank between two tokens of a word.
    Gap,
}

/// Viterbi over a loop of word models sharing one silence (blank) state,
/// charging `word_insertion_penalty` on every word entry. Zero words (all
/// silence) is a valid result.
pub fn word_loop_decode(stream: &PosteriorStream, lexicon: &Lexicon, vocab: &TokenVocab) -> Result<Hypothesis> {
    check_vocab(stream, vocab)?;
    let ids = lexicon.token_ids(vocab)?;
    let penalty = lexicon.word_insertion_penalty;
    let mut states = vec![LoopState::Silence];
    let mut first = Vec::with_capacity(ids.len());
    let mut last = Vec::with_capacity(ids.len());
    let mut index: BTreeMap<(usize, usize, bool), usize> = BTreeMap::new();
    for (w, labels) in ids.iter().enumerate() {
        for pos in 0..labels.len() {
            index.insert((w, pos, false), states.len());
            states.push(LoopState::Token { word: w, pos });
            if pos + 1 < labels.len() {
                index.insert((w, pos, true), states.len());
                states.push(LoopState::Gap);
            }
        }
        first.push(index[&(w, 0, false)]);
        last.push(index[&(w, labels.len() - 1, false)]);
    }
    let class_of = |s: &LoopState| match *s {
        LoopState::Silence | LoopState::Gap => BLANK,
        LoopState::Token { word, pos } => ids[word][pos],
    };
    // predecessors: (state, extra cost, is word entry)
    let mut preds: Vec<Vec<(usize, f64, bool)>> = vec![Vec::new(); states.len()];
    preds[0].push((0, 0.0, false));
    for (w, labels) in ids.iter().enumerate() {
        preds[0].push((last[w], 0.0, false));
        for (pos, &label) in labels.iter().enumerate() {
            let s = index[&(w, pos, false)];
            preds[s].push((s, 0.0, false));
            if pos == 0 {
                preds[s].push((0, penalty, true));
                for (u, ul) in ids.iter().enumerate() {
                    if *ul.last().unwrap() != label {
                        preds[s].push((last[u], penalty, true));
                    }
                }
            } else {
                let gap = index[&(w, pos - 1, true)];
                preds[s].push((gap, 0.0, false));
                if labels[pos - 1] != label {
                    preds[s].push((index[&(w, pos - 1, false)], 0.0, false));
                }
            }
            if pos + 1 < labels.len() {
                let gap = index[&(w, pos, true)];
                preds[gap].push((gap, 0.0, false));
                preds[gap].push((s, 0.0, false));
            }
        }
    }
    let logp = stream.logp();
    let t_len = logp.nrows();
    let n = states.len();
    let mut cost = vec![f64::INFINITY; n];
    cost[0] = -logp[[0, BLANK]];
    for &f in &first {
        cost[f] = penalty - logp[[0, class_of(&states[f])]];
    }
    let mut back = vec![vec![usize::MAX; n]; t_len];
    let mut next = vec![f64::INFINITY; n];
    for t in 1..t_len {
        for s in 0..n {
            let mut best = (f64::INFINITY, usize::MAX);
            for &(p, extra, _) in &preds[s] {
                let c = cost[p] + extra;
                if c < best.0 || (c == best.0 && p < best.1) {
                    best = (c, p);
                }
            }
            next[s] = best.0 - logp[[t, class_of(&states[s])]];
            back[t][s] = best.1;
        }
        std::mem::swap(&mut cost, &mut next);
    }
    let mut end = (cost[0], 0);
    for &l in &last {
        if cost[l] < end.0 {
            end = (cost[l], l);
        }
    }
    if !end.0.is_finite() {
        return Err(Error::NoAlignment { frames: t_len });
    }
    // walk back, recording a word whenever a path enters its first token from elsewhere
    let mut words = Vec::new();
    let mut s = end.1;
    for t in (0..t_len).rev() {
        let prev = if t == 0 { usize::MAX } else { back[t][s] };
        if let LoopState::Token { word, pos: 0 } = states[s] {
            if t == 0 || prev != s {
                words.push(word);
            }
        }
        s = prev;
    }
    words.reverse();
    Ok(hypothesis(lexicon, &words, end.0))
}

pub fn decode(stream: &PosteriorStream, lexicon: &Lexicon, vocab: &TokenVocab) -> Result<Hypothesis> {
    match lexicon.mode {
        LexiconMode::IsolatedWord => viterbi_isolated(stream, lexicon, vocab),
        LexiconMode::WordLoop => word_loop_decode(stream, lexicon, vocab),
    }
}

/// First-pass N-best list: in isolated-word mode the `n` best words, in
/// word-loop mode the single best sequence. Costs go under `"tdnn"`.
pub fn decode_nbest(
    utt_id: &str,
    stream: &PosteriorStream,
    lexicon: &Lexicon,
    vocab: &TokenVocab,
    n: usize,
) -> Result<NBestList> {
    let hyps: Vec<Hypothesis> = match lexicon.mode {
        LexiconMode::IsolatedWord => rank_words(stream, lexicon, vocab)?
            .into_iter()
            .take(n.max(1))
            .map(|s| hypothesis(lexicon, &[s.index], s.cost))
            .collect(),
        LexiconMode::WordLoop => vec![word_loop_decode(stream, lexicon, vocab)?],
    };
    let entries = hyps
        .into_iter()
        .map(|h| {
            Ok(NBestEntry {
                tokens: vocab.encode(&h.tokens)?,
                words: h.words,
                costs: BTreeMap::from([(FIRST_PASS_KEY.to_string(), h.cost)]),
                combined: h.cost,
            })
        })
        .collect::<Result<_>>()?;
    Ok(NBestList {
        utt_id: utt_id.to_string(),
        entries,
    })
}

/// Interpolate, then decode according to the lexicon mode.
pub fn joint_decode(
    streams: &[PosteriorStream],
    w: &CombinationWeights,
    lexicon: &Lexicon,
    vocab: &TokenVocab,
) -> Result<Hypothesis> {
    decode(&interpolate_posteriors(streams, w)?, lexicon, vocab)
}
