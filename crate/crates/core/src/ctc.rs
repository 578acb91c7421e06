//! Connectionist temporal classification over per-frame log-posteriors.
//!
//! All arithmetic is in the log domain with `-inf` propagation. The blank
//! symbol is always class 0; lexical tokens occupy classes `1..=V`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::graph::{log_add, log_sum_exp, Mat};

pub const BLANK: usize = 0;
pub const BLANK_SYMBOL: &str = "<blank>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocab {
    /// Lexical tokens in class order; class `i + 1` is `tokens[i]`.
    tokens: Vec<String>,
}

impl TokenVocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for t in &tokens {
            if t == BLANK_SYMBOL {
                return Err(Error::Config("blank cannot be a lexical token".into()));
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens })
    }

    pub fn blank_id(&self) -> usize {
        BLANK
    }

    /// Number of lexical tokens `V` (the posterior width is `V + 1`).
    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_classes(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .map(|i| i + 1)
            .ok_or_else(|| Error::OutOfVocabulary {
                token: token.to_string(),
            })
    }

    pub fn symbol(&self, id: usize) -> &str {
        if id == BLANK {
            BLANK_SYMBOL
        } else {
            &self.tokens[id - 1]
        }
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.symbol(i).to_string()).collect()
    }
}

/// `T x (V+1)` per-frame log-probabilities from one acoustic model.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorStream {
    logp: Mat,
    frame_shift_us: u32,
    source: String,
}

impl PosteriorStream {
    pub const ROW_TOLERANCE: f64 = 1e-6;

    pub fn new(logp: Mat, frame_shift_us: u32, source: impl Into<String>) -> Result<Self> {
        if logp.nrows() == 0 || logp.ncols() < 2 {
            return Err(Error::Shape(format!(
                "posterior stream needs >=1 frame and >=2 classes, got {:?}",
                logp.dim()
            )));
        }
        if frame_shift_us == 0 {
            return Err(Error::Config("frame shift must be positive".into()));
        }
        for (t, row) in logp.rows().into_iter().enumerate() {
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::NonFinite(format!("posterior row {t}")));
            }
            let lse = log_sum_exp(row.iter().copied());
            if (lse).abs() > Self::ROW_TOLERANCE {
                return Err(Error::InvalidDistribution(format!(
                    "posterior row {t} log-sum-exps to {lse}"
                )));
            }
        }
        Ok(Self {
            logp,
            frame_shift_us,
            source: source.into(),
        })
    }

    /// Normalises arbitrary per-frame log scores (e.g. logits) row-wise.
    pub fn from_log_scores(scores: &Mat, frame_shift_us: u32, source: impl Into<String>) -> Result<Self> {
        Self::new(crate::graph::log_softmax_rows(scores), frame_shift_us, source)
    }

    pub fn logp(&self) -> &Mat {
        &self.logp
    }

    pub fn frames(&self) -> usize {
        self.logp.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.logp.ncols()
    }

    pub fn frame_shift_us(&self) -> u32 {
        self.frame_shift_us
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn truncated(&self, frames: usize) -> Self {
        let frames = frames.clamp(1, self.frames());
        Self {
            logp: self.logp.slice(ndarray::s![..frames, ..]).to_owned(),
            frame_shift_us: self.frame_shift_us,
            source: self.source.clone(),
        }
    }

    /// Frame-rate change by integer factor (row duplication or decimation).
    pub fn resample(&self, target_shift_us: u32) -> Result<Self> {
        if target_shift_us == self.frame_shift_us {
            return Ok(self.clone());
        }
        let ratio_ok = self.frame_shift_us % target_shift_us == 0 || target_shift_us % self.frame_shift_us == 0;
        if !ratio_ok {
            return Err(Error::NonIntegerRatio {
                from_us: self.frame_shift_us,
                to_us: target_shift_us,
            });
        }
        let rows: Vec<usize> = if self.frame_shift_us > target_shift_us {
            let k = (self.frame_shift_us / target_shift_us) as usize;
            (0..self.frames() * k).map(|r| r / k).collect()
        } else {
            let k = (target_shift_us / self.frame_shift_us) as usize;
            (0..self.frames()).step_by(k).collect()
        };
        Ok(Self {
            logp: self.logp.select(ndarray::Axis(0), &rows),
            frame_shift_us: target_shift_us,
            source: self.source.clone(),
        })
    }

    /// `f32` container form; `-inf` entries are not representable.
    pub fn to_features(&self) -> Result<FeatureMatrix> {
        FeatureMatrix::from_f64(&self.logp, self.frame_shift_us, self.source.clone())
    }

    /// Inverse of [`to_features`](Self::to_features). Rows are renormalised
    /// in `f64` to absorb the `f32` rounding of the container.
    pub fn from_features(f: &FeatureMatrix) -> Result<Self> {
        Self::from_log_scores(&f.to_f64(), f.frame_shift_us(), f.label())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::features::write_features(&self.to_features()?, path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_features(&crate::features::read_features(path)?)
    }
}

mod cost_serde {
    //! JSON has no infinity; `+inf` costs travel as `null`.
    use serde::{Deserialize, Deserializer, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }

    pub mod map {
        use super::*;
        use serde::ser::SerializeMap;

        pub fn serialize<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
            let mut map = s.serialize_map(Some(m.len()))?;
            for (k, v) in m {
                let v = if v.is_finite() { Some(*v) } else { None };
                map.serialize_entry(k, &v)?;
            }
            map.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
            let raw = BTreeMap::<String, Option<f64>>::deserialize(d)?;
            Ok(raw
                .into_iter()
                .map(|(k, v)| (k, v.unwrap_or(f64::INFINITY)))
                .collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestEntry {
    pub tokens: Vec<usize>,
    pub words: Vec<String>,
    /// Negative log score per system.
    #[serde(with = "cost_serde::map")]
    pub costs: BTreeMap<String, f64>,
    #[serde(with = "cost_serde")]
    pub combined: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    pub utt_id: String,
    pub entries: Vec<NBestEntry>,
}

impl NBestList {
    pub fn best(&self) -> Option<&NBestEntry> {
        self.entries.first()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Number of frames the shortest CTC path for `target` needs.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(logp: &Mat, target: &[usize]) -> Result<()> {
    let v = logp.ncols();
    if let Some(&bad) = target.iter().find(|&&k| k == BLANK || k >= v) {
        return Err(Error::LabelOutOfRange { label: bad, classes: v });
    }
    if min_frames(target) > logp.nrows() {
        return Err(Error::Unsatisfiable {
            target_len: target.len(),
            frames: logp.nrows(),
        });
    }
    Ok(())
}

fn extended(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &k in target {
        ext.push(k);
        ext.push(BLANK);
    }
    ext
}

fn forward_lattice(logp: &Mat, ext: &[usize]) -> Mat {
    let (t_len, s_len) = (logp.nrows(), ext.len());
    let mut alpha = Mat::from_elem((t_len, s_len), f64::NEG_INFINITY);
    alpha[[0, 0]] = logp[[0, ext[0]]];
    if s_len > 1 {
        alpha[[0, 1]] = logp[[0, ext[1]]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[[t - 1, s]];
            if s >= 1 {
                a = log_add(a, alpha[[t - 1, s - 1]]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                a = log_add(a, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = a + logp[[t, ext[s]]];
        }
    }
    alpha
}

fn backward_lattice(logp: &Mat, ext: &[usize]) -> Mat {
    let (t_len, s_len) = (logp.nrows(), ext.len());
    let mut beta = Mat::from_elem((t_len, s_len), f64::NEG_INFINITY);
    beta[[t_len - 1, s_len - 1]] = logp[[t_len - 1, ext[s_len - 1]]];
    if s_len > 1 {
        beta[[t_len - 1, s_len - 2]] = logp[[t_len - 1, ext[s_len - 2]]];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[[t + 1, s]];
            if s + 1 < s_len {
                b = log_add(b, beta[[t + 1, s + 1]]);
            }
            if s + 2 < s_len && ext[s] != BLANK && ext[s] != ext[s + 2] {
                b = log_add(b, beta[[t + 1, s + 2]]);
            }
            beta[[t, s]] = b + logp[[t, ext[s]]];
        }
    }
    beta
}

fn total_log_prob(alpha: &Mat) -> f64 {
    let (t, s) = alpha.dim();
    let last = alpha[[t - 1, s - 1]];
    if s > 1 {
        log_add(last, alpha[[t - 1, s - 2]])
    } else {
        last
    }
}

/// Negative log of the summed probability of every alignment of `target`;
/// `+inf` when no alignment exists.
pub fn ctc_neg_log_likelihood(logp: &Mat, target: &[usize]) -> f64 {
    if logp.nrows() == 0 || min_frames(target) > logp.nrows() {
        return f64::INFINITY;
    }
    -total_log_prob(&forward_lattice(logp, &extended(target)))
}

/// CTC loss and its gradient with respect to every entry of `logp`
/// (treated as free log-scores).
pub fn ctc_loss(logp: &Mat, target: &[usize]) -> Result<(f64, Mat)> {
    check_target(logp, target)?;
    let ext = extended(target);
    let alpha = forward_lattice(logp, &ext);
    let log_total = total_log_prob(&alpha);
    if !log_total.is_finite() {
        return Err(Error::Unsatisfiable {
            target_len: target.len(),
            frames: logp.nrows(),
        });
    }
    let beta = backward_lattice(logp, &ext);
    let (t_len, v) = logp.dim();
    let mut grad = Mat::zeros((t_len, v));
    let mut occupancy = vec![f64::NEG_INFINITY; v];
    for t in 0..t_len {
        occupancy.fill(f64::NEG_INFINITY);
        for (s, &k) in ext.iter().enumerate() {
            let g = alpha[[t, s]] + beta[[t, s]] - logp[[t, k]];
            occupancy[k] = log_add(occupancy[k], g);
        }
        for k in 0..v {
            grad[[t, k]] = -(occupancy[k] - log_total).exp();
        }
    }
    Ok((-log_total, grad))
}

/// Second-pass hypothesis score: the CTC negative log-likelihood of a
/// label sequence under `stream`.
pub fn ctc_forward_score(stream: &PosteriorStream, labels: &[usize]) -> Result<f64> {
    check_target(stream.logp(), labels)?;
    let cost = ctc_neg_log_likelihood(stream.logp(), labels);
    if cost.is_finite() {
        Ok(cost)
    } else {
        Err(Error::Unsatisfiable {
            target_len: labels.len(),
            frames: stream.frames(),
        })
    }
}

fn argmax_lowest(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Frame argmax, collapse repeats, drop blanks. Ties go to the lower class.
pub fn greedy_decode(stream: &PosteriorStream) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = BLANK;
    for row in stream.logp().rows() {
        let k = argmax_lowest(row);
        if k != BLANK && k != prev {
            out.push(k);
        }
        prev = k;
    }
    out
}

/// Best single CTC path constrained to `target`, as one class per frame.
pub fn ctc_forced_align(logp: &Mat, target: &[usize]) -> Result<Vec<usize>> {
    check_target(logp, target)?;
    let ext = extended(target);
    let (t_len, s_len) = (logp.nrows(), ext.len());
    let mut score = Mat::from_elem((t_len, s_len), f64::NEG_INFINITY);
    let mut back = vec![vec![0usize; s_len]; t_len];
    score[[0, 0]] = logp[[0, ext[0]]];
    if s_len > 1 {
        score[[0, 1]] = logp[[0, ext[1]]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut best = (score[[t - 1, s]], s);
            if s >= 1 && score[[t - 1, s - 1]] > best.0 {
                best = (score[[t - 1, s - 1]], s - 1);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] && score[[t - 1, s - 2]] > best.0 {
                best = (score[[t - 1, s - 2]], s - 2);
            }
            score[[t, s]] = best.0 + logp[[t, ext[s]]];
            back[t][s] = best.1;
        }
    }
    let mut s = s_len - 1;
    if s_len > 1 && score[[t_len - 1, s_len - 2]] > score[[t_len - 1, s_len - 1]] {
        s = s_len - 2;
    }
    if !score[[t_len - 1, s]].is_finite() {
        return Err(Error::Unsatisfiable {
            target_len: target.len(),
            frames: t_len,
        });
    }
    let mut path = vec![0; t_len];
    for t in (0..t_len).rev() {
        path[t] = ext[s];
        s = back[t][s];
    }
    Ok(path)
}

#[derive(Clone, Copy, Debug)]
struct PrefixScore {
    blank: f64,
    non_blank: f64,
}

impl PrefixScore {
    const EMPTY: PrefixScore = PrefixScore {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(&self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

fn prune(mut beams: Vec<(Vec<usize>, PrefixScore)>, width: usize) -> Vec<(Vec<usize>, PrefixScore)> {
    beams.sort_by(|a, b| {
        b.1.total()
            .partial_cmp(&a.1.total())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    beams.truncate(width);
    beams
}

/// CTC prefix beam search returning the `n` most probable labelings
/// (summed over their alignments). Costs are negative log-probabilities
/// stored under the `"ctc"` system key.
pub fn prefix_beam_nbest(stream: &PosteriorStream, vocab: &TokenVocab, beam: usize, n: usize) -> NBestList {
    let beam = beam.max(1);
    let logp = stream.logp();
    let v = logp.ncols();
    let mut beams = vec![(
        Vec::new(),
        PrefixScore {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    )];
    for row in logp.rows() {
        let mut next: BTreeMap<Vec<usize>, PrefixScore> = BTreeMap::new();
        for (prefix, score) in &beams {
            let total = score.total();
            let entry = next.entry(prefix.clone()).or_insert(PrefixScore::EMPTY);
            entry.blank = log_add(entry.blank, total + row[BLANK]);
            let last = prefix.last().copied();
            for k in 1..v {
                let p = row[k];
                if p == f64::NEG_INFINITY {
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(k);
                if last == Some(k) {
                    let same = next.entry(prefix.clone()).or_insert(PrefixScore::EMPTY);
                    same.non_blank = log_add(same.non_blank, score.non_blank + p);
                    let ext = next.entry(extended).or_insert(PrefixScore::EMPTY);
                    ext.non_blank = log_add(ext.non_blank, score.blank + p);
                } else {
                    let ext = next.entry(extended).or_insert(PrefixScore::EMPTY);
                    ext.non_blank = log_add(ext.non_blank, total + p);
                }
            }
        }
        beams = prune(next.into_iter().collect(), beam);
    }
    let finals = prune(beams, n.max(1));
    let entries = finals
        .into_iter()
        .map(|(tokens, score)| {
            let cost = -score.total();
            NBestEntry {
                words: vocab.decode(&tokens),
                tokens,
                costs: BTreeMap::from([("ctc".to_string(), cost)]),
                combined: cost,
            }
        })
        .collect();
    NBestList {
        utt_id: String::new(),
        entries,
    }
}
