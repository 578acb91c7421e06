//! Synthetic isolated-word corpus: words are short tone sequences, spoken by
//! a few pitch-jittered "speakers" under a clean source condition and a
//! slowed, spectrally tilted target condition.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, DEFAULT_SAMPLE_RATE};
use crate::ctc::TokenVocab;
use crate::error::{Error, Result};
use crate::features::{write_features, FeatureMatrix};
use crate::joint::{Lexicon, LexiconMode, LexiconWord};

pub const ARTIC_LABEL: &str = "artic";
pub const ARTIC_DIM: usize = 6;
const ARTIC_SHIFT_US: u32 = 10_000;
const ARTIC_WIN: usize = 400;
const ARTIC_HOP: usize = 160;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subset {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "test-seen")]
    TestSeen,
    #[serde(rename = "test-unseen")]
    TestUnseen,
}

impl Subset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::TestSeen => "test-seen",
            Subset::TestUnseen => "test-unseen",
        }
    }

    pub fn is_test(&self) -> bool {
        !matches!(self, Subset::Train)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Source,
    Target,
}

impl Condition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Source => "source",
            Condition::Target => "target",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub audio_path: String,
    pub transcript: String,
    pub speaker: String,
    pub subset: Subset,
    pub condition: Condition,
}

/// Utterance records keyed by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    records: Vec<ManifestRecord>,
    index: BTreeMap<String, usize>,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::Corpus(format!("duplicate utterance id {:?}", r.id)));
            }
        }
        Ok(Self { records, index })
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn subset(&self, subset: Subset) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.subset == subset)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Self::new(records)
    }
}

/// Domain shift applied to target-condition audio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionShift {
    /// Duration multiplier for every tone.
    pub tempo: f64,
    /// One-pole low-pass coefficient; larger means steeper high-frequency roll-off.
    pub tilt: f64,
    /// Extra frequency wobble, as a fraction of the tone frequency.
    pub wobble: f64,
    pub noise: f64,
}

impl Default for ConditionShift {
    fn default() -> Self {
        Self {
            tempo: 1.3,
            tilt: 0.6,
            wobble: 0.02,
            noise: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_words: usize,
    pub unseen_fraction: f64,
    pub tokens: usize,
    pub tokens_per_word: usize,
    pub speakers: usize,
    /// Training repetitions per (seen word, condition).
    pub train_reps: usize,
    /// Test repetitions per (word, condition).
    pub test_reps: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub tone_ms: f64,
    pub glide_ms: f64,
    pub edge_ms: f64,
    /// Relative spread of per-speaker pitch.
    pub speaker_jitter: f64,
    /// Relative per-tone duration jitter.
    pub duration_jitter: f64,
    pub noise: f64,
    pub shift: ConditionShift,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_words: 20,
            unseen_fraction: 0.4,
            tokens: 12,
            tokens_per_word: 3,
            speakers: 4,
            train_reps: 6,
            test_reps: 2,
            low_hz: 500.0,
            high_hz: 4000.0,
            tone_ms: 150.0,
            glide_ms: 30.0,
            edge_ms: 80.0,
            speaker_jitter: 0.03,
            duration_jitter: 0.15,
            noise: 0.01,
            shift: ConditionShift::default(),
        }
    }
}

impl CorpusConfig {
    pub fn n_unseen(&self) -> usize {
        (self.unseen_fraction * self.n_words as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Corpus(m));
        if self.n_words < 4 {
            return err(format!("need at least 4 words, got {}", self.n_words));
        }
        if !(self.unseen_fraction > 0.0 && self.unseen_fraction < 1.0) {
            return err(format!("unseen fraction {} outside (0, 1)", self.unseen_fraction));
        }
        let unseen = self.n_unseen();
        if unseen == 0 || unseen >= self.n_words {
            return err(format!(
                "{} words with fraction {} leaves {unseen} unseen; need at least one seen and one unseen",
                self.n_words, self.unseen_fraction
            ));
        }
        if self.tokens < 2 || self.tokens_per_word == 0 || self.tokens_per_word > self.tokens {
            return err("need tokens >= 2 and 1 <= tokens_per_word <= tokens".into());
        }
        if self.speakers == 0 || self.train_reps == 0 || self.test_reps == 0 {
            return err("speakers and repetition counts must be positive".into());
        }
        if !(self.low_hz > 0.0 && self.high_hz > self.low_hz && self.high_hz < DEFAULT_SAMPLE_RATE as f64 / 2.0) {
            return err("tone band must satisfy 0 < low < high < Nyquist".into());
        }
        if !(self.tone_ms > 0.0 && self.shift.tempo > 0.0 && (0.0..1.0).contains(&self.shift.tilt)) {
            return err("tone duration, tempo and tilt out of range".into());
        }
        Ok(())
    }

    /// Log-spaced tone frequencies, one per token.
    pub fn tone_frequencies(&self) -> Vec<f64> {
        let n = self.tokens;
        (0..n)
            .map(|i| self.low_hz * (self.high_hz / self.low_hz).powf(i as f64 / (n - 1) as f64))
            .collect()
    }

    pub fn vocab(&self) -> TokenVocab {
        TokenVocab::new(token_names(self.tokens)).expect("generated token names are unique")
    }
}

fn token_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("t{i:02}")).collect()
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub record: ManifestRecord,
    pub audio: AudioBuffer,
    /// Generator latents at 10 ms; present for source-condition utterances.
    pub articulatory: Option<FeatureMatrix>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub lexicon: Lexicon,
    pub vocab: TokenVocab,
    pub unseen_words: BTreeSet<String>,
    pub manifest: Manifest,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn utterance(&self, id: &str) -> Option<&Utterance> {
        self.manifest.index.get(id).map(|&i| &self.utterances[i])
    }

    pub fn subset(&self, subset: Subset) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.record.subset == subset)
    }

    /// Token transcript of an utterance.
    pub fn tokens_of(&self, record: &ManifestRecord) -> Result<Vec<String>> {
        record
            .transcript
            .split_whitespace()
            .map(|w| {
                self.lexicon
                    .index_of(w)
                    .map(|i| self.lexicon.words[i].tokens.clone())
                    .ok_or_else(|| Error::Corpus(format!("word {w:?} not in lexicon")))
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.concat())
    }

    /// Writes `manifest.jsonl`, `lexicon.json`, `vocab.json`, `wav/<id>.wav`
    /// and `artic/<id>.feat`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["wav", "artic"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for u in &self.utterances {
            u.audio.write_wav(&dir.join(&u.record.audio_path))?;
            if let Some(a) = &u.articulatory {
                write_features(a, &dir.join("artic").join(format!("{}.feat", u.record.id)))?;
            }
        }
        self.manifest.save(&dir.join("manifest.jsonl"))?;
        self.lexicon.save(&dir.join("lexicon.json"))?;
        let vocab_path = dir.join("vocab.json");
        fs::write(&vocab_path, serde_json::to_string_pretty(&self.vocab)?).map_err(|e| Error::io(&vocab_path, e))
    }
}

pub fn artic_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("artic").join(format!("{id}.feat"))
}

/// Draws `n` token sequences with pairwise distinct token sets and no
/// token repeated within a word, such that the first `seen` words use
/// every token.
fn draw_words(cfg: &CorpusConfig, seen: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let k = cfg.tokens_per_word;
    if seen * k < cfg.tokens {
        return Err(Error::Corpus(format!(
            "{seen} seen words of {k} tokens cannot cover {} tokens",
            cfg.tokens
        )));
    }
    for _ in 0..10_000 {
        let mut sets = BTreeSet::new();
        let mut words = Vec::with_capacity(cfg.n_words);
        // cover every token with the seen words first
        let mut pool: Vec<usize> = (0..cfg.tokens).collect();
        pool.shuffle(rng);
        let mut attempts = 0;
        while words.len() < cfg.n_words && attempts < 10_000 {
            attempts += 1;
            let mut w: Vec<usize> = if words.len() < seen && !pool.is_empty() {
                let take = pool.len().min(k);
                let mut w: Vec<usize> = pool.drain(..take).collect();
                while w.len() < k {
                    let t = rng.gen_range(0..cfg.tokens);
                    if !w.contains(&t) {
                        w.push(t);
                    }
                }
                w
            } else {
                rand::seq::index::sample(rng, cfg.tokens, k).into_vec()
            };
            w.shuffle(rng);
            let set: BTreeSet<usize> = w.iter().copied().collect();
            if sets.insert(set) {
                words.push(w);
            }
        }
        if words.len() == cfg.n_words {
            return Ok(words);
        }
    }
    Err(Error::Corpus("could not draw distinct words".into()))
}

struct Voice {
    pitch: f64,
    tempo: f64,
    tilt: f64,
    wobble: f64,
    noise: f64,
}

/// Renders one word and its generator latents:
/// `[log-frequency, amplitude, glide rate, sin phase-in-tone, cos phase-in-tone, pitch offset]`.
fn render(cfg: &CorpusConfig, tokens: &[usize], voice: &Voice, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<[f64; ARTIC_DIM]>) {
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let freqs = cfg.tone_frequencies();
    let ms = |m: f64| (m * sr / 1000.0).round() as usize;
    let edge = ms(cfg.edge_ms);
    let glide = ms(cfg.glide_ms * voice.tempo);
    let durations: Vec<usize> = tokens
        .iter()
        .map(|_| {
            let j = 1.0 + cfg.duration_jitter * rng.gen_range(-1.0..1.0);
            ms(cfg.tone_ms * voice.tempo * j)
        })
        .collect();
    // per-sample instantaneous frequency, amplitude and tone progress
    let mut track: Vec<(f64, f64, f64, f64)> = Vec::new();
    for _ in 0..edge {
        track.push((0.0, 0.0, 0.0, 0.0));
    }
    let log_lo = freqs[0].ln();
    let log_span = freqs[freqs.len() - 1].ln() - log_lo;
    for (i, (&tok, &dur)) in tokens.iter().zip(&durations).enumerate() {
        let f = freqs[tok] * voice.pitch;
        let amp = 0.4 * (1.0 + 0.2 * rng.gen_range(-1.0..1.0));
        for n in 0..dur {
            let ramp = ((n.min(dur - n)) as f64 / ms(10.0) as f64).min(1.0);
            let wob = 1.0 + voice.wobble * (2.0 * PI * 6.0 * n as f64 / sr).sin();
            track.push((f * wob, amp * ramp, 0.0, n as f64 / dur as f64));
        }
        if i + 1 < tokens.len() {
            let f2 = freqs[tokens[i + 1]] * voice.pitch;
            for n in 0..glide {
                let a = n as f64 / glide as f64;
                let fr = (f.ln() * (1.0 - a) + f2.ln() * a).exp();
                track.push((fr, 0.3, (f2.ln() - f.ln()) / log_span, a));
            }
        }
    }
    for _ in 0..edge {
        track.push((0.0, 0.0, 0.0, 0.0));
    }
    let noise = Normal::new(0.0, voice.noise).expect("noise level is finite");
    let mut phase = 0.0;
    let mut low = 0.0;
    let samples: Vec<f64> = track
        .iter()
        .map(|&(f, a, _, _)| {
            phase += 2.0 * PI * f / sr;
            let harmonic = if 2.0 * f < sr / 2.0 { 0.3 * (2.0 * phase).sin() } else { 0.0 };
            let x = a * (phase.sin() + harmonic) + noise.sample(rng);
            low = (1.0 - voice.tilt) * x + voice.tilt * low;
            low.clamp(-1.0, 1.0)
        })
        .collect();
    let frames = if samples.len() >= ARTIC_WIN {
        (samples.len() - ARTIC_WIN) / ARTIC_HOP + 1
    } else {
        0
    };
    let latents = (0..frames)
        .map(|t| {
            let (f, a, g, pos) = track[t * ARTIC_HOP + ARTIC_WIN / 2];
            let lf = if f > 0.0 { (f.ln() - log_lo) / log_span } else { -0.5 };
            [
                lf,
                a,
                g,
                (2.0 * PI * pos).sin() * a,
                (2.0 * PI * pos).cos() * a,
                voice.pitch.ln() * 10.0,
            ]
        })
        .collect();
    (samples, latents)
}

/// Generates the corpus in memory. Every word has a distinct token set;
/// the unseen words never occur in training.
pub fn gen_synth_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_unseen = cfg.n_unseen();
    let n_seen = cfg.n_words - n_unseen;
    let words = draw_words(cfg, n_seen, &mut rng)?;
    let names = token_names(cfg.tokens);
    let word_name = |i: usize| format!("w{i:02}");
    let lexicon = Lexicon::new(
        words
            .iter()
            .enumerate()
            .map(|(i, w)| LexiconWord {
                word: word_name(i),
                tokens: w.iter().map(|&t| names[t].clone()).collect(),
            })
            .collect(),
        LexiconMode::IsolatedWord,
        0.0,
    )?;
    let unseen_words: BTreeSet<String> = (n_seen..cfg.n_words).map(word_name).collect();
    let pitches: Vec<f64> = (0..cfg.speakers)
        .map(|_| 1.0 + cfg.speaker_jitter * rng.gen_range(-1.0..1.0))
        .collect();
    let mut plan: Vec<(Subset, usize, Condition, usize)> = Vec::new();
    for cond in [Condition::Source, Condition::Target] {
        for w in 0..cfg.n_words {
            let (subset, test_subset) = if w < n_seen {
                (Some(Subset::Train), Subset::TestSeen)
            } else {
                (None, Subset::TestUnseen)
            };
            if let Some(s) = subset {
                for r in 0..cfg.train_reps {
                    plan.push((s, w, cond, r));
                }
            }
            for r in 0..cfg.test_reps {
                plan.push((test_subset, w, cond, r));
            }
        }
    }
    let mut utterances = Vec::with_capacity(plan.len());
    for (subset, w, cond, rep) in plan {
        let spk = (w + rep) % cfg.speakers;
        let voice = match cond {
            Condition::Source => Voice {
                pitch: pitches[spk],
                tempo: 1.0,
                tilt: 0.0,
                wobble: 0.0,
                noise: cfg.noise,
            },
            Condition::Target => Voice {
                pitch: pitches[spk],
                tempo: cfg.shift.tempo,
                tilt: cfg.shift.tilt,
                wobble: cfg.shift.wobble,
                noise: cfg.shift.noise,
            },
        };
        let (samples, latents) = render(cfg, &words[w], &voice, &mut rng);
        let id = format!("{}-{}-{}-s{spk}-r{rep:02}", subset.as_str(), cond.as_str(), word_name(w));
        let record = ManifestRecord {
            audio_path: format!("wav/{id}.wav"),
            id,
            transcript: word_name(w),
            speaker: format!("s{spk}"),
            subset,
            condition: cond,
        };
        let articulatory = match cond {
            Condition::Source if !latents.is_empty() => {
                let m = crate::graph::Mat::from_shape_fn((latents.len(), ARTIC_DIM), |(t, d)| latents[t][d]);
                Some(FeatureMatrix::from_f64(&m, ARTIC_SHIFT_US, ARTIC_LABEL)?)
            }
            _ => None,
        };
        utterances.push(Utterance {
            record,
            audio: AudioBuffer::new(samples, DEFAULT_SAMPLE_RATE)?,
            articulatory,
        });
    }
    utterances.sort_by(|a, b| a.record.id.cmp(&b.record.id));
    let manifest = Manifest::new(utterances.iter().map(|u| u.record.clone()).collect())?;
    Ok(Corpus {
        config: cfg.clone(),
        vocab: cfg.vocab(),
        lexicon,
        unseen_words,
        manifest,
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{compute_fbank, FbankConfig};

    fn small() -> CorpusConfig {
        CorpusConfig {
            n_words: 10,
            train_reps: 2,
            test_reps: 1,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn unseen_words_only_in_unseen_subset() {
        let c = gen_synth_corpus(&small()).unwrap();
        assert_eq!(c.unseen_words.len(), 4);
        let train: BTreeSet<&str> = c.manifest.subset(Subset::Train).map(|r| r.transcript.as_str()).collect();
        let unseen: BTreeSet<&str> = c.manifest.subset(Subset::TestUnseen).map(|r| r.transcript.as_str()).collect();
        assert_eq!(unseen.len(), 4);
        assert!(unseen.iter().all(|w| c.unseen_words.contains(*w) && !train.contains(w)));
        assert!(c.manifest.subset(Subset::TestSeen).all(|r| train.contains(r.transcript.as_str())));
        for s in [Subset::Train, Subset::TestSeen, Subset::TestUnseen] {
            for cond in [Condition::Source, Condition::Target] {
                assert!(c.manifest.records().iter().any(|r| r.subset == s && r.condition == cond));
            }
        }
        // seen words cover every token
        let covered: BTreeSet<&String> = c
            .lexicon
            .words
            .iter()
            .filter(|w| !c.unseen_words.contains(&w.word))
            .flat_map(|w| &w.tokens)
            .collect();
        assert_eq!(covered.len(), 12);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synth_corpus(&small()).unwrap();
        let b = gen_synth_corpus(&small()).unwrap();
        assert_eq!(a.manifest, b.manifest);
        for (x, y) in a.utterances.iter().zip(&b.utterances) {
            assert_eq!(x.audio, y.audio);
            assert_eq!(x.articulatory, y.articulatory);
        }
        let c = gen_synth_corpus(&CorpusConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.utterances[0].audio, c.utterances[0].audio);
    }

    #[test]
    fn infeasible_splits_rejected() {
        for cfg in [
            CorpusConfig { n_words: 3, ..small() },
            CorpusConfig { unseen_fraction: 0.0, ..small() },
            CorpusConfig { unseen_fraction: 0.97, ..small() },
            CorpusConfig { n_words: 4, unseen_fraction: 0.1, ..small() },
        ] {
            assert!(matches!(gen_synth_corpus(&cfg), Err(Error::Corpus(_))), "{cfg:?}");
        }
    }

    #[test]
    fn articulatory_frames_match_fbank_frames() {
        let c = gen_synth_corpus(&small()).unwrap();
        for u in c.utterances.iter().filter(|u| u.record.condition == Condition::Source).take(5) {
            let f = compute_fbank(&u.audio, &FbankConfig::default()).unwrap();
            let a = u.articulatory.as_ref().unwrap();
            assert_eq!(a.frames(), f.frames());
            assert_eq!(a.dim(), ARTIC_DIM);
            assert_eq!(a.frame_shift_us(), f.frame_shift_us());
        }
        assert!(c.utterances.iter().filter(|u| u.record.condition == Condition::Target).all(|u| u.articulatory.is_none()));
    }

    #[test]
    fn word_fbank_centroids_are_separated() {
        // centroid over voiced frames of each word's clean renditions
        let c = gen_synth_corpus(&small()).unwrap();
        let fb = FbankConfig::default();
        let mut centroids: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for u in c.utterances.iter().filter(|u| u.record.condition == Condition::Source) {
            let f = compute_fbank(&u.audio, &fb).unwrap().to_f64();
            let energy: Vec<f64> = f.rows().into_iter().map(|r| r.sum()).collect();
            let thresh = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - 40.0;
            let e = centroids.entry(u.record.transcript.clone()).or_insert_with(|| vec![0.0; 40]);
            for (row, &en) in f.rows().into_iter().zip(&energy) {
                if en > thresh {
                    for (k, v) in row.iter().enumerate() {
                        e[k] += v;
                    }
                    *counts.entry(u.record.transcript.clone()).or_default() += 1;
                }
            }
        }
        let cents: Vec<Vec<f64>> = centroids
            .iter()
            .map(|(w, v)| v.iter().map(|x| x / counts[w] as f64).collect())
            .collect();
        // margin: the distance a one-tone difference produces, estimated as 1 log unit per band on average
        let mut min_dist = f64::INFINITY;
        for i in 0..cents.len() {
            for j in i + 1..cents.len() {
                let d: f64 = cents[i].iter().zip(&cents[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                min_dist = min_dist.min(d);
            }
        }
        assert!(min_dist > 1.0, "closest word centroids only {min_dist} apart");
    }

    #[test]
    fn manifest_round_trips() {
        let c = gen_synth_corpus(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        c.manifest.save(&p).unwrap();
        assert_eq!(Manifest::load(&p).unwrap(), c.manifest);
        let line = c.manifest.to_jsonl().unwrap();
        assert!(line.contains("\"subset\":\"train\""));
    }
}
