//! On-disk corpus layout written by `gen-corpus`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use ssl_hybrid::audio::AudioBuffer;
use ssl_hybrid::corpus::{artic_path, Manifest, ManifestRecord, Subset};
use ssl_hybrid::ctc::TokenVocab;
use ssl_hybrid::features::{read_features, FeatureMatrix};
use ssl_hybrid::joint::Lexicon;

pub struct CorpusDir {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub lexicon: Lexicon,
    pub vocab: TokenVocab,
}

impl CorpusDir {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = Manifest::load(&root.join("manifest.jsonl"))?;
        let lexicon = Lexicon::load(&root.join("lexicon.json"))?;
        let vocab = read_vocab(&root.join("vocab.json"))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            lexicon,
            vocab,
        })
    }

    pub fn records(&self, subset: Option<Subset>) -> Vec<&ManifestRecord> {
        self.manifest
            .records()
            .iter()
            .filter(|r| subset.map_or(true, |s| r.subset == s))
            .collect()
    }

    pub fn audio(&self, r: &ManifestRecord) -> Result<AudioBuffer> {
        Ok(AudioBuffer::read_wav(&self.root.join(&r.audio_path))?)
    }

    /// Reference articulatory trajectories, when the utterance has them.
    pub fn articulatory(&self, r: &ManifestRecord) -> Result<Option<FeatureMatrix>> {
        let path = artic_path(&self.root, &r.id);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(read_features(&path)?))
    }

    pub fn tokens(&self, r: &ManifestRecord) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for w in r.transcript.split_whitespace() {
            let i = self
                .lexicon
                .index_of(w)
                .ok_or_else(|| anyhow!("word {w:?} of {} not in lexicon", r.id))?;
            out.extend(self.lexicon.words[i].tokens.iter().cloned());
        }
        Ok(out)
    }
}

pub fn read_vocab(path: &Path) -> Result<TokenVocab> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
