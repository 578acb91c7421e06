//! Experiment configuration: one JSON document with a section per stage.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bottleneck::BottleneckConfig;
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::features::FbankConfig;
use crate::frame_am::SpliceConfig;
use crate::joint::{CombinationMode, CombinationWeights, LexiconMode};
use crate::mdn::MdnConfig;
use crate::params::OptimizerConfig;
use crate::rescore::RescoreWeights;
use crate::ssl::{EncoderConfig, FinetuneScope};
use crate::training::TrainOptions;

pub const DEFAULT_SEED: u64 = 20230;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentSource {
    /// Equal spans per token over the energy-trimmed active region.
    #[default]
    Uniform,
    /// Forced alignment against the fine-tuned CTC head.
    Ctc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSection {
    pub train: TrainOptions,
    pub scope: FinetuneScope,
    /// Train the bottleneck adapter jointly with the CTC head.
    pub with_bottleneck: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            train: TrainOptions {
                optimizer: OptimizerConfig::default().with_lr(1e-3),
                ..TrainOptions::new(15, 0)
            },
            scope: FinetuneScope::default(),
            with_bottleneck: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmSection {
    pub splice: SpliceConfig,
    pub train: TrainOptions,
    pub alignment: AlignmentSource,
    /// Silence threshold for uniform alignment, as a fraction of the way
    /// from the quietest to the loudest frame energy.
    pub active_threshold: f64,
}

impl Default for AmSection {
    fn default() -> Self {
        Self {
            splice: SpliceConfig::default(),
            train: TrainOptions::new(30, 0),
            alignment: AlignmentSource::default(),
            active_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointSection {
    /// Ratio string for the [fused AM, SSL] posterior weights.
    pub weights: String,
    pub mode: CombinationMode,
    pub lexicon_mode: LexiconMode,
    pub word_insertion_penalty: f64,
}

impl Default for JointSection {
    fn default() -> Self {
        Self {
            weights: "3:2".into(),
            mode: CombinationMode::default(),
            lexicon_mode: LexiconMode::default(),
            word_insertion_penalty: 0.0,
        }
    }
}

impl JointSection {
    pub fn combination_weights(&self) -> Result<CombinationWeights> {
        CombinationWeights::parse(&self.weights)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RescoreSection {
    pub weights: RescoreWeights,
    pub nbest: usize,
}

impl Default for RescoreSection {
    fn default() -> Self {
        Self {
            weights: RescoreWeights::default(),
            nbest: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionSection {
    pub enabled: bool,
    pub model: MdnConfig,
    pub train: TrainOptions,
}

impl Default for InversionSection {
    fn default() -> Self {
        Self {
            enabled: true,
            model: MdnConfig::default(),
            train: TrainOptions::new(60, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub fbank: FbankConfig,
    pub encoder: EncoderConfig,
    pub pretrain: TrainOptions,
    pub finetune: FinetuneSection,
    pub bottleneck: BottleneckConfig,
    pub am: AmSection,
    pub joint: JointSection,
    pub rescore: RescoreSection,
    pub inversion: InversionSection,
}

impl Default for Config {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        let mut cfg = Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            fbank: FbankConfig::default(),
            pretrain: TrainOptions::new(80, 0),
            finetune: FinetuneSection::default(),
            bottleneck: BottleneckConfig {
                dropout: 0.0,
                ..BottleneckConfig::new(encoder.d_model, 32)
            },
            encoder,
            am: AmSection::default(),
            joint: JointSection::default(),
            rescore: RescoreSection::default(),
            inversion: InversionSection::default(),
        };
        cfg.inversion.model.input_dim = cfg.bottleneck.d_bn;
        cfg.apply_seed(DEFAULT_SEED);
        cfg
    }
}

impl Config {
    /// Sets the master seed and derives every stage seed from it.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.corpus.seed = seed;
        self.pretrain.seed = seed.wrapping_add(1);
        self.finetune.train.seed = seed.wrapping_add(2);
        self.am.train.seed = seed.wrapping_add(3);
        self.inversion.train.seed = seed.wrapping_add(4);
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.fbank.validate()?;
        self.encoder.validate()?;
        self.bottleneck.validate()?;
        if self.bottleneck.d_in != self.encoder.d_model {
            return Err(Error::Config(format!(
                "bottleneck d_in {} must equal encoder d_model {}",
                self.bottleneck.d_in, self.encoder.d_model
            )));
        }
        self.am.splice.validate()?;
        let w = self.joint.combination_weights()?;
        if w.len() != 2 {
            return Err(Error::Config(format!("joint weights need two systems, got {:?}", self.joint.weights)));
        }
        RescoreWeights::new(self.rescore.weights.alpha, self.rescore.weights.beta)?;
        if self.rescore.nbest == 0 {
            return Err(Error::Config("nbest must be >= 1".into()));
        }
        if self.inversion.enabled {
            self.inversion.model.validate()?;
            if self.inversion.model.input_dim != self.bottleneck.d_bn {
                return Err(Error::Config("inversion input_dim must equal bottleneck d_bn".into()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Config = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let back: Config = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg: Config = serde_json::from_str(r#"{"joint": {"weights": "1:1"}}"#).unwrap();
        assert_eq!(cfg.joint.weights, "1:1");
        assert_eq!(cfg.rescore, RescoreSection::default());
        let bad: Config = serde_json::from_str(r#"{"joint": {"weights": "1:1:1"}}"#).unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn seed_propagates() {
        let mut cfg = Config::default();
        cfg.apply_seed(5);
        assert_eq!((cfg.corpus.seed, cfg.pretrain.seed, cfg.am.train.seed), (5, 6, 8));
    }
}
