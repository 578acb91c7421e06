//! Toy wav2vec2.0-style encoder: strided CNN feature encoder, transformer
//! context network, Gumbel-softmax product quantizer, masked contrastive +
//! diversity pretraining and a CTC projection head.

pub(crate) mod encoder;
mod losses;
mod masking;
pub(crate) mod quantizer;
mod train;

pub use encoder::{
    contextualize, encode_raw, init_encoder, ContextFeatures, EncoderForward, SslEncoder,
};
pub use losses::{contrastive_loss, cosine_similarity, diversity_loss, ContrastiveOutput};
pub use masking::{compute_mask, sample_distractors, DistractorSample, MaskSample};
pub use quantizer::{gumbel_noise, gumbel_quantize, GumbelNoise, QuantizerOutput, QuantizerState};
pub use train::{
    attach_ctc_head, finetune_ctc, greedy_token_error_rate, pretrain, pretrain_batch_loss, ssl_frame_posteriors,
    token_error_rate, FinetuneScope, PretrainSample, CTC_HEAD_PREFIX,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GumbelAnneal {
    pub start: f64,
    pub end: f64,
    /// Multiplicative decay per epoch.
    pub decay: f64,
}

/// How the context network learns about frame order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PositionalEncoding {
    /// Fixed absolute sinusoids added to the input.
    Sinusoidal,
    /// `x + gelu(conv(x))` with an odd-width, zero-padded convolution.
    Conv { kernel: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub sample_rate: u32,
    pub conv_layers: Vec<ConvLayer>,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub positional: PositionalEncoding,
    /// Codebook count `G`.
    pub groups: usize,
    /// Entries per codebook `V_q`.
    pub entries: usize,
    /// Width of the concatenated code vector (each group contributes `code_dim / groups`).
    pub code_dim: usize,
    pub mask_prob: f64,
    pub mask_span: usize,
    /// Contrastive temperature `kappa`.
    pub contrastive_temperature: f64,
    /// Distractors `K` per masked frame.
    pub distractors: usize,
    pub diversity_weight: f64,
    pub gumbel_temperature: f64,
    pub gumbel_anneal: Option<GumbelAnneal>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            conv_layers: vec![
                ConvLayer {
                    channels: 48,
                    kernel: 80,
                    stride: 80,
                },
                ConvLayer {
                    channels: 64,
                    kernel: 5,
                    stride: 4,
                },
            ],
            d_model: 64,
            n_blocks: 2,
            n_heads: 4,
            ffn_dim: 128,
            positional: PositionalEncoding::Conv { kernel: 5 },
            groups: 2,
            entries: 8,
            code_dim: 32,
            mask_prob: 0.065,
            mask_span: 10,
            contrastive_temperature: 0.1,
            distractors: 10,
            diversity_weight: 0.1,
            gumbel_temperature: 2.0,
            gumbel_anneal: None,
        }
    }
}

impl EncoderConfig {
    /// Product of conv strides, in samples.
    pub fn total_stride(&self) -> usize {
        self.conv_layers.iter().map(|l| l.stride).product()
    }

    /// Receptive field of one output frame, in samples.
    pub fn receptive_field(&self) -> usize {
        let mut field = 1;
        let mut jump = 1;
        for l in &self.conv_layers {
            field += (l.kernel - 1) * jump;
            jump *= l.stride;
        }
        field
    }

    pub fn frame_shift_us(&self) -> u32 {
        (self.total_stride() as u64 * 1_000_000 / self.sample_rate as u64) as u32
    }

    pub fn feature_dim(&self) -> usize {
        self.conv_layers.last().map(|l| l.channels).unwrap_or(1)
    }

    /// Output frames for `n` input samples (0 if shorter than the receptive field).
    pub fn frames_for(&self, n: usize) -> usize {
        let mut t = n;
        for l in &self.conv_layers {
            if t < l.kernel {
                return 0;
            }
            t = (t - l.kernel) / l.stride + 1;
        }
        t
    }

    pub fn gumbel_temperature_at(&self, epoch: usize) -> f64 {
        match self.gumbel_anneal {
            None => self.gumbel_temperature,
            Some(a) => (a.start * a.decay.powi(epoch as i32)).max(a.end),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.conv_layers.is_empty() {
            return err("at least one conv layer required".into());
        }
        if let PositionalEncoding::Conv { kernel } = self.positional {
            if kernel % 2 == 0 {
                return err(format!("positional conv kernel {kernel} must be odd"));
            }
        }
        if self.conv_layers.iter().any(|l| l.kernel == 0 || l.stride == 0 || l.channels == 0) {
            return err("conv kernel, stride and channels must be positive".into());
        }
        if self.frame_shift_us() != 20_000 || self.total_stride() as u64 * 1_000_000 % self.sample_rate as u64 != 0 {
            return err(format!(
                "conv strides multiply to {} samples; a 20 ms frame shift is required",
                self.total_stride()
            ));
        }
        let rf_us = self.receptive_field() as u64 * 1_000_000 / self.sample_rate as u64;
        if rf_us != 25_000 {
            return err(format!(
                "receptive field is {} samples; 25 ms is required",
                self.receptive_field()
            ));
        }
        if self.groups == 0 || self.entries < 2 {
            return err("need groups >= 1 and entries >= 2".into());
        }
        if self.code_dim % self.groups != 0 {
            return err(format!("code_dim {} not divisible by {} groups", self.code_dim, self.groups));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return err(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if !(self.contrastive_temperature > 0.0) {
            return err("contrastive temperature must be positive".into());
        }
        if !(self.gumbel_temperature > 0.0) {
            return Err(Error::Temperature(self.gumbel_temperature));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return err(format!("mask_prob {} outside [0, 1]", self.mask_prob));
        }
        if self.mask_span == 0 {
            return err("mask_span must be >= 1".into());
        }
        Ok(())
    }
}
