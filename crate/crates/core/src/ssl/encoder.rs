use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::nn::{self, param};
use crate::params::ParameterStore;

use super::quantizer::init_quantizer;
use super::{EncoderConfig, PositionalEncoding};

/// Contextual representations `c` and encoder outputs `z`, sharing `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextFeatures {
    pub c: Mat,
    pub z: Mat,
    pub frame_shift_us: u32,
}

/// Tape handles for one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderForward {
    pub z: Var,
    /// Projected `z` after mask substitution, before positions are added.
    pub transformer_input: Var,
    pub c: Var,
}

pub fn init_encoder(cfg: &EncoderConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let mut c_in = 1;
    for (i, l) in cfg.conv_layers.iter().enumerate() {
        nn::init_conv1d(&mut store, &format!("ssl.conv{i}"), c_in, l.channels, l.kernel, &mut rng);
        c_in = l.channels;
    }
    let d_z = cfg.feature_dim();
    nn::init_layer_norm(&mut store, "ssl.feat_ln", d_z);
    nn::init_linear(&mut store, "ssl.proj", d_z, cfg.d_model, &mut rng);
    store.init_uniform("ssl.mask_emb", 1, cfg.d_model, 0.5, &mut rng);
    if let PositionalEncoding::Conv { kernel } = cfg.positional {
        nn::init_conv1d(&mut store, "ssl.pos_conv", cfg.d_model, cfg.d_model, kernel, &mut rng);
    }
    for b in 0..cfg.n_blocks {
        nn::init_transformer_block(&mut store, &format!("ssl.block{b}"), cfg.d_model, cfg.ffn_dim, &mut rng);
    }
    nn::init_layer_norm(&mut store, "ssl.final_ln", cfg.d_model);
    nn::init_linear(&mut store, "ssl.final_proj", cfg.d_model, cfg.code_dim, &mut rng);
    init_quantizer(&mut store, cfg, d_z, &mut rng);
    Ok(store)
}

fn normalized_waveform(audio: &AudioBuffer, cfg: &EncoderConfig) -> Result<Mat> {
    if audio.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "audio at {} Hz, encoder expects {} Hz",
            audio.sample_rate, cfg.sample_rate
        )));
    }
    let required = cfg.receptive_field();
    if audio.len() < required {
        return Err(Error::AudioTooShort {
            samples: audio.len(),
            required,
        });
    }
    let n = audio.len() as f64;
    let mean = audio.samples.iter().sum::<f64>() / n;
    let var = audio.samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-10).sqrt();
    Ok(Mat::from_shape_fn((audio.len(), 1), |(i, _)| (audio.samples[i] - mean) * inv))
}

/// Strided conv stack followed by layer norm; returns `Z`.
pub(crate) fn feature_encoder_graph(
    g: &mut Graph,
    params: &ParameterStore,
    cfg: &EncoderConfig,
    audio: &AudioBuffer,
) -> Result<Var> {
    let wave = normalized_waveform(audio, cfg)?;
    let mut x = g.constant(wave);
    for (i, l) in cfg.conv_layers.iter().enumerate() {
        x = nn::conv1d(g, params, &format!("ssl.conv{i}"), x, l.kernel, l.stride)?;
        x = g.gelu(x);
    }
    nn::layer_norm(g, params, "ssl.feat_ln", x)
}

/// Context network over `z`, with the rows in `masked` replaced by the
/// learned mask embedding.
pub(crate) fn context_graph(
    g: &mut Graph,
    params: &ParameterStore,
    cfg: &EncoderConfig,
    z: Var,
    masked: &[usize],
) -> Result<EncoderForward> {
    let frames = g.value(z).nrows();
    if let Some(&bad) = masked.iter().find(|&&t| t >= frames) {
        return Err(Error::Shape(format!("mask index {bad} outside {frames} frames")));
    }
    let x = nn::linear(g, params, "ssl.proj", z)?;
    let x = if masked.is_empty() {
        x
    } else {
        let emb = param(g, params, "ssl.mask_emb")?;
        g.replace_rows(x, emb, masked)
    };
    let transformer_input = x;
    let mut h = match cfg.positional {
        PositionalEncoding::Sinusoidal => {
            let pos = g.constant(nn::sinusoidal_positions(frames, cfg.d_model));
            g.add(x, pos)
        }
        PositionalEncoding::Conv { kernel } => {
            let p = nn::conv1d_same(g, params, "ssl.pos_conv", x, kernel)?;
            let p = g.gelu(p);
            g.add(x, p)
        }
    };
    for b in 0..cfg.n_blocks {
        h = nn::transformer_block(g, params, &format!("ssl.block{b}"), h, cfg.n_heads)?;
    }
    let c = nn::layer_norm(g, params, "ssl.final_ln", h)?;
    Ok(EncoderForward {
        z,
        transformer_input,
        c,
    })
}

/// `Z = f(X)`: `T x d_z` with `T = floor((N - 400) / 320) + 1` at the default geometry.
pub fn encode_raw(audio: &AudioBuffer, cfg: &EncoderConfig, params: &ParameterStore) -> Result<Mat> {
    let mut g = Graph::new();
    let z = feature_encoder_graph(&mut g, params, cfg, audio)?;
    Ok(g.value(z).clone())
}

/// `C = g(Z)` with optional masking.
pub fn contextualize(z: &Mat, masked: &[usize], cfg: &EncoderConfig, params: &ParameterStore) -> Result<Mat> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let fwd = context_graph(&mut g, params, cfg, zv, masked)?;
    Ok(g.value(fwd.c).clone())
}

/// Encoder configuration bundled with its parameters.
#[derive(Clone, Debug)]
pub struct SslEncoder {
    pub cfg: EncoderConfig,
    pub params: ParameterStore,
}

impl SslEncoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let params = init_encoder(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    pub fn features(&self, audio: &AudioBuffer) -> Result<ContextFeatures> {
        let z = encode_raw(audio, &self.cfg, &self.params)?;
        let c = contextualize(&z, &[], &self.cfg, &self.params)?;
        Ok(ContextFeatures {
            c,
            z,
            frame_shift_us: self.cfg.frame_shift_us(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise_audio(n: usize, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16_000).unwrap()
    }

    #[test]
    fn frame_counts_follow_conv_arithmetic() {
        let enc = SslEncoder::new(EncoderConfig::default(), 0).unwrap();
        assert_eq!(encode_raw(&noise_audio(16_000, 1), &enc.cfg, &enc.params).unwrap().nrows(), 49);
        assert_eq!(encode_raw(&noise_audio(400, 1), &enc.cfg, &enc.params).unwrap().nrows(), 1);
        assert!(matches!(
            encode_raw(&noise_audio(399, 1), &enc.cfg, &enc.params),
            Err(Error::AudioTooShort { samples: 399, required: 400 })
        ));
    }

    #[test]
    fn unmasked_context_is_finite_and_deterministic() {
        let enc = SslEncoder::new(EncoderConfig::default(), 5).unwrap();
        let audio = noise_audio(8000, 2);
        let a = enc.features(&audio).unwrap();
        let b = SslEncoder::new(EncoderConfig::default(), 5).unwrap().features(&audio).unwrap();
        assert_eq!(a.c.dim(), (a.z.nrows(), 64));
        assert!(a.c.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
        assert_eq!(a.frame_shift_us, 20_000);
    }

    #[test]
    fn fully_masked_input_is_mask_embedding() {
        let enc = SslEncoder::new(EncoderConfig::default(), 6).unwrap();
        let mut g = Graph::new();
        let z = feature_encoder_graph(&mut g, &enc.params, &enc.cfg, &noise_audio(4000, 3)).unwrap();
        let t = g.value(z).nrows();
        let all: Vec<usize> = (0..t).collect();
        let fwd = context_graph(&mut g, &enc.params, &enc.cfg, z, &all).unwrap();
        let emb = enc.params.get("ssl.mask_emb").unwrap();
        for row in g.value(fwd.transformer_input).rows() {
            assert_eq!(row, emb.row(0));
        }
    }

    #[test]
    fn mask_index_out_of_range_rejected() {
        let enc = SslEncoder::new(EncoderConfig::default(), 6).unwrap();
        let z = encode_raw(&noise_audio(4000, 3), &enc.cfg, &enc.params).unwrap();
        assert!(contextualize(&z, &[z.nrows()], &enc.cfg, &enc.params).is_err());
    }
}
