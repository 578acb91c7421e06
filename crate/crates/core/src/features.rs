//! Acoustic front-ends and the frame-feature currency shared by every model.
//!
//! [`FeatureMatrix`] is a `T x D` block of `f32` frames tagged with its frame
//! shift and a stream label (`"fbk"`, `"w2v-bn"`, `"artic"`, ...). Streams at
//! different rates are brought to a common shift with [`resample_frames`]
//! and concatenated by [`fuse_features`].

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::params::ByteReader;

pub const FEATURE_MAGIC: &[u8; 4] = b"SFF1";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f32>,
    frame_shift_us: u32,
    label: String,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f32>, frame_shift_us: u32, label: impl Into<String>) -> Result<Self> {
        let label = label.into();
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Shape(format!(
                "feature matrix {label:?} must be at least 1x1, got {:?}",
                data.dim()
            )));
        }
        if frame_shift_us == 0 {
            return Err(Error::Config("frame shift must be positive".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("feature matrix {label:?}")));
        }
        if label.len() > u8::MAX as usize {
            return Err(Error::Config(format!("label {label:?} longer than 255 bytes")));
        }
        Ok(Self {
            data,
            frame_shift_us,
            label,
        })
    }

    /// Builds from `f64` values, rounding to `f32`.
    pub fn from_f64(data: &Mat, frame_shift_us: u32, label: impl Into<String>) -> Result<Self> {
        Self::new(data.mapv(|v| v as f32), frame_shift_us, label)
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn to_f64(&self) -> Mat {
        self.data.mapv(|v| v as f64)
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn frame_shift_us(&self) -> u32 {
        self.frame_shift_us
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Keeps the first `frames` rows.
    pub fn truncated(&self, frames: usize) -> Result<Self> {
        let frames = frames.min(self.frames());
        Self::new(
            self.data.slice(s![..frames, ..]).to_owned(),
            self.frame_shift_us,
            self.label.clone(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21 + self.label.len() + self.data.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&self.frame_shift_us.to_le_bytes());
        out.push(self.label.len() as u8);
        out.extend_from_slice(self.label.as_bytes());
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0, path };
        if r.take(4)? != FEATURE_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "SFF1",
            });
        }
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: FEATURE_VERSION,
            });
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let shift = r.u32()?;
        let label_len = r.u8()? as usize;
        let label = String::from_utf8_lossy(r.take(label_len)?).into_owned();
        let need = rows * cols * 4;
        let have = bytes.len() - r.pos;
        if have < need {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("header declares {rows}x{cols} f32 ({need} bytes), payload has {have}"),
            });
        }
        let payload = r.take(need)?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let data = Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(data, shift, label)
    }
}

pub fn write_features(f: &FeatureMatrix, path: &Path) -> Result<()> {
    fs::write(path, f.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::from_bytes(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FbankConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub floor: f64,
    pub preemphasis: f64,
    pub low_hz: f64,
    /// Upper band edge; `None` means Nyquist.
    pub high_hz: Option<f64>,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            win_ms: 25.0,
            hop_ms: 10.0,
            floor: 1e-10,
            preemphasis: 0.97,
            low_hz: 0.0,
            high_hz: None,
        }
    }
}

impl FbankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be >= 1".into()));
        }
        if !(self.hop_ms > 0.0 && self.win_ms >= self.hop_ms) {
            return Err(Error::Config(format!(
                "need win_ms >= hop_ms > 0, got win {} hop {}",
                self.win_ms, self.hop_ms
            )));
        }
        if !(self.floor > 0.0) {
            return Err(Error::Config("energy floor must be positive".into()));
        }
        Ok(())
    }

    pub fn win_samples(&self, sample_rate: u32) -> usize {
        (self.win_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn frame_shift_us(&self) -> u32 {
        (self.hop_ms * 1000.0).round() as u32
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters evaluated at FFT bin frequencies: `n_mels x (n_fft/2 + 1)`.
fn mel_filters(n_mels: usize, n_fft: usize, sample_rate: u32, low_hz: f64, high_hz: f64) -> Mat {
    let n_bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(low_hz), hz_to_mel(high_hz));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    Mat::from_shape_fn((n_mels, n_bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        if f > l && f <= c {
            (f - l) / (c - l)
        } else if f > c && f < r {
            (r - f) / (r - c)
        } else {
            0.0
        }
    })
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Log-mel filterbank energies: pre-emphasis, Hamming window, power
/// spectrum, triangular mel filters, natural log of floored energies.
pub fn compute_fbank(audio: &AudioBuffer, cfg: &FbankConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let sr = audio.sample_rate;
    let win = cfg.win_samples(sr);
    let hop = cfg.hop_samples(sr);
    if win == 0 || hop == 0 {
        return Err(Error::Config("window and hop must cover at least one sample".into()));
    }
    let n = audio.len();
    if n < win {
        return Err(Error::AudioTooShort {
            samples: n,
            required: win,
        });
    }
    let frames = (n - win) / hop + 1;
    let n_fft = win.next_power_of_two();
    let high = cfg.high_hz.unwrap_or(sr as f64 / 2.0);
    let filters = mel_filters(cfg.n_mels, n_fft, sr, cfg.low_hz, high);
    let window = hamming(win);

    let x = &audio.samples;
    let mut emphasized = Vec::with_capacity(n);
    emphasized.push(x[0]);
    for i in 1..n {
        emphasized.push(x[i] - cfg.preemphasis * x[i - 1]);
    }

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = Mat::zeros((frames, n_fft / 2 + 1));
    for t in 0..frames {
        let start = t * hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < win {
                Complex::new(emphasized[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (k, p) in power.row_mut(t).iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
    }
    let energies = power.dot(&filters.t());
    let logs = energies.mapv(|e| e.max(cfg.floor).ln() as f32);
    FeatureMatrix::new(logs, cfg.frame_shift_us(), "fbk")
}

/// Changes the frame rate by an integer factor: upsampling repeats each
/// row, downsampling keeps every k-th row starting from row 0.
pub fn resample_frames(f: &FeatureMatrix, target_shift_us: u32) -> Result<FeatureMatrix> {
    let from = f.frame_shift_us;
    if target_shift_us == 0 {
        return Err(Error::Config("target frame shift must be positive".into()));
    }
    if from == target_shift_us {
        return Ok(f.clone());
    }
    let data = if from % target_shift_us == 0 {
        let k = (from / target_shift_us) as usize;
        let mut out = Array2::zeros((f.frames() * k, f.dim()));
        for (t, row) in f.data.rows().into_iter().enumerate() {
            for j in 0..k {
                out.row_mut(t * k + j).assign(&row);
            }
        }
        out
    } else if target_shift_us % from == 0 {
        let k = (target_shift_us / from) as usize;
        let keep: Vec<usize> = (0..f.frames()).step_by(k).collect();
        f.data.select(Axis(0), &keep)
    } else {
        return Err(Error::NonIntegerRatio {
            from_us: from,
            to_us: target_shift_us,
        });
    };
    FeatureMatrix::new(data, target_shift_us, f.label.clone())
}

/// Resamples every stream to `target_shift_us`, truncates to the shortest,
/// and concatenates along the feature axis. Labels are joined with `+`.
pub fn fuse_features(streams: &[FeatureMatrix], target_shift_us: u32) -> Result<FeatureMatrix> {
    if streams.is_empty() {
        return Err(Error::Config("fuse_features needs at least one stream".into()));
    }
    let resampled = streams
        .iter()
        .map(|s| resample_frames(s, target_shift_us))
        .collect::<Result<Vec<_>>>()?;
    let frames = resampled.iter().map(FeatureMatrix::frames).min().unwrap();
    let views: Vec<_> = resampled.iter().map(|s| s.data.slice(s![..frames, ..])).collect();
    let data = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let label = resampled
        .iter()
        .map(|s| s.label.as_str())
        .collect::<Vec<_>>()
        .join("+");
    FeatureMatrix::new(data, target_shift_us, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tone(freq: f64, n: usize) -> AudioBuffer {
        let samples = (0..n)
            .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / 16000.0).sin())
            .collect();
        AudioBuffer::new(samples, 16000).unwrap()
    }

    fn matrix(rows: usize, cols: usize, shift: u32) -> FeatureMatrix {
        let data = Array2::from_shape_fn((rows, cols), |(r, c)| (r * 100 + c) as f32);
        FeatureMatrix::new(data, shift, "x").unwrap()
    }

    #[test]
    fn one_window_gives_one_frame() {
        let f = compute_fbank(&tone(440.0, 400), &FbankConfig::default()).unwrap();
        assert_eq!((f.frames(), f.dim()), (1, 40));
        assert_eq!(f.frame_shift_us(), 10_000);
    }

    #[test]
    fn short_audio_is_rejected() {
        let err = compute_fbank(&tone(440.0, 399), &FbankConfig::default()).unwrap_err();
        assert!(matches!(err, Error::AudioTooShort { samples: 399, required: 400 }));
    }

    #[test]
    fn silence_is_log_floor_everywhere() {
        let audio = AudioBuffer::new(vec![0.0; 1600], 16000).unwrap();
        let cfg = FbankConfig::default();
        let f = compute_fbank(&audio, &cfg).unwrap();
        let expected = cfg.floor.ln() as f32;
        assert!(f.data().iter().all(|&v| v == expected));
    }

    #[test]
    fn pure_tone_peaks_at_nearest_mel_centre() {
        // Independent oracle: centre frequencies of 40 mel bands spanning 0..8 kHz.
        let mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
        let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let top = mel(8000.0);
        let centres: Vec<f64> = (1..=40).map(|i| inv(top * i as f64 / 41.0)).collect();
        let nearest = centres
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().partial_cmp(&(b.1 - 1000.0).abs()).unwrap())
            .unwrap()
            .0;
        let f = compute_fbank(&tone(1000.0, 4000), &FbankConfig::default()).unwrap();
        for row in f.data().rows() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, nearest);
        }
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = FbankConfig {
            win_ms: 5.0,
            ..FbankConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = FbankConfig {
            floor: 0.0,
            ..FbankConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn upsample_20ms_doubles_rows() {
        let f = matrix(5, 3, 20_000);
        let up = resample_frames(&f, 10_000).unwrap();
        assert_eq!(up.frames(), 10);
        assert_eq!(up.frame_shift_us(), 10_000);
        assert_eq!(up.data().row(3), f.data().row(1));
    }

    #[test]
    fn decimation_keeps_even_rows() {
        let f = matrix(7, 2, 10_000);
        let down = resample_frames(&f, 20_000).unwrap();
        assert_eq!(down.frames(), 4);
        for (i, src) in [0, 2, 4, 6].into_iter().enumerate() {
            assert_eq!(down.data().row(i), f.data().row(src));
        }
    }

    #[test]
    fn same_shift_is_identity_and_bad_ratio_errors() {
        let f = matrix(4, 2, 10_000);
        assert_eq!(resample_frames(&f, 10_000).unwrap(), f);
        assert!(matches!(
            resample_frames(&f, 15_000),
            Err(Error::NonIntegerRatio { .. })
        ));
        let g = matrix(4, 2, 15_000);
        assert!(matches!(
            resample_frames(&g, 10_000),
            Err(Error::NonIntegerRatio { .. })
        ));
    }

    #[test]
    fn fusion_of_fbank_and_bottleneck_widths() {
        let fbk = matrix(98, 40, 10_000);
        let bn = matrix(49, 256, 20_000);
        let fused = fuse_features(&[fbk, bn], 10_000).unwrap();
        assert_eq!((fused.frames(), fused.dim()), (98, 296));
        assert_eq!(fused.label(), "x+x");
    }

    #[test]
    fn fusion_truncates_to_shortest() {
        let fused = fuse_features(&[matrix(100, 2, 10_000), matrix(99, 3, 10_000)], 10_000).unwrap();
        assert_eq!((fused.frames(), fused.dim()), (99, 5));
        let single = matrix(10, 4, 10_000);
        assert_eq!(fuse_features(&[single.clone()], 10_000).unwrap(), single);
        assert!(fuse_features(&[], 10_000).is_err());
    }

    #[test]
    fn file_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.sff");
        let mut bytes = matrix(3, 2, 10_000).to_bytes();
        write_features(&matrix(3, 2, 10_000), &path).unwrap();
        assert_eq!(read_features(&path).unwrap(), matrix(3, 2, 10_000));

        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(FeatureMatrix::from_bytes(&bytes, &path), Err(Error::BadMagic { .. })));

        let mut bytes = matrix(3, 2, 10_000).to_bytes();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            FeatureMatrix::from_bytes(&bytes, &path),
            Err(Error::VersionMismatch { found: 2, .. })
        ));

        let mut bytes = matrix(3, 2, 10_000).to_bytes();
        bytes[8..12].copy_from_slice(&50u32.to_le_bytes());
        assert!(matches!(FeatureMatrix::from_bytes(&bytes, &path), Err(Error::Truncated { .. })));
    }

    proptest! {
        #[test]
        fn frame_count_formula(n in 400usize..4000, hop_ms in 1u32..25) {
            let cfg = FbankConfig { hop_ms: hop_ms as f64, n_mels: 8, ..FbankConfig::default() };
            let audio = AudioBuffer::new(vec![0.1; n], 16000).unwrap();
            let f = compute_fbank(&audio, &cfg).unwrap();
            let hop = (hop_ms * 16) as usize;
            prop_assert_eq!(f.frames(), (n - 400) / hop + 1);
        }

        #[test]
        fn up_then_down_recovers_rows(t in 1usize..30, d in 1usize..5, k in 2u32..5) {
            let f = matrix(t, d, 10_000 * k);
            let up = resample_frames(&f, 10_000).unwrap();
            let back = resample_frames(&up, 10_000 * k).unwrap();
            prop_assert_eq!(&back, &f);
            for r in 0..t {
                prop_assert_eq!(up.data().row(r * k as usize), f.data().row(r));
            }
        }

        #[test]
        fn fused_shape(t1 in 1usize..40, t2 in 1usize..40, d1 in 1usize..6, d2 in 1usize..6) {
            let fused = fuse_features(&[matrix(t1, d1, 20_000), matrix(t2, d2, 10_000)], 10_000).unwrap();
            prop_assert_eq!(fused.dim(), d1 + d2);
            prop_assert_eq!(fused.frames(), (2 * t1).min(t2));
        }

        #[test]
        fn file_round_trip_is_bit_exact(
            rows in 1usize..12,
            cols in 1usize..12,
            shift in 1u32..100_000,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = Array2::from_shape_fn((rows, cols), |_| {
                let bits: u32 = rng.gen();
                let v = f32::from_bits(bits);
                if v.is_finite() { v } else { 1.5 }
            });
            let f = FeatureMatrix::new(data, shift, "w2v-bn").unwrap();
            let back = FeatureMatrix::from_bytes(&f.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.frame_shift_us(), shift);
            for (a, b) in f.data().iter().zip(back.data().iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
