//! Named parameter tensors, their container file, and the optimizers that
//! update them.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Mat};

const PARAM_MAGIC: &[u8; 4] = b"SPM1";
const PARAM_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Mat>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Mat> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Copies every tensor of `other` into `self`, overwriting on name clash.
    pub fn merge(&mut self, other: &ParameterStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Tensors whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterStore {
        ParameterStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Glorot-uniform weight matrix.
    pub fn init_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Mat::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-limit..limit));
        self.insert(name, w);
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Mat::zeros((rows, cols)));
    }

    pub fn init_const(&mut self, name: &str, rows: usize, cols: usize, value: f64) {
        self.insert(name, Mat::from_elem((rows, cols), value));
    }

    pub fn init_uniform(&mut self, name: &str, rows: usize, cols: usize, limit: f64, rng: &mut ChaCha8Rng) {
        let w = Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit));
        self.insert(name, w);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0, path };
        if r.take(4)? != PARAM_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "SPM1",
            });
        }
        let version = r.u32()?;
        if version != PARAM_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: PARAM_VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
            let rank = r.u32()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let (rows, cols) = match dims.as_slice() {
                [n] => (1, *n),
                [a, b] => (*a, *b),
                _ => {
                    return Err(Error::Shape(format!(
                        "tensor {name:?} has unsupported rank {rank}"
                    )))
                }
            };
            let payload = r.take(rows * cols * 8)?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Mat::from_shape_vec((rows, cols), data).map_err(|e| Error::Shape(e.to_string()))?;
            tensors.insert(name, t);
        }
        Ok(ParameterStore { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!(
                    "need {} bytes at offset {}, file has {}",
                    n,
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Which parameters an optimizer step may touch. A parameter is trainable
/// iff its name starts with one of the prefixes and none of the excludes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UpdateMask {
    include: Option<Vec<String>>,
    exclude: Vec<String>,
}

impl UpdateMask {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn only<I, S>(prefixes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            include: Some(prefixes.into_iter().map(Into::into).collect()),
            exclude: Vec::new(),
        }
    }

    pub fn excluding<I, S>(mut self, prefixes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.exclude.extend(prefixes.into_iter().map(Into::into));
        self
    }

    pub fn allows(&self, name: &str) -> bool {
        let included = match &self.include {
            None => true,
            Some(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        };
        included && !self.exclude.iter().any(|p| name.starts_with(p.as_str()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Linear decay of the learning rate to `lr * final_lr_fraction` over
    /// the scheduled number of steps.
    pub final_lr_fraction: f64,
    /// Global-norm gradient clipping; `0` disables it.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr: 2e-3,
            final_lr_fraction: 0.0,
            clip_norm: 5.0,
        }
    }
}

impl OptimizerConfig {
    /// Momentum SGD from 1e-5 with linear decay, the schedule used when
    /// fine-tuning a full-size pretrained model.
    pub fn large_model_finetune() -> Self {
        Self {
            kind: OptimizerKind::Sgd { momentum: 0.9 },
            lr: 1e-5,
            final_lr_fraction: 0.0,
            clip_norm: 0.0,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }
}

#[derive(Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    total_steps: usize,
    step: usize,
    first: BTreeMap<String, Mat>,
    second: BTreeMap<String, Mat>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, total_steps: usize) -> Self {
        Self {
            cfg,
            total_steps: total_steps.max(1),
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        let progress = (self.step as f64 / self.total_steps as f64).min(1.0);
        self.cfg.lr * (1.0 - progress * (1.0 - self.cfg.final_lr_fraction))
    }

    /// Applies one update to every parameter allowed by `mask`.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &Gradients, mask: &UpdateMask) {
        let lr = self.current_lr();
        let clip = if self.cfg.clip_norm > 0.0 {
            let norm = grads.global_norm();
            if norm > self.cfg.clip_norm {
                self.cfg.clip_norm / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        for (name, g) in grads.iter() {
            if !mask.allows(name) {
                continue;
            }
            let Some(p) = params.get_mut(name) else { continue };
            let g = g * clip;
            match self.cfg.kind {
                OptimizerKind::Sgd { momentum } => {
                    let v = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Mat::zeros(g.dim()));
                    v.zip_mut_with(&g, |vv, &gg| *vv = momentum * *vv + gg);
                    p.zip_mut_with(v, |pp, &vv| *pp -= lr * vv);
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Mat::zeros(g.dim()));
                    m.zip_mut_with(&g, |mm, &gg| *mm = beta1 * *mm + (1.0 - beta1) * gg);
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Mat::zeros(g.dim()));
                    v.zip_mut_with(&g, |vv, &gg| *vv = beta2 * *vv + (1.0 - beta2) * gg * gg);
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    ndarray::Zip::from(&mut *p)
                        .and(&*m)
                        .and(&*v)
                        .for_each(|pp, &mm, &vv| {
                            *pp -= lr * (mm / bc1) / ((vv / bc2).sqrt() + eps);
                        });
                }
            }
        }
    }
}
