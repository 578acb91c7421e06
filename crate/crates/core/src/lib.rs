//! Hybrid speech recognition toolkit pairing a small self-supervised
//! encoder with a frame-level back-end: feature extraction, CTC, posterior
//! combination, N-best rescoring, articulatory inversion and scoring.

pub mod audio;
pub mod bottleneck;
pub mod config;
pub mod corpus;
pub mod ctc;
pub mod error;
pub mod eval;
pub mod features;
pub mod frame_am;
pub mod graph;
pub mod joint;
pub mod mdn;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod rescore;
pub mod ssl;
pub mod training;

pub use error::{Error, Result};
