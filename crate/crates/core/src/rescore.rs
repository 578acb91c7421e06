//! Second-pass N-best rescoring with CTC posteriors.

use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_forward_score, NBestEntry, NBestList, PosteriorStream};
use crate::error::{Error, Result};
use crate::joint::FIRST_PASS_KEY;

pub const SECOND_PASS_KEY: &str = "w2v";

/// Adds the CTC cost of every entry under `"w2v"`. Entries the stream is too
/// short to emit get an infinite cost.
pub fn score_nbest_with_ssl(nbest: &NBestList, stream: &PosteriorStream) -> Result<NBestList> {
    let mut out = nbest.clone();
    for e in &mut out.entries {
        let cost = match ctc_forward_score(stream, &e.tokens) {
            Ok(c) => c,
            Err(Error::Unsatisfiable { .. }) => f64::INFINITY,
            Err(err) => return Err(err),
        };
        e.costs.insert(SECOND_PASS_KEY.to_string(), cost);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescoreWeights {
    /// Weight on the second-pass cost.
    pub alpha: f64,
    /// Weight on the first-pass cost.
    pub beta: f64,
}

impl Default for RescoreWeights {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 9.0 }
    }
}

impl RescoreWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite()) || alpha < 0.0 || beta < 0.0 || alpha + beta == 0.0 {
            return Err(Error::Config(format!("rescoring weights {alpha}:{beta} must be non-negative, not both zero")));
        }
        Ok(Self { alpha, beta })
    }

    /// Parses `"alpha:beta"`.
    pub fn parse(ratio: &str) -> Result<Self> {
        let parts: Vec<&str> = ratio.split(':').collect();
        let [a, b] = parts.as_slice() else {
            return Err(Error::Config(format!("expected alpha:beta, got {ratio:?}")));
        };
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad weight {s:?} in {ratio:?}")))
        };
        Self::new(num(a)?, num(b)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RescoreResult {
    /// Rank of the chosen entry in the input list.
    pub best_index: usize,
    pub best: NBestEntry,
    /// Input order, with `combined` set to the weighted cost.
    pub rescored: NBestList,
}

// A zero weight contributes nothing even when the cost is infinite.
fn weighted(w: f64, cost: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w * cost
    }
}

/// Chooses the entry minimising `alpha * w2v + beta * tdnn`. Ties go to the
/// entry ranked higher by the first pass.
pub fn rescore(nbest: &NBestList, w: RescoreWeights) -> Result<RescoreResult> {
    if nbest.entries.is_empty() {
        return Err(Error::Config(format!("empty N-best list for {:?}", nbest.utt_id)));
    }
    let mut out = nbest.clone();
    for (index, e) in out.entries.iter_mut().enumerate() {
        let get = |system: &str| {
            e.costs.get(system).copied().ok_or_else(|| Error::MissingCost {
                index,
                system: system.to_string(),
            })
        };
        let second = get(SECOND_PASS_KEY)?;
        let first = get(FIRST_PASS_KEY)?;
        if first.is_nan() || second.is_nan() {
            return Err(Error::NonFinite(format!("N-best entry {index} cost")));
        }
        e.combined = weighted(w.alpha, second) + weighted(w.beta, first);
    }
    let mut best_index = 0;
    for (i, e) in out.entries.iter().enumerate() {
        if e.combined < out.entries[best_index].combined {
            best_index = i;
        }
    }
    Ok(RescoreResult {
        best_index,
        best: out.entries[best_index].clone(),
        rescored: out,
    })
}
