//! Locating per-utterance artefacts. A path argument is either a single
//! file, whose stem is the utterance id, or a directory of such files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use ssl_hybrid::ctc::PosteriorStream;

pub const POSTERIOR_EXT: &str = "post";
pub const FEATURE_EXT: &str = "feat";

pub fn utt_files(path: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if path.is_dir() {
        let entries = fs::read_dir(path).with_context(|| format!("listing {}", path.display()))?;
        for entry in entries {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == ext) {
                out.insert(stem(&p)?, p);
            }
        }
        if out.is_empty() {
            bail!("no .{ext} files in {}", path.display());
        }
    } else if path.is_file() {
        out.insert(stem(path)?, path.to_path_buf());
    } else {
        bail!("{} does not exist", path.display());
    }
    Ok(out)
}

fn stem(p: &Path) -> Result<String> {
    p.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .with_context(|| format!("bad file name {}", p.display()))
}

/// Streams of several systems, paired by utterance id. The first system
/// decides which utterances are decoded; the others must cover them.
pub fn paired_streams(paths: &[PathBuf]) -> Result<BTreeMap<String, Vec<PosteriorStream>>> {
    if paths.is_empty() {
        bail!("no posterior streams given");
    }
    let sets: Vec<BTreeMap<String, PathBuf>> = paths.iter().map(|p| utt_files(p, POSTERIOR_EXT)).collect::<Result<_>>()?;
    // Single files name systems, not utterances: pair them positionally.
    if sets.iter().all(|s| s.len() == 1) && paths.iter().all(|p| p.is_file()) {
        let id = sets[0].keys().next().cloned().unwrap_or_default();
        let streams = sets.iter().flat_map(|s| s.values()).map(|p| read_stream(p)).collect::<Result<_>>()?;
        return Ok(BTreeMap::from([(id, streams)]));
    }
    for (p, s) in paths.iter().zip(&sets).skip(1) {
        if let Some(id) = sets[0].keys().find(|id| !s.contains_key(*id)) {
            bail!("{} has no stream for {id}", p.display());
        }
    }
    let ids: Vec<&String> = sets[0].keys().collect();
    let streams: Vec<Vec<PosteriorStream>> = ids
        .par_iter()
        .map(|id| sets.iter().map(|s| read_stream(&s[*id])).collect())
        .collect::<Result<_>>()?;
    Ok(ids.into_iter().cloned().zip(streams).collect())
}

pub fn read_stream(p: &Path) -> Result<PosteriorStream> {
    PosteriorStream::read(p).with_context(|| format!("reading {}", p.display()))
}

/// Brings streams to the finest frame shift and the shortest length.
pub fn align_rates(streams: &[PosteriorStream]) -> Result<Vec<PosteriorStream>> {
    let shift = streams.iter().map(|s| s.frame_shift_us()).min().unwrap_or(10_000);
    let up: Vec<PosteriorStream> = streams.iter().map(|s| s.resample(shift)).collect::<ssl_hybrid::Result<_>>()?;
    let n = up.iter().map(|s| s.frames()).min().unwrap_or(0);
    Ok(up.iter().map(|s| s.truncated(n)).collect())
}
