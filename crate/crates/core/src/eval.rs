//! Word error rate scoring and partitioned reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Condition, Manifest, Subset};
use crate::error::{Error, Result};

/// Error counts of one alignment or of a set of them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `100 * errors / ref_words`; `None` when there are no reference words.
    pub fn wer(&self) -> Option<f64> {
        (self.ref_words > 0).then(|| 100.0 * self.errors() as f64 / self.ref_words as f64)
    }

    pub fn add(&mut self, other: &ErrorCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_words += other.ref_words;
    }
}

/// Minimum-edit alignment with unit costs. Among equal-cost alignments the
/// one with the most substitutions is preferred, then the fewest deletions.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> ErrorCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    // (cost, -subs, dels) minimised lexicographically; store (cost, s, d, i)
    let mut prev: Vec<(usize, usize, usize, usize)> = (0..=m).map(|j| (j, 0, 0, j)).collect();
    let better = |a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)| {
        (a.0, usize::MAX - a.1, a.2) < (b.0, usize::MAX - b.1, b.2)
    };
    for i in 1..=n {
        let mut cur = vec![(i, 0, i, 0); m + 1];
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let d = prev[j - 1];
            let diag = if same { d } else { (d.0 + 1, d.1 + 1, d.2, d.3) };
            let u = prev[j];
            let del = (u.0 + 1, u.1, u.2 + 1, u.3);
            let l = cur[j - 1];
            let ins = (l.0 + 1, l.1, l.2, l.3 + 1);
            let mut best = diag;
            for c in [del, ins] {
                if better(c, best) {
                    best = c;
                }
            }
            cur[j] = best;
        }
        prev = cur;
    }
    let (_, s, d, i) = prev[m];
    ErrorCounts {
        substitutions: s,
        deletions: d,
        insertions: i,
        ref_words: n,
    }
}

/// Plain Levenshtein distance over any comparable items.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttResult {
    pub id: String,
    pub hypothesis: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionScore {
    #[serde(flatten)]
    pub counts: ErrorCounts,
    pub utterances: usize,
    /// Percent; `None` with zero reference words.
    pub wer: Option<f64>,
}

impl PartitionScore {
    fn new(counts: ErrorCounts, utterances: usize) -> Self {
        Self {
            counts,
            utterances,
            wer: counts.wer(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub overall: PartitionScore,
    /// Keyed by subset name; subsets with no scored utterance are absent.
    pub by_subset: BTreeMap<String, PartitionScore>,
    pub by_condition: BTreeMap<String, PartitionScore>,
    /// Subset x condition cells, keyed `"subset/condition"`.
    pub by_cell: BTreeMap<String, PartitionScore>,
}

impl WerReport {
    pub fn subset_wer(&self, subset: Subset) -> Option<f64> {
        self.by_subset.get(subset.as_str()).and_then(|p| p.wer)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table, one row per partition.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, &PartitionScore)> = vec![("all".to_string(), &self.overall)];
        rows.extend(self.by_subset.iter().map(|(k, v)| (format!("subset:{k}"), v)));
        rows.extend(self.by_condition.iter().map(|(k, v)| (format!("condition:{k}"), v)));
        rows.extend(self.by_cell.iter().map(|(k, v)| (k.clone(), v)));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(9).max(9);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$} {:>6} {:>6} {:>5} {:>5} {:>5} {:>8}", "partition", "utts", "words", "sub", "del", "ins", "wer%");
        for (name, p) in rows {
            let wer = p.wer.map(|w| format!("{w:.2}")).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(
                out,
                "{:<width$} {:>6} {:>6} {:>5} {:>5} {:>5} {:>8}",
                name, p.utterances, p.counts.ref_words, p.counts.substitutions, p.counts.deletions, p.counts.insertions, wer
            );
        }
        out
    }
}

/// Scores `results` against manifest transcripts, broken down by subset and
/// condition.
pub fn partition_report(results: &[UttResult], manifest: &Manifest) -> Result<WerReport> {
    let mut overall = ErrorCounts::default();
    let mut subsets: BTreeMap<String, (ErrorCounts, usize)> = BTreeMap::new();
    let mut conditions: BTreeMap<String, (ErrorCounts, usize)> = BTreeMap::new();
    let mut cells: BTreeMap<String, (ErrorCounts, usize)> = BTreeMap::new();
    for r in results {
        let rec = manifest
            .get(&r.id)
            .ok_or_else(|| Error::UnknownUtterance(r.id.clone()))?;
        let reference: Vec<&str> = rec.transcript.split_whitespace().collect();
        let hyp: Vec<&str> = r.hypothesis.iter().map(String::as_str).collect();
        let c = wer(&reference, &hyp);
        overall.add(&c);
        for (map, key) in [
            (&mut subsets, rec.subset.as_str().to_string()),
            (&mut conditions, rec.condition.as_str().to_string()),
            (&mut cells, format!("{}/{}", rec.subset.as_str(), rec.condition.as_str())),
        ] {
            let e = map.entry(key).or_default();
            e.0.add(&c);
            e.1 += 1;
        }
    }
    let finish = |m: BTreeMap<String, (ErrorCounts, usize)>| {
        m.into_iter().map(|(k, (c, n))| (k, PartitionScore::new(c, n))).collect()
    };
    Ok(WerReport {
        overall: PartitionScore::new(overall, results.len()),
        by_subset: finish(subsets),
        by_condition: finish(conditions),
        by_cell: finish(cells),
    })
}

/// Convenience for checking one condition by name.
pub fn condition_wer(report: &WerReport, condition: Condition) -> Option<f64> {
    report.by_condition.get(condition.as_str()).and_then(|p| p.wer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn analytic_alignments() {
        let c = wer(&w("a b c"), &w("a b c"));
        assert_eq!(c.errors(), 0);
        assert_eq!(c.wer(), Some(0.0));
        let c = wer(&w("a b c"), &w("a c"));
        assert_eq!((c.substitutions, c.deletions, c.insertions), (0, 1, 0));
        assert!((c.wer().unwrap() - 100.0 / 3.0).abs() < 1e-9);
        let c = wer(&w("a b c"), &[]);
        assert_eq!(c.deletions, 3);
        assert_eq!(c.wer(), Some(100.0));
        let c = wer(&[], &w("x y"));
        assert_eq!((c.insertions, c.ref_words, c.wer()), (2, 0, None));
        let c = wer(&w("a b"), &w("x y"));
        assert_eq!((c.substitutions, c.deletions, c.insertions), (2, 0, 0));
    }

    proptest! {
        #[test]
        fn error_total_is_edit_distance(a in prop::collection::vec(0u8..4, 0..8), b in prop::collection::vec(0u8..4, 0..8)) {
            let sa: Vec<String> = a.iter().map(|x| x.to_string()).collect();
            let sb: Vec<String> = b.iter().map(|x| x.to_string()).collect();
            let c = wer(&sa, &sb);
            prop_assert_eq!(c.errors(), edit_distance(&a, &b));
            prop_assert_eq!(c.ref_words, a.len());
            // hyp length = ref - del + ins
            prop_assert_eq!(sb.len() + c.deletions, sa.len() + c.insertions);
        }
    }
}
