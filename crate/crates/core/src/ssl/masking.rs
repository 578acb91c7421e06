use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSample {
    pub span_starts: Vec<usize>,
    /// Sorted, unique masked frame indices.
    pub masked: Vec<usize>,
}

/// Each frame becomes a span start with probability `mask_prob`; a frame is
/// masked iff some span `[start, start + span)` covers it. At least one span
/// is always drawn so every utterance contributes to the contrastive task.
pub fn compute_mask(frames: usize, mask_prob: f64, span: usize, rng: &mut ChaCha8Rng) -> MaskSample {
    let mut starts: Vec<usize> = (0..frames).filter(|_| rng.gen::<f64>() < mask_prob).collect();
    if starts.is_empty() && frames > 0 {
        starts.push(rng.gen_range(0..frames));
    }
    let mut covered = vec![false; frames];
    for &s in &starts {
        for c in covered.iter_mut().skip(s).take(span) {
            *c = true;
        }
    }
    let masked = covered
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    MaskSample {
        span_starts: starts,
        masked,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistractorSample {
    /// `distractors[i]` lists frames used as negatives for `masked[i]`.
    pub distractors: Vec<Vec<usize>>,
    /// Masked frames that received fewer than the requested `K`.
    pub reduced: usize,
}

/// Draws `k` negatives per masked frame, uniformly without replacement from
/// the other masked frames of the same utterance. Frames with fewer than
/// `k` candidates get all of them.
pub fn sample_distractors(masked: &[usize], k: usize, rng: &mut ChaCha8Rng) -> DistractorSample {
    let n = masked.len();
    let mut reduced = 0;
    let distractors = (0..n)
        .map(|i| {
            let pool = n - 1;
            let take = if pool < k {
                reduced += 1;
                pool
            } else {
                k
            };
            if take == 0 {
                return Vec::new();
            }
            sample(rng, pool, take)
                .into_iter()
                .map(|j| masked[if j >= i { j + 1 } else { j }])
                .collect()
        })
        .collect();
    DistractorSample { distractors, reduced }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    proptest! {
        #[test]
        fn masked_iff_covered_by_a_span(seed in any::<u64>(), frames in 1usize..120, p in 0.0f64..0.3, span in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = compute_mask(frames, p, span, &mut rng);
            prop_assert!(!m.span_starts.is_empty());
            for t in 0..frames {
                let covered = m.span_starts.iter().any(|&s| t >= s && t < s + span);
                prop_assert_eq!(covered, m.masked.binary_search(&t).is_ok());
            }
        }

        #[test]
        fn distractors_exclude_self_and_stay_masked(seed in any::<u64>(), n in 1usize..30, k in 0usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let masked: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
            let d = sample_distractors(&masked, k, &mut rng);
            let expect_reduced = if n - 1 < k { n } else { 0 };
            prop_assert_eq!(d.reduced, expect_reduced);
            for (i, negs) in d.distractors.iter().enumerate() {
                prop_assert_eq!(negs.len(), k.min(n - 1));
                let mut uniq = negs.clone();
                uniq.sort();
                uniq.dedup();
                prop_assert_eq!(uniq.len(), negs.len());
                prop_assert!(!negs.contains(&masked[i]));
                prop_assert!(negs.iter().all(|x| masked.contains(x)));
            }
        }
    }

    #[test]
    fn full_mask_probability_masks_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = compute_mask(20, 1.0, 1, &mut rng);
        assert_eq!(m.masked, (0..20).collect::<Vec<_>>());
    }
}
