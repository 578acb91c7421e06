use ndarray::ArrayView1;

use crate::error::{Error, Result};
use crate::graph::{log_sum_exp, Mat};

use super::masking::DistractorSample;

const NORM_GUARD: f64 = 1e-12;

/// Cosine similarity with `1e-12` added to each norm.
pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt() + NORM_GUARD;
    let nb = b.dot(&b).sqrt() + NORM_GUARD;
    a.dot(&b) / (na * nb)
}

/// d cos(a, b) / d a, consistent with [`cosine_similarity`].
fn cosine_grad_a(a: ArrayView1<f64>, b: ArrayView1<f64>) -> ndarray::Array1<f64> {
    let raw = a.dot(&a).sqrt();
    let na = raw + NORM_GUARD;
    let nb = b.dot(&b).sqrt() + NORM_GUARD;
    let dot = a.dot(&b);
    let mut g = b.to_owned() / (na * nb);
    if raw > 0.0 {
        g.scaled_add(-dot / (na * na * nb * raw), &a);
    }
    g
}

#[derive(Clone, Debug)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub grad_context: Mat,
    pub grad_quantized: Mat,
}

/// Masked contrastive loss: for each masked frame the true quantized target
/// competes against its distractors through a temperature-scaled softmax
/// over cosine similarities. Returned value is the mean over masked frames.
pub fn contrastive_loss(
    context: &Mat,
    quantized: &Mat,
    masked: &[usize],
    distractors: &DistractorSample,
    kappa: f64,
) -> Result<ContrastiveOutput> {
    if context.dim() != quantized.dim() {
        return Err(Error::Shape(format!(
            "context {:?} vs quantized {:?}",
            context.dim(),
            quantized.dim()
        )));
    }
    if masked.is_empty() {
        return Err(Error::Config("contrastive loss needs at least one masked frame".into()));
    }
    if distractors.distractors.len() != masked.len() {
        return Err(Error::Shape(format!(
            "{} distractor sets for {} masked frames",
            distractors.distractors.len(),
            masked.len()
        )));
    }
    if !(kappa > 0.0) {
        return Err(Error::Config(format!("contrastive temperature must be positive, got {kappa}")));
    }
    let mut grad_c = Mat::zeros(context.dim());
    let mut grad_q = Mat::zeros(quantized.dim());
    let mut total = 0.0;
    let scale = 1.0 / masked.len() as f64;
    for (&t, negs) in masked.iter().zip(&distractors.distractors) {
        let c = context.row(t);
        let candidates: Vec<usize> = std::iter::once(t).chain(negs.iter().copied()).collect();
        let logits: Vec<f64> = candidates
            .iter()
            .map(|&j| cosine_similarity(c, quantized.row(j)) / kappa)
            .collect();
        let lse = log_sum_exp(logits.iter().copied());
        total += lse - logits[0];
        for (idx, &j) in candidates.iter().enumerate() {
            let p = (logits[idx] - lse).exp();
            let coeff = (p - if idx == 0 { 1.0 } else { 0.0 }) * scale / kappa;
            if coeff == 0.0 {
                continue;
            }
            let q = quantized.row(j);
            let gc = cosine_grad_a(c, q);
            let gq = cosine_grad_a(q, c);
            grad_c.row_mut(t).scaled_add(coeff, &gc);
            grad_q.row_mut(j).scaled_add(coeff, &gq);
        }
    }
    Ok(ContrastiveOutput {
        loss: total * scale,
        grad_context: grad_c,
        grad_quantized: grad_q,
    })
}

/// Codebook diversity penalty `(G*V - sum_g exp(H(mean_g))) / (G*V)`, where
/// `mean_g` is the frame-averaged distribution of group `g`. `probs` is
/// `T x (G*V)` with each group block a distribution. Returns the value and
/// its gradient with respect to `probs`.
pub fn diversity_loss(probs: &Mat, groups: usize) -> Result<(f64, Mat)> {
    let (t, width) = probs.dim();
    if groups == 0 || width % groups != 0 || t == 0 {
        return Err(Error::Shape(format!("{t}x{width} probabilities for {groups} groups")));
    }
    let entries = width / groups;
    for (r, row) in probs.rows().into_iter().enumerate() {
        for g in 0..groups {
            let block = row.slice(ndarray::s![g * entries..(g + 1) * entries]);
            let sum: f64 = block.sum();
            if (sum - 1.0).abs() > 1e-6 || block.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::InvalidDistribution(format!(
                    "frame {r} group {g} sums to {sum}"
                )));
            }
        }
    }
    let mean = probs.sum_axis(ndarray::Axis(0)) / t as f64;
    let total = (groups * entries) as f64;
    let mut perplexity_sum = 0.0;
    let mut grad_mean = vec![0.0; width];
    for g in 0..groups {
        let block = &mean.as_slice().unwrap()[g * entries..(g + 1) * entries];
        let entropy: f64 = block
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum();
        let perplexity = entropy.exp();
        perplexity_sum += perplexity;
        for (v, &p) in block.iter().enumerate() {
            // d/dp of -(1/total) exp(H); dH/dp = -(ln p + 1)
            let ln_p = p.max(f64::MIN_POSITIVE).ln();
            grad_mean[g * entries + v] = perplexity * (ln_p + 1.0) / total;
        }
    }
    let loss = (total - perplexity_sum) / total;
    let grad = Mat::from_shape_fn((t, width), |(_, c)| grad_mean[c] / t as f64);
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    fn sample(distractors: Vec<Vec<usize>>) -> DistractorSample {
        DistractorSample { distractors, reduced: 0 }
    }

    #[test]
    fn no_distractors_gives_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random(4, 3, &mut rng);
        let q = random(4, 3, &mut rng);
        let out = contrastive_loss(&c, &q, &[0, 2], &sample(vec![vec![], vec![]]), 0.1).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_context.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn identical_distractors_give_log_k_plus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random(6, 3, &mut rng);
        let row = random(1, 3, &mut rng);
        let q = Mat::from_shape_fn((6, 3), |(_, j)| row[[0, j]]);
        let out = contrastive_loss(&c, &q, &[0], &sample(vec![vec![1, 2, 3, 4]]), 0.1).unwrap();
        assert!((out.loss - 5f64.ln()).abs() < 1e-12);
        assert!((out.loss - 1.60944).abs() < 1e-5);
    }

    #[test]
    fn matches_direct_scalar_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = random(5, 3, &mut rng);
        let q = random(5, 3, &mut rng);
        let kappa = 0.1;
        let masked = [0, 1, 3];
        let negs = vec![vec![1, 3], vec![0, 3], vec![1, 0]];
        let out = contrastive_loss(&c, &q, &masked, &sample(negs.clone()), kappa).unwrap();

        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-12;
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-12;
            dot / (na * nb)
        };
        let row = |m: &Mat, i: usize| m.row(i).to_vec();
        let mut expected = 0.0;
        for (i, &t) in masked.iter().enumerate() {
            let num = (cos(&row(&c, t), &row(&q, t)) / kappa).exp();
            let mut den = num;
            for &j in &negs[i] {
                den += (cos(&row(&c, t), &row(&q, j)) / kappa).exp();
            }
            expected += -(num / den).ln();
        }
        expected /= masked.len() as f64;
        assert!((out.loss - expected).abs() < 1e-10);
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random(5, 4, &mut rng);
        let q = random(5, 4, &mut rng);
        let masked = [0, 2, 4];
        let negs = sample(vec![vec![2, 4], vec![0], vec![0, 2]]);
        let out = contrastive_loss(&c, &q, &masked, &negs, 0.2).unwrap();
        let h = 1e-5;
        for which in 0..2 {
            for idx in 0..20 {
                let (r, k) = (idx / 4, idx % 4);
                let eval = |d: f64| {
                    let (mut c2, mut q2) = (c.clone(), q.clone());
                    if which == 0 { c2[[r, k]] += d } else { q2[[r, k]] += d }
                    contrastive_loss(&c2, &q2, &masked, &negs, 0.2).unwrap().loss
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = if which == 0 { out.grad_context[[r, k]] } else { out.grad_quantized[[r, k]] };
                assert!((a - numeric).abs() <= 1e-4 * a.abs().max(numeric.abs()).max(1e-6), "{which} [{r},{k}] {a} {numeric}");
            }
        }
    }

    #[test]
    fn uniform_usage_has_zero_diversity_loss() {
        let probs = Mat::from_elem((3, 16), 1.0 / 8.0);
        let (loss, _) = diversity_loss(&probs, 2).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn collapsed_usage_g2_v8() {
        let mut probs = Mat::zeros((4, 16));
        for r in 0..4 {
            probs[[r, 3]] = 1.0;
            probs[[r, 8 + 5]] = 1.0;
        }
        let (loss, _) = diversity_loss(&probs, 2).unwrap();
        assert!((loss - 0.875).abs() < 1e-12);
    }

    #[test]
    fn unnormalised_rows_rejected() {
        assert!(matches!(
            diversity_loss(&array![[0.5, 0.6]], 1),
            Err(Error::InvalidDistribution(_))
        ));
    }
}
