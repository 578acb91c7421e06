//! Acceptance checks. Each test prints one `[PASS]` or `[FAIL]` line; run
//! with `--nocapture` to see them.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssl_hybrid::bottleneck::{bottleneck_forward, extract_bn_features, init_bottleneck, reconstruction_graph, BottleneckConfig};
use ssl_hybrid::config::Config;
use ssl_hybrid::corpus::{Manifest, Subset};
use ssl_hybrid::ctc::{ctc_forward_score, ctc_loss, min_frames, NBestEntry, NBestList, PosteriorStream, TokenVocab};
use ssl_hybrid::eval::{partition_report, wer, ErrorCounts, UttResult};
use ssl_hybrid::features::FeatureMatrix;
use ssl_hybrid::frame_am::{frame_cross_entropy, AmModel, SpliceConfig};
use ssl_hybrid::graph::{log_softmax_rows, softmax_rows, Graph, Mat};
use ssl_hybrid::joint::{
    decode, interpolate_posteriors, joint_decode, CombinationWeights, Lexicon, LexiconMode, LexiconWord, FIRST_PASS_KEY,
};
use ssl_hybrid::mdn::{init_mdn, mdn_forward, mdn_nll_raw, mdn_predict, rmse, train_inversion, MdnConfig};
use ssl_hybrid::params::ParameterStore;
use ssl_hybrid::pipeline::{run_experiment, ExperimentReport, SYS_ARTIC, SYS_FBK, SYS_FUSED, SYS_JOINT, SYS_RESCORED, SYS_SSL};
use ssl_hybrid::rescore::{rescore, RescoreWeights, SECOND_PASS_KEY};
use ssl_hybrid::ssl::{contrastive_loss, diversity_loss, DistractorSample};
use ssl_hybrid::training::TrainOptions;

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {n} {name}: {detail}");
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_mat(rows: usize, cols: usize, scale: f64, r: &mut ChaCha8Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| r.gen_range(-scale..scale))
}

// ---------------------------------------------------------------- 1

/// Log of the total probability of every frame labelling that collapses to
/// `target`, by enumeration.
fn brute_force_log_prob(logp: &Mat, target: &[usize]) -> f64 {
    let (t_len, v) = logp.dim();
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0usize; t_len];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != 0 {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == target {
            let s: f64 = path.iter().enumerate().map(|(t, &k)| logp[[t, k]]).sum();
            total = if total == f64::NEG_INFINITY {
                s
            } else {
                total.max(s) + (-(total - s).abs()).exp().ln_1p()
            };
        }
        let mut i = 0;
        loop {
            if i == t_len {
                return total;
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

#[test]
fn c01_ctc_matches_path_enumeration() {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let mut unsat_ok = true;
    for i in 0..200 {
        let t = r.gen_range(1..=6);
        let v = r.gen_range(1..=4);
        let stream = PosteriorStream::from_log_scores(&random_mat(t, v + 1, 3.0, &mut r), 20_000, "r").unwrap();
        let target: Vec<usize> = loop {
            let len = r.gen_range(0..=t.min(4));
            let cand: Vec<usize> = (0..len).map(|_| r.gen_range(1..=v)).collect();
            if min_frames(&cand) <= t {
                break cand;
            }
        };
        let fast = -ctc_forward_score(&stream, &target).unwrap();
        let slow = brute_force_log_prob(stream.logp(), &target);
        worst = worst.max((fast - slow).abs());
        if i % 10 == 0 {
            let long = vec![1; t + 1];
            unsat_ok &= ctc_forward_score(&stream, &long).is_err();
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-9 && unsat_ok && elapsed < Duration::from_secs(5);
    verdict(
        1,
        "CTC oracle equivalence",
        pass,
        &format!("200 streams, max |diff| {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    );
}

// ---------------------------------------------------------------- 2

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
/// Denominator floor: coordinates whose true gradient is this small are
/// compared absolutely, where central differences are dominated by
/// rounding.
const FD_FLOOR: f64 = 1e-6;

struct GradCheck {
    coords: usize,
    worst: f64,
}

impl GradCheck {
    fn new() -> Self {
        Self { coords: 0, worst: 0.0 }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
        self.worst = self.worst.max(rel);
        self.coords += 1;
    }

    /// Central differences of `f` on `n` random coordinates of `x`.
    fn matrix(&mut self, x: &Mat, analytic: &Mat, n: usize, r: &mut ChaCha8Rng, f: impl Fn(&Mat) -> f64) {
        let mut idx: Vec<(usize, usize)> = (0..x.nrows()).flat_map(|i| (0..x.ncols()).map(move |j| (i, j))).collect();
        idx.shuffle(r);
        assert!(idx.len() >= n, "only {} coordinates", idx.len());
        for &(i, j) in &idx[..n] {
            let mut xp = x.clone();
            xp[[i, j]] += FD_STEP;
            let mut xm = x.clone();
            xm[[i, j]] -= FD_STEP;
            let numeric = (f(&xp) - f(&xm)) / (2.0 * FD_STEP);
            self.record(analytic[[i, j]], numeric);
        }
    }

    /// Same over the entries of a parameter store, skipping `skip` prefixes.
    fn params(
        &mut self,
        p: &ParameterStore,
        grads: &BTreeMap<String, Mat>,
        n: usize,
        skip: Option<&str>,
        r: &mut ChaCha8Rng,
        f: impl Fn(&ParameterStore) -> f64,
    ) {
        let mut idx: Vec<(String, usize, usize)> = p
            .iter()
            .filter(|(name, _)| skip.map_or(true, |s| !name.starts_with(s)))
            .flat_map(|(name, m)| {
                let name = name.clone();
                (0..m.nrows()).flat_map(move |i| {
                    let name = name.clone();
                    (0..m.ncols()).map(move |j| (name.clone(), i, j))
                })
            })
            .collect();
        idx.shuffle(r);
        assert!(idx.len() >= n, "only {} parameters", idx.len());
        for (name, i, j) in &idx[..n] {
            let bump = |d: f64| {
                let mut q = p.clone();
                q.get_mut(name).unwrap()[[*i, *j]] += d;
                f(&q)
            };
            let numeric = (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP);
            let analytic = grads.get(name).map_or(0.0, |g| g[[*i, *j]]);
            self.record(analytic, numeric);
        }
    }
}

fn tape_grads(g: &Graph, loss: ssl_hybrid::graph::Var, p: &ParameterStore) -> BTreeMap<String, Mat> {
    let grads = g.backward(loss);
    p.names()
        .filter_map(|n| grads.get(n).map(|m| (n.clone(), m.clone())))
        .collect()
}

fn grad_contrastive(r: &mut ChaCha8Rng) -> GradCheck {
    let (t, d) = (12, 6);
    let c = random_mat(t, d, 1.0, r);
    let q = random_mat(t, d, 1.0, r);
    let masked: Vec<usize> = vec![1, 2, 3, 6, 7, 8, 10];
    let distractors = DistractorSample {
        distractors: masked
            .iter()
            .map(|&m| masked.iter().copied().filter(|&o| o != m).take(4).collect())
            .collect(),
        reduced: 0,
    };
    let out = contrastive_loss(&c, &q, &masked, &distractors, 0.5).unwrap();
    let mut check = GradCheck::new();
    check.matrix(&c, &out.grad_context, 60, r, |x| contrastive_loss(x, &q, &masked, &distractors, 0.5).unwrap().loss);
    check.matrix(&q, &out.grad_quantized, 60, r, |x| contrastive_loss(&c, x, &masked, &distractors, 0.5).unwrap().loss);
    check
}

/// Per-group softmax of `logits`.
fn group_probs(logits: &Mat, groups: usize) -> Mat {
    let v = logits.ncols() / groups;
    let mut out = Mat::zeros(logits.dim());
    for gi in 0..groups {
        let cols = ndarray::s![.., gi * v..(gi + 1) * v];
        out.slice_mut(cols).assign(&softmax_rows(&logits.slice(cols).to_owned()));
    }
    out
}

// The penalty is defined on distributions, so the check runs through the
// softmax logits that feed it during pretraining.
fn grad_diversity(r: &mut ChaCha8Rng) -> GradCheck {
    let (t, groups, v) = (9, 2, 8);
    let logits = random_mat(t, groups * v, 2.0, r);
    let mut g = Graph::new();
    let x = g.param("logits", &logits);
    let blocks: Vec<_> = (0..groups)
        .map(|gi| {
            let b = g.slice_cols(x, gi * v, v);
            g.softmax_rows(b)
        })
        .collect();
    let probs = g.concat_cols(&blocks);
    let (value, grad) = diversity_loss(g.value(probs), groups).unwrap();
    let loss = g.custom_scalar(&[probs], value, vec![grad]);
    let analytic = g.backward(loss).get("logits").unwrap().clone();
    let mut check = GradCheck::new();
    check.matrix(&logits, &analytic, 120, r, |z| diversity_loss(&group_probs(z, groups), groups).unwrap().0);
    check
}

fn grad_ctc(r: &mut ChaCha8Rng) -> GradCheck {
    let logp = log_softmax_rows(&random_mat(20, 6, 0.5, r));
    let target = vec![1, 3, 3, 5, 2];
    let (_, grad) = ctc_loss(&logp, &target).unwrap();
    let mut check = GradCheck::new();
    check.matrix(&logp, &grad, 120, r, |x| ctc_loss(x, &target).unwrap().0);
    check
}

fn grad_mdn(r: &mut ChaCha8Rng) -> GradCheck {
    let (t, m, d) = (10, 2, 6);
    let logits = random_mat(t, m, 1.0, r);
    let mu = random_mat(t, m * d, 1.0, r);
    let logsig = random_mat(t, m * d, 0.5, r);
    let x = random_mat(t, d, 1.0, r);
    let (_, [ga, gmu, gs]) = mdn_nll_raw(&logits, &mu, &logsig, &x).unwrap();
    let mut check = GradCheck::new();
    check.matrix(&logits, &ga, 20, r, |v| mdn_nll_raw(v, &mu, &logsig, &x).unwrap().0);
    check.matrix(&mu, &gmu, 50, r, |v| mdn_nll_raw(&logits, v, &logsig, &x).unwrap().0);
    check.matrix(&logsig, &gs, 50, r, |v| mdn_nll_raw(&logits, &mu, v, &x).unwrap().0);
    check
}

fn grad_am(r: &mut ChaCha8Rng) -> GradCheck {
    let splice = SpliceConfig {
        offsets: vec![-1, 0, 1],
        hidden: vec![10],
        ..SpliceConfig::default()
    };
    let model = AmModel::new(splice, 4, 5).unwrap();
    let f = FeatureMatrix::from_f64(&random_mat(14, 4, 2.0, r), 10_000, "fbk").unwrap();
    let labels: Vec<usize> = (0..14).map(|_| r.gen_range(0..5)).collect();
    let mut params = model.init(3);
    model.set_input_stats(&mut params, &[&f]).unwrap();
    let loss_of = |p: &ParameterStore| {
        let mut g = Graph::new();
        let logp = model.graph(&mut g, p, &f).unwrap();
        frame_cross_entropy(g.value(logp), &labels).unwrap().0
    };
    let mut g = Graph::new();
    let logp = model.graph(&mut g, &params, &f).unwrap();
    let (v, grad) = frame_cross_entropy(g.value(logp), &labels).unwrap();
    let loss = g.custom_scalar(&[logp], v, vec![grad]);
    let grads = tape_grads(&g, loss, &params);
    let mut check = GradCheck::new();
    check.params(&params, &grads, 120, Some("am.norm."), r, loss_of);
    check
}

fn grad_bottleneck(r: &mut ChaCha8Rng) -> GradCheck {
    let cfg = BottleneckConfig {
        dropout: 0.0,
        ..BottleneckConfig::new(6, 4)
    };
    let mut params = ParameterStore::new();
    init_bottleneck(&mut params, &cfg, r).unwrap();
    let c = random_mat(5, 6, 1.0, r);
    let loss_of = |p: &ParameterStore| {
        let mut g = Graph::new();
        let l = reconstruction_graph(&mut g, p, &cfg, &c, None).unwrap();
        g.scalar(l)
    };
    let mut g = Graph::new();
    let loss = reconstruction_graph(&mut g, &params, &cfg, &c, None).unwrap();
    let grads = tape_grads(&g, loss, &params);
    let mut check = GradCheck::new();
    check.params(&params, &grads, 120, None, r, loss_of);
    check
}

#[test]
fn c02_gradient_suite() {
    let start = Instant::now();
    let mut r = rng(2);
    let suite: Vec<(&str, GradCheck)> = vec![
        ("contrastive", grad_contrastive(&mut r)),
        ("diversity", grad_diversity(&mut r)),
        ("ctc", grad_ctc(&mut r)),
        ("mdn-nll", grad_mdn(&mut r)),
        ("am-ce", grad_am(&mut r)),
        ("bn-recon", grad_bottleneck(&mut r)),
    ];
    let elapsed = start.elapsed();
    let pass = suite.iter().all(|(_, c)| c.coords >= 100 && c.worst <= FD_TOL) && elapsed < Duration::from_secs(60);
    let detail: Vec<String> = suite
        .iter()
        .map(|(n, c)| format!("{n} {}x max rel {:.1e}", c.coords, c.worst))
        .collect();
    verdict(
        2,
        "gradient suite",
        pass,
        &format!("{}; {:.2}s", detail.join(", "), elapsed.as_secs_f64()),
    );
}

// ---------------------------------------------------------------- 3

fn toy_vocab(n: usize) -> TokenVocab {
    TokenVocab::new((0..n).map(|i| format!("t{i}")).collect()).unwrap()
}

fn toy_lexicon(words: &[&[usize]], mode: LexiconMode, penalty: f64) -> Lexicon {
    let words = words
        .iter()
        .enumerate()
        .map(|(i, toks)| LexiconWord {
            word: format!("w{i}"),
            tokens: toks.iter().map(|t| format!("t{}", t - 1)).collect(),
        })
        .collect();
    Lexicon::new(words, mode, penalty).unwrap()
}

#[test]
fn c03_joint_weight_contracts() {
    let mut r = rng(3);
    let vocab = toy_vocab(4);
    let words: &[&[usize]] = &[&[1, 2], &[3], &[2, 4, 1], &[4, 3]];
    let lexicons = [
        toy_lexicon(words, LexiconMode::IsolatedWord, 0.0),
        toy_lexicon(words, LexiconMode::WordLoop, 1.5),
    ];
    let (mut exact, mut invariant, mut total) = (true, true, 0);
    for u in 0..100 {
        let t = r.gen_range(6..14);
        let a = PosteriorStream::from_log_scores(&random_mat(t, 5, 3.0, &mut r), 10_000, "a").unwrap();
        let b = PosteriorStream::from_log_scores(&random_mat(t, 5, 3.0, &mut r), 10_000, "b").unwrap();
        let lex = &lexicons[u % 2];
        let pair = [a.clone(), b.clone()];
        let degenerate = CombinationWeights::new(vec![1.0, 0.0]).unwrap();
        let merged = interpolate_posteriors(&pair, &degenerate).unwrap();
        let single = decode(&a, lex, &vocab).unwrap();
        let joint = joint_decode(&pair, &degenerate, lex, &vocab).unwrap();
        exact &= merged.logp() == a.logp() && joint == single;
        let base = joint_decode(&pair, &CombinationWeights::new(vec![3.0, 2.0]).unwrap(), lex, &vocab).unwrap();
        for c in [1e-3, 0.7, 11.0, 4096.0] {
            let w = CombinationWeights::new(vec![3.0 * c, 2.0 * c]).unwrap();
            invariant &= joint_decode(&pair, &w, lex, &vocab).unwrap().words == base.words;
        }
        total += 1;
    }
    verdict(
        3,
        "joint decoding weight contracts",
        exact && invariant,
        &format!("{total} utterances, (1,0) bit-exact {exact}, scaling invariant {invariant}"),
    );
}

// ---------------------------------------------------------------- 4

fn random_nbest(id: usize, r: &mut ChaCha8Rng) -> NBestList {
    let n = r.gen_range(1..=6);
    let mut first: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..50.0)).collect();
    first.sort_by(f64::total_cmp);
    let entries = first
        .into_iter()
        .enumerate()
        .map(|(k, c)| {
            // Occasional exact ties exercise the lowest-rank policy.
            let second = if r.gen_bool(0.2) { 10.0 } else { r.gen_range(0.0..50.0) };
            NBestEntry {
                tokens: vec![k + 1],
                words: vec![format!("w{k}")],
                costs: BTreeMap::from([(FIRST_PASS_KEY.to_string(), c), (SECOND_PASS_KEY.to_string(), second)]),
                combined: c,
            }
        })
        .collect();
    NBestList {
        utt_id: format!("u{id}"),
        entries,
    }
}

fn argmin_second(l: &NBestList) -> usize {
    let mut best = 0;
    for (i, e) in l.entries.iter().enumerate() {
        if e.costs[SECOND_PASS_KEY] < l.entries[best].costs[SECOND_PASS_KEY] {
            best = i;
        }
    }
    best
}

#[test]
fn c04_rescoring_contracts() {
    let mut r = rng(4);
    let (mut alpha0, mut beta0, mut scaled) = (true, true, true);
    for i in 0..100 {
        let l = random_nbest(i, &mut r);
        alpha0 &= rescore(&l, RescoreWeights::new(0.0, 1.0).unwrap()).unwrap().best_index == 0;
        beta0 &= rescore(&l, RescoreWeights::new(1.0, 0.0).unwrap()).unwrap().best_index == argmin_second(&l);
        let (a, b) = (r.gen_range(0.1..5.0), r.gen_range(0.1..5.0));
        let base = rescore(&l, RescoreWeights::new(a, b).unwrap()).unwrap().best_index;
        for c in [0.25, 2.0, 9.0] {
            scaled &= rescore(&l, RescoreWeights::new(c * a, c * b).unwrap()).unwrap().best_index == base;
        }
    }
    verdict(
        4,
        "rescoring contracts",
        alpha0 && beta0 && scaled,
        &format!("100 lists, alpha=0 {alpha0}, beta=0 {beta0}, scaling {scaled}"),
    );
}

// ---------------------------------------------------------------- 5

/// Posteriors spelling `truth` confidently, or leaning 2:1 toward `wrong`
/// on every token frame when it is given.
fn planted_stream(truth: &[usize], wrong: Option<&[usize]>, v: usize) -> PosteriorStream {
    let per = 3;
    let frames = 2 + per * truth.len();
    let mut p = Mat::from_elem((frames, v + 1), 0.01);
    for t in 0..frames {
        let k = t.checked_sub(1).map(|x| x / per).filter(|&k| k < truth.len());
        match k {
            None => p[[t, 0]] = 1.0,
            Some(k) => match wrong {
                None => p[[t, truth[k]]] = 1.0,
                Some(w) => {
                    p[[t, w[k]]] = 0.6;
                    p[[t, truth[k]]] = 0.3;
                }
            },
        }
    }
    let rows = p.sum_axis(ndarray::Axis(1));
    for (mut row, s) in p.rows_mut().into_iter().zip(rows) {
        row /= s;
    }
    PosteriorStream::new(p.mapv(f64::ln), 10_000, "planted").unwrap()
}

fn complementarity_run() -> (f64, f64, f64) {
    let vocab = toy_vocab(8);
    let words: &[&[usize]] = &[&[1, 2], &[3, 4], &[5, 6], &[7, 8]];
    let lex = toy_lexicon(words, LexiconMode::IsolatedWord, 0.0);
    let truth: Vec<usize> = (0..8).map(|u| u % 4).collect();
    let confuser = |w: usize| (w + 1) % 4;
    let mut counts = [ErrorCounts::default(); 3];
    for (u, &w) in truth.iter().enumerate() {
        let wrong = Some(words[confuser(w)]);
        let a = planted_stream(words[w], if u < 2 { wrong } else { None }, 8);
        let b = planted_stream(words[w], if (2..4).contains(&u) { wrong } else { None }, 8);
        let weights = CombinationWeights::new(vec![1.0, 1.0]).unwrap();
        let reference = [format!("w{w}")];
        let hyps = [
            decode(&a, &lex, &vocab).unwrap().words,
            decode(&b, &lex, &vocab).unwrap().words,
            joint_decode(&[a, b], &weights, &lex, &vocab).unwrap().words,
        ];
        for (c, h) in counts.iter_mut().zip(&hyps) {
            c.add(&wer(&reference, h));
        }
    }
    let w = |c: &ErrorCounts| c.wer().unwrap();
    (w(&counts[0]), w(&counts[1]), w(&counts[2]))
}

#[test]
fn c05_complementary_errors_cancel() {
    let first = complementarity_run();
    let again = complementarity_run();
    let (a, b, j) = first;
    let pass = a == 25.0 && b == 25.0 && j == 0.0 && first == again;
    verdict(
        5,
        "complementarity",
        pass,
        &format!("8 utterances, WER A {a:.2}% B {b:.2}% joint {j:.2}%, deterministic {}", first == again),
    );
}

// ---------------------------------------------------------------- 6

#[test]
fn c06_contrastive_closed_forms() {
    let mut r = rng(6);
    let (t, d) = (10, 5);
    let c = random_mat(t, d, 1.0, &mut r);
    let q = random_mat(t, d, 1.0, &mut r);
    let masked: Vec<usize> = (0..t).collect();
    let none = DistractorSample {
        distractors: vec![Vec::new(); t],
        reduced: t,
    };
    let zero = contrastive_loss(&c, &q, &masked, &none, 0.1).unwrap().loss;
    // Every quantized row equal: each distractor ties with the target.
    let row: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let same = Array2::from_shape_fn((t, d), |(_, j)| row[j]);
    let mut worst = 0.0f64;
    let mut k4 = f64::NAN;
    for k in 1..=8 {
        let ds = DistractorSample {
            distractors: masked.iter().map(|&m| (0..t).filter(|&o| o != m).take(k).collect()).collect(),
            reduced: 0,
        };
        let loss = contrastive_loss(&c, &same, &masked, &ds, 0.1).unwrap().loss;
        worst = worst.max((loss - ((k + 1) as f64).ln()).abs());
        if k == 4 {
            k4 = loss;
        }
    }
    let pass = zero == 0.0 && worst <= 1e-12;
    verdict(
        6,
        "contrastive closed forms",
        pass,
        &format!("K=0 -> {zero}, K=4 -> {k4:.5}, max |loss - ln(K+1)| {worst:.1e}"),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn c07_bottleneck_shapes() {
    let cfg = BottleneckConfig::new(1024, 256);
    let mut r = rng(7);
    let mut params = ParameterStore::new();
    init_bottleneck(&mut params, &cfg, &mut r).unwrap();
    let mut shapes = Vec::new();
    let mut pass = true;
    for t in [1usize, 7, 50] {
        let c = random_mat(t, 1024, 1.0, &mut r);
        let bn = extract_bn_features(&c, 20_000, &cfg, &params).unwrap();
        let out = bottleneck_forward(&c, &cfg, &params).unwrap();
        pass &= bn.frames() == 2 * t && bn.dim() == 256 && bn.frame_shift_us() == 10_000;
        pass &= out.restored.dim() == (t, 1024) && out.bn.dim() == (2 * t, 256);
        shapes.push(format!(
            "{t}x1024 -> {}x{} @{}ms, restored {}x{}",
            bn.frames(),
            bn.dim(),
            bn.frame_shift_us() / 1000,
            out.restored.nrows(),
            out.restored.ncols()
        ));
    }
    verdict(7, "bottleneck shape contract", pass, &shapes.join("; "));
}

// ---------------------------------------------------------------- 8, 9

struct E2e {
    report: ExperimentReport,
    manifest: Manifest,
    elapsed: Duration,
}

fn e2e() -> &'static Result<E2e, String> {
    static RUN: OnceLock<Result<E2e, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let exp = run_experiment(&Config::default()).map_err(|e| e.to_string())?;
        Ok(E2e {
            report: exp.report,
            manifest: exp.corpus.manifest,
            elapsed: start.elapsed(),
        })
    })
}

const SLACK: f64 = 0.5;

#[test]
fn c08_end_to_end_combination_trend() {
    let run = match e2e() {
        Ok(r) => r,
        Err(e) => return verdict(8, "end-to-end replication", false, &format!("run failed: {e}")),
    };
    let rep = &run.report;
    let w = |s: &str| rep.wer(s).unwrap_or(f64::INFINITY);
    let singles = [SYS_FBK, SYS_FUSED, SYS_ARTIC, SYS_SSL].map(w);
    let best_single = singles.iter().copied().fold(f64::INFINITY, f64::min);
    let pretrain = rep.timings.get("pretrain").copied().unwrap_or(f64::INFINITY);
    let checks = [
        w(SYS_FUSED) <= w(SYS_FBK),
        w(SYS_JOINT) <= best_single + SLACK,
        w(SYS_RESCORED) <= w(SYS_JOINT) + SLACK,
        pretrain <= 300.0,
        run.elapsed <= Duration::from_secs(15 * 60),
    ];
    let detail = format!(
        "seed {}: fbk {:.2}% fbk+bn {:.2}% fbk+bn+artic {:.2}% w2v {:.2}% joint {:.2}% rescored {:.2}%; pretrain {pretrain:.0}s, total {:.0}s",
        rep.seed,
        w(SYS_FBK),
        w(SYS_FUSED),
        w(SYS_ARTIC),
        w(SYS_SSL),
        w(SYS_JOINT),
        w(SYS_RESCORED),
        run.elapsed.as_secs_f64()
    );
    verdict(8, "end-to-end replication", checks.iter().all(|&c| c), &detail);
}

#[test]
fn c09_unseen_word_partition() {
    let run = match e2e() {
        Ok(r) => r,
        Err(e) => return verdict(9, "unseen-word reporting", false, &format!("run failed: {e}")),
    };
    let mut exact = true;
    let mut ordered = true;
    let mut cells = Vec::new();
    for (system, hyps) in &run.report.hypotheses {
        let rep = partition_report(hyps, &run.manifest).unwrap();
        exact &= rep == run.report.systems[system];
        // Independent tally from the manifest.
        let mut by_subset: BTreeMap<Subset, ErrorCounts> = BTreeMap::new();
        let mut total = ErrorCounts::default();
        for UttResult { id, hypothesis } in hyps {
            let rec = run.manifest.get(id).unwrap();
            let reference: Vec<&str> = rec.transcript.split_whitespace().collect();
            let hyp: Vec<&str> = hypothesis.iter().map(String::as_str).collect();
            let c = wer(&reference, &hyp);
            by_subset.entry(rec.subset).or_default().add(&c);
            total.add(&c);
        }
        let mut sum = ErrorCounts::default();
        for (subset, c) in &by_subset {
            exact &= rep.by_subset[subset.as_str()].counts == *c;
            sum.add(c);
        }
        exact &= sum == total && rep.overall.counts == total;
        let expected_utts = run.manifest.records().iter().filter(|r| r.subset.is_test()).count();
        exact &= rep.overall.utterances == expected_utts && !by_subset.contains_key(&Subset::Train);
        let seen = rep.subset_wer(Subset::TestSeen).unwrap_or(f64::NAN);
        let unseen = rep.subset_wer(Subset::TestUnseen).unwrap_or(f64::NAN);
        ordered &= unseen >= seen;
        cells.push(format!("{system} {seen:.1}/{unseen:.1}"));
    }
    verdict(
        9,
        "unseen-word reporting",
        exact && ordered,
        &format!("partitions exact {exact}, unseen >= seen {ordered}; seen/unseen WER: {}", cells.join(", ")),
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn c10_mdn_recovers_linear_map() {
    let mut r = rng(10);
    let (d_in, d_a, sigma) = (8, 6, 0.1);
    let map = random_mat(d_in, d_a, 0.6, &mut r);
    let bias: Vec<f64> = (0..d_a).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut utterance = |frames: usize| {
        let x = random_mat(frames, d_in, 1.5, &mut r);
        let mut y = x.dot(&map);
        for mut row in y.rows_mut() {
            for (v, b) in row.iter_mut().zip(&bias) {
                let noise: f64 = r.sample(rand_distr::StandardNormal);
                *v += b + sigma * noise;
            }
        }
        (
            FeatureMatrix::from_f64(&x, 10_000, "bn").unwrap(),
            FeatureMatrix::from_f64(&y, 10_000, "artic").unwrap(),
        )
    };
    let train: Vec<_> = (0..48).map(|_| utterance(40)).collect();
    let test: Vec<_> = (0..8).map(|_| utterance(40)).collect();
    let cfg = MdnConfig {
        input_dim: d_in,
        hidden: 32,
        components: 2,
        output_dim: d_a,
        skip: true,
    };
    // train_inversion validates every mixture it evaluates and aborts on
    // an invalid one, so a completed run means validity held at each step.
    let trained = train_inversion(&train, &cfg, &TrainOptions::new(200, 10), None);
    let (params, report) = match trained {
        Ok(t) => t,
        Err(e) => return verdict(10, "MDN inversion recovery", false, &format!("training aborted: {e}")),
    };
    let mut valid = init_mdn(&cfg, 10).is_ok();
    let mut sq = 0.0;
    let mut n = 0.0;
    for (x, y) in &test {
        let mix = mdn_forward(x, &cfg, &params).unwrap();
        valid &= mix.validate().is_ok();
        let e = rmse(&mdn_predict(&mix).unwrap(), y).unwrap();
        sq += e * e * y.frames() as f64;
        n += y.frames() as f64;
    }
    let err = (sq / n).sqrt();
    let pass = valid && err <= 2.0 * sigma && report.final_loss < report.initial_loss;
    verdict(
        10,
        "MDN inversion recovery",
        pass,
        &format!(
            "held-out RMSE {err:.4} vs 2 sigma {:.2}, NLL {:.3} -> {:.3}, 200 epochs, mixtures valid {valid}",
            2.0 * sigma,
            report.initial_loss,
            report.final_loss
        ),
    );
}
