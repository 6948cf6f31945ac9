use std::hash::{DefaultHasher, Hash, Hasher};

use ical_core::data::{synth_generate, synth_vocab, Dataset, Image, SynthOptions};
use ical_core::infer::{
    beam_decode, greedy_decode, image_input, joint_search, recognize, Admission, BeamOptions, Hypothesis, Recognizer, Scoring,
    StepModel,
};
use ical_core::metrics::{evaluate, token_edit_distance, EvalResult, SampleResult};
use ical_core::tensor::{Mask, Tensor};
use ical_core::vocab::{Direction, EOS, PAD, SOS};
use ical_core::{Error, Model, ModelConfig, Preset, Readout};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NEG: f64 = f64::NEG_INFINITY;

fn log_normalize(logits: &mut [f64]) {
    let m = logits.iter().copied().fold(NEG, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    logits.iter_mut().for_each(|x| *x -= lse);
}

/// Pseudo-random distribution per (direction, prefix); the end marker grows
/// likelier with length so most paths terminate.
struct Table {
    seed: u64,
    vocab: usize,
}

impl StepModel for Table {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_log_probs(&mut self, d: Direction, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, Error> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let mut h = DefaultHasher::new();
                (self.seed, d == Direction::L2R, p).hash(&mut h);
                let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
                let mut l: Vec<f64> = (0..self.vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
                l[d.end_id()] += 0.7 * p.len() as f64 - 1.5;
                l[PAD] = NEG;
                l[d.start_id()] = NEG;
                log_normalize(&mut l);
                l
            })
            .collect())
    }
}

/// Fixed distribution per step, independent of the prefix.
struct PerStep(Vec<Vec<f64>>);

impl StepModel for PerStep {
    fn vocab_size(&self) -> usize {
        self.0[0].len()
    }

    fn next_log_probs(&mut self, _d: Direction, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, Error> {
        Ok(prefixes.iter().map(|p| self.0[(p.len() - 1).min(self.0.len() - 1)].clone()).collect())
    }
}

/// Puts `peak` on the next token of `target` (read in decoding order) and
/// spreads the rest evenly; direction enters only through the framing ids.
struct Peaked {
    target: Vec<usize>,
    vocab: usize,
    peak: f64,
}

impl StepModel for Peaked {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_log_probs(&mut self, d: Direction, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, Error> {
        let seq: Vec<usize> = match d {
            Direction::L2R => self.target.clone(),
            Direction::R2L => self.target.iter().rev().copied().collect(),
        };
        Ok(prefixes
            .iter()
            .map(|p| {
                let content = &p[1..];
                let want = if content.len() < seq.len() && content == &seq[..content.len()] {
                    seq[content.len()]
                } else {
                    d.end_id()
                };
                let open = self.vocab - 2;
                let mut l = vec![((1.0 - self.peak) / (open - 1) as f64).ln(); self.vocab];
                l[want] = self.peak.ln();
                l[PAD] = NEG;
                l[d.start_id()] = NEG;
                l
            })
            .collect())
    }
}

/// Content-only hash model: identical behaviour in both directions.
struct Symmetric {
    seed: u64,
    vocab: usize,
}

impl StepModel for Symmetric {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_log_probs(&mut self, d: Direction, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, Error> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let mut h = DefaultHasher::new();
                (self.seed, &p[1..]).hash(&mut h);
                let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
                let mut l = vec![NEG; self.vocab];
                for x in l.iter_mut().skip(3) {
                    *x = rng.random_range(-2.0..2.0);
                }
                l[d.end_id()] = rng.random_range(-2.0..2.0) + 0.8 * p.len() as f64 - 1.0;
                log_normalize(&mut l);
                l
            })
            .collect())
    }
}

/// Token-by-token rescoring with single-prefix queries.
fn rescore<M: StepModel>(m: &mut M, h: &Hypothesis) -> f64 {
    let d = h.direction;
    let mut prefix = vec![d.start_id()];
    let mut total = 0.0;
    let ends = (!h.truncated).then_some(d.end_id());
    for &t in h.tokens.iter().chain(ends.iter()) {
        total += m.next_log_probs(d, std::slice::from_ref(&prefix)).unwrap()[0][t];
        prefix.push(t);
    }
    total
}

fn opts(beam: usize, max_len: usize) -> BeamOptions {
    BeamOptions { beam, max_len, ..Default::default() }
}

#[test]
fn beam_one_equals_greedy_on_random_models() {
    for seed in 0..200 {
        for d in [Direction::L2R, Direction::R2L] {
            let mut m = Table { seed, vocab: 7 };
            let g = greedy_decode(&mut m, d, 12).unwrap();
            let b = beam_decode(&mut m, d, &opts(1, 12)).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(b[0].tokens, g.tokens, "seed {seed} {d:?}");
            assert_eq!(b[0].truncated, g.truncated);
            assert_eq!(b[0].score, g.score);
        }
    }
}

#[test]
fn greedy_examples() {
    let row = |eos: f64, a: f64, b: f64| {
        let s = eos + a + b;
        vec![NEG, NEG, (eos / s).ln(), (a / s).ln(), (b / s).ln()]
    };
    let mut m = PerStep(vec![row(0.1, 0.6, 0.3), row(0.2, 0.1, 0.7), row(0.8, 0.1, 0.1)]);
    let h = greedy_decode(&mut m, Direction::L2R, 10).unwrap();
    assert_eq!(h.tokens, [3, 4]);
    assert!(!h.truncated);
    assert!((h.score - (0.6f64.ln() + 0.7f64.ln() + 0.8f64.ln())).abs() < 1e-12);

    // never ends: best live hypothesis comes back flagged
    let mut m = PerStep(vec![row(0.1, 0.8, 0.1)]);
    let g = greedy_decode(&mut m, Direction::L2R, 4).unwrap();
    assert!(g.truncated);
    assert_eq!(g.tokens, [3, 3, 3, 3]);
    let b = beam_decode(&mut m, Direction::L2R, &opts(1, 4)).unwrap();
    assert_eq!(b, vec![g]);

    // the reversed stream terminates on the start marker
    let swap = |mut l: Vec<f64>| {
        l.swap(SOS, EOS);
        l
    };
    let mut m = PerStep(vec![swap(row(0.1, 0.2, 0.7)), swap(row(0.9, 0.05, 0.05))]);
    let h = greedy_decode(&mut m, Direction::R2L, 5).unwrap();
    assert_eq!(h.tokens, [4]);
    assert_eq!(h.l2r(), [4]);
}

#[test]
fn greedy_ties_go_to_the_smaller_id() {
    let flat = vec![NEG, NEG, 0.1f64.ln(), 0.45f64.ln(), 0.45f64.ln()];
    let end = vec![NEG, NEG, 0.0, NEG, NEG];
    let mut m = PerStep(vec![flat, end]);
    assert_eq!(greedy_decode(&mut m, Direction::L2R, 5).unwrap().tokens, [3]);
    assert_eq!(beam_decode(&mut m, Direction::L2R, &opts(1, 5)).unwrap()[0].tokens, [3]);
    assert_eq!(beam_decode(&mut m, Direction::L2R, &opts(2, 5)).unwrap()[0].tokens, [3]);
}

#[test]
fn zero_beam_is_rejected() {
    let mut m = Table { seed: 0, vocab: 5 };
    assert!(matches!(beam_decode(&mut m, Direction::L2R, &opts(0, 5)), Err(Error::Config(_))));
}

/// Best finished sequence of at most `max_len` steps by normalized score.
fn exhaustive(rows: &[Vec<f64>], max_len: usize) -> (Vec<usize>, f64) {
    let content: Vec<usize> = (3..rows[0].len()).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut frontier: Vec<(Vec<usize>, f64)> = vec![(vec![], 0.0)];
    for step in 0..max_len {
        let row = &rows[step.min(rows.len() - 1)];
        let mut next = Vec::new();
        for (seq, s) in &frontier {
            let fin = (s + row[EOS]) / (seq.len() + 1) as f64;
            let better = match &best {
                None => true,
                Some((bs, bv)) => fin > *bv || (fin == *bv && seq < bs),
            };
            if better {
                best = Some((seq.clone(), fin));
            }
            for &t in &content {
                let mut n = seq.clone();
                n.push(t);
                next.push((n, s + row[t]));
            }
        }
        frontier = next;
    }
    best.unwrap()
}

#[test]
fn beam_three_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let o = BeamOptions { beam: 3, max_len: 3, scoring: Scoring::Normalized, admission: Admission::All };
    for _ in 0..500 {
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let mut l: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
                l[PAD] = NEG;
                l[SOS] = NEG;
                log_normalize(&mut l);
                l
            })
            .collect();
        let (want, score) = exhaustive(&rows, 3);
        let got = &beam_decode(&mut PerStep(rows.clone()), Direction::L2R, &o).unwrap()[0];
        assert_eq!(got.tokens, want, "{rows:?}");
        assert!((got.normalized() - score).abs() < 1e-12);
    }
}

#[test]
fn finished_hypotheses_are_ranked_and_rescorable() {
    for seed in 0..50 {
        for scoring in [Scoring::Normalized, Scoring::Sum] {
            let mut m = Table { seed, vocab: 7 };
            let o = BeamOptions { beam: 4, max_len: 15, scoring, admission: Admission::TopK };
            let hs = beam_decode(&mut m, Direction::R2L, &o).unwrap();
            assert!(hs.len() <= 4);
            assert!(hs.windows(2).all(|p| p[0].rank_score(scoring) >= p[1].rank_score(scoring)));
            for h in &hs {
                assert!((rescore(&mut m, h) - h.score).abs() <= 1e-5);
                if !h.truncated {
                    let fresh = m.sequence_log_prob(h.direction, &h.tokens).unwrap();
                    assert!((fresh - h.score).abs() <= 1e-5);
                }
            }
        }
    }
}

#[test]
fn decoding_is_deterministic() {
    for seed in 0..20 {
        let a = joint_search(&mut Table { seed, vocab: 8 }, &opts(5, 12)).unwrap();
        let b = joint_search(&mut Table { seed, vocab: 8 }, &opts(5, 12)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn joint_search_returns_the_agreed_string() {
    for target in [vec![3, 4, 5, 6], vec![6], vec![5, 5, 3]] {
        let mut m = Peaked { target: target.clone(), vocab: 8, peak: 0.9 };
        let r = joint_search(&mut m, &opts(3, 10)).unwrap();
        assert_eq!(r.tokens, target);
        assert!(!r.truncated);
    }
}

#[test]
fn symmetric_model_scores_palindromes_equally() {
    for seed in 0..30 {
        let mut m = Symmetric { seed, vocab: 7 };
        for pal in [vec![3, 4, 3], vec![5], vec![4, 6, 6, 4], vec![]] {
            let l = m.sequence_log_prob(Direction::L2R, &pal).unwrap();
            let r = m.sequence_log_prob(Direction::R2L, &pal).unwrap();
            assert_eq!(l, r);
        }
    }
    let mut m = Peaked { target: vec![3, 5, 3], vocab: 7, peak: 0.8 };
    let r = joint_search(&mut m, &opts(3, 8)).unwrap();
    assert_eq!(r.tokens, [3, 5, 3]);
    let top = |d: Direction| r.finalists.iter().find(|f| f.hypothesis.direction == d && f.l2r() == [3, 5, 3]).unwrap();
    let (l, rl) = (top(Direction::L2R), top(Direction::R2L));
    assert!((l.hypothesis.score - rl.hypothesis.score).abs() < 1e-12);
    assert!((l.joint - rl.joint).abs() < 1e-12);
}

#[test]
fn joint_winner_dominates_every_finalist() {
    for seed in 0..100 {
        let mut m = Table { seed, vocab: 8 };
        let r = joint_search(&mut m, &opts(4, 12)).unwrap();
        assert!(!r.finalists.is_empty());
        for f in &r.finalists {
            let h = &f.hypothesis;
            let rev: Vec<usize> = h.tokens.iter().rev().copied().collect();
            let opposite = m.sequence_log_prob(h.direction.opposite(), &rev).unwrap();
            let joint = (rescore(&mut m, h) + opposite) / h.steps().max(1) as f64;
            assert!((f.joint - joint).abs() < 1e-9);
            assert!(r.joint >= f.joint);
        }
        assert!(r.finalists.iter().any(|f| f.l2r() == r.tokens && f.joint == r.joint));
    }
}

fn dp_oracle(a: &[u8], b: &[u8]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

#[test]
fn edit_distance_examples() {
    assert_eq!(token_edit_distance(&["a", "+", "b"], &["a", "+", "b"]), 0);
    assert_eq!(token_edit_distance(&["a", "+", "b"], &["a", "-", "b"]), 1);
    assert_eq!(token_edit_distance::<&str>(&[], &["a", "b"]), 2);
    assert_eq!(token_edit_distance(&["a", "b", "c"], &["b", "c"]), 1);
}

#[test]
fn edit_distance_matches_dp_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let mut s = || -> Vec<u8> { (0..rng.random_range(0..14)).map(|_| rng.random_range(0..4)).collect() };
        let (a, b) = (s(), s());
        assert_eq!(token_edit_distance(&a, &b), dp_oracle(&a, &b), "{a:?} {b:?}");
    }
}

#[test]
fn rate_examples() {
    let r = EvalResult::from_pairs(&[(vec!["x"], vec!["x"]), (vec!["y"], vec!["y"])]);
    assert_eq!((r.exprate, r.leq1, r.leq2), (1.0, 1.0, 1.0));
    let r = EvalResult::from_pairs(&[
        (vec!["a", "+", "b"], vec!["a", "-", "b"]),
        (vec!["x"], vec!["x"]),
        (vec!["y"], vec!["y"]),
        (vec!["z"], vec!["z"]),
    ]);
    assert_eq!((r.exprate, r.leq1, r.leq2), (0.75, 1.0, 1.0));
    assert_eq!(r.count, 4);
    assert_eq!(r.report(), "count: 4\nexprate: 0.750000\nleq1: 1.000000\nleq2: 1.000000\n");
    let csv = r.csv();
    assert_eq!(csv.lines().next(), Some("id,distance,prediction"));
    assert_eq!(csv.lines().nth(1), Some("0,1,\"a + b\""));
    let empty = EvalResult::from_samples(Vec::new());
    assert_eq!((empty.exprate, empty.leq1, empty.leq2, empty.count), (0.0, 0.0, 0.0, 0));
}

proptest! {
    #[test]
    fn rates_are_ordered(dists in prop::collection::vec(0usize..5, 1..40)) {
        let samples = dists
            .iter()
            .enumerate()
            .map(|(i, &d)| SampleResult { id: i.to_string(), prediction: vec![], distance: d })
            .collect();
        let r = EvalResult::from_samples(samples);
        prop_assert!(0.0 <= r.exprate && r.exprate <= r.leq1 && r.leq1 <= r.leq2 && r.leq2 <= 1.0);
        let n = dists.len() as f64;
        prop_assert_eq!(r.leq1, dists.iter().filter(|&&d| d <= 1).count() as f64 / n);
    }

    #[test]
    fn edit_distance_is_a_metric(
        a in prop::collection::vec(0u8..3, 0..10),
        b in prop::collection::vec(0u8..3, 0..10),
        c in prop::collection::vec(0u8..3, 0..10),
    ) {
        let d = |x: &[u8], y: &[u8]| token_edit_distance(x, y);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) >= a.len().abs_diff(b.len()));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
    }
}

fn toy_model(seed: u64) -> Model<f64> {
    Model::new(ModelConfig::preset(Preset::Toy, synth_vocab().len()), seed).unwrap()
}

fn images(n: usize) -> Vec<Image> {
    synth_generate(3, n, &SynthOptions::default()).into_iter().map(|s| s.image).collect()
}

#[test]
fn neural_beam_one_equals_greedy() {
    for seed in [1, 2] {
        let model = toy_model(seed);
        for img in images(2) {
            for readout in [Readout::Initial, Readout::Fused] {
                let mut r = Recognizer::from_image(&model, &img, readout).unwrap();
                for d in [Direction::L2R, Direction::R2L] {
                    let g = greedy_decode(&mut r, d, 6).unwrap();
                    let b = beam_decode(&mut r, d, &opts(1, 6)).unwrap();
                    assert_eq!(b[0].tokens, g.tokens);
                    assert_eq!(b[0].truncated, g.truncated);
                    assert!((b[0].score - g.score).abs() <= 1e-9);
                }
            }
        }
    }
}

#[test]
fn neural_scores_recompute_from_scratch() {
    let model = toy_model(4);
    let img = &images(1)[0];
    let mut r = Recognizer::from_image(&model, img, Readout::Fused).unwrap();
    for d in [Direction::L2R, Direction::R2L] {
        for h in beam_decode(&mut r, d, &opts(3, 5)).unwrap() {
            assert!((rescore(&mut r, &h) - h.score).abs() <= 1e-5);
        }
    }
    let content = [5, 9, 3];
    let fast = r.sequence_log_prob(Direction::L2R, &content).unwrap();
    let slow = rescore(&mut r, &Hypothesis { tokens: content.to_vec(), direction: Direction::L2R, score: 0.0, truncated: false });
    assert!((fast - slow).abs() <= 1e-9);
}

#[test]
fn decoding_is_invariant_to_image_padding() {
    let model = toy_model(5);
    let img = &images(1)[0];
    let pad = 24;
    let wide = img.pad_right(pad);
    let (x, _) = image_input::<f64>(&wide).unwrap();
    let valid: Vec<bool> = (0..wide.height).flat_map(|_| (0..wide.width).map(|c| c < img.width)).collect();
    let mask = Mask::new(vec![1, wide.height, wide.width], valid).unwrap();
    for readout in [Readout::Initial, Readout::Fused] {
        let mut plain = Recognizer::from_image(&model, img, readout).unwrap();
        let mut padded = Recognizer::new(&model, &x, &mask, readout).unwrap();
        for d in [Direction::L2R, Direction::R2L] {
            let a = beam_decode(&mut plain, d, &opts(3, 5)).unwrap();
            let b = beam_decode(&mut padded, d, &opts(3, 5)).unwrap();
            assert_eq!(a.len(), b.len());
            for (p, q) in a.iter().zip(&b) {
                assert_eq!(p.tokens, q.tokens);
                assert!((p.score - q.score).abs() <= 1e-4, "{} vs {}", p.score, q.score);
            }
            let s = plain.sequence_log_prob(d, &[4, 7]).unwrap();
            let t = padded.sequence_log_prob(d, &[4, 7]).unwrap();
            assert!((s - t).abs() <= 1e-4);
        }
    }
}

#[test]
fn recognizer_takes_one_image() {
    let model = toy_model(6);
    let img = &images(1)[0];
    let x = Tensor::<f64>::zeros(vec![2, 1, img.height, img.width]);
    let mask = Mask::all(vec![2, img.height, img.width]);
    assert!(Recognizer::new(&model, &x, &mask, Readout::Initial).is_err());
}

#[test]
fn evaluate_scores_decoded_token_sequences() {
    let model = toy_model(7);
    let vocab = synth_vocab();
    let data = Dataset { samples: synth_generate(9, 3, &SynthOptions::default()) };
    let o = opts(2, 4);
    let r = evaluate(&model, &vocab, &data, Readout::Fused, &o).unwrap();
    assert_eq!(r.count, 3);
    assert!(r.exprate <= r.leq1 && r.leq1 <= r.leq2 && r.leq2 <= 1.0);
    for (s, res) in data.samples.iter().zip(&r.samples) {
        assert_eq!(res.id, s.id);
        let ids = recognize(&model, &s.image, Readout::Fused, &o).unwrap();
        let want: Vec<String> = ids.iter().map(|&i| vocab.symbol(i).unwrap().to_string()).collect();
        assert_eq!(res.prediction, want);
        assert_eq!(res.distance, token_edit_distance(&want, &s.tokens));
    }
}
