//! Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ical_core::data::{synth_generate, synth_vocab, Dataset, Sample, SynthOptions};
use ical_core::flops::estimate_flops;
use ical_core::gradcheck::{run_component, Component};
use ical_core::iccm::fuse_with_gate;
use ical_core::infer::{
    beam_decode, greedy_decode, image_input, recognize, Admission, BeamOptions, Recognizer, Scoring, StepModel, DEFAULT_MAX_LEN,
};
use ical_core::loss::{class_weight, LossReport};
use ical_core::metrics::{evaluate, token_edit_distance, EvalResult, SampleResult};
use ical_core::model::{encode_images, forward_tokens};
use ical_core::tensor::{Graph, Mask, Tensor};
use ical_core::train::{argmax, TrainConfig, Trainer};
use ical_core::vocab::{build_implicit, Direction, ImplicitVocab, Vocab, EOS, PAD, SOS};
use ical_core::{Error, LossToggles, Model, ModelConfig, Preset, Readout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// 1: architectural cost
const PAPER_VOCAB: usize = 113;
const PAPER_PARAMS: f64 = 7.37e6;
const PAPER_PARAMS_BASELINE: f64 = 6.39e6;
const PARAMS_TOL: f64 = 0.08;
const DELTA_TOL: f64 = 0.15;
// 2: FLOPs for one (1, 1, 120, 800) image, both directions decoded to max length
const FLOP_H: usize = 120;
const FLOP_W: usize = 800;
const PAPER_GFLOPS: f64 = 19.81;
const PAPER_GFLOPS_BASELINE: f64 = 18.81;
const FLOPS_TOL: f64 = 0.25;
// 3: finite-difference suites (step 1e-5, rel. err 1e-4 are the suite defaults)
const GRAD_SEEDS: u64 = 20;
const GRAD_BUDGET_SECS: f64 = 600.0;
// 4: construction rule
const IMPLICIT_SEQUENCES: usize = 10_000;
// 5: weight formula
const WEIGHT_TOL: f64 = 1e-6;
const WEIGHT_SWEEP: usize = 1000;
// 6: toy overfit
const OVERFIT_SAMPLES: usize = 100;
const OVERFIT_SEED: u64 = 7;
const OVERFIT_LR: f64 = 0.02;
const OVERFIT_TARGET: f64 = 0.95;
const ICCM_CONSISTENCY: f64 = 0.90;
const OVERFIT_BUDGET_SECS: f64 = 3600.0;
const OVERFIT_MAX_LEN: usize = 60;
// 7: ablation
const ABLATION_SAMPLES: usize = 24;
const ABLATION_EPOCHS: usize = 2;
// 8: decoding oracles
const EXHAUSTIVE_MODELS: usize = 500;
const EDIT_PAIRS: usize = 200;
// 9: invariances
const PADDING_TOL: f64 = 1e-4;
const PAD_COLUMNS: usize = 24;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol * target
}

fn toy_model(seed: u64) -> Model<f64> {
    Model::new(ModelConfig::preset(Preset::Toy, synth_vocab().len()), seed).unwrap()
}

fn criterion_1() -> Outcome {
    let cfg = ModelConfig::preset(Preset::Paper, PAPER_VOCAB);
    let full = Model::<f32>::new(cfg.clone(), 0).unwrap().param_count();
    let base = Model::<f32>::new(ModelConfig { iccm: false, ..cfg }, 0).unwrap().param_count();
    let delta = full - base;
    let want_delta = PAPER_PARAMS - PAPER_PARAMS_BASELINE;
    outcome(
        within(full as f64, PAPER_PARAMS, PARAMS_TOL) && within(delta as f64, want_delta, DELTA_TOL),
        format!("params {full} (target 7.37M +/-8%), delta {delta} (target 0.98M +/-15%)"),
    )
}

fn criterion_2() -> Outcome {
    let cfg = ModelConfig::preset(Preset::Paper, PAPER_VOCAB);
    let full = estimate_flops(&cfg, FLOP_H, FLOP_W, DEFAULT_MAX_LEN, 2).gflops();
    let base = estimate_flops(&ModelConfig { iccm: false, ..cfg }, FLOP_H, FLOP_W, DEFAULT_MAX_LEN, 2).gflops();
    outcome(
        within(full, PAPER_GFLOPS, FLOPS_TOL) && within(base, PAPER_GFLOPS_BASELINE, FLOPS_TOL),
        format!("{full:.3} GFLOPs (target 19.81 +/-25%), baseline {base:.3} GFLOPs (target 18.81 +/-25%)"),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let suites = [
        Component::Attention,
        Component::Arm,
        Component::DenseBlock,
        Component::Transition,
        Component::Iccm,
        Component::Fusion,
        Component::WeightedCe,
        Component::Decoder,
        Component::Model,
    ];
    let mut failed = Vec::new();
    let (mut checked, mut worst) = (0, 0.0f64);
    for c in suites {
        for seed in 0..GRAD_SEEDS {
            match run_component(c, seed) {
                Ok(r) => {
                    checked += r.checked;
                    worst = worst.max(r.max_rel_err);
                    if !r.passed() {
                        failed.push(format!("{}#{seed}", c.name()));
                    }
                }
                Err(e) => failed.push(format!("{}#{seed}: {e}", c.name())),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failed.is_empty() && secs < GRAD_BUDGET_SECS,
        format!(
            "{} suites x {GRAD_SEEDS} seeds, {checked} coordinates, max rel err {worst:.2e}, {secs:.0}s, failures {failed:?}",
            suites.len()
        ),
    )
}

/// Per-token rule written out independently.
fn implicit_oracle(tok: &str) -> &'static str {
    match tok {
        "^" => "^",
        "_" => "_",
        "{" => "{",
        "}" => "}",
        _ => "<space>",
    }
}

fn criterion_4() -> Outcome {
    let example = build_implicit(&["B", "_", "{", "m", "+", "1", "}"]);
    let example_ok = example == ["<space>", "_", "{", "<space>", "<space>", "<space>", "}"];
    let alphabet = ["x", "2", "+", "\\frac", "^", "_", "{", "}", "<space>", "\\alpha", "(", "="];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..IMPLICIT_SEQUENCES {
        let n = rng.random_range(0..30);
        let seq: Vec<&str> = (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
        let got = build_implicit(&seq);
        let want: Vec<&str> = seq.iter().map(|t| implicit_oracle(t)).collect();
        let positions = seq.iter().zip(&got).all(|(s, g)| !["^", "_", "{", "}"].contains(s) || s == g);
        if got != want || got.len() != seq.len() || !positions || build_implicit(&got) != got {
            mismatches += 1;
        }
    }
    outcome(
        example_ok && mismatches == 0,
        format!("worked example {}, {mismatches} mismatches over {IMPLICIT_SEQUENCES} sequences", if example_ok { "exact" } else { "wrong" }),
    )
}

fn criterion_5() -> Outcome {
    // values derived with eps in place; 1 + ln 3 is the eps-free limit at f = 0.5
    let derived = [
        (0.5, 1.0 + (1.0 + 1.0 / (0.5 + 1e-6f64)).ln()),
        (1.0, 1.0 + (1.0 + 1.0 / (1.0 + 1e-6f64)).ln()),
        (0.0, 1.0 + (1.0 + 1e6f64).ln()),
    ];
    let err = derived.iter().map(|&(f, w)| (class_weight(f) - w).abs()).fold(0.0, f64::max);
    let limit = (class_weight(0.5) - (1.0 + 3f64.ln())).abs();
    // the quoted decimals are rounded to 4 places
    let quoted = (class_weight(1.0) - 1.6931).abs() <= 5e-5 && (class_weight(0.0) - 14.8155).abs() <= 5e-5;
    let ws: Vec<f64> = (0..=WEIGHT_SWEEP).map(|i| class_weight(i as f64 / WEIGHT_SWEEP as f64)).collect();
    let monotone = ws.windows(2).all(|p| p[0] > p[1]);
    outcome(
        err <= WEIGHT_TOL && quoted && monotone,
        format!(
            "max err vs derived {err:.1e}, w(0.5) {:.6} (1+ln3 gap {limit:.1e}), w(1) {:.6}, w(0) {:.6}, monotone over {} points: {monotone}",
            class_weight(0.5),
            class_weight(1.0),
            class_weight(0.0),
            WEIGHT_SWEEP + 1
        ),
    )
}

/// Fraction of samples whose greedy implicit prediction, teacher-forced on the
/// fused prediction, equals the implicit sequence of that prediction.
fn iccm_consistency(model: &Model<f32>, vocab: &Vocab, data: &Dataset, preds: &[Vec<usize>]) -> f64 {
    let map = vocab.implicit_map();
    let mut hits = 0;
    for (s, p) in data.samples.iter().zip(preds) {
        let (x, m) = image_input::<f32>(&s.image).unwrap();
        let mut ctx = model.eval_ctx();
        let mem = encode_images(&mut ctx, &model.config, &x, &m).unwrap();
        let mut inputs = vec![SOS];
        inputs.extend_from_slice(p);
        let t = inputs.len();
        let out = forward_tokens(&mut ctx, &model.config, &mem, &inputs, 1, t, true).unwrap();
        let logits = ctx.g.value(out.implicit_logits.unwrap());
        let c = ImplicitVocab::SIZE;
        let got: Vec<usize> = (0..t).map(|i| argmax(&logits.data()[i * c..(i + 1) * c])).collect();
        let mut want: Vec<usize> = p.iter().map(|&id| map[id]).collect();
        want.push(EOS);
        hits += usize::from(got == want);
    }
    hits as f64 / preds.len() as f64
}

fn criterion_6(trained: &mut Option<Model<f32>>) -> Outcome {
    let data = Dataset { samples: synth_generate(OVERFIT_SEED, OVERFIT_SAMPLES, &SynthOptions::default()) };
    let vocab = synth_vocab();
    let cfg = TrainConfig {
        seed: OVERFIT_SEED,
        preset: Preset::Toy,
        lr: OVERFIT_LR,
        epochs: 400,
        eval_every: 5,
        // the schedule would see a flat zero metric early on and decay too soon
        patience: 1000,
        target_exprate: Some(0.97),
        time_limit_secs: Some(OVERFIT_BUDGET_SECS),
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut trainer = Trainer::<f32>::new(cfg, vocab.clone()).unwrap();
    trainer.fit(&data, None, |_| {}).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let readout = trainer.readout();
    let opts = BeamOptions { beam: 1, max_len: OVERFIT_MAX_LEN, ..Default::default() };
    let eval = evaluate(&trainer.model, &vocab, &data, readout, &opts).unwrap();
    let preds: Vec<Vec<usize>> = data.samples.iter().map(|s| recognize(&trainer.model, &s.image, readout, &opts).unwrap()).collect();
    let consistency = iccm_consistency(&trainer.model, &vocab, &data, &preds);
    let secs = start.elapsed().as_secs_f64();
    let pass = eval.exprate >= OVERFIT_TARGET && consistency >= ICCM_CONSISTENCY && secs <= OVERFIT_BUDGET_SECS;
    let detail = format!(
        "greedy ExpRate {:.2} after {} epochs ({train_secs:.0}s training, {secs:.0}s total), ICCM consistency {consistency:.2}",
        eval.exprate, trainer.state.epoch
    );
    *trained = Some(trainer.model);
    outcome(pass, detail)
}

fn ablation_trace(iccm: bool, toggles: LossToggles, data: &Dataset) -> (Vec<LossReport>, Model<f64>) {
    let vocab = synth_vocab();
    let mut model = ModelConfig::preset(Preset::Toy, vocab.len());
    model.iccm = iccm;
    let cfg = TrainConfig { seed: 3, epochs: ABLATION_EPOCHS, toggles, model: Some(model), ..TrainConfig::default() };
    let mut t = Trainer::<f64>::new(cfg, vocab).unwrap();
    let mut trace = Vec::new();
    for _ in 0..ABLATION_EPOCHS {
        trace.push(t.run_epoch(data).unwrap());
        t.state.epoch += 1;
    }
    (trace, t.model)
}

fn criterion_7() -> Outcome {
    let opts = SynthOptions { max_items: 2, max_depth: 1, ..SynthOptions::default() };
    let data = Dataset { samples: synth_generate(21, ABLATION_SAMPLES, &opts) };
    let (off, full) = ablation_trace(true, LossToggles::BASELINE, &data);
    let (plain, base) = ablation_trace(false, LossToggles::BASELINE, &data);
    let bits = |r: &[LossReport]| r.iter().map(|x| (x.total.to_bits(), x.initial.to_bits(), x.implicit, x.fusion)).collect::<Vec<_>>();
    let same_trace = bits(&off) == bits(&plain);
    let same_params = base.params.iter().all(|(n, t)| {
        full.params.get(n).is_some_and(|u| u.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()))
    });
    let mut regimes = Vec::new();
    for (implicit, fusion) in [(false, false), (true, false), (false, true), (true, true)] {
        let toggles = LossToggles { implicit, fusion };
        let ok = catch_unwind(AssertUnwindSafe(|| {
            let (trace, _) = ablation_trace(true, toggles, &data);
            trace.iter().all(|r| {
                let sum = r.initial + r.implicit.unwrap_or(0.0) + r.fusion.unwrap_or(0.0);
                r.total.is_finite()
                    && r.implicit.is_some() == implicit
                    && r.fusion.is_some() == fusion
                    && (r.total - sum).abs() <= 1e-9 * r.total.abs().max(1.0)
            })
        }))
        .unwrap_or(false);
        regimes.push(ok);
    }
    outcome(
        same_trace && same_params && regimes.iter().all(|&r| r),
        format!("trace bit-identical: {same_trace}, parameters bit-identical: {same_params}, regimes ok: {regimes:?}"),
    )
}

struct PerStep(Vec<Vec<f64>>);

impl StepModel for PerStep {
    fn vocab_size(&self) -> usize {
        self.0[0].len()
    }

    fn next_log_probs(&mut self, _d: Direction, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, Error> {
        Ok(prefixes.iter().map(|p| self.0[(p.len() - 1).min(self.0.len() - 1)].clone()).collect())
    }
}

fn exhaustive_best(rows: &[Vec<f64>]) -> Vec<usize> {
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut frontier: Vec<(Vec<usize>, f64)> = vec![(vec![], 0.0)];
    for row in rows {
        let mut next = Vec::new();
        for (seq, s) in &frontier {
            let fin = (s + row[EOS]) / (seq.len() + 1) as f64;
            if fin > best.0 || (fin == best.0 && *seq < best.1) {
                best = (fin, seq.clone());
            }
            for t in 3..row.len() {
                let mut n = seq.clone();
                n.push(t);
                next.push((n, s + row[t]));
            }
        }
        frontier = next;
    }
    best.1
}

fn dp_distance(a: &[u8], b: &[u8]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 0..=a.len() {
        for j in 0..=b.len() {
            d[i][j] = if i == 0 || j == 0 {
                i + j
            } else {
                (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]))
            };
        }
    }
    d[a.len()][b.len()]
}

fn criterion_8(trained: Option<&Model<f32>>) -> Outcome {
    let samples: Vec<Sample> = synth_generate(OVERFIT_SEED, 10, &SynthOptions::default());
    let mut greedy_ok = true;
    let mut checkpoints = 0;
    let check = |model: &Model<f32>, ok: &mut bool| {
        for s in &samples {
            for readout in [Readout::Initial, Readout::Fused] {
                let mut r = Recognizer::from_image(model, &s.image, readout).unwrap();
                for d in [Direction::L2R, Direction::R2L] {
                    let g = greedy_decode(&mut r, d, 12).unwrap();
                    let b = beam_decode(&mut r, d, &BeamOptions { beam: 1, max_len: 12, ..Default::default() }).unwrap();
                    *ok &= b.len() == 1 && b[0].tokens == g.tokens && b[0].truncated == g.truncated && b[0].score == g.score;
                }
            }
        }
    };
    for seed in [1, 2] {
        check(&toy_model(seed).cast(), &mut greedy_ok);
        checkpoints += 1;
    }
    if let Some(m) = trained {
        check(m, &mut greedy_ok);
        checkpoints += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let o = BeamOptions { beam: 3, max_len: 3, scoring: Scoring::Normalized, admission: Admission::All };
    let mut exhaustive_misses = 0;
    for _ in 0..EXHAUSTIVE_MODELS {
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let mut l: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
                l[PAD] = f64::NEG_INFINITY;
                l[SOS] = f64::NEG_INFINITY;
                let lse = l.iter().filter(|v| v.is_finite()).map(|v| v.exp()).sum::<f64>().ln();
                l.iter().map(|v| v - lse).collect()
            })
            .collect();
        let want = exhaustive_best(&rows);
        let got = beam_decode(&mut PerStep(rows), Direction::L2R, &o).unwrap().remove(0).tokens;
        exhaustive_misses += usize::from(got != want);
    }

    let mut edit_misses = 0;
    for _ in 0..EDIT_PAIRS {
        let mut s = || -> Vec<u8> { (0..rng.random_range(0..14)).map(|_| rng.random_range(0..4)).collect() };
        let (a, b) = (s(), s());
        edit_misses += usize::from(token_edit_distance(&a, &b) != dp_distance(&a, &b));
    }

    let mut ordered = true;
    for _ in 0..200 {
        let n = rng.random_range(1..30);
        let samples = (0..n).map(|i| SampleResult { id: i.to_string(), prediction: vec![], distance: rng.random_range(0..5) }).collect();
        let r = EvalResult::from_samples(samples);
        ordered &= r.exprate <= r.leq1 && r.leq1 <= r.leq2 && r.leq2 <= 1.0;
    }
    let vocab = synth_vocab();
    let data = Dataset { samples: samples[..4].to_vec() };
    let r = evaluate(&toy_model(3), &vocab, &data, Readout::Fused, &BeamOptions { beam: 2, max_len: 6, ..Default::default() }).unwrap();
    ordered &= r.exprate <= r.leq1 && r.leq1 <= r.leq2 && r.leq2 <= 1.0;

    outcome(
        greedy_ok && exhaustive_misses == 0 && edit_misses == 0 && ordered,
        format!(
            "beam-1 = greedy on {checkpoints} checkpoints: {greedy_ok}, beam-3 vs enumeration misses {exhaustive_misses}/{EXHAUSTIVE_MODELS}, \
             edit distance misses {edit_misses}/{EDIT_PAIRS}, rate ordering: {ordered}"
        ),
    )
}

fn criterion_9() -> Outcome {
    let model = toy_model(5);
    let img = synth_generate(9, 1, &SynthOptions::default()).remove(0).image;
    let wide = img.pad_right(PAD_COLUMNS);
    let (x, _) = image_input::<f64>(&wide).unwrap();
    let valid = (0..wide.height).flat_map(|_| (0..wide.width).map(|c| c < img.width)).collect();
    let mask = Mask::new(vec![1, wide.height, wide.width], valid).unwrap();
    let mut drift = 0.0f64;
    let mut same_tokens = true;
    for readout in [Readout::Initial, Readout::Fused] {
        let mut plain = Recognizer::from_image(&model, &img, readout).unwrap();
        let mut padded = Recognizer::new(&model, &x, &mask, readout).unwrap();
        for d in [Direction::L2R, Direction::R2L] {
            let o = BeamOptions { beam: 3, max_len: 6, ..Default::default() };
            let a = beam_decode(&mut plain, d, &o).unwrap();
            let b = beam_decode(&mut padded, d, &o).unwrap();
            same_tokens &= a.len() == b.len() && a.iter().zip(&b).all(|(p, q)| p.tokens == q.tokens);
            drift = a.iter().zip(&b).map(|(p, q)| (p.score - q.score).abs()).fold(drift, f64::max);
        }
    }

    // future tokens must not reach earlier positions of E, I or F
    let (b, t) = (2, 6);
    let base: Vec<usize> = vec![SOS, 5, 6, 7, 8, 9, SOS, 9, 8, 7, PAD, PAD];
    let (x2, _) = image_input::<f64>(&img).unwrap();
    let two = Tensor::new(vec![2, 1, img.height, img.width], [x2.data(), x2.data()].concat()).unwrap();
    let m2 = Mask::all(vec![2, img.height, img.width]);
    let feats = |inputs: &[usize]| {
        let mut ctx = model.eval_ctx();
        let mem = encode_images(&mut ctx, &model.config, &two, &m2).unwrap();
        let out = forward_tokens(&mut ctx, &model.config, &mem, inputs, b, t, true).unwrap();
        [out.decoder.features, out.implicit_features.unwrap(), out.fused.unwrap()].map(|v| ctx.g.value(v).clone())
    };
    let reference = feats(&base);
    let d = model.config.decoder.d_model;
    let mut causal = true;
    for cut in 1..t {
        let mut other = base.clone();
        for bi in 0..b {
            for p in cut..t {
                if other[bi * t + p] != PAD {
                    other[bi * t + p] = 3 + (other[bi * t + p] + cut) % 10;
                }
            }
        }
        for (r, o) in reference.iter().zip(feats(&other)) {
            for bi in 0..b {
                let span = bi * t * d..(bi * t + cut) * d;
                causal &= r.data()[span.clone()] == o.data()[span];
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut rand_t = |scale: f64| Tensor::<f64>::new(vec![2, 3, 8], (0..48).map(|_| rng.random_range(-scale..scale)).collect()).unwrap();
    let (e, i, gate) = (rand_t(2.0), rand_t(2.0), rand_t(1.0).map(|v| v.abs()));
    let fused = |e: &Tensor<f64>, i: &Tensor<f64>, gate: &Tensor<f64>| {
        let mut g = Graph::<f64>::new();
        let (ev, iv, gv) = (g.constant(e.clone()), g.constant(i.clone()), g.constant(gate.clone()));
        let f = fuse_with_gate(&mut g, ev, iv, gv).unwrap();
        g.value(f).clone()
    };
    let ones = fused(&e, &i, &Tensor::ones(vec![2, 3, 8])).data() == e.data();
    let zeros = fused(&e, &i, &Tensor::zeros(vec![2, 3, 8])).data() == i.data();
    let fixed = fused(&e, &e, &gate).data().iter().zip(e.data()).all(|(a, b)| (a - b).abs() <= 1e-15 * b.abs().max(1.0));

    outcome(
        drift <= PADDING_TOL && same_tokens && causal && ones && zeros && fixed,
        format!(
            "padding drift {drift:.1e} (tokens equal: {same_tokens}), causality: {causal}, \
             fusion f=1: {ones}, f=0: {zeros}, E==I: {fixed}"
        ),
    )
}

fn run(n: usize, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
    });
    println!(
        "criterion {n}: {} ({:.1}s) {}",
        if result.pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64(),
        result.detail
    );
    result.pass
}

fn main() {
    // `cargo test -- --list` and filtered runs should not trigger the suite
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let mut trained = None;
    let results = [
        run(1, criterion_1),
        run(2, criterion_2),
        run(3, criterion_3),
        run(4, criterion_4),
        run(5, criterion_5),
        run(6, || criterion_6(&mut trained)),
        run(7, criterion_7),
        run(8, || criterion_8(trained.as_ref())),
        run(9, criterion_9),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
