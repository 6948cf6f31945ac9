use ical_core::config::DecoderConfig;
use ical_core::gradcheck::{run_component, Component};
use ical_core::iccm::{fuse, fuse_with_gate, fusion_gate, iccm_forward, init_iccm};
use ical_core::model::{encode_images, forward_tokens, Outputs};
use ical_core::nn::{Ctx, Init};
use ical_core::tensor::{Graph, Mask, Params, Tensor};
use ical_core::vocab::{ImplicitVocab, PAD, SOS};
use ical_core::{Model, ModelConfig, Preset, Readout};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn cfg() -> DecoderConfig {
    DecoderConfig { layers: 1, d_model: 16, heads: 4, ffn_dim: 24, dropout: 0.0, arm_kernel: 3, arm_channels: 4, arm: true }
}

fn iccm_params(seed: u64) -> Params<f64> {
    let mut init = Init::<f64>::new(seed);
    init_iccm(&mut init, &cfg());
    init.params
}

fn run_iccm(p: &Params<f64>, e: &Tensor<f64>, valid: &Mask) -> Tensor<f64> {
    let buffers = Params::new();
    let mut ctx = Ctx::eval(p, &buffers);
    let ev = ctx.g.constant(e.clone());
    let i = iccm_forward(&mut ctx, &cfg(), ev, valid).unwrap();
    ctx.g.value(i).clone()
}

#[test]
fn iccm_keeps_the_feature_shape() {
    let p = iccm_params(1);
    let e = random(&[2, 5, 16], 2, 1.0);
    let valid = Mask::new(vec![2, 5], vec![true, true, true, true, true, true, true, true, false, false]).unwrap();
    assert_eq!(run_iccm(&p, &e, &valid).shape(), [2, 5, 16]);
}

#[test]
fn iccm_is_causal() {
    let p = iccm_params(3);
    let (b, t, d) = (2, 6, 16);
    let e = random(&[b, t, d], 4, 1.0);
    let valid = Mask::new(vec![b, t], vec![true; b * t]).unwrap();
    let base = run_iccm(&p, &e, &valid);
    for cut in 0..t - 1 {
        let mut data = e.data().to_vec();
        for bi in 0..b {
            for j in 0..d {
                data[(bi * t + cut + 1) * d + j] -= 2.0;
            }
        }
        let other = run_iccm(&p, &Tensor::new(vec![b, t, d], data).unwrap(), &valid);
        for bi in 0..b {
            let r = bi * t * d..(bi * t + cut + 1) * d;
            assert_eq!(base.data()[r.clone()], other.data()[r], "cut {cut}");
        }
    }
}

fn fused_with(e: &Tensor<f64>, i: &Tensor<f64>, gate: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::<f64>::new();
    let (ev, iv, gv) = (g.constant(e.clone()), g.constant(i.clone()), g.constant(gate.clone()));
    let f = fuse_with_gate(&mut g, ev, iv, gv).unwrap();
    g.value(f).clone()
}

#[test]
fn gate_extremes_select_one_input() {
    let e = random(&[2, 3, 8], 1, 2.0);
    let i = random(&[2, 3, 8], 2, 2.0);
    assert_eq!(fused_with(&e, &i, &Tensor::ones(vec![2, 3, 8])).data(), e.data());
    assert_eq!(fused_with(&e, &i, &Tensor::zeros(vec![2, 3, 8])).data(), i.data());
}

#[test]
fn equal_inputs_are_a_fixed_point() {
    let e = random(&[2, 3, 8], 5, 2.0);
    let gate = random(&[2, 3, 8], 6, 1.0).map(|v| v.abs());
    let f = fused_with(&e, &e, &gate);
    for (a, b) in f.data().iter().zip(e.data()) {
        assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
    }
}

#[test]
fn fuse_rejects_mismatched_shapes() {
    let mut g = Graph::<f64>::new();
    let e = g.constant(Tensor::zeros(vec![1, 2, 4]));
    let i = g.constant(Tensor::zeros(vec![1, 3, 4]));
    let gate = g.constant(Tensor::zeros(vec![1, 2, 4]));
    assert!(fuse_with_gate(&mut g, e, i, gate).is_err());
}

fn toy_outputs<'m>(model: &'m Model<f64>, inputs: &[usize], b: usize, t: usize) -> (Ctx<'m, f64>, Outputs) {
    let mut ctx = model.eval_ctx();
    let images = random(&[b, 1, 32, 48], 7, 1.0).map(|v| v.abs());
    let mask = Mask::new(vec![b, 32, 48], vec![true; b * 32 * 48]).unwrap();
    let mem = encode_images(&mut ctx, &model.config, &images, &mask).unwrap();
    let out = forward_tokens(&mut ctx, &model.config, &mem, inputs, b, t, true).unwrap();
    (ctx, out)
}

const INPUTS: [usize; 8] = [SOS, 5, 6, 7, SOS, 9, PAD, PAD];

#[test]
fn head_shapes_and_probabilities() {
    let v = 20;
    let model = Model::<f64>::new(ModelConfig::preset(Preset::Toy, v), 1).unwrap();
    let (mut ctx, out) = toy_outputs(&model, &INPUTS, 2, 4);
    assert_eq!(ctx.g.shape(out.initial_logits), [2, 4, v]);
    assert_eq!(ctx.g.shape(out.fused_logits.unwrap()), [2, 4, v]);
    assert_eq!(ctx.g.shape(out.implicit_logits.unwrap()), [2, 4, ImplicitVocab::SIZE]);
    for logits in [out.initial_logits, out.fused_logits.unwrap(), out.implicit_logits.unwrap()] {
        let p = ctx.g.softmax(logits, None).unwrap();
        let n = *ctx.g.shape(p).last().unwrap();
        for row in ctx.g.value(p).data().chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn gate_values_lie_strictly_inside_the_unit_interval() {
    let model = Model::<f64>::new(ModelConfig::preset(Preset::Toy, 20), 2).unwrap();
    let (ctx, out) = toy_outputs(&model, &INPUTS, 2, 4);
    assert!(ctx.g.value(out.gate.unwrap()).data().iter().all(|&g| g > 0.0 && g < 1.0));
}

fn logits_of(model: &Model<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ctx, out) = toy_outputs(model, &INPUTS, 2, 4);
    let v = |x| ctx.g.value(x).data().to_vec();
    (v(out.initial_logits), v(out.fused_logits.unwrap()), v(out.implicit_logits.unwrap()))
}

#[test]
fn main_head_is_shared_by_initial_and_fused_predictions() {
    let model = Model::<f64>::new(ModelConfig::preset(Preset::Toy, 20), 3).unwrap();
    let (init0, fused0, imp0) = logits_of(&model);

    let mut m = model.clone();
    let w = m.params.get("head.main.weight").unwrap().map(|x| x * 1.5 + 0.01);
    m.params.insert("head.main.weight", w);
    let (init1, fused1, imp1) = logits_of(&m);
    assert_ne!(init0, init1);
    assert_ne!(fused0, fused1);
    assert_eq!(imp0, imp1);

    let mut m = model.clone();
    let w = m.params.get("head.implicit.weight").unwrap().map(|x| x * 1.5 + 0.01);
    m.params.insert("head.implicit.weight", w);
    let (init2, fused2, imp2) = logits_of(&m);
    assert_eq!((init0.clone(), fused0.clone()), (init2, fused2));
    assert_ne!(imp0, imp2);
}

#[test]
fn saturated_gate_degenerates_to_the_baseline() {
    let mut model = Model::<f64>::new(ModelConfig::preset(Preset::Toy, 20), 4).unwrap();
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).filter(|n| n.starts_with("iccm.") || n.starts_with("fusion.")).collect();
    for n in names {
        let z = model.params.get(&n).unwrap().map(|_| 0.0);
        model.params.insert(n, z);
    }
    model.params.insert("fusion.gate.bias", Tensor::full(vec![64], 20.0));
    let (initial, fused, _) = logits_of(&model);
    for (a, b) in initial.iter().zip(&fused) {
        assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
    }
    let (ctx, out) = toy_outputs(&model, &INPUTS, 2, 4);
    assert_eq!(ctx.g.value(out.logits(Readout::Initial)).data(), initial.as_slice());
}

#[test]
fn iccm_and_fusion_gradients() {
    for c in [Component::Iccm, Component::Fusion] {
        for seed in 0..3 {
            let r = run_component(c, seed).unwrap();
            assert!(r.passed(), "{c:?} seed {seed}: {:?}", r.failures.first());
            assert!(r.checked > 0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gate_range_and_convexity(seed in 0u64..10_000, scale in 0.1f64..4.0) {
        let p = iccm_params(seed);
        let buffers = Params::new();
        let mut ctx = Ctx::eval(&p, &buffers);
        let e = ctx.g.constant(random(&[2, 3, 16], seed + 1, scale));
        let i = ctx.g.constant(random(&[2, 3, 16], seed + 2, scale));
        let gate = fusion_gate(&mut ctx, e, i).unwrap();
        prop_assert!(ctx.g.value(gate).data().iter().all(|&g| g > 0.0 && g < 1.0));
        let (f, _) = fuse(&mut ctx, e, i).unwrap();
        let (fe, ie, ff) = (ctx.g.value(e).data(), ctx.g.value(i).data(), ctx.g.value(f).data());
        for k in 0..ff.len() {
            let (lo, hi) = (fe[k].min(ie[k]), fe[k].max(ie[k]));
            prop_assert!(ff[k] >= lo - 1e-12 && ff[k] <= hi + 1e-12);
        }
    }
}
