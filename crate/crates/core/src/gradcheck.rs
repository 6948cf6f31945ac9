//! Central finite-difference gradient checking at 64-bit.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::nn::Ctx;
use crate::seed::derive_rng;
use crate::tensor::{Graph, Params, Tensor, Var};
use crate::Error;

/// Step and tolerance policy.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Check at most this many coordinates per parameter tensor (all when `None`).
    pub coords_per_param: Option<usize>,
    /// Coordinates whose central differences at `step` and `step / 2`
    /// disagree by more than this relative amount sit near a kink (ReLU, max)
    /// and are skipped; a wrong analytic gradient still shows at both steps.
    pub kink: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, tolerance: 1e-4, floor: 1e-5, coords_per_param: None, kink: 1e-5 }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.failures.extend(other.failures);
    }
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare analytic parameter gradients of `loss_fn` against central differences.
///
/// `loss_fn` must build a scalar loss on a fresh graph, reading parameters
/// through [`Graph::param`], and must be deterministic.
pub fn check_params<F>(
    params: &Params<f64>,
    loss_fn: F,
    opts: GradCheckOptions,
    rng: &mut impl Rng,
) -> Result<GradCheckReport, Error>
where
    F: Fn(&mut Graph<f64>, &Params<f64>) -> Result<Var, Error>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    g.backward(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .map(|(name, t)| {
            let grad = g
                .param_vars()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| g.grad_or_zeros(v).to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            (name.to_string(), grad)
        })
        .collect();

    let eval = |p: &Params<f64>| -> Result<f64, Error> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, p)?;
        Ok(g.value(l).item())
    };

    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    for (name, grad) in analytic {
        let n = grad.len();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let mut central = |h: f64| -> Result<f64, Error> {
                let orig = work.get(&name).unwrap().data()[i];
                work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
                let up = eval(&work)?;
                work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
                let down = eval(&work)?;
                work.get_mut(&name).unwrap().data_mut()[i] = orig;
                Ok((up - down) / (2.0 * h))
            };
            let numeric = central(opts.step)?;
            let half = central(opts.step / 2.0)?;
            if rel_err(numeric, half, opts.floor) > opts.kink {
                report.skipped += 1;
                continue;
            }
            let err = rel_err(grad[i], numeric, opts.floor);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(err);
            if err > opts.tolerance {
                report.failures.push(Mismatch {
                    param: name.clone(),
                    index: i,
                    analytic: grad[i],
                    numeric,
                    rel_err: err,
                });
            }
        }
    }
    Ok(report)
}

/// Run `f` in a training-mode context without dropout that borrows `g`.
pub fn in_ctx<R>(
    g: &mut Graph<f64>,
    params: &Params<f64>,
    buffers: &Params<f64>,
    f: impl FnOnce(&mut Ctx<f64>) -> Result<R, Error>,
) -> Result<R, Error> {
    let mut ctx = Ctx::train(params, buffers, None);
    std::mem::swap(&mut ctx.g, g);
    let r = f(&mut ctx);
    std::mem::swap(&mut ctx.g, g);
    r
}

/// `sum(x * R)` for a fixed `R ~ U(-1, 1)`, so every output entry matters.
pub fn random_projection(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var, Error> {
    let shape = g.shape(x).to_vec();
    let mut rng = derive_rng(seed, "projection");
    let u = Uniform::new(-1.0, 1.0).expect("valid range");
    let r: Vec<f64> = (0..shape.iter().product()).map(|_| u.sample(&mut rng)).collect();
    let r = g.constant(Tensor::new(shape, r)?);
    let y = g.mul(x, r)?;
    Ok(g.sum(y)?)
}

/// Add `N(0, scale^2)` noise to every entry, moving zero-initialized tensors
/// off symmetric points.
pub fn jitter(params: &mut Params<f64>, seed: u64, scale: f64) {
    let mut rng = derive_rng(seed, "jitter");
    let n = Normal::new(0.0, scale).expect("positive scale");
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        for v in params.get_mut(&name).expect("listed").data_mut() {
            *v += n.sample(&mut rng);
        }
    }
}

/// Components with a finite-difference suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Matmul,
    Conv,
    Attention,
    Arm,
    DenseBlock,
    Transition,
    Iccm,
    Fusion,
    WeightedCe,
    Decoder,
    Model,
}

impl Component {
    pub const ALL: [Component; 11] = [
        Component::Matmul,
        Component::Conv,
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

    pub fn name(self) -> &'static str {
        match self {
            Component::Matmul => "matmul",
            Component::Conv => "conv2d",
            Component::Attention => "attention",
            Component::Arm => "arm",
            Component::DenseBlock => "dense_block",
            Component::Transition => "transition",
            Component::Iccm => "iccm",
            Component::Fusion => "fusion",
            Component::WeightedCe => "weighted_ce",
            Component::Decoder => "decoder",
            Component::Model => "model",
        }
    }

    pub fn parse(s: &str) -> Option<Component> {
        Component::ALL.into_iter().find(|c| c.name() == s)
    }
}

fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// `[b, h, w]` mask: the first sample fully valid, later ones cropped.
fn cropped_mask(b: usize, h: usize, w: usize) -> crate::tensor::Mask {
    let mut data = vec![true; b * h * w];
    for bi in 1..b {
        for y in 0..h {
            for x in 0..w {
                data[(bi * h + y) * w + x] = y < h - bi && x < w - bi;
            }
        }
    }
    crate::tensor::Mask::new(vec![b, h, w], data).expect("sized")
}

/// Zero input cells outside `mask` (`[b, h, w]`) of an input `[b, c, h, w]`.
fn masked_input(t: Tensor<f64>, mask: &crate::tensor::Mask) -> Tensor<f64> {
    let s = t.shape().to_vec();
    let plane = s[2] * s[3];
    let mut data = t.into_vec();
    for (i, v) in data.iter_mut().enumerate() {
        let (b, p) = (i / (s[1] * plane), i % plane);
        if !mask.data()[b * plane + p] {
            *v = 0.0;
        }
    }
    Tensor::new(s, data).expect("same shape")
}

/// Run the finite-difference suite of `component` for one seed. Inputs are
/// checked alongside parameters where the component has any.
pub fn run_component(component: Component, seed: u64) -> Result<GradCheckReport, Error> {
    use crate::config::{DecoderConfig, ModelConfig, Preset};
    use crate::data::{make_batch, synth_generate, synth_vocab, SynthOptions};
    use crate::decoder::{arm_refine, decode, init_decoder, Memory};
    use crate::encoder::{dense_block, init_dense_block, init_transition, transition, FeatureGrid};
    use crate::iccm::{fuse, iccm_forward, init_iccm};
    use crate::loss::{token_weights, total_loss, weighted_ce};
    use crate::model::{LossToggles, Model};
    use crate::nn::Init;
    use crate::tensor::Mask;
    use crate::vocab::ImplicitVocab;

    let mut rng = derive_rng(seed, component.name());
    let mut init = Init::<f64>::new(seed);
    let opts = GradCheckOptions::default();
    let proj_seed = seed ^ 0x5eed;
    let small_dec = DecoderConfig {
        layers: 2,
        d_model: 16,
        heads: 4,
        ffn_dim: 24,
        dropout: 0.0,
        arm_kernel: 3,
        arm_channels: 4,
        arm: true,
    };

    let report = match component {
        Component::Matmul | Component::Conv => {
            let mut p = Params::new();
            let tight = GradCheckOptions { tolerance: 1e-6, ..opts };
            if component == Component::Matmul {
                p.insert("a", uniform_tensor(&mut rng, &[4, 3], -1.0, 1.0));
                p.insert("b", uniform_tensor(&mut rng, &[3, 2], -1.0, 1.0));
                check_params(
                    &p,
                    |g, p| {
                        let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
                        let y = g.matmul(a, b)?;
                        random_projection(g, y, proj_seed)
                    },
                    tight,
                    &mut rng,
                )?
            } else {
                p.insert("x", uniform_tensor(&mut rng, &[2, 3, 8, 8], -1.0, 1.0));
                p.insert("k", uniform_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0));
                p.insert("b", uniform_tensor(&mut rng, &[4], -1.0, 1.0));
                check_params(
                    &p,
                    |g, p| {
                        let (x, k, b) = (g.param(p, "x")?, g.param(p, "k")?, g.param(p, "b")?);
                        let y = g.conv2d(x, k, Some(b), 1, 1)?;
                        random_projection(g, y, proj_seed)
                    },
                    tight,
                    &mut rng,
                )?
            }
        }
        Component::Attention => {
            init.attention("att", 16);
            let mut p = init.params;
            jitter(&mut p, seed, 0.05);
            p.insert("input.q", uniform_tensor(&mut rng, &[2, 5, 16], -1.0, 1.0));
            p.insert("input.kv", uniform_tensor(&mut rng, &[2, 7, 16], -1.0, 1.0));
            let mask = Mask::new(vec![2, 1, 1, 7], (0..14).map(|i| i < 7 || i % 7 < 4).collect())?;
            let buffers = init.buffers;
            check_params(
                &p,
                |g, p| {
                    in_ctx(g, p, &buffers, |ctx| {
                        let q = ctx.p("input.q")?;
                        let kv = ctx.p("input.kv")?;
                        let (y, _) = ctx.mha("att", q, kv, kv, &mask, 4, 0.0)?;
                        random_projection(&mut ctx.g, y, proj_seed)
                    })
                },
                opts,
                &mut rng,
            )?
        }
        Component::Arm => {
            init_decoder(&mut init, &small_dec, 6);
            let mut p = Params::new();
            for n in ["decoder.arm.conv.weight", "decoder.arm.conv.bias", "decoder.arm.proj.weight", "decoder.arm.proj.bias"] {
                p.insert(n, init.params.get(n).expect("initialized").clone());
            }
            jitter(&mut p, seed, 0.1);
            let (b, h, t, hh, ww) = (2, small_dec.heads, 4, 3, 4);
            p.insert("input.energies", uniform_tensor(&mut rng, &[b, h, t, hh * ww], -1.0, 1.0));
            p.insert("input.prior", uniform_tensor(&mut rng, &[b, h, t, hh * ww], -1.0, 1.0));
            let buffers = Params::new();
            check_params(
                &p,
                |g, p| {
                    in_ctx(g, p, &buffers, |ctx| {
                        let e = ctx.p("input.energies")?;
                        let logits = ctx.p("input.prior")?;
                        let prior = ctx.g.softmax(logits, None)?;
                        let y = arm_refine(ctx, &small_dec, e, Some(prior), hh, ww)?;
                        random_projection(&mut ctx.g, y, proj_seed)
                    })
                },
                opts,
                &mut rng,
            )?
        }
        Component::DenseBlock | Component::Transition => {
            let (c, h, w) = (8, 6, 7);
            let mask = cropped_mask(2, h, w);
            if component == Component::DenseBlock {
                init_dense_block(&mut init, "blk", c, 2, 4);
            } else {
                init_transition(&mut init, "trans", c);
            }
            let mut p = init.params;
            jitter(&mut p, seed, 0.1);
            p.insert("input.x", masked_input(uniform_tensor(&mut rng, &[2, c, h, w], -1.0, 1.0), &mask));
            let buffers = init.buffers;
            check_params(
                &p,
                |g, p| {
                    in_ctx(g, p, &buffers, |ctx| {
                        let x = ctx.p("input.x")?;
                        let y = if component == Component::DenseBlock {
                            dense_block(ctx, x, "blk", 2, &mask, 0.0)?
                        } else {
                            transition(ctx, x, "trans", &mask, 0.0)?.0
                        };
                        random_projection(&mut ctx.g, y, proj_seed)
                    })
                },
                opts,
                &mut rng,
            )?
        }
        Component::Iccm | Component::Fusion => {
            init_iccm(&mut init, &small_dec);
            let mut p = init.params;
            jitter(&mut p, seed, 0.05);
            let d = small_dec.d_model;
            p.insert("input.e", uniform_tensor(&mut rng, &[2, 5, d], -1.0, 1.0));
            p.insert("input.i", uniform_tensor(&mut rng, &[2, 5, d], -1.0, 1.0));
            let valid = Mask::new(vec![2, 5], (0..10).map(|i| i < 8).collect())?;
            let buffers = init.buffers;
            check_params(
                &p,
                |g, p| {
                    in_ctx(g, p, &buffers, |ctx| {
                        let e = ctx.p("input.e")?;
                        let y = if component == Component::Iccm {
                            iccm_forward(ctx, &small_dec, e, &valid)?
                        } else {
                            let i = ctx.p("input.i")?;
                            fuse(ctx, e, i)?.0
                        };
                        random_projection(&mut ctx.g, y, proj_seed)
                    })
                },
                opts,
                &mut rng,
            )?
        }
        Component::WeightedCe => {
            let n = 12;
            let mut p = Params::new();
            p.insert("logits", uniform_tensor(&mut rng, &[n, ImplicitVocab::SIZE], -2.0, 2.0));
            let targets: Vec<usize> =
                (0..n).map(|i| if i % 5 == 4 { crate::vocab::PAD } else { rng.random_range(2..ImplicitVocab::SIZE) }).collect();
            let w = token_weights(&targets);
            check_params(
                &p,
                |g, p| {
                    let l = g.param(p, "logits")?;
                    Ok(weighted_ce(g, l, &targets, &w)?)
                },
                opts,
                &mut rng,
            )?
        }
        Component::Decoder => {
            let vocab = 9;
            init_decoder(&mut init, &small_dec, vocab);
            let mut p = init.params;
            jitter(&mut p, seed, 0.05);
            let (hh, ww, d) = (3, 4, small_dec.d_model);
            p.insert("input.grid", uniform_tensor(&mut rng, &[2, d, hh, ww], -1.0, 1.0));
            let grid_mask = cropped_mask(2, hh, ww);
            let (b, t) = (2, 4);
            let inputs: Vec<usize> =
                (0..b * t).map(|i| if i == b * t - 1 { crate::vocab::PAD } else { rng.random_range(1..vocab) }).collect();
            let buffers = init.buffers;
            check_params(
                &p,
                |g, p| {
                    in_ctx(g, p, &buffers, |ctx| {
                        let features = ctx.p("input.grid")?;
                        let grid = FeatureGrid { features, mask: grid_mask.clone() };
                        let mem = Memory::from_grid(ctx, &grid)?;
                        let out = decode(ctx, &small_dec, &mem, &inputs, b, t)?;
                        random_projection(&mut ctx.g, out.features, proj_seed)
                    })
                },
                opts,
                &mut rng,
            )?
        }
        Component::Model => {
            let vocab = synth_vocab();
            let so = SynthOptions { max_items: 2, max_depth: 1, ..SynthOptions::default() };
            let samples = synth_generate(seed, 2, &so);
            let refs: Vec<_> = samples.iter().collect();
            let batch = make_batch::<f64>(&refs, &vocab)?;
            let cfg = ModelConfig::preset(Preset::Toy, vocab.len());
            let mut model = Model::<f64>::new(cfg.clone(), seed)?;
            jitter(&mut model.params, seed, 0.02);
            let buffers = model.buffers.clone();
            let sampled = GradCheckOptions { coords_per_param: Some(2), ..opts };
            check_params(
                &model.params,
                |g, p| in_ctx(g, p, &buffers, |ctx| Ok(total_loss(ctx, &cfg, &batch, LossToggles::default())?.total)),
                sampled,
                &mut rng,
            )?
        }
    };
    Ok(report)
}
