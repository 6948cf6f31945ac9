//! Mini-batch SGD with momentum and coupled weight decay, plateau learning
//! rate schedule, and resumable checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Preset};
use crate::data::{make_batch, Dataset, Sample};
use crate::loss::{total_loss, LossReport};
use crate::model::{encode_images, forward_tokens, LossToggles, Model, Readout};
use crate::nn::Ctx;
use crate::seed::derive_rng;
use crate::tensor::{Params, Scalar, Tensor};
use crate::vocab::{Vocab, PAD};
use crate::Error;

pub const BN_MOMENTUM: f64 = 0.1;

/// `v <- mu v + g + wd theta`, `theta <- theta - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Params<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { lr, momentum, weight_decay, velocity: Params::new() }
    }

    /// Update every parameter that has a gradient; the rest are untouched.
    pub fn step(&mut self, params: &mut Params<T>, grads: &[(String, Tensor<T>)]) -> Result<(), Error> {
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
        }
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(self.lr));
        for (name, g) in grads {
            let theta = params.get_mut(name).ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            if self.velocity.get(name).is_none() {
                self.velocity.insert(name.clone(), Tensor::zeros(theta.shape().to_vec()));
            }
            let v = self.velocity.get_mut(name).expect("inserted above");
            for ((vi, ti), &gi) in v.data_mut().iter_mut().zip(theta.data_mut().iter_mut()).zip(g.data()) {
                *vi = mu * *vi + gi + wd * *ti;
                *ti -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Multiply the learning rate by `factor` after `patience` evaluations
/// without a new best (higher is better).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub bad: usize,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Plateau { factor, patience, best: None, bad: 0 }
    }

    /// Record a metric; returns true when `lr` was reduced.
    pub fn observe(&mut self, metric: f64, lr: &mut f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.bad = 0;
            return false;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            *lr *= self.factor;
            self.bad = 0;
            return true;
        }
        false
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

fn default_seed() -> u64 {
    7
}
fn default_batch() -> usize {
    8
}
fn default_epochs() -> usize {
    100
}
fn default_lr() -> f64 {
    0.08
}
fn default_momentum() -> f64 {
    0.9
}
fn default_decay() -> f64 {
    1e-4
}
fn default_factor() -> f64 {
    0.25
}
fn default_patience() -> usize {
    3
}
fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_factor")]
    pub lr_factor: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub toggles: LossToggles,
    #[serde(default)]
    pub precision: Precision,
    pub train_dir: Option<PathBuf>,
    /// Held-out split for the schedule and best checkpoint; the training set when absent.
    pub val_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_one")]
    pub eval_every: usize,
    /// Stop once the evaluation metric reaches this value.
    pub target_exprate: Option<f64>,
    pub time_limit_secs: Option<f64>,
    /// Replaces the preset architecture (vocab size is still taken from the data).
    pub model: Option<ModelConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields default")
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("need lr > 0, momentum in [0, 1), weight_decay >= 0".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config("lr_factor must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        match &self.model {
            Some(m) => ModelConfig { vocab_size, ..m.clone() },
            None => ModelConfig::preset(self.preset, vocab_size),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossReport,
    pub lr: f64,
    pub metric: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub plateau: Plateau,
    pub history: Vec<EpochLog>,
}

/// Greedy exact-match rate computed from one teacher-forced pass: greedy
/// decoding reproduces a label exactly iff the argmax at every target
/// position is the target.
pub fn greedy_exact_rate<T: Scalar>(model: &Model<T>, vocab: &Vocab, samples: &[&Sample], readout: Readout, batch: usize) -> Result<f64, Error> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for chunk in samples.chunks(batch.max(1)) {
        let b = make_batch::<T>(chunk, vocab)?;
        let mut ctx = model.eval_ctx();
        let mem = encode_images(&mut ctx, &model.config, &b.images, &b.image_mask)?;
        let tb = &b.l2r;
        let out = forward_tokens(&mut ctx, &model.config, &mem, &tb.inputs, tb.batch, tb.len, readout == Readout::Fused)?;
        let logits = ctx.g.value(out.logits(readout));
        let v = model.config.vocab_size;
        for r in 0..tb.batch {
            let ok = (0..tb.len).all(|t| {
                let y = tb.targets[r * tb.len + t];
                if y == PAD {
                    return true;
                }
                let row = &logits.data()[(r * tb.len + t) * v..(r * tb.len + t + 1) * v];
                argmax(row) == y
            });
            hits += usize::from(ok);
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// First index of the maximum.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub model: Model<T>,
    pub optim: Sgd<T>,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    vocab: Vec<String>,
    config: TrainConfig,
    lr: f64,
    state: TrainState,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, vocab: Vocab) -> Result<Self, Error> {
        config.validate()?;
        let mc = config.model_config(vocab.len());
        let model = Model::new(mc, config.seed)?;
        let optim = Sgd::new(config.lr, config.momentum, config.weight_decay);
        let state = TrainState { epoch: 0, step: 0, plateau: Plateau::new(config.lr_factor, config.patience), history: Vec::new() };
        Ok(Trainer { config, vocab, model, optim, state })
    }

    pub fn readout(&self) -> Readout {
        self.model.readout(self.config.toggles)
    }

    /// One optimizer step on `samples`; `batch_index` selects the dropout stream.
    pub fn train_step(&mut self, samples: &[&Sample], batch_index: usize) -> Result<LossReport, Error> {
        let batch = make_batch::<T>(samples, &self.vocab)?;
        let rng = derive_rng(self.config.seed, &format!("dropout/{}/{batch_index}", self.state.epoch));
        let (report, grads, stats) = {
            let mut ctx = Ctx::train(&self.model.params, &self.model.buffers, Some(rng));
            let out = total_loss(&mut ctx, &self.model.config, &batch, self.config.toggles)?;
            ctx.g.backward(out.total)?;
            let grads: Vec<(String, Tensor<T>)> =
                ctx.g.param_vars().filter_map(|(n, v)| ctx.g.grad(v).map(|g| (n.to_string(), g))).collect();
            (out.report, grads, std::mem::take(&mut ctx.bn_stats))
        };
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!("loss is {} at step {}", report.total, self.state.step)));
        }
        self.optim.step(&mut self.model.params, &grads)?;
        let m = T::lit(BN_MOMENTUM);
        for (prefix, s) in stats {
            for (key, batch_vals) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                if let Some(buf) = self.model.buffers.get_mut(&format!("{prefix}.{key}")) {
                    for (r, &b) in buf.data_mut().iter_mut().zip(batch_vals) {
                        *r = (T::one() - m) * *r + m * b;
                    }
                }
            }
        }
        self.state.step += 1;
        Ok(report)
    }

    /// One pass over `data` in a seed-determined order.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<LossReport, Error> {
        if data.samples.is_empty() {
            return Err(crate::data::DataError::EmptyBatch.into());
        }
        let mut order: Vec<usize> = (0..data.samples.len()).collect();
        order.shuffle(&mut derive_rng(self.config.seed, &format!("shuffle/{}", self.state.epoch)));
        let mut reports = Vec::new();
        for (bi, idx) in order.chunks(self.config.batch_size).enumerate() {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &data.samples[i]).collect();
            reports.push((self.train_step(&samples, bi)?, samples.len()));
        }
        Ok(LossReport::mean(&reports).expect("non-empty epoch"))
    }

    /// Greedy exact-match rate on `data`.
    pub fn evaluate_fast(&self, data: &Dataset) -> Result<f64, Error> {
        let samples: Vec<&Sample> = data.samples.iter().collect();
        greedy_exact_rate(&self.model, &self.vocab, &samples, self.readout(), self.config.batch_size)
    }

    /// Train until `epochs`, the target metric, or the time limit. `on_epoch`
    /// sees every epoch log; the best and last checkpoints go to `out_dir`.
    pub fn fit(&mut self, train: &Dataset, val: Option<&Dataset>, mut on_epoch: impl FnMut(&EpochLog)) -> Result<(), Error> {
        let start = Instant::now();
        let eval_set = val.unwrap_or(train);
        while self.state.epoch < self.config.epochs {
            let t0 = Instant::now();
            let loss = self.run_epoch(train)?;
            self.state.epoch += 1;
            let mut metric = None;
            if self.state.epoch.is_multiple_of(self.config.eval_every) || self.state.epoch == self.config.epochs {
                let m = self.evaluate_fast(eval_set)?;
                let improved = self.state.plateau.best.is_none_or(|b| m > b);
                self.state.plateau.observe(m, &mut self.optim.lr);
                if improved {
                    if let Some(dir) = &self.config.out_dir {
                        self.save(&dir.join("best.ckpt"))?;
                    }
                }
                metric = Some(m);
            }
            let log = EpochLog { epoch: self.state.epoch, loss, lr: self.optim.lr, metric, seconds: t0.elapsed().as_secs_f64() };
            on_epoch(&log);
            self.state.history.push(log);
            if let Some(dir) = &self.config.out_dir {
                self.save(&dir.join("last.ckpt"))?;
            }
            let hit = matches!((metric, self.config.target_exprate), (Some(m), Some(t)) if m >= t);
            let out_of_time = self.config.time_limit_secs.is_some_and(|s| start.elapsed().as_secs_f64() >= s);
            if hit || out_of_time {
                break;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut all = Params::<T>::new();
        for (n, t) in self.model.params.iter() {
            all.insert(format!("param.{n}"), t.clone());
        }
        for (n, t) in self.model.buffers.iter() {
            all.insert(format!("buffer.{n}"), t.clone());
        }
        for (n, t) in self.optim.velocity.iter() {
            all.insert(format!("optim.momentum.{n}"), t.clone());
        }
        let meta = CheckpointMeta {
            model: self.model.config.clone(),
            vocab: self.vocab.symbols().to_vec(),
            config: self.config.clone(),
            lr: self.optim.lr,
            state: self.state.clone(),
        };
        all.save(path, &serde_json::to_string(&meta).expect("meta serializes"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let (meta, all) = Params::<T>::load(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&meta).map_err(|e| Error::Config(format!("checkpoint meta: {e}")))?;
        let vocab = Vocab::new(&meta.vocab)?;
        let (mut params, mut buffers, mut velocity) = (Params::new(), Params::new(), Params::new());
        for (n, t) in all.iter() {
            if let Some(k) = n.strip_prefix("param.") {
                params.insert(k, t.clone());
            } else if let Some(k) = n.strip_prefix("buffer.") {
                buffers.insert(k, t.clone());
            } else if let Some(k) = n.strip_prefix("optim.momentum.") {
                velocity.insert(k, t.clone());
            }
        }
        let model = Model { config: meta.model, params, buffers };
        let mut optim = Sgd::new(meta.lr, meta.config.momentum, meta.config.weight_decay);
        optim.velocity = velocity;
        Ok(Trainer { config: meta.config, vocab, model, optim, state: meta.state })
    }
}

/// Model and vocabulary from a checkpoint, for inference.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(Model<T>, Vocab, LossToggles), Error> {
    let t = Trainer::<T>::load(path)?;
    Ok((t.model, t.vocab, t.config.toggles))
}
