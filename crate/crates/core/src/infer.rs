//! Beam decoding in one direction and bidirectional joint rescoring.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Image;
use crate::decoder::Memory;
use crate::model::{encode_images, forward_tokens, Model, Readout};
use crate::nn::Ctx;
use crate::tensor::{Mask, Scalar, Tensor};
use crate::vocab::{Direction, PAD};
use crate::Error;

pub const DEFAULT_BEAM: usize = 10;
pub const DEFAULT_MAX_LEN: usize = 200;

/// Anything that yields next-token log-probabilities for decoder prefixes.
/// Prefixes begin with `direction.start_id()`.
pub trait StepModel {
    fn vocab_size(&self) -> usize;

    fn next_log_probs(&mut self, direction: Direction, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, Error>;

    /// `sum log p` of `content` (decoding order) followed by the end marker.
    fn sequence_log_prob(&mut self, direction: Direction, content: &[usize]) -> Result<f64, Error> {
        let mut prefix = vec![direction.start_id()];
        let mut total = 0.0;
        for &t in content.iter().chain(std::iter::once(&direction.end_id())) {
            total += self.next_log_probs(direction, std::slice::from_ref(&prefix))?[0][t];
            prefix.push(t);
        }
        Ok(total)
    }
}

/// How finished hypotheses are compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scoring {
    /// Score divided by the number of scored tokens.
    Normalized,
    /// Raw log-probability sum.
    Sum,
}

/// Which end-marker extensions retire into the finished set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Admission {
    /// Only those ranked within the beam width at their step; stops once the
    /// finished set is full and no live hypothesis looks better.
    TopK,
    /// Every one; stops only when no live hypothesis can still win.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamOptions {
    pub beam: usize,
    pub max_len: usize,
    pub scoring: Scoring,
    pub admission: Admission,
}

impl Default for BeamOptions {
    fn default() -> Self {
        BeamOptions { beam: DEFAULT_BEAM, max_len: DEFAULT_MAX_LEN, scoring: Scoring::Normalized, admission: Admission::TopK }
    }
}

impl BeamOptions {
    pub fn with_beam(beam: usize) -> Self {
        BeamOptions { beam, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Content ids in decoding order, without frame markers.
    pub tokens: Vec<usize>,
    pub direction: Direction,
    /// Sum of token log-probabilities, including the end marker when finished.
    pub score: f64,
    /// No end marker within `max_len`.
    pub truncated: bool,
}

impl Hypothesis {
    /// Number of scored tokens.
    pub fn steps(&self) -> usize {
        self.tokens.len() + usize::from(!self.truncated)
    }

    pub fn normalized(&self) -> f64 {
        self.score / self.steps().max(1) as f64
    }

    pub fn rank_score(&self, scoring: Scoring) -> f64 {
        match scoring {
            Scoring::Normalized => self.normalized(),
            Scoring::Sum => self.score,
        }
    }

    /// Content in left-to-right order.
    pub fn l2r(&self) -> Vec<usize> {
        match self.direction {
            Direction::L2R => self.tokens.clone(),
            Direction::R2L => self.tokens.iter().rev().copied().collect(),
        }
    }
}

/// Best first; ties go to the smaller token sequence.
fn rank(a: &Hypothesis, b: &Hypothesis, scoring: Scoring) -> Ordering {
    b.rank_score(scoring).total_cmp(&a.rank_score(scoring)).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Tokens a decoder may emit in `direction`.
fn emittable(direction: Direction, id: usize) -> bool {
    id != PAD && id != direction.start_id()
}

fn framed(direction: Direction, content: &[usize]) -> Vec<usize> {
    let mut p = Vec::with_capacity(content.len() + 1);
    p.push(direction.start_id());
    p.extend_from_slice(content);
    p
}

/// Argmax decoding; ties go to the smaller id.
pub fn greedy_decode<M: StepModel>(model: &mut M, direction: Direction, max_len: usize) -> Result<Hypothesis, Error> {
    let end = direction.end_id();
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for _ in 0..max_len {
        let lp = model.next_log_probs(direction, &[framed(direction, &tokens)])?.remove(0);
        let best = (0..lp.len())
            .filter(|&t| emittable(direction, t))
            .min_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)))
            .ok_or_else(|| Error::Config("vocabulary has no emittable token".into()))?;
        score += lp[best];
        if best == end {
            return Ok(Hypothesis { tokens, direction, score, truncated: false });
        }
        tokens.push(best);
    }
    Ok(Hypothesis { tokens, direction, score, truncated: true })
}

/// Beam search; returns finished hypotheses best first (at most `beam`), or
/// the best live hypothesis flagged as truncated if none finished.
pub fn beam_decode<M: StepModel>(model: &mut M, direction: Direction, opts: &BeamOptions) -> Result<Vec<Hypothesis>, Error> {
    if opts.beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    let k = opts.beam;
    let end = direction.end_id();
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..opts.max_len {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|(t, _)| framed(direction, t)).collect();
        let lps = model.next_log_probs(direction, &prefixes)?;
        let mut cands: Vec<(f64, Vec<usize>, bool)> = Vec::with_capacity(live.len() * model.vocab_size());
        for ((tokens, score), lp) in live.iter().zip(&lps) {
            for (t, &l) in lp.iter().enumerate().filter(|&(t, _)| emittable(direction, t)) {
                let mut next = tokens.clone();
                let done = t == end;
                if !done {
                    next.push(t);
                }
                cands.push((score + l, next, done));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| (&a.1, a.2).cmp(&(&b.1, b.2))));
        let mut next_live = Vec::with_capacity(k);
        for (r, (score, tokens, done)) in cands.into_iter().enumerate() {
            if done {
                if opts.admission == Admission::All || r < k {
                    finished.push(Hypothesis { tokens, direction, score, truncated: false });
                }
            } else if next_live.len() < k {
                next_live.push((tokens, score));
            }
        }
        finished.sort_by(|a, b| rank(a, b, opts.scoring));
        finished.truncate(k);
        live = next_live;
        if live.is_empty() {
            break;
        }
        let best_live = live[0].1;
        let stop = match opts.admission {
            Admission::TopK => {
                finished.len() >= k && {
                    let worst = finished[finished.len() - 1].rank_score(opts.scoring);
                    let bound = match opts.scoring {
                        Scoring::Normalized => best_live / (step + 1) as f64,
                        Scoring::Sum => best_live,
                    };
                    worst >= bound
                }
            }
            // Log-probabilities are non-positive, so no continuation of a live
            // hypothesis can beat these bounds.
            Admission::All => {
                !finished.is_empty() && {
                    let best = finished[0].rank_score(opts.scoring);
                    let bound = match opts.scoring {
                        Scoring::Normalized => best_live / opts.max_len as f64,
                        Scoring::Sum => best_live,
                    };
                    best > bound
                }
            }
        };
        if stop {
            break;
        }
    }
    if finished.is_empty() {
        let (tokens, score) = live.into_iter().next().unwrap_or_default();
        return Ok(vec![Hypothesis { tokens, direction, score, truncated: true }]);
    }
    Ok(finished)
}

/// A finalist of the joint search with both directional scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finalist {
    pub hypothesis: Hypothesis,
    /// Log-probability of the reversed sequence under the opposite direction.
    pub opposite: f64,
    pub joint: f64,
}

impl Finalist {
    pub fn l2r(&self) -> Vec<usize> {
        self.hypothesis.l2r()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointResult {
    /// Winning content, left to right.
    pub tokens: Vec<usize>,
    pub joint: f64,
    pub truncated: bool,
    pub finalists: Vec<Finalist>,
}

/// Beam search in both directions, then rescoring of every finalist by the
/// opposite direction; the winner maximizes `(own + opposite) / steps`.
pub fn joint_search<M: StepModel>(model: &mut M, opts: &BeamOptions) -> Result<JointResult, Error> {
    let mut finalists = Vec::new();
    for dir in [Direction::L2R, Direction::R2L] {
        for h in beam_decode(model, dir, opts)? {
            let rev: Vec<usize> = h.tokens.iter().rev().copied().collect();
            let opposite = model.sequence_log_prob(dir.opposite(), &rev)?;
            let joint = (h.score + opposite) / h.steps().max(1) as f64;
            finalists.push(Finalist { hypothesis: h, opposite, joint });
        }
    }
    let best = finalists
        .iter()
        .min_by(|a, b| {
            b.joint
                .total_cmp(&a.joint)
                .then_with(|| a.hypothesis.truncated.cmp(&b.hypothesis.truncated))
                .then_with(|| a.l2r().cmp(&b.l2r()))
        })
        .expect("each direction yields a hypothesis");
    Ok(JointResult { tokens: best.l2r(), joint: best.joint, truncated: best.hypothesis.truncated, finalists: finalists.clone() })
}

/// A trained recognizer bound to one encoded image.
pub struct Recognizer<'m, T: Scalar> {
    model: &'m Model<T>,
    readout: Readout,
    values: Tensor<T>,
    keys: Tensor<T>,
    mask: Mask,
    height: usize,
    width: usize,
}

/// Single image as `[1, 1, H, W]` plus an all-valid mask.
pub fn image_input<T: Scalar>(image: &Image) -> Result<(Tensor<T>, Mask), Error> {
    let data = image.data.iter().map(|&v| T::lit(v as f64)).collect();
    Ok((Tensor::new(vec![1, 1, image.height, image.width], data)?, Mask::all(vec![1, image.height, image.width])))
}

impl<'m, T: Scalar> Recognizer<'m, T> {
    /// Encode `images: [1, 1, H, W]` with validity `mask: [1, H, W]`.
    pub fn new(model: &'m Model<T>, images: &Tensor<T>, mask: &Mask, readout: Readout) -> Result<Self, Error> {
        if images.shape().first() != Some(&1) {
            return Err(Error::Config("recognizer takes one image".into()));
        }
        let mut ctx = model.eval_ctx();
        let mem = encode_images(&mut ctx, &model.config, images, mask)?;
        Ok(Recognizer {
            model,
            readout,
            values: ctx.g.value(mem.values).clone(),
            keys: ctx.g.value(mem.keys).clone(),
            mask: mem.mask,
            height: mem.height,
            width: mem.width,
        })
    }

    pub fn from_image(model: &'m Model<T>, image: &Image, readout: Readout) -> Result<Self, Error> {
        let (x, m) = image_input(image)?;
        Self::new(model, &x, &m, readout)
    }

    fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Logits `[n, len, V]` for right-padded decoder inputs.
    fn logits(&self, inputs: &[usize], n: usize, len: usize) -> Result<Tensor<T>, Error> {
        let mut ctx: Ctx<T> = self.model.eval_ctx();
        let mem = Memory {
            values: ctx.g.constant(self.values.clone()),
            keys: ctx.g.constant(self.keys.clone()),
            mask: self.mask.clone(),
            height: self.height,
            width: self.width,
        };
        let iccm = self.readout == Readout::Fused;
        let out = forward_tokens(&mut ctx, self.config(), &mem, inputs, n, len, iccm)?;
        Ok(ctx.g.value(out.logits(self.readout)).clone())
    }
}

/// Log-softmax of one row, at 64-bit.
fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<f64> {
    let xs: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

impl<T: Scalar> StepModel for Recognizer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn next_log_probs(&mut self, _direction: Direction, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, Error> {
        let n = prefixes.len();
        let len = prefixes.iter().map(Vec::len).max().unwrap_or(1);
        let mut inputs = vec![PAD; n * len];
        for (i, p) in prefixes.iter().enumerate() {
            inputs[i * len..i * len + p.len()].copy_from_slice(p);
        }
        let logits = self.logits(&inputs, n, len)?;
        let v = self.vocab_size();
        Ok(prefixes
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let at = (i * len + p.len() - 1) * v;
                log_softmax_row(&logits.data()[at..at + v])
            })
            .collect())
    }

    fn sequence_log_prob(&mut self, direction: Direction, content: &[usize]) -> Result<f64, Error> {
        let mut wire = framed(direction, content);
        wire.push(direction.end_id());
        let len = wire.len() - 1;
        let logits = self.logits(&wire[..len], 1, len)?;
        let v = self.vocab_size();
        Ok((0..len).map(|t| log_softmax_row(&logits.data()[t * v..(t + 1) * v])[wire[t + 1]]).sum())
    }
}

/// Recognize one image: joint search for `beam > 1`, otherwise greedy L2R.
pub fn recognize<T: Scalar>(model: &Model<T>, image: &Image, readout: Readout, opts: &BeamOptions) -> Result<Vec<usize>, Error> {
    let mut r = Recognizer::from_image(model, image, readout)?;
    if opts.beam <= 1 {
        Ok(greedy_decode(&mut r, Direction::L2R, opts.max_len)?.tokens)
    } else {
        Ok(joint_search(&mut r, opts)?.tokens)
    }
}


/// Greedy implicit-character ids predicted for `content` (left to right,
/// teacher-forced): one per token, then the end marker's.
pub fn implicit_readout<T: Scalar>(model: &Model<T>, image: &Image, content: &[usize]) -> Result<Vec<usize>, Error> {
    if !model.config.iccm {
        return Err(Error::Config("model has no implicit branch".into()));
    }
    let (x, m) = image_input(image)?;
    let mut ctx = model.eval_ctx();
    let mem = encode_images(&mut ctx, &model.config, &x, &m)?;
    let inputs = framed(Direction::L2R, content);
    let out = forward_tokens(&mut ctx, &model.config, &mem, &inputs, 1, inputs.len(), true)?;
    let logits = ctx.g.value(out.implicit_logits.expect("implicit branch runs"));
    let c = logits.shape()[2];
    Ok(logits
        .data()
        .chunks(c)
        .map(|row| (0..c).fold(0, |best, i| if row[i] > row[best] { i } else { best }))
        .collect())
}
