//! Three-part bidirectional loss: initial prediction, frequency-weighted
//! implicit-character prediction, and fused prediction.

use serde::{Deserialize, Serialize};

use crate::data::{Batch, TargetBatch};
use crate::model::{encode_images, forward_tokens, LossToggles, Outputs};
use crate::nn::Ctx;
use crate::config::ModelConfig;
use crate::tensor::{Graph, Scalar, TensorError, Var};
use crate::vocab::{Direction, ImplicitVocab, PAD};

pub const WEIGHT_EPS: f64 = 1e-6;

/// `1 + ln(1 + 1 / (f + eps))`.
pub fn class_weight(f: f64) -> f64 {
    1.0 + (1.0 + 1.0 / (f + WEIGHT_EPS)).ln()
}

/// Per-class weights from relative frequencies over the non-PAD entries of
/// `targets` (absent classes get frequency 0). Index 0 (PAD) is unused.
pub fn token_weights(targets: &[usize]) -> [f64; ImplicitVocab::SIZE] {
    let mut counts = [0usize; ImplicitVocab::SIZE];
    for &t in targets.iter().filter(|&&t| t != PAD) {
        counts[t] += 1;
    }
    let total: usize = counts.iter().sum();
    let mut w = [0.0; ImplicitVocab::SIZE];
    for (c, slot) in w.iter_mut().enumerate() {
        let f = if total == 0 { 0.0 } else { counts[c] as f64 / total as f64 };
        *slot = class_weight(f);
    }
    w
}

/// Mean cross-entropy over non-PAD rows of `logits: [N, C]`.
pub fn masked_ce<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
    let weights: Vec<T> = targets.iter().map(|&t| if t == PAD { T::zero() } else { T::one() }).collect();
    let n = targets.iter().filter(|&&t| t != PAD).count().max(1);
    g.cross_entropy(logits, targets, &weights, T::lit(n as f64))
}

/// `sum w_y * -log p_y / sum w_y` over non-PAD rows of `logits: [N, C]`.
pub fn weighted_ce<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    class_weights: &[f64],
) -> Result<Var, TensorError> {
    let weights: Vec<T> = targets
        .iter()
        .map(|&t| if t == PAD { T::zero() } else { T::lit(class_weights[t]) })
        .collect();
    let norm: f64 = targets.iter().filter(|&&t| t != PAD).map(|&t| class_weights[t]).sum();
    g.cross_entropy(logits, targets, &weights, T::lit(if norm > 0.0 { norm } else { 1.0 }))
}

/// Loss components for one direction; disabled parts are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub initial: f64,
    pub implicit: Option<f64>,
    pub fusion: Option<f64>,
}

impl Components {
    pub fn total(&self) -> f64 {
        self.initial + self.implicit.unwrap_or(0.0) + self.fusion.unwrap_or(0.0)
    }
}

/// Direction-averaged components and their sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub initial: f64,
    pub implicit: Option<f64>,
    pub fusion: Option<f64>,
    pub total: f64,
    pub l2r: Components,
    pub r2l: Components,
}

impl LossReport {
    fn from_directions(l2r: Components, r2l: Components) -> Self {
        let avg = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| 0.5 * (a + b));
        let initial = 0.5 * (l2r.initial + r2l.initial);
        let implicit = avg(l2r.implicit, r2l.implicit);
        let fusion = avg(l2r.fusion, r2l.fusion);
        let total = initial + implicit.unwrap_or(0.0) + fusion.unwrap_or(0.0);
        LossReport { initial, implicit, fusion, total, l2r, r2l }
    }

    /// Weighted average of several reports (weights are batch sizes).
    pub fn mean(reports: &[(LossReport, usize)]) -> Option<LossReport> {
        let n: usize = reports.iter().map(|(_, w)| w).sum();
        if n == 0 {
            return None;
        }
        let avg = |f: &dyn Fn(&LossReport) -> Components| {
            let mut c = Components { initial: 0.0, implicit: Some(0.0), fusion: Some(0.0) };
            for (r, w) in reports {
                let x = f(r);
                let w = *w as f64 / n as f64;
                c.initial += w * x.initial;
                c.implicit = c.implicit.zip(x.implicit).map(|(a, b)| a + w * b);
                c.fusion = c.fusion.zip(x.fusion).map(|(a, b)| a + w * b);
            }
            c
        };
        Some(LossReport::from_directions(avg(&|r| r.l2r), avg(&|r| r.r2l)))
    }
}

/// The scalar loss node plus its breakdown, and the forward outputs.
pub struct LossOutput {
    pub total: Var,
    pub report: LossReport,
    pub outputs: Outputs,
}

fn rows<T: Scalar>(g: &mut Graph<T>, logits: Var, dir: usize, b: usize, t: usize) -> Result<Var, TensorError> {
    let c = *g.shape(logits).last().expect("rank-3 logits");
    let part = g.narrow(logits, 0, dir * b, b)?;
    g.reshape(part, &[b * t, c])
}

/// Bidirectional loss over a batch: both directions share one decoder pass of
/// `2B` rows (L2R first) over duplicated image memory.
pub fn total_loss<T: Scalar>(
    ctx: &mut Ctx<T>,
    cfg: &ModelConfig,
    batch: &Batch<T>,
    toggles: LossToggles,
) -> Result<LossOutput, TensorError> {
    let b = batch.len();
    let t = batch.l2r.len;
    debug_assert_eq!(batch.r2l.len, t);
    let mem = encode_images(ctx, cfg, &batch.images, &batch.image_mask)?;
    let mem = mem.repeat(ctx, 2)?;
    let mut inputs = batch.l2r.inputs.clone();
    inputs.extend_from_slice(&batch.r2l.inputs);
    let run_iccm = toggles.runs_iccm() && cfg.iccm;
    let out = forward_tokens(ctx, cfg, &mem, &inputs, 2 * b, t, run_iccm)?;

    let dirs: [&TargetBatch; 2] = [&batch.l2r, &batch.r2l];
    let mut all_implicit = batch.l2r.implicit.clone();
    all_implicit.extend_from_slice(&batch.r2l.implicit);
    let class_w = token_weights(&all_implicit);

    let mut parts: Vec<Var> = Vec::new();
    let mut comps = Vec::with_capacity(2);
    for (di, tb) in dirs.iter().enumerate() {
        let half = T::lit(0.5);
        let l = rows(&mut ctx.g, out.initial_logits, di, b, t)?;
        let init = masked_ce(&mut ctx.g, l, &tb.targets)?;
        let mut c = Components { initial: ctx.g.value(init).item().as_f64(), implicit: None, fusion: None };
        parts.push(ctx.g.scale(init, half)?);
        if let (true, Some(il)) = (toggles.implicit && run_iccm, out.implicit_logits) {
            let l = rows(&mut ctx.g, il, di, b, t)?;
            let v = weighted_ce(&mut ctx.g, l, &tb.implicit, &class_w)?;
            c.implicit = Some(ctx.g.value(v).item().as_f64());
            parts.push(ctx.g.scale(v, half)?);
        }
        if let (true, Some(fl)) = (toggles.fusion && run_iccm, out.fused_logits) {
            let l = rows(&mut ctx.g, fl, di, b, t)?;
            let v = masked_ce(&mut ctx.g, l, &tb.targets)?;
            c.fusion = Some(ctx.g.value(v).item().as_f64());
            parts.push(ctx.g.scale(v, half)?);
        }
        comps.push(c);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = ctx.g.add(total, p)?;
    }
    let report = LossReport::from_directions(comps[0], comps[1]);
    Ok(LossOutput { total, report, outputs: out })
}

/// Directions in the stacked decoder batch, in order.
pub const STACK_ORDER: [Direction; 2] = [Direction::L2R, Direction::R2L];
