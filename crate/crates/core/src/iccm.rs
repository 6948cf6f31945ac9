//! Implicit-character construction (causal self-attention + FFN over decoder
//! features) and the sigmoid-gated fusion of decoder and implicit features.

use crate::config::DecoderConfig;
use crate::nn::{causal_pad_mask, Ctx, Init};
use crate::tensor::{Graph, Mask, Scalar, TensorError, Var};
use crate::vocab::ImplicitVocab;

pub fn init_iccm<T: Scalar>(init: &mut Init<T>, cfg: &DecoderConfig) {
    let d = cfg.d_model;
    init.attention("iccm.self_attn", d);
    init.layer_norm("iccm.norm1", d);
    init.ffn("iccm.ffn", d, cfg.ffn_dim);
    init.layer_norm("iccm.norm2", d);
    init.linear("fusion.gate", 2 * d, d, true);
    init.linear("head.implicit", d, ImplicitVocab::SIZE, true);
}

/// `x = LN(E + SelfAttn(E))`, `I = LN(x + FFN(x))`; `valid` is `[B, T]`.
pub fn iccm_forward<T: Scalar>(ctx: &mut Ctx<T>, cfg: &DecoderConfig, e: Var, valid: &Mask) -> Result<Var, TensorError> {
    let p = cfg.dropout;
    let mask = causal_pad_mask(valid)?;
    let (sa, _) = ctx.mha("iccm.self_attn", e, e, e, &mask, cfg.heads, p)?;
    let sa = ctx.dropout(sa, p)?;
    let r = ctx.g.add(e, sa)?;
    let x = ctx.layer_norm(r, "iccm.norm1")?;
    let f = ctx.ffn(x, "iccm.ffn", p)?;
    let f = ctx.dropout(f, p)?;
    let r = ctx.g.add(x, f)?;
    ctx.layer_norm(r, "iccm.norm2")
}

/// Gate `sigmoid(W [E; I] + b)`.
pub fn fusion_gate<T: Scalar>(ctx: &mut Ctx<T>, e: Var, i: Var) -> Result<Var, TensorError> {
    let axis = ctx.g.shape(e).len() - 1;
    let cat = ctx.g.concat(&[e, i], axis)?;
    let z = ctx.linear(cat, "fusion.gate")?;
    ctx.g.sigmoid(z)
}

/// `F = f * E + (1 - f) * I`.
pub fn fuse_with_gate<T: Scalar>(g: &mut Graph<T>, e: Var, i: Var, gate: Var) -> Result<Var, TensorError> {
    if g.shape(e) != g.shape(i) {
        return Err(TensorError::Shape { op: "fuse", lhs: g.shape(e).to_vec(), rhs: g.shape(i).to_vec() });
    }
    let a = g.mul(gate, e)?;
    let inv = g.one_minus(gate)?;
    let b = g.mul(inv, i)?;
    g.add(a, b)
}

/// Fused features and the gate values.
pub fn fuse<T: Scalar>(ctx: &mut Ctx<T>, e: Var, i: Var) -> Result<(Var, Var), TensorError> {
    let gate = fusion_gate(ctx, e, i)?;
    Ok((fuse_with_gate(&mut ctx.g, e, i, gate)?, gate))
}
