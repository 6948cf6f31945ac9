//! Post-norm Transformer decoder whose cross-attention energies are refined
//! by accumulated past attention (coverage) before the softmax.

use crate::config::DecoderConfig;
use crate::encoder::FeatureGrid;
use crate::nn::{causal_pad_mask, sinusoid, sinusoid_2d, Ctx, Init};
use crate::tensor::{Mask, Scalar, Tensor, TensorError, Var};
use crate::vocab::PAD;

pub fn init_decoder<T: Scalar>(init: &mut Init<T>, cfg: &DecoderConfig, vocab_size: usize) {
    let d = cfg.d_model;
    init.embedding("decoder.embed", vocab_size, d);
    init.layer_norm("decoder.embed_norm", d);
    for l in 0..cfg.layers {
        let p = format!("decoder.layer{l}");
        init.attention(&format!("{p}.self_attn"), d);
        init.layer_norm(&format!("{p}.norm1"), d);
        init.attention(&format!("{p}.cross_attn"), d);
        init.layer_norm(&format!("{p}.norm2"), d);
        init.ffn(&format!("{p}.ffn"), d, cfg.ffn_dim);
        init.layer_norm(&format!("{p}.norm3"), d);
    }
    if cfg.arm {
        let k = cfg.arm_kernel;
        init.conv("decoder.arm.conv", cfg.arm_channels, 1, k, true);
        // Zero output map: the refinement starts as the identity.
        init.zeros("decoder.arm.proj.weight", &[cfg.arm_channels, cfg.heads]);
        init.zeros("decoder.arm.proj.bias", &[cfg.heads]);
    }
}

/// Flattened image features for cross-attention.
#[derive(Clone)]
pub struct Memory {
    /// `[B, S, d]` values.
    pub values: Var,
    /// Values plus the 2-D position encoding (keys only).
    pub keys: Var,
    /// `[B, S]` valid positions.
    pub mask: Mask,
    pub height: usize,
    pub width: usize,
}

impl Memory {
    pub fn from_grid<T: Scalar>(ctx: &mut Ctx<T>, grid: &FeatureGrid) -> Result<Self, TensorError> {
        let s = ctx.g.shape(grid.features).to_vec();
        let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
        let flat = ctx.g.reshape(grid.features, &[b, d, h * w])?;
        let values = ctx.g.permute(flat, &[0, 2, 1])?;
        let pe = Tensor::from_f64(vec![h * w, d], &sinusoid_2d(h, w, d))?;
        let pe = ctx.g.constant(pe);
        let keys = ctx.g.add(values, pe)?;
        Ok(Memory { values, keys, mask: grid.mask.reshape(vec![b, h * w])?, height: h, width: w })
    }

    pub fn batch(&self) -> usize {
        self.mask.shape()[0]
    }

    /// The batch stacked `n` times along the batch axis.
    pub fn repeat<T: Scalar>(&self, ctx: &mut Ctx<T>, n: usize) -> Result<Self, TensorError> {
        if n == 1 {
            return Ok(self.clone());
        }
        let values = ctx.g.concat(&vec![self.values; n], 0)?;
        let keys = ctx.g.concat(&vec![self.keys; n], 0)?;
        let b = self.batch();
        let s = self.mask.shape()[1];
        let data = self.mask.data().repeat(n);
        Ok(Memory { values, keys, mask: Mask::new(vec![n * b, s], data)?, height: self.height, width: self.width })
    }
}

/// Decoder features `[B, T, d]` and each layer's refined attention
/// `[B, heads, T, S]`.
pub struct DecoderOut {
    pub features: Var,
    pub attentions: Vec<Var>,
    /// `[B, T]` non-PAD input positions.
    pub valid: Mask,
}

/// Strictly lower-triangular ones: `(L x)[t] = sum_{s<t} x[s]`.
pub fn exclusive_prefix_matrix(t: usize) -> Vec<f64> {
    let mut m = vec![0.0; t * t];
    for r in 0..t {
        for c in 0..r {
            m[r * t + c] = 1.0;
        }
    }
    m
}

/// Coverage refinement: subtract `proj(relu(conv(C)))` from the energies,
/// where `C` is the head-averaged prior attention summed over earlier steps.
/// `prior = None` stands for all-zero attention (first layer).
pub fn arm_refine<T: Scalar>(
    ctx: &mut Ctx<T>,
    cfg: &DecoderConfig,
    energies: Var,
    prior: Option<Var>,
    height: usize,
    width: usize,
) -> Result<Var, TensorError> {
    let s = ctx.g.shape(energies).to_vec();
    let (b, heads, t, n) = (s[0], s[1], s[2], s[3]);
    let coverage = match prior {
        Some(a) => {
            let avg = ctx.g.mean_axis(a, 1)?;
            let l = ctx.g.constant(Tensor::from_f64(vec![t, t], &exclusive_prefix_matrix(t))?);
            ctx.g.matmul(l, avg)?
        }
        None => ctx.g.constant(Tensor::zeros(vec![b, t, n])),
    };
    let maps = ctx.g.reshape(coverage, &[b * t, 1, height, width])?;
    let w = ctx.p("decoder.arm.conv.weight")?;
    let bias = ctx.p("decoder.arm.conv.bias")?;
    let h = ctx.g.conv2d(maps, w, Some(bias), 1, cfg.arm_kernel / 2)?;
    let h = ctx.g.relu(h)?;
    let h = ctx.g.permute(h, &[0, 2, 3, 1])?;
    let h = ctx.g.reshape(h, &[b, t, n, cfg.arm_channels])?;
    let r = ctx.linear(h, "decoder.arm.proj")?;
    let r = ctx.g.permute(r, &[0, 3, 1, 2])?;
    debug_assert_eq!(ctx.g.shape(r), [b, heads, t, n]);
    ctx.g.sub(energies, r)
}

/// `LN(embed(ids)) + pe`, `[B, T, d]`.
pub fn embed<T: Scalar>(ctx: &mut Ctx<T>, d: usize, inputs: &[usize], batch: usize, len: usize) -> Result<Var, TensorError> {
    let table = ctx.p("decoder.embed")?;
    let e = ctx.g.embedding(table, inputs)?;
    let e = ctx.g.reshape(e, &[batch, len, d])?;
    let e = ctx.layer_norm(e, "decoder.embed_norm")?;
    let pe = ctx.g.constant(Tensor::from_f64(vec![len, d], &sinusoid(len, d))?);
    ctx.g.add(e, pe)
}

/// Teacher-forced pass over `inputs` (`[batch, len]`, row-major).
pub fn decode<T: Scalar>(
    ctx: &mut Ctx<T>,
    cfg: &DecoderConfig,
    mem: &Memory,
    inputs: &[usize],
    batch: usize,
    len: usize,
) -> Result<DecoderOut, TensorError> {
    let valid = Mask::new(vec![batch, len], inputs.iter().map(|&i| i != PAD).collect())?;
    let self_mask = causal_pad_mask(&valid)?;
    let mb = mem.batch();
    let cross_mask = mem.mask.reshape(vec![mb, 1, 1, mem.mask.shape()[1]])?;
    let p = cfg.dropout;
    let mut x = embed(ctx, cfg.d_model, inputs, batch, len)?;
    x = ctx.dropout(x, p)?;
    let mut prior: Option<Var> = None;
    let mut attentions = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let pre = format!("decoder.layer{l}");
        let (sa, _) = ctx.mha(&format!("{pre}.self_attn"), x, x, x, &self_mask, cfg.heads, p)?;
        let sa = ctx.dropout(sa, p)?;
        let r = ctx.g.add(x, sa)?;
        x = ctx.layer_norm(r, &format!("{pre}.norm1"))?;

        let ca_name = format!("{pre}.cross_attn");
        let (mut e, v) = ctx.attention_energies(&ca_name, x, mem.keys, mem.values, cfg.heads)?;
        if cfg.arm {
            e = arm_refine(ctx, cfg, e, prior, mem.height, mem.width)?;
        }
        let (ca, a) = ctx.attend(&ca_name, e, v, &cross_mask, p)?;
        prior = Some(a);
        attentions.push(a);
        let ca = ctx.dropout(ca, p)?;
        let r = ctx.g.add(x, ca)?;
        x = ctx.layer_norm(r, &format!("{pre}.norm2"))?;

        let f = ctx.ffn(x, &format!("{pre}.ffn"), p)?;
        let f = ctx.dropout(f, p)?;
        let r = ctx.g.add(x, f)?;
        x = ctx.layer_norm(r, &format!("{pre}.norm3"))?;
    }
    Ok(DecoderOut { features: x, attentions, valid })
}
