//! DenseNet-B encoder: stem, dense blocks with bottleneck layers, transitions,
//! and a 1x1 projection to `d_model` followed by layer norm over channels.
//! The validity mask is reapplied after every activation so padded cells stay
//! zero and never leak into valid ones.

use crate::config::EncoderConfig;
use crate::nn::{Ctx, Init};
use crate::tensor::{Mask, Scalar, TensorError, Var};

pub const MIN_INPUT: usize = 16;

/// Encoder output: `features: [B, d_model, H, W]`, `mask: [B, H, W]`.
pub struct FeatureGrid {
    pub features: Var,
    pub mask: Mask,
}

pub fn init_encoder<T: Scalar>(init: &mut Init<T>, cfg: &EncoderConfig) {
    let g = cfg.growth_rate;
    let mut c = 2 * g;
    init.conv("encoder.stem.conv", c, 1, 7, false);
    init.batch_norm("encoder.stem.bn", c);
    for b in 0..cfg.num_blocks {
        c = init_dense_block(init, &format!("encoder.block{b}"), c, cfg.layers_per_block, g);
        if b + 1 < cfg.num_blocks {
            c = init_transition(init, &format!("encoder.trans{b}"), c);
        }
    }
    init.batch_norm("encoder.post.bn", c);
    init.conv("encoder.proj", cfg.d_model, c, 1, true);
    init.layer_norm("encoder.norm", cfg.d_model);
}

/// Parameters of a dense block on `c` channels; returns the output channels.
pub fn init_dense_block<T: Scalar>(init: &mut Init<T>, prefix: &str, mut c: usize, layers: usize, growth: usize) -> usize {
    for l in 0..layers {
        let p = format!("{prefix}.layer{l}");
        init.batch_norm(&format!("{p}.bn1"), c);
        init.conv(&format!("{p}.conv1"), 4 * growth, c, 1, false);
        init.batch_norm(&format!("{p}.bn2"), 4 * growth);
        init.conv(&format!("{p}.conv2"), growth, 4 * growth, 3, false);
        c += growth;
    }
    c
}

/// Parameters of a transition on `c` channels; returns the output channels.
pub fn init_transition<T: Scalar>(init: &mut Init<T>, prefix: &str, c: usize) -> usize {
    init.batch_norm(&format!("{prefix}.bn"), c);
    init.conv(&format!("{prefix}.conv"), c / 2, c, 1, false);
    c / 2
}

/// Mask after a stride-2 stage: a sample with `n` valid cells keeps `ceil(n/2)`.
pub fn downsample_mask(mask: &Mask, out_h: usize, out_w: usize) -> Mask {
    let s = mask.shape();
    let (b, h, w) = (s[0], s[1], s[2]);
    let mut data = vec![false; b * out_h * out_w];
    for bi in 0..b {
        let plane = &mask.data()[bi * h * w..(bi + 1) * h * w];
        for y in 0..out_h {
            for x in 0..out_w {
                let (sy, sx) = (2 * y, 2 * x);
                data[(bi * out_h + y) * out_w + x] = sy < h && sx < w && plane[sy * w + sx];
            }
        }
    }
    Mask::new(vec![b, out_h, out_w], data).expect("positive extents")
}

/// BN, ReLU, zero the padding.
fn bn_relu<T: Scalar>(ctx: &mut Ctx<T>, x: Var, prefix: &str, mask: &Mask) -> Result<Var, TensorError> {
    let y = ctx.batch_norm(x, prefix, mask)?;
    let y = ctx.g.relu(y)?;
    let m = spatial(mask);
    ctx.g.apply_mask(y, &m)
}

/// `[B, H, W]` mask as `[B, 1, H, W]`.
fn spatial(mask: &Mask) -> Mask {
    let s = mask.shape();
    mask.reshape(vec![s[0], 1, s[1], s[2]]).expect("same element count")
}

fn conv<T: Scalar>(ctx: &mut Ctx<T>, x: Var, prefix: &str, stride: usize, pad: usize) -> Result<Var, TensorError> {
    let w = ctx.p(&format!("{prefix}.weight"))?;
    let bias = format!("{prefix}.bias");
    let b = if ctx.has(&bias) { Some(ctx.p(&bias)?) } else { None };
    ctx.g.conv2d(x, w, b, stride, pad)
}

/// One bottleneck layer; returns the `growth_rate` new channels.
pub fn bottleneck<T: Scalar>(ctx: &mut Ctx<T>, x: Var, prefix: &str, mask: &Mask, p: f64) -> Result<Var, TensorError> {
    let h = bn_relu(ctx, x, &format!("{prefix}.bn1"), mask)?;
    let h = conv(ctx, h, &format!("{prefix}.conv1"), 1, 0)?;
    let h = ctx.dropout(h, p)?;
    let h = bn_relu(ctx, h, &format!("{prefix}.bn2"), mask)?;
    let h = conv(ctx, h, &format!("{prefix}.conv2"), 1, 1)?;
    ctx.dropout(h, p)
}

/// Dense block: every layer sees the concatenation of all earlier outputs.
pub fn dense_block<T: Scalar>(
    ctx: &mut Ctx<T>,
    mut x: Var,
    prefix: &str,
    layers: usize,
    mask: &Mask,
    p: f64,
) -> Result<Var, TensorError> {
    for l in 0..layers {
        let new = bottleneck(ctx, x, &format!("{prefix}.layer{l}"), mask, p)?;
        x = ctx.g.concat(&[x, new], 1)?;
    }
    Ok(x)
}

/// Halve channels (floor) with a 1x1 conv, then mask-aware 2x2 average pool.
pub fn transition<T: Scalar>(
    ctx: &mut Ctx<T>,
    x: Var,
    prefix: &str,
    mask: &Mask,
    p: f64,
) -> Result<(Var, Mask), TensorError> {
    let h = bn_relu(ctx, x, &format!("{prefix}.bn"), mask)?;
    let h = conv(ctx, h, &format!("{prefix}.conv"), 1, 0)?;
    let h = ctx.dropout(h, p)?;
    let h = ctx.g.avg_pool2_masked(h, Some(mask))?;
    let s = ctx.g.shape(h).to_vec();
    Ok((h, downsample_mask(mask, s[2], s[3])))
}

/// `images: [B, 1, H, W]` (ink-high), `mask: [B, H, W]`.
pub fn encode<T: Scalar>(ctx: &mut Ctx<T>, cfg: &EncoderConfig, images: Var, mask: &Mask) -> Result<FeatureGrid, TensorError> {
    let s = ctx.g.shape(images).to_vec();
    if s.len() != 4 || s[1] != 1 {
        return Err(TensorError::InvalidShape { shape: s, reason: "encoder expects [B, 1, H, W]".into() });
    }
    if s[2] < MIN_INPUT || s[3] < MIN_INPUT {
        return Err(TensorError::InvalidShape { shape: s, reason: format!("input smaller than {MIN_INPUT}x{MIN_INPUT}") });
    }
    let p = cfg.dropout;
    let x = ctx.g.apply_mask(images, &spatial(mask))?;
    let x = conv(ctx, x, "encoder.stem.conv", 2, 3)?;
    let sh = ctx.g.shape(x).to_vec();
    let mut mask = downsample_mask(mask, sh[2], sh[3]);
    let x = bn_relu(ctx, x, "encoder.stem.bn", &mask)?;
    let mut x = ctx.g.max_pool2d(x, 3, 2, 1)?;
    let sh = ctx.g.shape(x).to_vec();
    mask = downsample_mask(&mask, sh[2], sh[3]);
    for b in 0..cfg.num_blocks {
        x = dense_block(ctx, x, &format!("encoder.block{b}"), cfg.layers_per_block, &mask, p)?;
        if b + 1 < cfg.num_blocks {
            (x, mask) = transition(ctx, x, &format!("encoder.trans{b}"), &mask, p)?;
        }
    }
    let x = bn_relu(ctx, x, "encoder.post.bn", &mask)?;
    let x = conv(ctx, x, "encoder.proj", 1, 0)?;
    let x = ctx.g.permute(x, &[0, 2, 3, 1])?;
    let x = ctx.layer_norm(x, "encoder.norm")?;
    let ms = mask.shape().to_vec();
    let x = ctx.g.apply_mask(x, &mask.reshape(vec![ms[0], ms[1], ms[2], 1])?)?;
    let features = ctx.g.permute(x, &[0, 3, 1, 2])?;
    Ok(FeatureGrid { features, mask })
}
