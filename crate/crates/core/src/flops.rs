//! Analytic inference cost. One multiply-add counts as 2 FLOPs; bias adds,
//! element-wise ops, normalizations, softmax and pooling are counted too.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::vocab::ImplicitVocab;

/// FLOPs per element of a layer or batch norm at inference (mean, variance,
/// normalize, scale, shift).
pub const NORM_FLOPS: u64 = 5;
/// FLOPs per softmax input (max, exp, sum, divide).
pub const SOFTMAX_FLOPS: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub encoder: u64,
    pub decoder: u64,
    pub iccm: u64,
    pub heads: u64,
    pub total: u64,
    /// Decoded tokens per direction.
    pub seq_len: usize,
    pub directions: usize,
}

impl FlopReport {
    pub fn gflops(&self) -> f64 {
        self.total as f64 / 1e9
    }
}

fn ceil_half(x: usize) -> usize {
    x.div_ceil(2)
}

/// `2 k^2 cin cout` per output pixel, plus a bias add.
pub fn conv_flops(cin: usize, cout: usize, k: usize, out_h: usize, out_w: usize, bias: bool) -> u64 {
    let px = (out_h * out_w) as u64;
    px * cout as u64 * (2 * (k * k * cin) as u64 + u64::from(bias))
}

/// `rows` applications of an `input -> output` affine map.
pub fn linear_flops(rows: usize, input: usize, output: usize) -> u64 {
    rows as u64 * output as u64 * (2 * input as u64 + 1)
}

/// Encoder cost for one `h x w` image; returns FLOPs and the output grid.
pub fn encoder_flops(cfg: &ModelConfig, h: usize, w: usize) -> (u64, usize, usize) {
    let e = &cfg.encoder;
    let g = e.growth_rate;
    let bn_relu = |c: usize, h: usize, w: usize| (c * h * w) as u64 * (NORM_FLOPS + 1);
    let mut c = 2 * g;
    let (mut h, mut w) = (ceil_half(h), ceil_half(w));
    let mut f = conv_flops(1, c, 7, h, w, false) + bn_relu(c, h, w);
    (h, w) = (ceil_half(h), ceil_half(w));
    f += (c * h * w * 9) as u64;
    for b in 0..e.num_blocks {
        for _ in 0..e.layers_per_block {
            f += bn_relu(c, h, w) + conv_flops(c, 4 * g, 1, h, w, false);
            f += bn_relu(4 * g, h, w) + conv_flops(4 * g, g, 3, h, w, false);
            c += g;
        }
        if b + 1 < e.num_blocks {
            f += bn_relu(c, h, w) + conv_flops(c, c / 2, 1, h, w, false);
            c /= 2;
            (h, w) = (ceil_half(h), ceil_half(w));
            f += (c * h * w * 4) as u64;
        }
    }
    f += bn_relu(c, h, w) + conv_flops(c, e.d_model, 1, h, w, true);
    f += (e.d_model * h * w) as u64 * NORM_FLOPS;
    (f, h, w)
}

/// Self- or cross-attention with `tq` queries over `tk` keys; `kv_rows` is the
/// number of key/value rows projected (0 when shared and already counted).
fn attention_flops(d: usize, tq: usize, tk: usize, kv_rows: usize) -> u64 {
    let proj = 2 * linear_flops(tq, d, d) + 2 * linear_flops(kv_rows, d, d);
    let scores = 2 * (tq * tk * d) as u64 + (tq * tk) as u64 * SOFTMAX_FLOPS;
    let mix = 2 * (tq * tk * d) as u64;
    proj + scores + mix
}

/// Decoder cost for `t` tokens over `s` memory cells of an `h x w` grid.
fn decoder_flops(cfg: &ModelConfig, t: usize, h: usize, w: usize) -> u64 {
    let d = &cfg.decoder;
    let s = h * w;
    let dm = d.d_model;
    let add_norm = (t * dm) as u64 * (1 + NORM_FLOPS);
    let mut f = (t * dm) as u64 * (NORM_FLOPS + 1);
    // Keys get the 2-D position added once per image.
    f += (s * dm) as u64;
    for _ in 0..d.layers {
        f += attention_flops(dm, t, t, t) + add_norm;
        f += attention_flops(dm, t, s, s) + add_norm;
        if d.arm {
            let maps = (t * s) as u64;
            f += 2 * maps; // head mean and prefix sum
            f += t as u64 * conv_flops(1, d.arm_channels, d.arm_kernel, h, w, true);
            f += maps * d.arm_channels as u64;
            f += linear_flops(t * s, d.arm_channels, d.heads);
            f += maps * d.heads as u64;
        }
        f += linear_flops(t, dm, d.ffn_dim) + (t * d.ffn_dim) as u64 + linear_flops(t, d.ffn_dim, dm) + add_norm;
    }
    f
}

fn iccm_flops(cfg: &ModelConfig, t: usize) -> u64 {
    let d = &cfg.decoder;
    let dm = d.d_model;
    let add_norm = (t * dm) as u64 * (1 + NORM_FLOPS);
    let mut f = attention_flops(dm, t, t, t) + add_norm;
    f += linear_flops(t, dm, d.ffn_dim) + (t * d.ffn_dim) as u64 + linear_flops(t, d.ffn_dim, dm) + add_norm;
    // gate: affine, sigmoid, and the convex combination
    f += linear_flops(t, 2 * dm, dm) + (t * dm) as u64 * (4 + 3);
    f + linear_flops(t, dm, ImplicitVocab::SIZE)
}

/// Cost of one teacher-forced pass of `seq_len` tokens in each of
/// `directions` directions over one `h x w` image (encoder run once).
pub fn estimate_flops(cfg: &ModelConfig, h: usize, w: usize, seq_len: usize, directions: usize) -> FlopReport {
    let (encoder, gh, gw) = encoder_flops(cfg, h, w);
    let t = seq_len;
    let n = directions as u64;
    let decoder = n * decoder_flops(cfg, t, gh, gw);
    let iccm = if cfg.iccm { n * iccm_flops(cfg, t) } else { 0 };
    let heads = n * linear_flops(t, cfg.decoder.d_model, cfg.vocab_size) * if cfg.iccm { 2 } else { 1 };
    FlopReport { encoder, decoder, iccm, heads, total: encoder + decoder + iccm + heads, seq_len, directions }
}
