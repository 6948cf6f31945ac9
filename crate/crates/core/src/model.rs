//! The full recognizer: encoder, coverage decoder, optional implicit branch,
//! and output heads.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::decoder::{decode, init_decoder, DecoderOut, Memory};
use crate::encoder::{encode, init_encoder};
use crate::iccm::{fuse, iccm_forward, init_iccm};
use crate::nn::{Ctx, Init};
use crate::tensor::{Mask, Params, Scalar, Tensor, TensorError, Var};
use crate::Error;

/// Which auxiliary losses are active. The initial-prediction loss is always on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossToggles {
    pub implicit: bool,
    pub fusion: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles { implicit: true, fusion: true }
    }
}

impl LossToggles {
    pub const BASELINE: LossToggles = LossToggles { implicit: false, fusion: false };

    /// The implicit branch runs whenever one of its losses needs it.
    pub fn runs_iccm(&self) -> bool {
        self.implicit || self.fusion
    }
}

/// Features feeding the prediction head at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    Initial,
    Fused,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: Params<T>,
    /// Running batch-norm statistics.
    pub buffers: Params<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, Error> {
        config.validate()?;
        let mut init = Init::new(seed);
        init_encoder(&mut init, &config.encoder);
        init_decoder(&mut init, &config.decoder, config.vocab_size);
        if config.iccm {
            init_iccm(&mut init, &config.decoder);
        }
        init.linear("head.main", config.decoder.d_model, config.vocab_size, true);
        Ok(Model { config, params: init.params, buffers: init.buffers })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast(), buffers: self.buffers.cast() }
    }

    /// Inference readout: fused features when the branch exists and was trained.
    pub fn readout(&self, toggles: LossToggles) -> Readout {
        if self.config.iccm && toggles.fusion {
            Readout::Fused
        } else {
            Readout::Initial
        }
    }

    pub fn eval_ctx(&self) -> Ctx<'_, T> {
        Ctx::eval(&self.params, &self.buffers)
    }
}

/// Encode images `[B, 1, H, W]` into cross-attention memory.
pub fn encode_images<T: Scalar>(
    ctx: &mut Ctx<T>,
    cfg: &ModelConfig,
    images: &Tensor<T>,
    mask: &Mask,
) -> Result<Memory, TensorError> {
    let x = ctx.g.constant(images.clone());
    let grid = encode(ctx, &cfg.encoder, x, mask)?;
    Memory::from_grid(ctx, &grid)
}

/// Everything a teacher-forced pass produces. Logits are `[B, T, C]`.
pub struct Outputs {
    pub decoder: DecoderOut,
    pub initial_logits: Var,
    pub implicit_features: Option<Var>,
    pub fused: Option<Var>,
    pub gate: Option<Var>,
    pub fused_logits: Option<Var>,
    pub implicit_logits: Option<Var>,
}

impl Outputs {
    pub fn features(&self) -> Var {
        self.decoder.features
    }

    pub fn logits(&self, readout: Readout) -> Var {
        match (readout, self.fused_logits) {
            (Readout::Fused, Some(f)) => f,
            _ => self.initial_logits,
        }
    }
}

/// Decoder pass plus heads; with `iccm` the implicit branch and fusion run too.
pub fn forward_tokens<T: Scalar>(
    ctx: &mut Ctx<T>,
    cfg: &ModelConfig,
    mem: &Memory,
    inputs: &[usize],
    batch: usize,
    len: usize,
    iccm: bool,
) -> Result<Outputs, TensorError> {
    let dec = decode(ctx, &cfg.decoder, mem, inputs, batch, len)?;
    let e = dec.features;
    let initial_logits = ctx.linear(e, "head.main")?;
    let mut out = Outputs {
        initial_logits,
        implicit_features: None,
        fused: None,
        gate: None,
        fused_logits: None,
        implicit_logits: None,
        decoder: dec,
    };
    if iccm && cfg.iccm {
        let i = iccm_forward(ctx, &cfg.decoder, e, &out.decoder.valid)?;
        let (f, gate) = fuse(ctx, e, i)?;
        out.implicit_logits = Some(ctx.linear(i, "head.implicit")?);
        out.fused_logits = Some(ctx.linear(f, "head.main")?);
        out.implicit_features = Some(i);
        out.fused = Some(f);
        out.gate = Some(gate);
    }
    Ok(out)
}
