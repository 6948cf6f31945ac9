//! Architecture hyperparameters and the two built-in presets.

use serde::{Deserialize, Serialize};

use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub growth_rate: usize,
    pub dropout: f64,
    pub d_model: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub arm_kernel: usize,
    /// Hidden channels of the coverage convolution.
    pub arm_channels: usize,
    /// When false the cross-attention energies are used unrefined.
    pub arm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Build the implicit-character branch (ICCM, fusion gate, implicit head).
    pub iccm: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    #[default]
    Toy,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "paper" => Ok(Preset::Paper),
            "toy" => Ok(Preset::Toy),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected paper or toy)"))),
        }
    }
}

impl ModelConfig {
    pub fn preset(preset: Preset, vocab_size: usize) -> Self {
        match preset {
            Preset::Paper => ModelConfig {
                vocab_size,
                encoder: EncoderConfig { num_blocks: 3, layers_per_block: 16, growth_rate: 24, dropout: 0.2, d_model: 256 },
                decoder: DecoderConfig {
                    layers: 3,
                    d_model: 256,
                    heads: 8,
                    ffn_dim: 1024,
                    dropout: 0.3,
                    arm_kernel: 5,
                    arm_channels: 32,
                    arm: true,
                },
                iccm: true,
            },
            Preset::Toy => ModelConfig {
                vocab_size,
                encoder: EncoderConfig { num_blocks: 2, layers_per_block: 4, growth_rate: 8, dropout: 0.0, d_model: 64 },
                decoder: DecoderConfig {
                    layers: 2,
                    d_model: 64,
                    heads: 4,
                    ffn_dim: 256,
                    dropout: 0.0,
                    arm_kernel: 5,
                    arm_channels: 16,
                    arm: true,
                },
                iccm: true,
            },
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let e = &self.encoder;
        let d = &self.decoder;
        let positive = [
            ("vocab_size", self.vocab_size),
            ("encoder.num_blocks", e.num_blocks),
            ("encoder.growth_rate", e.growth_rate),
            ("encoder.d_model", e.d_model),
            ("decoder.layers", d.layers),
            ("decoder.d_model", d.d_model),
            ("decoder.heads", d.heads),
            ("decoder.ffn_dim", d.ffn_dim),
            ("decoder.arm_kernel", d.arm_kernel),
            ("decoder.arm_channels", d.arm_channels),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.vocab_size <= crate::vocab::RESERVED.len() {
            return Err(Error::Config("vocab_size must exceed the reserved ids".into()));
        }
        if e.d_model != d.d_model {
            return Err(Error::Config("encoder and decoder d_model differ".into()));
        }
        if !d.d_model.is_multiple_of(d.heads) || !d.d_model.is_multiple_of(4) {
            return Err(Error::Config("decoder d_model must be divisible by heads and by 4".into()));
        }
        if d.arm_kernel.is_multiple_of(2) {
            return Err(Error::Config("arm_kernel must be odd".into()));
        }
        for (k, p) in [("encoder.dropout", e.dropout), ("decoder.dropout", d.dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{k} must be in [0, 1)")));
            }
        }
        Ok(())
    }

    /// Total downsampling of the encoder.
    pub fn stride(&self) -> usize {
        4 << (self.encoder.num_blocks - 1)
    }
}
