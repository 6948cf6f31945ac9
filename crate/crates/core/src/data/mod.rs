//! Samples, InkML ingestion, rasterization, the synthetic corpus, and batching.

mod batch;
mod dataset;
mod font;
mod inkml;
mod raster;
mod synth;

pub use batch::{make_batch, Batch, TargetBatch};
pub use dataset::{load_image, IMAGE_DIR, LABEL_FILE, load_image_dir, load_inkml_dir, save_image, write_dataset, Dataset};
pub use font::{glyph, symbols as font_symbols, GLYPH_H, GLYPH_W};
pub use inkml::{parse_inkml, InkSample};
pub use raster::{rasterize, RasterOptions};
pub use synth::{render, synth_exprs, synth_generate, synth_vocab, Expr, SynthOptions};

/// Grayscale raster, ink-high (`1.0` ink, `0.0` background), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn blank(height: usize, width: usize) -> Self {
        Image { height, width, data: vec![0.0; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn ink_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    /// Copy with `cols` extra background columns on the right.
    pub fn pad_right(&self, cols: usize) -> Image {
        let w = self.width + cols;
        let mut out = Image::blank(self.height, w);
        for y in 0..self.height {
            out.data[y * w..y * w + self.width].copy_from_slice(&self.data[y * self.width..(y + 1) * self.width]);
        }
        out
    }

    /// 8-bit quantization used by the on-disk format.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

/// One labeled (or unlabeled) example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub tokens: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("malformed InkML at byte {offset}: {message}")]
    Xml { offset: usize, message: String },
    #[error("InkML has no trace elements")]
    NoTraces,
    #[error("trace {trace}: {message}")]
    BadTrace { trace: usize, message: String },
    #[error("sample `{id}` has no label")]
    MissingLabel { id: String },
    #[error("no ink to rasterize")]
    EmptyInk,
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
    #[error("labels: {0}")]
    Labels(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
