use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use super::{parse_inkml, rasterize, DataError, Image, RasterOptions, Sample};
use crate::vocab::{format_label_line, parse_label_file, tokenize};

pub const LABEL_FILE: &str = "labels.txt";
pub const IMAGE_DIR: &str = "images";

/// An ordered list of samples.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Load a directory written by [`write_dataset`] or a directory of `.inkml`
    /// files, whichever it looks like.
    pub fn load(dir: &Path, raster: &RasterOptions) -> Result<Self, DataError> {
        if dir.join(LABEL_FILE).is_file() {
            load_image_dir(&dir.join(IMAGE_DIR), &dir.join(LABEL_FILE), false)
        } else {
            load_inkml_dir(dir, raster, true)
        }
    }

    /// Tokens of every sample, for building a vocabulary.
    pub fn symbols(&self) -> Vec<String> {
        let mut seen = indexmap::IndexSet::new();
        for s in &self.samples {
            for t in &s.tokens {
                seen.insert(t.clone());
            }
        }
        seen.into_iter().collect()
    }
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Image { path: path.display().to_string(), message: e.to_string() }
}

/// Write an 8-bit binary PGM, ink-high.
pub fn save_image(path: &Path, img: &Image) -> Result<(), DataError> {
    let file = BufWriter::new(File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&img.to_u8(), img.width as u32, img.height as u32, ExtendedColorType::L8)
        .map_err(|e| image_err(path, e))
}

/// Read any grayscale-convertible image; `invert` flips dark-ink scans to ink-high.
pub fn load_image(path: &Path, invert: bool) -> Result<Image, DataError> {
    let gray = image::open(path).map_err(|e| image_err(path, e))?.into_luma8();
    let (w, h) = gray.dimensions();
    let data = gray
        .into_raw()
        .into_iter()
        .map(|v| {
            let f = v as f32 / 255.0;
            if invert {
                1.0 - f
            } else {
                f
            }
        })
        .collect();
    Ok(Image { height: h as usize, width: w as usize, data })
}

/// Images named `<id>.pgm` (or `.png`) under `dir`, labels from `labels`.
pub fn load_image_dir(dir: &Path, labels: &Path, invert: bool) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(labels)?;
    let entries = parse_label_file(&text).map_err(DataError::Labels)?;
    let mut samples = Vec::with_capacity(entries.len());
    for (id, tokens) in entries {
        let path = ["pgm", "png"]
            .iter()
            .map(|ext| dir.join(format!("{id}.{ext}")))
            .find(|p| p.is_file())
            .ok_or_else(|| image_err(&dir.join(&id), "no .pgm or .png file for this id"))?;
        samples.push(Sample { id, image: load_image(&path, invert)?, tokens });
    }
    Ok(Dataset { samples })
}

/// Every `.inkml` file under `dir` (sorted by name), rasterized.
pub fn load_inkml_dir(dir: &Path, raster: &RasterOptions, require_label: bool) -> Result<Dataset, DataError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "inkml"))
        .collect();
    paths.sort();
    let mut samples = Vec::with_capacity(paths.len());
    for path in paths {
        let mut ink = parse_inkml(&fs::read(&path)?, require_label)?;
        if ink.id.is_empty() {
            ink.id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        }
        let image = rasterize(&ink, raster)?;
        let tokens = ink.label.as_deref().map(tokenize).unwrap_or_default();
        samples.push(Sample { id: ink.id, image, tokens });
    }
    Ok(Dataset { samples })
}

/// `dir/images/<id>.pgm` plus `dir/labels.txt`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<(), DataError> {
    let images = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images)?;
    let mut labels = String::new();
    for s in samples {
        save_image(&images.join(format!("{}.pgm", s.id)), &s.image)?;
        labels.push_str(&format_label_line(&s.id, &s.tokens));
        labels.push('\n');
    }
    fs::write(dir.join(LABEL_FILE), labels)?;
    Ok(())
}
