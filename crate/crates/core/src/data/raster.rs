use super::{DataError, Image, InkSample};

#[derive(Clone, Copy, Debug)]
pub struct RasterOptions {
    /// Output height in pixels.
    pub height: usize,
    pub margin: usize,
    /// Pen width in pixels; defaults to 2 px per 128 px of height.
    pub thickness: Option<usize>,
    /// Width-to-height ratio beyond which the drawing is fitted by width.
    pub max_aspect: f64,
}

impl Default for RasterOptions {
    fn default() -> Self {
        RasterOptions { height: 128, margin: 8, thickness: None, max_aspect: 16.0 }
    }
}

impl RasterOptions {
    pub fn pen(&self) -> usize {
        self.thickness.unwrap_or_else(|| ((2 * self.height) as f64 / 128.0).round().max(1.0) as usize)
    }
}

/// Draw strokes as 8-connected polylines, aspect-preserving, ink-high.
pub fn rasterize(sample: &InkSample, opts: &RasterOptions) -> Result<Image, DataError> {
    let pts: Vec<(f64, f64)> = sample.strokes.iter().flatten().copied().collect();
    if pts.is_empty() || opts.height <= 2 * opts.margin {
        return Err(DataError::EmptyInk);
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let (bw, bh) = (x1 - x0, y1 - y0);
    let content = (opts.height - 2 * opts.margin - 1) as f64;
    let extent = bh.max(bw / opts.max_aspect);
    // Normalized coordinates in [0, 1] (relative to the fitted extent); the
    // division keeps the raster identical under uniform scaling of the input.
    let norm = |v: f64, lo: f64| if extent > 0.0 { (v - lo) / extent } else { 0.0 };
    let used_h = if extent > 0.0 { bh / extent } else { 0.0 };
    let width = (norm(x1, x0) * content).round() as usize + 2 * opts.margin + 1;
    let y_off = opts.margin as f64 + ((1.0 - used_h) * content / 2.0).round();
    let map = |(x, y): (f64, f64)| -> (i64, i64) {
        (
            (norm(x, x0) * content).round() as i64 + opts.margin as i64,
            (norm(y, y0) * content).round() as i64 + y_off as i64,
        )
    };
    let mut img = Image::blank(opts.height, width);
    let pen = opts.pen() as i64;
    for stroke in &sample.strokes {
        let mapped: Vec<(i64, i64)> = stroke.iter().map(|&p| map(p)).collect();
        if mapped.len() == 1 {
            stamp(&mut img, mapped[0], pen);
        }
        for w in mapped.windows(2) {
            line(&mut img, w[0], w[1], pen);
        }
    }
    Ok(img)
}

fn stamp(img: &mut Image, (x, y): (i64, i64), pen: i64) {
    let lo = -(pen - 1) / 2;
    for dy in lo..lo + pen {
        for dx in lo..lo + pen {
            let (px, py) = (x + dx, y + dy);
            if px >= 0 && py >= 0 && (px as usize) < img.width && (py as usize) < img.height {
                img.set(py as usize, px as usize, 1.0);
            }
        }
    }
}

/// Bresenham segment with a square pen.
fn line(img: &mut Image, (mut x, mut y): (i64, i64), (x1, y1): (i64, i64), pen: i64) {
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        stamp(img, (x, y), pen);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}
