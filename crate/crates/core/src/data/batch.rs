use super::{DataError, Sample};
use crate::tensor::{Mask, Scalar, Tensor};
use crate::vocab::{make_bidirectional, Direction, Vocab, PAD};
use crate::Error;

/// Teacher-forcing matrices for one decoding direction, row-major `[batch, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    pub direction: Direction,
    pub batch: usize,
    pub len: usize,
    /// Decoder inputs: start marker followed by content.
    pub inputs: Vec<usize>,
    /// Next-token targets: content followed by the end marker.
    pub targets: Vec<usize>,
    /// Implicit-vocabulary ids aligned with `targets`.
    pub implicit: Vec<usize>,
    /// Non-PAD positions per row (content length + 1).
    pub lengths: Vec<usize>,
}

impl TargetBatch {
    pub fn row<'a>(&self, v: &'a [usize], b: usize) -> &'a [usize] {
        &v[b * self.len..(b + 1) * self.len]
    }

    pub fn token_mask(&self) -> Mask {
        let data = self.targets.iter().map(|&t| t != PAD).collect();
        Mask::new(vec![self.batch, self.len], data).expect("shape matches")
    }
}

#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    pub ids: Vec<String>,
    /// `[B, 1, Hmax, Wmax]`, zero outside each image.
    pub images: Tensor<T>,
    /// `[B, Hmax, Wmax]`, true on valid pixels.
    pub image_mask: Mask,
    pub l2r: TargetBatch,
    pub r2l: TargetBatch,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn direction(&self, d: Direction) -> &TargetBatch {
        match d {
            Direction::L2R => &self.l2r,
            Direction::R2L => &self.r2l,
        }
    }
}

fn targets(seqs: &[Vec<usize>], direction: Direction, implicit_map: &[usize]) -> TargetBatch {
    let batch = seqs.len();
    let len = seqs.iter().map(|s| s.len() - 1).max().unwrap_or(1);
    let mut tb = TargetBatch {
        direction,
        batch,
        len,
        inputs: vec![PAD; batch * len],
        targets: vec![PAD; batch * len],
        implicit: vec![PAD; batch * len],
        lengths: Vec::with_capacity(batch),
    };
    for (b, wire) in seqs.iter().enumerate() {
        let n = wire.len() - 1;
        tb.inputs[b * len..b * len + n].copy_from_slice(&wire[..n]);
        tb.targets[b * len..b * len + n].copy_from_slice(&wire[1..]);
        for (j, &t) in wire[1..].iter().enumerate() {
            tb.implicit[b * len + j] = implicit_map[t];
        }
        tb.lengths.push(n);
    }
    tb
}

/// Pad images to the batch maxima and frame targets in both directions.
pub fn make_batch<T: Scalar>(samples: &[&Sample], vocab: &Vocab) -> Result<Batch<T>, Error> {
    if samples.is_empty() {
        return Err(DataError::EmptyBatch.into());
    }
    let b = samples.len();
    let hmax = samples.iter().map(|s| s.image.height).max().unwrap_or(1);
    let wmax = samples.iter().map(|s| s.image.width).max().unwrap_or(1);
    let mut pixels = vec![T::zero(); b * hmax * wmax];
    let mut valid = vec![false; b * hmax * wmax];
    for (i, s) in samples.iter().enumerate() {
        let img = &s.image;
        for y in 0..img.height {
            let row = i * hmax * wmax + y * wmax;
            for x in 0..img.width {
                pixels[row + x] = T::lit(img.get(y, x) as f64);
                valid[row + x] = true;
            }
        }
    }
    let implicit_map = vocab.implicit_map();
    let mut l2r = Vec::with_capacity(b);
    let mut r2l = Vec::with_capacity(b);
    for s in samples {
        let content = vocab.encode_content(&s.tokens)?;
        let (f, r) = make_bidirectional(&content);
        l2r.push(f.wire_ids());
        r2l.push(r.wire_ids());
    }
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        images: Tensor::new(vec![b, 1, hmax, wmax], pixels)?,
        image_mask: Mask::new(vec![b, hmax, wmax], valid)?,
        l2r: targets(&l2r, Direction::L2R, &implicit_map),
        r2l: targets(&r2l, Direction::R2L, &implicit_map),
    })
}
