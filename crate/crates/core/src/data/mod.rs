//! Samples, synthetic generators, patching, normalization and on-disk I/O.

mod io;
pub mod synth;

pub use io::{load_manifest, load_mask, load_rgb, save_mask, save_rgb, write_dataset, DatasetManifest, Split};
pub use synth::{synth_cd_dataset, synth_cd_pair, synth_cd_range, synth_pretrain_corpus};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A co-registered pair with its binary change mask. Images are
/// `[3, H, W]` in `[0, 1]`; the mask is `H × W` row-major `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CdSample {
    pub id: String,
    pub img_a: Tensor<f32>,
    pub img_b: Tensor<f32>,
    pub mask: Vec<u8>,
}

impl CdSample {
    pub fn new(id: impl Into<String>, img_a: Tensor<f32>, img_b: Tensor<f32>, mask: Vec<u8>) -> Result<Self> {
        let id = id.into();
        let s = img_a.shape().to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Data(format!("sample {id}: image shape {s:?} is not [3, H, W]")));
        }
        if img_b.shape() != s.as_slice() {
            return Err(Error::Data(format!(
                "sample {id}: pre-change {s:?} and post-change {:?} images differ in shape",
                img_b.shape()
            )));
        }
        if mask.len() != s[1] * s[2] {
            return Err(Error::Data(format!("sample {id}: mask has {} pixels, images {}", mask.len(), s[1] * s[2])));
        }
        if let Some(v) = mask.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("sample {id}: mask value {v} is not binary")));
        }
        Ok(Self { id, img_a, img_b, mask })
    }

    pub fn height(&self) -> usize {
        self.img_a.dim(1)
    }

    pub fn width(&self) -> usize {
        self.img_a.dim(2)
    }
}

/// `[0, 1] → [−1, 1]`.
pub fn normalize(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| v * 2.0 - 1.0)
}

/// `[−1, 1] → [0, 1]`, clamped.
pub fn denormalize(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Stacks `[3, H, W]` images into `[N, 3, H, W]`.
pub fn stack(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let Some(first) = images.first() else {
        return Err(Error::Contract("stack of zero images".into()));
    };
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::dim("stack", format!("{:?} vs {:?}", img.shape(), first.shape())));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(shape, data)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

fn crop_channels(data: &[f32], channels: usize, h: usize, w: usize, y0: usize, x0: usize, p: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(channels * p * p);
    for c in 0..channels {
        for y in y0..y0 + p {
            for x in x0..x0 + p {
                let (yy, xx) = (reflect(y as isize, h), reflect(x as isize, w));
                out.push(data[c * h * w + yy * w + xx]);
            }
        }
    }
    out
}

/// Grid placement of a patch inside its source sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
}

/// Non-overlapping `patch × patch` tiles in row-major grid order, ids
/// suffixed `_r{row}_c{col}`. Sides that are not multiples of `patch` are
/// reflect-padded at the bottom/right.
pub fn patchify(sample: &CdSample, patch: usize) -> Result<(Vec<CdSample>, PatchGrid)> {
    if patch == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let (h, w) = (sample.height(), sample.width());
    let grid = PatchGrid {
        rows: h.div_ceil(patch),
        cols: w.div_ceil(patch),
        patch,
        height: h,
        width: w,
    };
    let mut out = Vec::with_capacity(grid.rows * grid.cols);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let (y0, x0) = (r * patch, c * patch);
            let a = crop_channels(sample.img_a.data(), 3, h, w, y0, x0, patch);
            let b = crop_channels(sample.img_b.data(), 3, h, w, y0, x0, patch);
            let m: Vec<f32> = sample.mask.iter().map(|&v| f32::from(v)).collect();
            let m = crop_channels(&m, 1, h, w, y0, x0, patch).into_iter().map(|v| v as u8).collect();
            out.push(CdSample {
                id: format!("{}_r{r}_c{c}", sample.id),
                img_a: Tensor::new(vec![3, patch, patch], a)?,
                img_b: Tensor::new(vec![3, patch, patch], b)?,
                mask: m,
            });
        }
    }
    Ok((out, grid))
}

/// Inverse of [`patchify`]: stitches tiles back and drops any padding.
pub fn reassemble(patches: &[CdSample], grid: PatchGrid, id: &str) -> Result<CdSample> {
    if patches.len() != grid.rows * grid.cols {
        return Err(Error::Data(format!(
            "{} patches for a {}×{} grid",
            patches.len(),
            grid.rows,
            grid.cols
        )));
    }
    let (h, w, p) = (grid.height, grid.width, grid.patch);
    let mut a = vec![0.0; 3 * h * w];
    let mut b = vec![0.0; 3 * h * w];
    let mut m = vec![0u8; h * w];
    for (k, patch) in patches.iter().enumerate() {
        let (y0, x0) = ((k / grid.cols) * p, (k % grid.cols) * p);
        for y in 0..p.min(h - y0) {
            for x in 0..p.min(w - x0) {
                let dst = (y0 + y) * w + x0 + x;
                let src = y * p + x;
                for c in 0..3 {
                    a[c * h * w + dst] = patch.img_a.data()[c * p * p + src];
                    b[c * h * w + dst] = patch.img_b.data()[c * p * p + src];
                }
                m[dst] = patch.mask[src];
            }
        }
    }
    CdSample::new(id, Tensor::new(vec![3, h, w], a)?, Tensor::new(vec![3, h, w], b)?, m)
}
