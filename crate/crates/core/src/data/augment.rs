//! Training-time geometric augmentation.

use rand::Rng;

use super::Sample;
use crate::diffcore::{resize_bilinear, Tensor};
use crate::error::Result;
use crate::levelset::BinaryMask;

/// Central-crop scales drawn uniformly.
pub const CROP_SCALES: [f64; 3] = [0.8, 0.9, 1.0];

/// One draw of the augmentation randomness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentChoice {
    pub flip_h: bool,
    pub flip_v: bool,
    pub crop_scale: f64,
}

impl AugmentChoice {
    pub const IDENTITY: Self = Self { flip_h: false, flip_v: false, crop_scale: 1.0 };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self { flip_h: rng.gen_bool(0.5), flip_v: rng.gen_bool(0.5), crop_scale: CROP_SCALES[rng.gen_range(0..3)] }
    }

    /// Flips, then crops the centre and resizes back: bilinear for the image, nearest for the mask.
    pub fn apply(&self, sample: &Sample) -> Result<Sample> {
        let (h, w) = (sample.height(), sample.width());
        let mut image = sample.image.clone();
        let mut mask = sample.mask.clone();
        if self.flip_h {
            image = flip_planes(&image, false);
            mask = mask.map(|m| m.flip_horizontal());
        }
        if self.flip_v {
            image = flip_planes(&image, true);
            mask = mask.map(|m| m.flip_vertical());
        }
        if self.crop_scale < 1.0 {
            let (ch, cw) = crop_extent(h, w, self.crop_scale);
            let (y0, x0) = ((h - ch) / 2, (w - cw) / 2);
            image = resize_bilinear(&crop_planes(&image, y0, x0, ch, cw), h, w)?;
            mask = mask.map(|m| {
                BinaryMask::from_fn(h, w, |y, x| m.get(y0 + (2 * y + 1) * ch / (2 * h), x0 + (2 * x + 1) * cw / (2 * w)))
            });
        }
        Ok(Sample { id: sample.id.clone(), image, mask, label: sample.label })
    }
}

/// Draws a choice and applies it. The level set is recomputed from the new mask when needed.
pub fn augment_train(sample: &Sample, rng: &mut impl Rng) -> Result<Sample> {
    AugmentChoice::sample(rng).apply(sample)
}

fn crop_extent(h: usize, w: usize, scale: f64) -> (usize, usize) {
    let c = |n: usize| ((n as f64 * scale).round() as usize).clamp(1, n);
    (c(h), c(w))
}

/// Mirrors every plane of a `[C, H, W]` tensor, left-right or (with `vertical`) top-bottom.
pub(crate) fn flip_planes(t: &Tensor, vertical: bool) -> Tensor {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Tensor::from_fn(s, |i| {
        let (c, y, x) = (i / (h * w), i / w % h, i % w);
        let (sy, sx) = if vertical { (h - 1 - y, x) } else { (y, w - 1 - x) };
        d[c * h * w + sy * w + sx]
    })
}

fn crop_planes(t: &Tensor, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    Tensor::from_fn(&[s[0], ch, cw], |i| {
        let (c, y, x) = (i / (ch * cw), i / cw % ch, i % cw);
        d[c * h * w + (y0 + y) * w + x0 + x]
    })
}
