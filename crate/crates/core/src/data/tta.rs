//! Test-time augmentation: every combination of three input sizes, three
//! flip states and four rotations, each with its inverse.

use super::augment::flip_planes;
use crate::diffcore::{resize_bilinear, Tensor};
use crate::error::{Error, Result};
use crate::levelset::BinaryMask;
use crate::model::STEM_STRIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

impl Flip {
    pub const ALL: [Flip; 3] = [Flip::None, Flip::Horizontal, Flip::Vertical];
}

/// Resize to `size`, then flip, then rotate `quarter_turns` times counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TtaVariant {
    pub size: usize,
    pub flip: Flip,
    pub quarter_turns: u8,
    /// Height and width of the untransformed image.
    pub original: (usize, usize),
}

/// Three input sizes proportional to 7:8:9 around the base size, each a
/// multiple of 16 and strictly increasing.
pub fn tta_sizes(base: usize) -> [usize; 3] {
    let round = |v: f64| ((v / STEM_STRIDE as f64).round() as usize).max(1) * STEM_STRIDE;
    let b = base as f64;
    let s0 = round(b);
    let s1 = round(b * 8.0 / 7.0).max(s0 + STEM_STRIDE);
    let s2 = round(b * 9.0 / 7.0).max(s1 + STEM_STRIDE);
    [s0, s1, s2]
}

impl TtaVariant {
    pub fn identity(height: usize, width: usize) -> Self {
        Self { size: height, flip: Flip::None, quarter_turns: 0, original: (height, width) }
    }

    /// All 36 variants for a square image of side `size`; the identity comes first.
    pub fn all(size: usize) -> Vec<TtaVariant> {
        let mut out = Vec::with_capacity(36);
        for s in tta_sizes(size) {
            for flip in Flip::ALL {
                for quarter_turns in 0..4 {
                    out.push(TtaVariant { size: s, flip, quarter_turns, original: (size, size) });
                }
            }
        }
        out
    }

    pub fn is_identity(&self) -> bool {
        self.size == self.original.0 && self.original.0 == self.original.1 && self.flip == Flip::None && self.quarter_turns == 0
    }

    /// Transforms a `[C, H, W]` image.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        if s.len() != 3 || (s[1], s[2]) != self.original {
            return Err(Error::dim("tta apply", format!("{s:?} vs original {:?}", self.original)));
        }
        let mut t = if (s[1], s[2]) == (self.size, self.size) {
            image.clone()
        } else {
            resize_bilinear(image, self.size, self.size)?
        };
        t = match self.flip {
            Flip::None => t,
            Flip::Horizontal => flip_planes(&t, false),
            Flip::Vertical => flip_planes(&t, true),
        };
        for _ in 0..self.quarter_turns {
            t = rot90_planes(&t);
        }
        Ok(t)
    }

    /// Maps a `[C, size, size]` prediction back to the original frame.
    pub fn invert(&self, pred: &Tensor) -> Result<Tensor> {
        let s = pred.shape();
        if s.len() != 3 || (s[1], s[2]) != (self.size, self.size) {
            return Err(Error::dim("tta invert", format!("{s:?} vs variant size {}", self.size)));
        }
        let mut t = pred.clone();
        for _ in 0..(4 - self.quarter_turns % 4) % 4 {
            t = rot90_planes(&t);
        }
        t = match self.flip {
            Flip::None => t,
            Flip::Horizontal => flip_planes(&t, false),
            Flip::Vertical => flip_planes(&t, true),
        };
        if (self.size, self.size) == self.original {
            Ok(t)
        } else {
            resize_bilinear(&t, self.original.0, self.original.1)
        }
    }

    /// Applies the flip and rotation to a mask of the variant's size.
    pub fn apply_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let mut m = match self.flip {
            Flip::None => mask.clone(),
            Flip::Horizontal => mask.flip_horizontal(),
            Flip::Vertical => mask.flip_vertical(),
        };
        for _ in 0..self.quarter_turns {
            m = m.rot90();
        }
        m
    }

    /// Exact inverse of [`Self::apply_mask`].
    pub fn invert_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let mut m = mask.clone();
        for _ in 0..(4 - self.quarter_turns % 4) % 4 {
            m = m.rot90();
        }
        match self.flip {
            Flip::None => m,
            Flip::Horizontal => m.flip_horizontal(),
            Flip::Vertical => m.flip_vertical(),
        }
    }
}

/// All test-time variants of a square `[C, S, S]` image, paired with their descriptors.
pub fn tta_variants(image: &Tensor) -> Result<Vec<(Tensor, TtaVariant)>> {
    let s = image.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::dim("tta_variants", format!("expected a square [C, S, S] image, got {s:?}")));
    }
    TtaVariant::all(s[1]).into_iter().map(|v| Ok((v.apply(image)?, v))).collect()
}

/// Quarter turn counter-clockwise of every plane, matching [`BinaryMask::rot90`].
pub(crate) fn rot90_planes(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = t.data();
    Tensor::from_fn(&[c, w, h], |i| {
        let (ch, y, x) = (i / (w * h), i / h % w, i % h);
        d[ch * h * w + x * w + (w - 1 - y)]
    })
}
