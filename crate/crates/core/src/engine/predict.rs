//! Inference, plain and test-time ensembled.

use crate::data::TtaVariant;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::levelset::BinaryMask;
use crate::model::MtTransUNet;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[H, W]` foreground probability.
    pub foreground: Tensor,
    pub class_probs: Vec<f64>,
    /// `[gh * gw]` classification-token attention of the untransformed input.
    pub cls_attention: Tensor,
    pub grid: (usize, usize),
}

impl Prediction {
    pub fn mask(&self, threshold: f64) -> Result<BinaryMask> {
        let s = self.foreground.shape();
        BinaryMask::from_probabilities(s[0], s[1], self.foreground.data(), threshold)
    }

    /// Index of the most probable class; the first wins ties.
    pub fn predicted_class(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.class_probs.iter().enumerate() {
            if p > self.class_probs[best] {
                best = k;
            }
        }
        best
    }
}

pub fn predict(model: &MtTransUNet, image: &Tensor) -> Result<Prediction> {
    let out = model.forward(image)?;
    Ok(Prediction {
        foreground: out.foreground_probability(),
        class_probs: out.class_probabilities(),
        cls_attention: out.cls_attention,
        grid: out.grid,
    })
}

/// Mean of the inverse-transformed foreground maps and of the class
/// probabilities over `variants`. The attention map comes from the first
/// variant that is the identity, or from a plain forward pass.
pub fn tta_predict(model: &MtTransUNet, image: &Tensor, variants: &[TtaVariant]) -> Result<Prediction> {
    if variants.is_empty() {
        return Err(Error::Contract("no test-time variants".into()));
    }
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let mut foreground = vec![0.0; h * w];
    let mut class_probs: Vec<f64> = Vec::new();
    let mut attention = None;
    for v in variants {
        let p = predict(model, &v.apply(image)?)?;
        let size = p.foreground.shape().to_vec();
        let fg = v.invert(&p.foreground.reshape(&[1, size[0], size[1]])?)?;
        foreground.iter_mut().zip(fg.data()).for_each(|(a, b)| *a += b);
        if class_probs.is_empty() {
            class_probs = vec![0.0; p.class_probs.len()];
        }
        class_probs.iter_mut().zip(&p.class_probs).for_each(|(a, b)| *a += b);
        if attention.is_none() && v.is_identity() {
            attention = Some((p.cls_attention, p.grid));
        }
    }
    let n = variants.len() as f64;
    let (cls_attention, grid) = match attention {
        Some(a) => a,
        None => {
            let p = predict(model, image)?;
            (p.cls_attention, p.grid)
        }
    };
    Ok(Prediction {
        foreground: Tensor::new(&[h, w], foreground.into_iter().map(|v| (v / n).clamp(0.0, 1.0)).collect())?,
        class_probs: class_probs.into_iter().map(|v| v / n).collect(),
        cls_attention,
        grid,
    })
}
