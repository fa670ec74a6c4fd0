//! Supervision terms and their weighted combinations.
//!
//! Images with a mask are trained on
//! `mask + λ_C·cls + λ_L·lsf + ramp(t)·dtc + λ_A·arc`; classification-only
//! images on `λ_C·cls + ramp(t)·dtc + λ_A·arc`. Every term is a mean over
//! pixels (or a single value per image) so the weights keep their scale
//! across image sizes.

use serde::{Deserialize, Serialize};

use crate::diffcore::{resize_bilinear, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::levelset::{lsf_to_mask, BinaryMask, DEFAULT_K};
use crate::model::{foreground_probability, ForwardVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the mask cross-entropy; 1 except in the classification-only ablation.
    pub mask: f64,
    pub cls: f64,
    pub lsf: f64,
    /// Final value of the ramped consistency weight.
    pub dtc: f64,
    pub arc: f64,
    /// Sharpness of the level-set to mask sigmoid.
    pub k: f64,
    /// Ramp-up length, in the unit chosen by the training schedule.
    pub rampup_length: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mask: 1.0, cls: 0.25, lsf: 5.0, dtc: 1.0, arc: 1.0, k: DEFAULT_K, rampup_length: 40.0 }
    }
}

impl LossWeights {
    /// Loss-composition ablation settings 1 to 6:
    /// mask only, cls only, mask+cls, +lsf, +dtc, +arc.
    pub fn ablation(setting: u8) -> Result<Self> {
        let full = Self::default();
        let none = Self { mask: 0.0, cls: 0.0, lsf: 0.0, dtc: 0.0, arc: 0.0, ..full.clone() };
        Ok(match setting {
            1 => Self { mask: 1.0, ..none },
            2 => Self { cls: full.cls, ..none },
            3 => Self { mask: 1.0, cls: full.cls, ..none },
            4 => Self { mask: 1.0, cls: full.cls, lsf: full.lsf, ..none },
            5 => Self { arc: 0.0, ..full },
            6 => full,
            other => return Err(Error::Contract(format!("ablation setting {other} not in 1..=6"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.mask, self.cls, self.lsf, self.dtc, self.arc, self.rampup_length];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Contract("loss weights must be finite and nonnegative".into()));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Contract(format!("sharpness k must be positive, got {}", self.k)));
        }
        Ok(())
    }
}

/// Per-term values of one evaluation. Absent terms are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mask: Option<f64>,
    pub cls: Option<f64>,
    pub lsf: Option<f64>,
    pub dtc: Option<f64>,
    pub arc: Option<f64>,
    pub total_lab: Option<f64>,
    pub total_unlab: Option<f64>,
}

impl LossReport {
    pub const CSV_COLUMNS: [&'static str; 8] =
        ["step", "mask", "cls", "lsf", "dtc", "arc", "total_lab", "total_unlab"];

    /// Sum of both stream totals.
    pub fn total(&self) -> f64 {
        self.total_lab.unwrap_or(0.0) + self.total_unlab.unwrap_or(0.0)
    }

    /// Values in [`Self::CSV_COLUMNS`] order after `step`; absent terms are empty.
    pub fn csv_fields(&self) -> Vec<String> {
        [self.mask, self.cls, self.lsf, self.dtc, self.arc, self.total_lab, self.total_unlab]
            .iter()
            .map(|v| v.map(|v| v.to_string()).unwrap_or_default())
            .collect()
    }

    pub fn to_csv_row(&self, step: usize) -> String {
        let mut fields = vec![step.to_string()];
        fields.extend(self.csv_fields());
        fields.join(",")
    }

    /// Term-wise mean over reports, ignoring absent entries.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        fn avg(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
            let present: Vec<f64> = values.flatten().collect();
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
        }
        LossReport {
            mask: avg(reports.iter().map(|r| r.mask)),
            cls: avg(reports.iter().map(|r| r.cls)),
            lsf: avg(reports.iter().map(|r| r.lsf)),
            dtc: avg(reports.iter().map(|r| r.dtc)),
            arc: avg(reports.iter().map(|r| r.arc)),
            total_lab: avg(reports.iter().map(|r| r.total_lab)),
            total_unlab: avg(reports.iter().map(|r| r.total_unlab)),
        }
    }
}

fn check_mask_logits(g: &Graph, logits: Var) -> Result<(usize, usize)> {
    let s = g.shape(logits);
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::dim("mask logits", format!("expected [2, H, W], got {s:?}")));
    }
    Ok((s[1], s[2]))
}

/// Mean two-class cross-entropy of `[2, H, W]` logits against the mask.
pub fn mask_loss(g: &mut Graph, logits: Var, mask: &BinaryMask) -> Result<Var> {
    let (h, w) = check_mask_logits(g, logits)?;
    if (h, w) != (mask.height(), mask.width()) {
        return Err(Error::dim("mask_loss", format!("logits {h}x{w}, mask {}x{}", mask.height(), mask.width())));
    }
    g.cross_entropy(logits, 0, &mask.targets())
}

/// Mean squared error between the predicted and target level sets.
pub fn lsf_loss(g: &mut Graph, level_set: Var, target: &Tensor) -> Result<Var> {
    if g.shape(level_set) != target.shape() {
        return Err(Error::dim("lsf_loss", format!("{:?} vs {:?}", g.shape(level_set), target.shape())));
    }
    let t = g.constant(target.clone())?;
    mse(g, level_set, t)
}

/// Softmax cross-entropy for one image.
pub fn cls_loss(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let n = g.shape(logits).iter().product::<usize>();
    if label >= n {
        return Err(Error::Contract(format!("label {label} out of range for {n} classes")));
    }
    let flat = g.reshape(logits, &[n])?;
    g.cross_entropy(flat, 0, &[label])
}

/// Mean squared difference between the predicted foreground probability and
/// the mask implied by the level set, `Sigmoid(-k·L)`. Both heads receive gradients.
pub fn dtc_loss(g: &mut Graph, logits: Var, level_set: Var, k: f64) -> Result<Var> {
    let (h, w) = check_mask_logits(g, logits)?;
    if g.shape(level_set) != [h, w] {
        return Err(Error::dim("dtc_loss", format!("logits {h}x{w}, level set {:?}", g.shape(level_set))));
    }
    let fg = foreground(g, logits)?;
    let from_lsf = lsf_to_mask(g, level_set, k)?;
    mse(g, fg, from_lsf)
}

/// Attention mass the classification token puts on predicted background:
/// `Σ_i (1 - M'_i) · A'_i` with `M'` the foreground probability resized to the
/// token grid. The mask side is a constant target; only the attention is trained.
pub fn arc_loss(g: &mut Graph, cls_attention: Var, logits: Var, grid: (usize, usize)) -> Result<Var> {
    check_mask_logits(g, logits)?;
    let n = grid.0 * grid.1;
    if g.shape(cls_attention) != [n] {
        return Err(Error::dim("arc_loss", format!("attention {:?} for grid {grid:?}", g.shape(cls_attention))));
    }
    let total = g.value(cls_attention).sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("attention sums to {total}, expected 1")));
    }
    let background = background_on_grid(g.value(logits), grid)?;
    let bg = g.constant(background)?;
    let weighted = g.mul(bg, cls_attention)?;
    g.sum(weighted)
}

/// `1 - foreground probability`, bilinearly resized to the token grid and flattened.
pub fn background_on_grid(mask_logits: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let fg = foreground_probability(mask_logits);
    let (h, w) = (fg.shape()[0], fg.shape()[1]);
    let small = resize_bilinear(&fg.reshape(&[1, h, w])?, grid.0, grid.1)?;
    Tensor::new(&[grid.0 * grid.1], small.data().iter().map(|p| 1.0 - p).collect())
}

/// Gaussian ramp `λ·exp(-5(1 - min(t, T)/T)²)`; equals `λ` from `t = T` on.
pub fn rampup_weight(t: f64, length: f64, lambda: f64) -> f64 {
    if length <= 0.0 {
        return lambda;
    }
    let phase = 1.0 - t.clamp(0.0, length) / length;
    lambda * (-5.0 * phase * phase).exp()
}

/// Targets available for one image.
#[derive(Clone, Debug)]
pub struct Targets<'a> {
    pub mask: Option<&'a BinaryMask>,
    pub level_set: Option<&'a Tensor>,
    pub label: usize,
}

/// Loss for an image with a segmentation mask. Returns the differentiable total and its report.
pub fn labeled_loss(
    g: &mut Graph,
    out: &ForwardVars,
    targets: &Targets<'_>,
    weights: &LossWeights,
    t: f64,
) -> Result<(Var, LossReport)> {
    let mask = targets.mask.ok_or_else(|| Error::Contract("labeled loss needs a mask target".into()))?;
    let level_set = targets
        .level_set
        .ok_or_else(|| Error::Contract("labeled loss needs a level-set target".into()))?;

    let mask_term = mask_loss(g, out.mask_logits, mask).map_err(|e| e.in_term("mask"))?;
    let lsf_term = lsf_loss(g, out.level_set, level_set).map_err(|e| e.in_term("lsf"))?;
    let shared = shared_terms(g, out, targets.label, weights)?;

    let mut total = g.scale(mask_term, weights.mask)?;
    total = add_weighted(g, total, shared.cls, weights.cls)?;
    total = add_weighted(g, total, lsf_term, weights.lsf)?;
    total = add_weighted(g, total, shared.dtc, rampup_weight(t, weights.rampup_length, weights.dtc))?;
    total = add_weighted(g, total, shared.arc, weights.arc)?;

    let report = LossReport {
        mask: Some(g.value(mask_term).item()),
        cls: Some(g.value(shared.cls).item()),
        lsf: Some(g.value(lsf_term).item()),
        dtc: Some(g.value(shared.dtc).item()),
        arc: Some(g.value(shared.arc).item()),
        total_lab: Some(g.value(total).item()),
        total_unlab: None,
    };
    Ok((total, report))
}

/// Loss for a classification-only image.
pub fn unlabeled_loss(
    g: &mut Graph,
    out: &ForwardVars,
    label: usize,
    weights: &LossWeights,
    t: f64,
) -> Result<(Var, LossReport)> {
    let shared = shared_terms(g, out, label, weights)?;
    let mut total = g.scale(shared.cls, weights.cls)?;
    total = add_weighted(g, total, shared.dtc, rampup_weight(t, weights.rampup_length, weights.dtc))?;
    total = add_weighted(g, total, shared.arc, weights.arc)?;
    let report = LossReport {
        cls: Some(g.value(shared.cls).item()),
        dtc: Some(g.value(shared.dtc).item()),
        arc: Some(g.value(shared.arc).item()),
        total_unlab: Some(g.value(total).item()),
        ..LossReport::default()
    };
    Ok((total, report))
}

struct SharedTerms {
    cls: Var,
    dtc: Var,
    arc: Var,
}

fn shared_terms(g: &mut Graph, out: &ForwardVars, label: usize, weights: &LossWeights) -> Result<SharedTerms> {
    weights.validate()?;
    Ok(SharedTerms {
        cls: cls_loss(g, out.class_logits, label).map_err(|e| e.in_term("cls"))?,
        dtc: dtc_loss(g, out.mask_logits, out.level_set, weights.k).map_err(|e| e.in_term("dtc"))?,
        arc: arc_loss(g, out.cls_attention, out.mask_logits, out.grid).map_err(|e| e.in_term("arc"))?,
    })
}

/// `total + weight·term`, leaving `term` out of the graph when the weight is zero.
fn add_weighted(g: &mut Graph, total: Var, term: Var, weight: f64) -> Result<Var> {
    if weight == 0.0 {
        return Ok(total);
    }
    let scaled = g.scale(term, weight)?;
    g.add(total, scaled)
}

fn foreground(g: &mut Graph, logits: Var) -> Result<Var> {
    let (h, w) = check_mask_logits(g, logits)?;
    let probs = g.softmax(logits, 0)?;
    let fg = g.narrow(probs, 0, 1, 1)?;
    g.reshape(fg, &[h, w])
}

fn mse(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}
