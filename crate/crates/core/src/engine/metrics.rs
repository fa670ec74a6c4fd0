//! Segmentation and classification metrics.

use serde::{Deserialize, Serialize};

use super::predict::{predict, tta_predict, Prediction};
use crate::data::{Sample, TtaVariant};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::levelset::BinaryMask;
use crate::model::MtTransUNet;

/// Pixel confusion counts, foreground as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_masks(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::dim(
                "segmentation_metrics",
                format!("{}x{} vs {}x{}", pred.height(), pred.width(), gt.height(), gt.width()),
            ));
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p == 1, g == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }
}

/// `num / den`, or for an empty denominator 1 when there is no error mass else 0.
fn ratio(num: u64, den: u64, errors: u64) -> f64 {
    if den == 0 {
        if errors == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub ja: f64,
    pub di: f64,
    pub ac: f64,
    pub se: f64,
    pub sp: f64,
}

impl SegmentationMetrics {
    pub fn from_confusion(c: Confusion) -> Self {
        let Confusion { tp, fp, fn_, tn } = c;
        Self {
            ja: ratio(tp, tp + fp + fn_, 0),
            di: ratio(2 * tp, 2 * tp + fp + fn_, 0),
            ac: ratio(tp + tn, tp + fp + fn_ + tn, 0),
            se: ratio(tp, tp + fn_, fp),
            sp: ratio(tn, tn + fp, fn_),
        }
    }

    fn mean(items: &[SegmentationMetrics]) -> Option<Self> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let sum = |f: fn(&SegmentationMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(Self { ja: sum(|m| m.ja), di: sum(|m| m.di), ac: sum(|m| m.ac), se: sum(|m| m.se), sp: sum(|m| m.sp) })
    }
}

pub fn segmentation_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<SegmentationMetrics> {
    Ok(SegmentationMetrics::from_confusion(Confusion::from_masks(pred, gt)?))
}

/// Area under the ROC curve from the Mann-Whitney rank statistic; tied scores share credit.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auc", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Contract("AUC is undefined with a single class present".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "auc" });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub ac: f64,
    pub se: f64,
    pub sp: f64,
    pub auc: f64,
}

/// Binary metrics at threshold 0.5 plus AUC. `scores` are positive-class probabilities.
pub fn classification_metrics(scores: &[f64], labels: &[bool]) -> Result<ClassMetrics> {
    let auc = auc(scores, labels)?;
    let (ac, se, sp) = threshold_metrics(scores, labels);
    Ok(ClassMetrics { ac, se, sp, auc })
}

/// Accuracy, sensitivity and specificity at threshold 0.5.
fn threshold_metrics(scores: &[f64], labels: &[bool]) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= 0.5, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ac = (tp + tn) as f64 / scores.len().max(1) as f64;
    (ac, ratio(tp, tp + fn_, fp), ratio(tn, tn + fp, fn_))
}

/// One-vs-rest metrics for a single class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtaskMetrics {
    pub name: String,
    pub ac: f64,
    pub se: f64,
    pub sp: f64,
    /// Absent when the evaluated set contains only one side of the subtask.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub tta: bool,
    /// Per-image means over images with a mask.
    pub segmentation: Option<SegmentationMetrics>,
    /// Top-1 accuracy over all classes.
    pub accuracy: f64,
    /// Class `k` vs rest for every `k >= 1`.
    pub subtasks: Vec<SubtaskMetrics>,
}

impl MetricsReport {
    pub fn from_predictions(predictions: &[Prediction], samples: &[Sample], tta: bool) -> Result<Self> {
        if predictions.len() != samples.len() || samples.is_empty() {
            return Err(Error::Contract("need one prediction per sample and at least one sample".into()));
        }
        let mut seg = Vec::new();
        for (p, s) in predictions.iter().zip(samples) {
            if let Some(gt) = &s.mask {
                seg.push(segmentation_metrics(&p.mask(0.5)?, gt)?);
            }
        }
        let correct = predictions.iter().zip(samples).filter(|(p, s)| p.predicted_class() == s.label).count();
        let classes = predictions[0].class_probs.len();
        let mut subtasks = Vec::new();
        for k in 1..classes {
            let scores: Vec<f64> = predictions.iter().map(|p| p.class_probs[k]).collect();
            let labels: Vec<bool> = samples.iter().map(|s| s.label == k).collect();
            let (ac, se, sp) = threshold_metrics(&scores, &labels);
            let auc = auc(&scores, &labels).ok();
            subtasks.push(SubtaskMetrics { name: format!("class_{k}"), ac, se, sp, auc });
        }
        Ok(Self {
            images: samples.len(),
            tta,
            segmentation: SegmentationMetrics::mean(&seg),
            accuracy: correct as f64 / samples.len() as f64,
            subtasks,
        })
    }

    /// Every reported value lies in `[0, 1]`.
    pub fn is_bounded(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let seg = self.segmentation.is_none_or(|m| [m.ja, m.di, m.ac, m.se, m.sp].into_iter().all(unit));
        let cls = self.subtasks.iter().all(|t| [t.ac, t.se, t.sp].into_iter().all(unit) && t.auc.is_none_or(unit));
        seg && cls && unit(self.accuracy)
    }
}

/// Predicts every sample (optionally with all 36 test-time variants) and scores the predictions.
pub fn evaluate(model: &MtTransUNet, samples: &[Sample], tta: bool, exec: Execution) -> Result<MetricsReport> {
    let predictions: Vec<Prediction> = exec
        .map(samples, |s| {
            if tta {
                tta_predict(model, &s.image, &TtaVariant::all(s.height()))
            } else {
                predict(model, &s.image)
            }
        })
        .into_iter()
        .collect::<Result<_>>()?;
    MetricsReport::from_predictions(&predictions, samples, tta)
}
