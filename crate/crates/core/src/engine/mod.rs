//! Training, evaluation, test-time ensembling and checkpoints.

mod checkpoint;
mod metrics;
mod optim;
mod predict;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_train, Sample, TwoStreamSampler};
use crate::diffcore::{GradBuffer, Graph, Tensor};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::levelset::BinaryMask;
use crate::losses::{labeled_loss, unlabeled_loss, LossReport, LossWeights, Targets};
use crate::model::{ModelConfig, MtTransUNet};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use metrics::{
    auc, classification_metrics, evaluate, segmentation_metrics, ClassMetrics, Confusion, MetricsReport,
    SegmentationMetrics, SubtaskMetrics,
};
pub use optim::{AdamConfig, OptimizerState};
pub use predict::{predict, tta_predict, Prediction};

/// How the consistency ramp-up length is counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RampUnit {
    #[default]
    Iterations,
    /// Passes over the labeled stream.
    Epochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub total_iters: usize,
    /// Labeled plus unlabeled samples per step; split evenly between the streams.
    pub batch_size: usize,
    pub seed: u64,
    pub rampup_unit: RampUnit,
    pub augment: bool,
    /// Evaluate every this many steps during `train`; 0 disables.
    pub eval_every: usize,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small-scale defaults for CPU runs on 64 px synthetic data.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            total_iters: 2000,
            batch_size: 8,
            seed: 0,
            rampup_unit: RampUnit::Iterations,
            augment: true,
            eval_every: 0,
            adam: AdamConfig::default(),
            loss: LossWeights { rampup_length: 600.0, ..LossWeights::default() },
            model: ModelConfig::default(),
        }
    }

    /// Full-scale schedule: 40000 iterations at 1e-5, ramp-up over 40 epochs.
    pub fn paper() -> Self {
        Self {
            lr: 1e-5,
            total_iters: 40_000,
            rampup_unit: RampUnit::Epochs,
            loss: LossWeights::default(),
            model: ModelConfig { input_size: 224, ..ModelConfig::default() },
            ..Self::desk()
        }
    }

    /// Replaces the loss weights with ablation setting 1 to 6, keeping `k` and the ramp length.
    pub fn with_ablation(mut self, setting: u8) -> Result<Self> {
        let preset = LossWeights::ablation(setting)?;
        self.loss = LossWeights { k: self.loss.k, rampup_length: self.loss.rampup_length, ..preset };
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Contract(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.total_iters == 0 {
            return Err(Error::Contract("total_iters must be positive".into()));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Contract(format!("batch size must be even and positive, got {}", self.batch_size)));
        }
        self.adam.validate()?;
        self.loss.validate()?;
        self.model.validate()
    }

    /// Linearly decayed learning rate: `lr` at step 0, 0 at `total_iters`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * (1.0 - step.min(self.total_iters) as f64 / self.total_iters as f64)
    }
}

/// Image with the targets derived from it for one step.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub image: Tensor,
    pub mask: Option<BinaryMask>,
    pub level_set: Option<Tensor>,
    pub label: usize,
}

impl Prepared {
    pub fn from_sample(sample: &Sample) -> Result<Self> {
        Ok(Self { image: sample.image.clone(), level_set: sample.level_set()?, mask: sample.mask.clone(), label: sample.label })
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
}

impl LogRow {
    pub const COLUMNS: [&'static str; 9] =
        ["step", "lr", "mask", "cls", "lsf", "dtc", "arc", "total_lab", "total_unlab"];

    pub fn csv_fields(&self) -> Vec<String> {
        let mut fields = vec![self.step.to_string(), self.lr.to_string()];
        fields.extend(self.report.csv_fields());
        fields
    }
}

fn needs_unlabeled(w: &LossWeights) -> bool {
    w.cls > 0.0 || w.dtc > 0.0 || w.arc > 0.0
}

/// Loss and gradient for one sample; the gradient is scaled by `scale`.
fn sample_gradient(
    model: &MtTransUNet,
    item: &Prepared,
    labeled: bool,
    weights: &LossWeights,
    t: f64,
    scale: f64,
) -> Result<(LossReport, GradBuffer)> {
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, &item.image)?;
    let (total, report) = if labeled {
        let targets = Targets { mask: item.mask.as_ref(), level_set: item.level_set.as_ref(), label: item.label };
        labeled_loss(&mut g, &out, &targets, weights, t)?
    } else {
        unlabeled_loss(&mut g, &out, item.label, weights, t)?
    };
    let grads = g.backward_scaled(total, scale)?.to_buffer(model.params().len());
    if !grads.all_finite() {
        return Err(Error::NonFinite { op: "backward" });
    }
    Ok((report, grads))
}

/// One optimisation step on a prepared two-stream batch.
///
/// The objective is the mean labeled total plus the mean unlabeled total.
/// Per-sample work runs under `exec`; gradients are summed in batch order so
/// the result does not depend on the strategy.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut MtTransUNet,
    optimizer: &mut OptimizerState,
    labeled: &[Prepared],
    unlabeled: &[Prepared],
    weights: &LossWeights,
    t: f64,
    lr: f64,
    exec: Execution,
) -> Result<LossReport> {
    let use_unlabeled = !unlabeled.is_empty() && needs_unlabeled(weights);
    let mut items: Vec<(&Prepared, bool, f64)> =
        labeled.iter().map(|p| (p, true, 1.0 / labeled.len() as f64)).collect();
    if use_unlabeled {
        items.extend(unlabeled.iter().map(|p| (p, false, 1.0 / unlabeled.len() as f64)));
    }
    if items.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let results = {
        let model = &*model;
        exec.map(&items, |&(p, lab, scale)| sample_gradient(model, p, lab, weights, t, scale))
    };
    let mut total = GradBuffer::new(model.params().len());
    let mut lab_reports = Vec::new();
    let mut unlab_reports = Vec::new();
    for ((_, lab, _), r) in items.iter().zip(results) {
        let (report, grads) = r?;
        total.merge(&grads);
        if *lab {
            lab_reports.push(report);
        } else {
            unlab_reports.push(report);
        }
    }
    optimizer.step(model.params_mut(), &total, lr)?;
    Ok(combine_reports(&lab_reports, &unlab_reports))
}

/// Term means over both streams, with each stream total averaged separately.
fn combine_reports(lab: &[LossReport], unlab: &[LossReport]) -> LossReport {
    let all: Vec<LossReport> = lab.iter().chain(unlab).cloned().collect();
    let mut report = LossReport::mean(&all);
    report.total_lab = LossReport::mean(lab).total_lab;
    report.total_unlab = LossReport::mean(unlab).total_unlab;
    report
}

/// Owns the model and optimiser for a run over in-memory samples.
pub struct Trainer<'a> {
    config: TrainConfig,
    model: MtTransUNet,
    optimizer: OptimizerState,
    sampler: TwoStreamSampler,
    labeled: Vec<&'a Sample>,
    unlabeled: Vec<&'a Sample>,
    step: usize,
    exec: Execution,
}

impl<'a> Trainer<'a> {
    /// Samples with a mask form the labeled stream, the rest the classification-only stream.
    pub fn new(config: TrainConfig, samples: &'a [Sample], exec: Execution) -> Result<Self> {
        config.validate()?;
        let model = MtTransUNet::new(config.model.clone(), config.seed)?;
        Self::with_model(config, model, samples, exec)
    }

    pub fn with_model(config: TrainConfig, model: MtTransUNet, samples: &'a [Sample], exec: Execution) -> Result<Self> {
        config.validate()?;
        let size = config.model.input_size;
        if let Some(s) = samples.iter().find(|s| (s.height(), s.width()) != (size, size)) {
            return Err(Error::dim("trainer", format!("sample `{}` is {}x{}, model expects {size}", s.id, s.height(), s.width())));
        }
        if let Some(s) = samples.iter().find(|s| s.label >= config.model.num_classes) {
            return Err(Error::Contract(format!("sample `{}` has label {} >= num_classes", s.id, s.label)));
        }
        let (labeled, unlabeled): (Vec<&Sample>, Vec<&Sample>) = samples.iter().partition(|s| s.mask.is_some());
        let sampler = TwoStreamSampler::new(labeled.len(), unlabeled.len(), config.batch_size, config.seed)?;
        let optimizer = OptimizerState::new(model.params(), config.adam.clone());
        Ok(Self { config, model, optimizer, sampler, labeled, unlabeled, step: 0, exec })
    }

    pub fn model(&self) -> &MtTransUNet {
        &self.model
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_iters
    }

    pub fn into_parts(self) -> (MtTransUNet, OptimizerState) {
        (self.model, self.optimizer)
    }

    /// Ramp-up position of the current step in the configured unit.
    fn ramp_position(&self) -> f64 {
        match self.config.rampup_unit {
            RampUnit::Iterations => self.step as f64,
            RampUnit::Epochs => {
                let per_epoch = self.labeled.len().div_ceil((self.config.batch_size / 2).max(1)).max(1);
                self.step as f64 / per_epoch as f64
            }
        }
    }

    /// Draws the next batch, augments it and performs one update.
    pub fn step(&mut self) -> Result<LogRow> {
        let step = self.step;
        let batch = self.sampler.next_batch();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1 << 32 | step as u64);
        let prepare = |s: &Sample, rng: &mut ChaCha8Rng| -> Result<Prepared> {
            if self.config.augment {
                Prepared::from_sample(&augment_train(s, rng)?)
            } else {
                Prepared::from_sample(s)
            }
        };
        let labeled = batch.labeled.iter().map(|&i| prepare(self.labeled[i], &mut rng)).collect::<Result<Vec<_>>>();
        let unlabeled =
            batch.unlabeled.iter().map(|&i| prepare(self.unlabeled[i], &mut rng)).collect::<Result<Vec<_>>>();
        let (labeled, unlabeled) = (labeled?, unlabeled?);

        let lr = self.config.lr_at(step);
        let t = self.ramp_position();
        let report = train_step(
            &mut self.model,
            &mut self.optimizer,
            &labeled,
            &unlabeled,
            &self.config.loss,
            t,
            lr,
            self.exec,
        )
        .map_err(|e| Error::Step { step, source: Box::new(e) })?;
        self.step += 1;
        Ok(LogRow { step, lr, report })
    }

    /// Runs to `total_iters`, handing every log row to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&LogRow, &Self) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let row = self.step()?;
            on_step(&row, self)?;
        }
        Ok(())
    }
}
