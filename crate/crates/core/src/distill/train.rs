use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{kd_loss_with_grad, KdParams, LogitBatch};
use super::optim::{LrSchedule, Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::metrics::{metrics_from_confusion, ConfusionMatrix};
use crate::raster::Planes;
use crate::seed::{stream, sub_seed};
use crate::teacher::{PatchRef, TeacherBackend};
use crate::unet::{ModelWeights, Mode, Tensor, UNet};

/// A normalized training patch with its ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: Planes,
    /// Row-major H×W class labels.
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn new(id: impl Into<String>, input: Planes, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != input.plane_len() {
            return Err(Error::Shape(format!(
                "{} labels for a {}x{} input",
                labels.len(),
                input.height,
                input.width
            )));
        }
        Ok(Self {
            id: id.into(),
            input,
            labels,
        })
    }

    pub fn patch(&self) -> PatchRef<'_> {
        PatchRef {
            id: &self.id,
            input: &self.input,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub alpha: f64,
    pub tau: f64,
    pub scale_distill_by_tau_squared: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub ignore_class_ids: Vec<u8>,
    /// Classes whose JI is averaged for validation and best-epoch selection.
    pub val_classes: Vec<u8>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau: 2.0,
            scale_distill_by_tau_squared: true,
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            schedule: LrSchedule::Cosine,
            seed: 0,
            ignore_class_ids: Vec::new(),
            val_classes: vec![1],
        }
    }
}

impl DistillConfig {
    pub fn kd_params(&self) -> KdParams {
        KdParams {
            alpha: self.alpha,
            tau: self.tau,
            scale_by_tau_squared: self.scale_distill_by_tau_squared,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kd_params().validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.val_classes.is_empty() {
            return Err(Error::InvalidArgument("no validation classes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub hard_term: f64,
    pub distill_term: f64,
    pub val_ji: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const HEADER: &'static str = "epoch,total_loss,hard_term,distill_term,val_ji";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e}\n",
                r.epoch, r.total_loss, r.hard_term, r.distill_term, r.val_ji
            ));
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_ji >= r.val_ji => Some(b),
                _ => Some(r),
            })
    }
}

pub struct TrainOutcome {
    /// Weights of the best validation epoch.
    pub model: UNet,
    pub weights: ModelWeights,
    pub best_epoch: usize,
    pub history: TrainHistory,
}

fn to_f64(p: &Planes) -> Vec<f64> {
    p.data.iter().map(|&v| v as f64).collect()
}

/// Mean over `classes` of the pooled eval-mode JI on `samples`.
pub fn evaluate_ji(model: &UNet, samples: &[Sample], classes: &[u8], ignore: &[u8]) -> Result<f64> {
    let mut cms: Vec<ConfusionMatrix> = classes
        .iter()
        .map(|&class| ConfusionMatrix {
            class,
            ..ConfusionMatrix::default()
        })
        .collect();
    for s in samples {
        let x = Tensor::from_planes([&s.input])?;
        let pred = model.forward(&x, Mode::Eval)?.sample_planes(0).argmax();
        for cm in cms.iter_mut() {
            cm.merge(&ConfusionMatrix::from_labels(&pred, &s.labels, cm.class, ignore)?);
        }
    }
    Ok(cms.iter().map(|cm| metrics_from_confusion(cm).ji).sum::<f64>() / cms.len() as f64)
}

/// Trains `student` with mini-batch descent on the distillation loss.
///
/// Without a teacher, alpha is forced to 1. Teacher logits are fetched once
/// up front. `val` may be empty, in which case the training set is used for
/// validation. Returns the weights of the epoch with the highest
/// validation JI (earliest on ties).
pub fn train(
    mut student: UNet,
    train: &[Sample],
    val: &[Sample],
    teacher: Option<&dyn TeacherBackend>,
    config: &DistillConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let k = student.spec().num_classes;
    let mut params = config.kd_params();
    if teacher.is_none() {
        params.alpha = 1.0;
    }
    let teacher_logits: Option<Vec<Vec<f64>>> = match teacher {
        Some(t) if params.alpha < 1.0 => {
            if t.num_classes() != k {
                return Err(Error::Teacher(format!(
                    "teacher has {} classes, student {k}",
                    t.num_classes()
                )));
            }
            Some(
                train
                    .iter()
                    .map(|s| t.teacher_logits(&s.patch()).map(|p| to_f64(&p)))
                    .collect::<Result<_>>()?,
            )
        }
        _ => None,
    };
    let val = if val.is_empty() { train } else { val };

    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, stream::SHUFFLE));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, UNet)> = None;
    let mut step = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut hard, mut distill, mut pixels) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let x = Tensor::from_planes(batch.iter().map(|s| &s.input))?;
            let labels: Vec<u8> = batch.iter().flat_map(|s| s.labels.iter().copied()).collect();
            let (logits, tape) = student.forward_train(&x)?;
            let zs: Vec<f64> = logits.data.iter().map(|&v| v as f64).collect();
            let hw = logits.plane_len();
            let zs = LogitBatch::new(&zs, batch.len(), k, hw)?;
            let zt_data: Option<Vec<f64>> = teacher_logits
                .as_ref()
                .map(|all| chunk.iter().flat_map(|&i| all[i].iter().copied()).collect());
            let zt = zt_data
                .as_deref()
                .map(|d| LogitBatch::new(d, batch.len(), k, hw))
                .transpose()?;
            let (terms, grad) = kd_loss_with_grad(&zs, zt.as_ref(), &labels, &params, &config.ignore_class_ids)?;
            if !terms.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("loss {} (hard {}, distill {})", terms.total, terms.hard, terms.distill),
                });
            }
            let n = terms.counted_pixels as f64;
            total += terms.total * n;
            hard += terms.hard * n;
            distill += terms.distill * n;
            pixels += terms.counted_pixels;

            let d_logits = Tensor::new(
                logits.batch,
                logits.channels,
                logits.height,
                logits.width,
                grad.iter().map(|&g| g as f32).collect(),
            )?;
            student.zero_grad();
            student.backward(tape, &d_logits);
            let lr = config.schedule.rate(config.learning_rate, step, total_steps);
            optimizer.step(student.params_mut(), lr)?;
            step += 1;
        }
        let val_ji = evaluate_ji(&student, val, &config.val_classes, &config.ignore_class_ids)?;
        let n = pixels as f64;
        history.epochs.push(EpochRecord {
            epoch,
            total_loss: total / n,
            hard_term: hard / n,
            distill_term: distill / n,
            val_ji,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_ji > *b) {
            best = Some((val_ji, epoch, student.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        weights: ModelWeights::from_model(&model),
        model,
        best_epoch,
        history,
    })
}
