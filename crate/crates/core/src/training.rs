//! Training loop: pair sampling, forward, loss, backward, Adam update, step-decayed LR.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::data::{group_by_subject, DataError, EyeImage, PairMode, PairSampler, Sample};
use crate::geometry::{angular_error_raw, GazeVector, Vec3};
use crate::losses::{lb_only_grad, total_loss_grad, GapLoss, LossBreakdown, LossError, LossWeights};
use crate::models::{GazeModel, Guidance, ModelConfig, ModelError, ModelVariant};
use crate::optim::{Adam, AdamConfig};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub gap: GapLoss,
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without validation improvement; 0 disables.
    pub patience: usize,
    /// Improvement (degrees) below which an epoch counts as stagnant.
    pub min_delta_deg: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn new(variant: ModelVariant) -> Self {
        Self {
            model: ModelConfig::new(variant),
            weights: LossWeights::default(),
            gap: GapLoss::default(),
            lr0: 0.01,
            lr_decay: 0.1,
            decay_every: 5,
            batch_size: 128,
            epochs: 30,
            seed: 0,
            patience: 5,
            min_delta_deg: 0.01,
            grad_clip: Some(10.0),
            adam: AdamConfig::default(),
        }
    }

    pub fn variant(&self) -> ModelVariant {
        self.model.variant
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(String::from(m)));
        if !self.lr0.is_finite() || self.lr0 <= 0.0 {
            return bad("lr0 must be > 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.decay_every == 0 {
            return bad("decay_every must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if matches!(self.grad_clip, Some(c) if c.is_nan() || c <= 0.0) {
            return bad("grad_clip must be > 0");
        }
        Ok(())
    }
}

/// `lr0 * lr_decay^floor(epoch / decay_every)`, the power taken by repeated multiplication.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let mut lr = cfg.lr0;
    for _ in 0..epoch / cfg.decay_every {
        lr *= cfg.lr_decay;
    }
    lr
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean LA; `None` when LA was not evaluated.
    pub la: Option<f64>,
    pub lb: f64,
    pub total: f64,
    /// Mean training-pair angular error, degrees.
    pub train_angular_error: f64,
    pub val_angular_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

/// Counters recorded while training.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainDiagnostics {
    pub steps: u64,
    pub la_evaluations: u64,
    /// Guidance ground-truth labels consumed (LA terms plus `DiffNn` inputs).
    pub guidance_label_reads: u64,
    pub clipped_steps: u64,
    pub stopped_after_epoch: Option<usize>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: GazeModel,
    pub history: TrainHistory,
    pub diagnostics: TrainDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    Config(String),
    Data(DataError),
    Model(ModelError),
    /// A loss, output or gradient became NaN/inf.
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    Loss {
        epoch: usize,
        batch: usize,
        source: LossError,
    },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(m) => write!(f, "invalid training config: {m}"),
            TrainError::Data(e) => write!(f, "dataset: {e}"),
            TrainError::Model(e) => write!(f, "model: {e}"),
            TrainError::NonFinite { epoch, batch, detail } => {
                write!(f, "non-finite value at epoch {epoch}, batch {batch}: {detail}")
            }
            TrainError::Loss { epoch, batch, source } => {
                write!(f, "loss failure at epoch {epoch}, batch {batch}: {source}")
            }
        }
    }
}

impl core::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}

impl TrainError {
    /// Numeric failures (as opposed to configuration or data problems).
    pub fn is_numeric(&self) -> bool {
        matches!(self, TrainError::NonFinite { .. } | TrainError::Loss { .. })
    }
}

/// Checks the dataset precondition: at least two subjects with two or more samples.
pub fn check_trainable(samples: &[Sample]) -> Result<(), DataError> {
    let pairable = group_by_subject(samples).values().filter(|v| v.len() >= 2).count();
    if pairable < 2 {
        return Err(DataError::TooFewSubjects {
            needed: 2,
            got: pairable,
        });
    }
    Ok(())
}

fn loss_for(
    variant: ModelVariant,
    cfg: &TrainConfig,
    gaze: &Vec3,
    diff: Option<&Vec3>,
    test: &GazeVector,
    guidance: impl FnOnce() -> GazeVector,
) -> Result<(LossBreakdown, bool), LossError> {
    // beta = 1 zeroes LA exactly; skipping it keeps guidance labels out of training.
    if variant.trains_with_la() && cfg.weights.beta() < 1.0 {
        let d = diff.expect("variant with LA has a diff output");
        let b = total_loss_grad(gaze, d, test, &guidance(), &cfg.weights, &cfg.gap)?;
        Ok((b, true))
    } else {
        Ok((lb_only_grad(gaze, test, &cfg.weights, &cfg.gap)?, false))
    }
}

fn mean_val_error(model: &GazeModel, samples: &[Sample], seed: u64) -> Result<f64, TrainError> {
    let sampler = PairSampler::new(samples, seed)?;
    let pairs = sampler.indices(PairMode::Eval, 0);
    let mut total = 0.0;
    for chunk in pairs.chunks(64) {
        let tests: Vec<&EyeImage> = chunk.iter().map(|p| &samples[p.test].image).collect();
        let guid: Vec<Guidance<'_>> = chunk
            .iter()
            .map(|p| {
                let g = &samples[p.guidance];
                if model.variant().requires_guidance_label() {
                    Guidance::Labeled {
                        image: &g.image,
                        label: g.gaze(),
                    }
                } else {
                    Guidance::Image(&g.image)
                }
            })
            .collect();
        let outs = model.infer_batch(&tests, &guid)?;
        for (p, o) in chunk.iter().zip(outs) {
            total += angular_error_raw(&samples[p.test].gaze(), &o.gaze);
        }
    }
    Ok(total / pairs.len() as f64)
}

/// Trains a fresh model. With `validation` and `cfg.patience > 0`, stops early
/// once held-out angular error has not improved by `min_delta_deg` for
/// `patience` consecutive epochs.
pub fn train(cfg: &TrainConfig, samples: &[Sample], validation: Option<&[Sample]>) -> Result<TrainOutcome, TrainError> {
    train_with_observer(cfg, samples, validation, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with_observer(
    cfg: &TrainConfig,
    samples: &[Sample],
    validation: Option<&[Sample]>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_trainable(samples)?;
    let sampler = PairSampler::new(samples, derive_seed(cfg.seed, "pairs", 0))?;
    let mut model = GazeModel::new(cfg.model.clone(), cfg.seed);
    let mut opt = Adam::new(model.params(), cfg.adam);
    let variant = cfg.variant();
    let mut history = TrainHistory::default();
    let mut diag = TrainDiagnostics::default();
    let val_seed = derive_seed(cfg.seed, "validation", 0);
    let mut best = f64::INFINITY;
    let mut stagnant = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let pairs = sampler.indices(PairMode::Train, epoch as u64);
        let (mut sum_la, mut sum_lb, mut sum_total, mut sum_err) = (0.0, 0.0, 0.0, 0.0);
        let mut la_count = 0u64;
        for (batch, chunk) in pairs.chunks(cfg.batch_size).enumerate() {
            let tests: Vec<&EyeImage> = chunk.iter().map(|p| &samples[p.test].image).collect();
            let guid: Vec<&EyeImage> = chunk.iter().map(|p| &samples[p.guidance].image).collect();
            let labels: Option<Vec<GazeVector>> = variant.requires_guidance_label().then(|| {
                diag.guidance_label_reads += chunk.len() as u64;
                chunk.iter().map(|p| samples[p.guidance].gaze()).collect()
            });
            let (outs, cache) = model.forward_train(&tests, &guid, labels.as_deref())?;
            let n = chunk.len() as f64;
            let mut d_gaze = Vec::with_capacity(chunk.len());
            let mut d_diff = Vec::with_capacity(chunk.len());
            for (p, o) in chunk.iter().zip(&outs) {
                if o.gaze.iter().any(|v| !v.is_finite()) {
                    return Err(TrainError::NonFinite {
                        epoch,
                        batch,
                        detail: alloc::format!("network output {:?}", o.gaze),
                    });
                }
                let test = samples[p.test].gaze();
                let (b, used_la) = loss_for(variant, cfg, &o.gaze, o.diff.as_ref(), &test, || {
                    diag.guidance_label_reads += 1;
                    samples[p.guidance].gaze()
                })
                .map_err(|source| TrainError::Loss { epoch, batch, source })?;
                if !b.total.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        batch,
                        detail: alloc::format!("loss la={:?} lb={} total={}", b.la, b.lb, b.total),
                    });
                }
                if used_la {
                    diag.la_evaluations += 1;
                    la_count += 1;
                    sum_la += b.la.unwrap_or(0.0);
                }
                sum_lb += b.lb;
                sum_total += b.total;
                sum_err += angular_error_raw(&test, &o.gaze);
                d_gaze.push(b.grad_gaze.map(|g| g / n));
                d_diff.push(b.grad_diff.map(|g| g / n));
            }
            let mut grads = model.backward(&cache, &d_gaze, &d_diff);
            if !grads.all_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch,
                    detail: String::from("gradient"),
                });
            }
            if let Some(max) = cfg.grad_clip {
                if grads.clip_global_norm(max) > max {
                    diag.clipped_steps += 1;
                }
            }
            opt.step(model.params_mut(), &grads, lr);
            model.update_running_stats(&cache);
            diag.steps += 1;
        }
        let count = pairs.len() as f64;
        if !model.params().all_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: pairs.len().div_ceil(cfg.batch_size).saturating_sub(1),
                detail: String::from("parameters after the last step"),
            });
        }
        let val = match validation {
            Some(v) if !v.is_empty() => Some(mean_val_error(&model, v, val_seed)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            lr,
            la: (la_count > 0).then(|| sum_la / la_count as f64),
            lb: sum_lb / count,
            total: sum_total / count,
            train_angular_error: sum_err / count,
            val_angular_error: val,
        };
        log::info!(
            "epoch {epoch} lr {lr} total {:.5} train_err {:.3} val_err {:?}",
            record.total,
            record.train_angular_error,
            record.val_angular_error
        );
        on_epoch(&record);
        history.records.push(record);
        if let (Some(v), true) = (val, cfg.patience > 0) {
            if v < best - cfg.min_delta_deg {
                best = v;
                stagnant = 0;
            } else {
                stagnant += 1;
                if stagnant >= cfg.patience {
                    diag.stopped_after_epoch = Some(epoch);
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        diagnostics: diag,
    })
}

/// Subjects present in a sample set, sorted.
pub fn subjects(samples: &[Sample]) -> BTreeSet<String> {
    samples.iter().map(|s| String::from(s.subject())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_generate, SynthConfig};

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::new(ModelVariant::Drnet);
        assert_eq!(lr_schedule(0, &cfg), 0.01);
        assert_eq!(lr_schedule(4, &cfg), 0.01);
        assert_eq!(lr_schedule(5, &cfg), 0.001);
        assert_eq!(lr_schedule(10, &cfg), 0.0001);
        assert_eq!(lr_schedule(12, &cfg), 0.0001);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(ModelVariant::Drnet);
        assert!(cfg.validate().is_ok());
        cfg.lr0 = 0.0;
        assert!(cfg.validate().is_err());
        cfg.lr0 = 0.01;
        cfg.lr_decay = 1.5;
        assert!(cfg.validate().is_err());
        cfg.lr_decay = 1.0;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        cfg.batch_size = 1;
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_subject_rejected_before_any_step() {
        let s = synth_generate(&SynthConfig::new(2, 4, 1)).unwrap();
        let one: Vec<Sample> = s.into_iter().filter(|x| x.subject() == "p00").collect();
        let cfg = TrainConfig::new(ModelVariant::Drnet);
        assert!(matches!(train(&cfg, &one, None), Err(TrainError::Data(_))));
    }
}
