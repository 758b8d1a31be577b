//! Evaluation protocols: per-subject angular error, guidance-noise robustness,
//! leave-one-person-out, the alpha/beta sweep and the variant ablation battery.
//!
//! Every protocol that trains takes an [`Protocol`], which fixes the training
//! config, the held-out split and the noise setup. Sweep cells and folds get
//! independent seeds via [`derive_seed`]; the parallel drivers in the CLI call
//! the per-unit functions ([`run_fold`], [`run_sweep_cell`], [`run_variant`]).

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::data::{group_by_subject, split_by_subjects, DataError, EyeImage, PairMode, PairSampler, Sample};
use crate::geometry::angular_error_raw;
use crate::losses::LossWeights;
use crate::models::{GazeModel, Guidance, ModelError, ModelVariant};
use crate::noise::{inject_noise, NoiseMode};
use crate::seed::derive_seed;
use crate::training::{train, TrainConfig, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GuidancePolicy {
    /// Seeded uniform same-subject guidance image.
    #[default]
    RandomSeeded,
    /// The same guidance choice, with noise injected into the guidance image.
    FixedNoisy,
}

impl GuidancePolicy {
    pub fn name(self) -> &'static str {
        match self {
            GuidancePolicy::RandomSeeded => "random_seeded",
            GuidancePolicy::FixedNoisy => "fixed_noisy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random_seeded" => Some(GuidancePolicy::RandomSeeded),
            "fixed_noisy" => Some(GuidancePolicy::FixedNoisy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseProtocol {
    pub mode: NoiseMode,
    /// Fraction of guidance images made noisy under `FixedNoisy`.
    pub fraction: f64,
}

impl Default for NoiseProtocol {
    fn default() -> Self {
        Self {
            mode: NoiseMode::Blink,
            fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub policy: GuidancePolicy,
    pub seed: u64,
    pub noise: NoiseProtocol,
    /// Inference batch size; results do not depend on it.
    pub batch_size: usize,
}

impl EvalOptions {
    pub fn new(policy: GuidancePolicy, seed: u64) -> Self {
        Self {
            policy,
            seed,
            noise: NoiseProtocol::default(),
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    Data(DataError),
    Model(ModelError),
    Train(TrainError),
    /// Protocol precondition violated; raised before any inference.
    Precondition(String),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Data(e) => write!(f, "{e}"),
            EvalError::Model(e) => write!(f, "{e}"),
            EvalError::Train(e) => write!(f, "{e}"),
            EvalError::Precondition(m) => write!(f, "{m}"),
        }
    }
}

impl core::error::Error for EvalError {}

impl From<DataError> for EvalError {
    fn from(e: DataError) -> Self {
        EvalError::Data(e)
    }
}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Train(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectError {
    /// Mean angular error, degrees.
    pub mean: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_subject: BTreeMap<String, SubjectError>,
    /// Sample-weighted mean over subjects, degrees.
    pub overall_mean: f64,
    pub n_samples: usize,
    pub guidance_policy: GuidancePolicy,
    pub noise_mode: Option<NoiseMode>,
    /// Guidance ground-truth labels handed to the model (non-zero only for `DiffNn`).
    pub guidance_labels_read: usize,
}

impl EvalReport {
    fn from_errors(
        per_sample: BTreeMap<String, Vec<f64>>,
        policy: GuidancePolicy,
        noise_mode: Option<NoiseMode>,
        labels_read: usize,
    ) -> Self {
        let per_subject: BTreeMap<String, SubjectError> = per_sample
            .into_iter()
            .map(|(k, v)| {
                let n = v.len();
                (
                    k,
                    SubjectError {
                        mean: v.iter().sum::<f64>() / n as f64,
                        n,
                    },
                )
            })
            .collect();
        let n_samples = per_subject.values().map(|s| s.n).sum();
        let overall_mean = per_subject.values().map(|s| s.mean * s.n as f64).sum::<f64>() / n_samples as f64;
        Self {
            per_subject,
            overall_mean,
            n_samples,
            guidance_policy: policy,
            noise_mode,
            guidance_labels_read: labels_read,
        }
    }

    /// Unweighted mean of the per-subject means (the "Average" row of per-person tables).
    pub fn subject_average(&self) -> f64 {
        self.per_subject.values().map(|s| s.mean).sum::<f64>() / self.per_subject.len() as f64
    }
}

fn check_eval_preconditions(samples: &[Sample], opts: &EvalOptions) -> Result<(), EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Precondition("no samples to evaluate".to_string()));
    }
    for (subject, idx) in group_by_subject(samples) {
        if idx.len() < 2 {
            return Err(EvalError::Precondition(alloc::format!(
                "subject {subject} has {} sample(s); guidance selection needs at least 2",
                idx.len()
            )));
        }
    }
    if !(0.0..=1.0).contains(&opts.noise.fraction) {
        return Err(EvalError::Precondition(alloc::format!(
            "noise fraction {} outside [0, 1]",
            opts.noise.fraction
        )));
    }
    if opts.batch_size == 0 {
        return Err(EvalError::Precondition("batch size must be >= 1".to_string()));
    }
    Ok(())
}

fn unit_interval(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// Mean angular error per subject under a guidance policy.
pub fn evaluate(model: &GazeModel, samples: &[Sample], opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    check_eval_preconditions(samples, opts)?;
    let sampler = PairSampler::new(samples, derive_seed(opts.seed, "eval", 0))?;
    let pairs = sampler.indices(PairMode::Eval, 0);
    let noisy = opts.policy == GuidancePolicy::FixedNoisy;
    let wants_label = model.variant().requires_guidance_label();
    let mut errors: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut labels_read = 0usize;
    let mut offset = 0u64;
    for chunk in pairs.chunks(opts.batch_size) {
        let noisy_guidance: Vec<Option<Sample>> = chunk
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let i = offset + j as u64;
                let pick = opts.noise.fraction >= 1.0
                    || unit_interval(derive_seed(opts.seed, "noisy-pick", i)) < opts.noise.fraction;
                (noisy && pick).then(|| {
                    inject_noise(
                        &samples[p.guidance],
                        opts.noise.mode,
                        derive_seed(opts.seed, "noise", i),
                    )
                })
            })
            .collect();
        let tests: Vec<&EyeImage> = chunk.iter().map(|p| &samples[p.test].image).collect();
        let guidance: Vec<Guidance<'_>> = chunk
            .iter()
            .zip(&noisy_guidance)
            .map(|(p, n)| {
                let image = match n {
                    Some(s) => &s.image,
                    None => &samples[p.guidance].image,
                };
                if wants_label {
                    labels_read += 1;
                    Guidance::Labeled {
                        image,
                        label: samples[p.guidance].gaze(),
                    }
                } else {
                    Guidance::Image(image)
                }
            })
            .collect();
        let outs = model.infer_batch(&tests, &guidance)?;
        for (p, o) in chunk.iter().zip(outs) {
            let t = &samples[p.test];
            errors
                .entry(t.subject().to_string())
                .or_default()
                .push(angular_error_raw(&t.gaze(), &o.gaze));
        }
        offset += chunk.len() as u64;
    }
    Ok(EvalReport::from_errors(
        errors,
        opts.policy,
        noisy.then_some(opts.noise.mode),
        labels_read,
    ))
}

/// Per-subject `|err(noisy guidance) - err(clean guidance)|`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDistance {
    pub clean: EvalReport,
    pub noisy: EvalReport,
    pub per_subject: BTreeMap<String, f64>,
    /// Mean over subjects.
    pub mean: f64,
}

pub fn noise_distance(
    model: &GazeModel,
    samples: &[Sample],
    seed: u64,
    noise: NoiseProtocol,
) -> Result<NoiseDistance, EvalError> {
    let mut opts = EvalOptions::new(GuidancePolicy::RandomSeeded, seed);
    opts.noise = noise;
    let clean = evaluate(model, samples, &opts)?;
    opts.policy = GuidancePolicy::FixedNoisy;
    let noisy = evaluate(model, samples, &opts)?;
    let per_subject: BTreeMap<String, f64> = clean
        .per_subject
        .iter()
        .map(|(k, c)| (k.clone(), (noisy.per_subject[k].mean - c.mean).abs()))
        .collect();
    let mean = per_subject.values().sum::<f64>() / per_subject.len() as f64;
    Ok(NoiseDistance {
        clean,
        noisy,
        per_subject,
        mean,
    })
}

/// Training setup shared by the protocols that train.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub train: TrainConfig,
    /// Number of subjects (last in sorted order) held out for evaluation.
    pub holdout: usize,
    pub noise: NoiseProtocol,
}

impl Protocol {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            train,
            holdout: 2,
            noise: NoiseProtocol::default(),
        }
    }

    /// Seed for evaluation-side randomness, shared by every unit of a run.
    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.train.seed, "eval", 0)
    }
}

/// The last `count` subjects in sorted order.
pub fn holdout_subjects(samples: &[Sample], count: usize) -> Vec<String> {
    let subjects: Vec<String> = group_by_subject(samples).keys().map(|s| s.to_string()).collect();
    let k = count.min(subjects.len());
    subjects[subjects.len() - k..].to_vec()
}

/// `(train, held-out)` split of a protocol.
pub fn holdout_split(samples: &[Sample], count: usize) -> Result<(Vec<Sample>, Vec<Sample>), EvalError> {
    let held = holdout_subjects(samples, count);
    let n_subjects = group_by_subject(samples).len();
    if held.is_empty() || held.len() >= n_subjects {
        return Err(EvalError::Precondition(alloc::format!(
            "holdout of {count} subject(s) leaves no training subjects out of {n_subjects}"
        )));
    }
    let refs: Vec<&str> = held.iter().map(|s| s.as_str()).collect();
    Ok(split_by_subjects(samples, &refs))
}

/// Trains one variant on the protocol's training split and evaluates it on the held-out subjects.
pub fn run_variant(
    protocol: &Protocol,
    samples: &[Sample],
    variant: ModelVariant,
) -> Result<(GazeModel, EvalReport), EvalError> {
    let (train_set, test_set) = holdout_split(samples, protocol.holdout)?;
    let mut cfg = protocol.train.clone();
    cfg.model.variant = variant;
    let out = train(&cfg, &train_set, None)?;
    let report = evaluate(
        &out.model,
        &test_set,
        &EvalOptions::new(GuidancePolicy::RandomSeeded, protocol.eval_seed()),
    )?;
    Ok((out.model, report))
}

/// Leave-one-person-out split; the training side never contains `held_out`.
pub fn fold_split(samples: &[Sample], held_out: &str) -> (Vec<Sample>, Vec<Sample>) {
    let (train_set, test_set) = split_by_subjects(samples, &[held_out]);
    assert!(
        train_set.iter().all(|s| s.subject() != held_out),
        "fold training set contains held-out subject {held_out}"
    );
    (train_set, test_set)
}

pub fn fold_seed(base: u64, subject: &str) -> u64 {
    derive_seed(base, &alloc::format!("fold/{subject}"), 0)
}

/// Trains on every subject except `held_out` and evaluates on `held_out`.
pub fn run_fold(cfg: &TrainConfig, samples: &[Sample], held_out: &str) -> Result<EvalReport, EvalError> {
    let (train_set, test_set) = fold_split(samples, held_out);
    if test_set.is_empty() {
        return Err(EvalError::Precondition(alloc::format!("unknown subject {held_out}")));
    }
    let mut fold_cfg = cfg.clone();
    fold_cfg.seed = fold_seed(cfg.seed, held_out);
    let out = train(&fold_cfg, &train_set, None)?;
    evaluate(
        &out.model,
        &test_set,
        &EvalOptions::new(GuidancePolicy::RandomSeeded, derive_seed(cfg.seed, "eval", 0)),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct LopoReport {
    /// Per held-out subject; failed folds carry their error message.
    pub folds: BTreeMap<String, Result<EvalReport, String>>,
}

impl LopoReport {
    /// Mean of per-fold overall errors over successful folds.
    pub fn mean_error(&self) -> Option<f64> {
        let ok: Vec<f64> = self
            .folds
            .values()
            .filter_map(|r| r.as_ref().ok().map(|e| e.overall_mean))
            .collect();
        (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
    }
}

pub fn check_lopo(samples: &[Sample]) -> Result<Vec<String>, EvalError> {
    let subjects: Vec<String> = group_by_subject(samples).keys().map(|s| s.to_string()).collect();
    if subjects.len() < 3 {
        return Err(EvalError::Precondition(alloc::format!(
            "leave-one-person-out needs at least 3 subjects, got {}",
            subjects.len()
        )));
    }
    Ok(subjects)
}

pub fn leave_one_person_out(cfg: &TrainConfig, samples: &[Sample]) -> Result<LopoReport, EvalError> {
    let subjects = check_lopo(samples)?;
    let folds = subjects
        .into_iter()
        .map(|s| {
            let r = run_fold(cfg, samples, &s).map_err(|e| e.to_string());
            (s, r)
        })
        .collect();
    Ok(LopoReport { folds })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    /// Held-out mean angular error, or the failure message.
    pub error: Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub cells: Vec<SweepCell>,
    pub best_cell: Option<(f64, f64)>,
}

impl SweepResult {
    pub fn get(&self, alpha: f64, beta: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.alpha == alpha && c.beta == beta)
    }
}

/// Seed of a sweep cell, keyed by the cell's weights rather than its grid position.
pub fn cell_seed(base: u64, alpha: f64, beta: f64) -> u64 {
    derive_seed(base, &alloc::format!("cell/{alpha}/{beta}"), 0)
}

/// Minimum-error cell; ties go to the larger alpha, then the larger beta.
pub fn best_cell(cells: &[SweepCell]) -> Option<(f64, f64)> {
    cells
        .iter()
        .filter_map(|c| c.error.as_ref().ok().map(|e| (*e, c.alpha, c.beta)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)).then(b.2.total_cmp(&a.2)))
        .map(|(_, a, b)| (a, b))
}

pub fn check_grid(alphas: &[f64], betas: &[f64]) -> Result<(), EvalError> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(EvalError::Precondition(
            "alpha and beta grids must be non-empty".to_string(),
        ));
    }
    for &a in alphas {
        for &b in betas {
            LossWeights::new(a, b).map_err(|e| EvalError::Precondition(e.to_string()))?;
        }
    }
    Ok(())
}

pub fn run_sweep_cell(protocol: &Protocol, samples: &[Sample], alpha: f64, beta: f64) -> SweepCell {
    let seed = cell_seed(protocol.train.seed, alpha, beta);
    let mut p = protocol.clone();
    p.train.seed = seed;
    let error = LossWeights::new(alpha, beta).map_err(|e| e.to_string()).and_then(|w| {
        p.train.weights = w;
        let (train_set, test_set) = holdout_split(samples, p.holdout).map_err(|e| e.to_string())?;
        let out = train(&p.train, &train_set, None).map_err(|e| e.to_string())?;
        evaluate(
            &out.model,
            &test_set,
            &EvalOptions::new(GuidancePolicy::RandomSeeded, protocol.eval_seed()),
        )
        .map(|r| r.overall_mean)
        .map_err(|e| e.to_string())
    });
    SweepCell {
        alpha,
        beta,
        seed,
        error,
    }
}

pub fn assemble_sweep(alphas: &[f64], betas: &[f64], cells: Vec<SweepCell>) -> SweepResult {
    let best = best_cell(&cells);
    SweepResult {
        alphas: alphas.to_vec(),
        betas: betas.to_vec(),
        cells,
        best_cell: best,
    }
}

/// Retrains per `(alpha, beta)` cell; failed cells are kept with their error.
pub fn sweep_alpha_beta(
    protocol: &Protocol,
    samples: &[Sample],
    alphas: &[f64],
    betas: &[f64],
) -> Result<SweepResult, EvalError> {
    check_grid(alphas, betas)?;
    let mut cells = Vec::with_capacity(alphas.len() * betas.len());
    for &a in alphas {
        for &b in betas {
            cells.push(run_sweep_cell(protocol, samples, a, b));
        }
    }
    Ok(assemble_sweep(alphas, betas, cells))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub reports: BTreeMap<ModelVariant, Result<EvalReport, String>>,
    /// Variants whose mean error beat DRNet's (flagged, not hidden).
    pub exceptions: Vec<ModelVariant>,
    /// Learned mixing weight of the `NoAd` variant, when it trained.
    pub gamma: Option<f64>,
}

pub fn assemble_ablation(
    reports: BTreeMap<ModelVariant, Result<EvalReport, String>>,
    gamma: Option<f64>,
) -> AblationResult {
    let drnet = reports
        .get(&ModelVariant::Drnet)
        .and_then(|r| r.as_ref().ok())
        .map(|r| r.overall_mean);
    let exceptions = match drnet {
        Some(d) => reports
            .iter()
            .filter(|(v, r)| **v != ModelVariant::Drnet && matches!(r, Ok(e) if e.overall_mean < d))
            .map(|(v, _)| *v)
            .collect(),
        None => Vec::new(),
    };
    AblationResult {
        reports,
        exceptions,
        gamma,
    }
}

/// Trains and evaluates each variant under one shared protocol and seed.
pub fn ablation_battery(protocol: &Protocol, samples: &[Sample], variants: &[ModelVariant]) -> AblationResult {
    let mut reports = BTreeMap::new();
    let mut gamma = None;
    for &v in variants {
        let r = run_variant(protocol, samples, v).map(|(m, rep)| {
            if v == ModelVariant::NoAd {
                gamma = m.gamma();
            }
            rep
        });
        reports.insert(v, r.map_err(|e| e.to_string()));
    }
    assemble_ablation(reports, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(alpha: f64, beta: f64, e: f64) -> SweepCell {
        SweepCell {
            alpha,
            beta,
            seed: 0,
            error: Ok(e),
        }
    }

    #[test]
    fn tie_break_prefers_larger_alpha_then_beta() {
        let cells = alloc::vec![
            cell(0.25, 1.0, 5.0),
            cell(0.75, 0.5, 5.0),
            cell(0.75, 0.25, 5.0),
            cell(1.0, 0.5, 6.0),
        ];
        assert_eq!(best_cell(&cells), Some((0.75, 0.5)));
        assert_eq!(best_cell(&cells[..1]), Some((0.25, 1.0)));
        let failed = alloc::vec![SweepCell {
            error: Err("boom".to_string()),
            ..cell(0.5, 0.5, 0.0)
        }];
        assert_eq!(best_cell(&failed), None);
    }

    #[test]
    fn grid_checked() {
        assert!(check_grid(&[], &[0.5]).is_err());
        assert!(check_grid(&[0.5], &[1.5]).is_err());
        assert!(check_grid(&[0.0, 1.0], &[0.25]).is_ok());
    }

    #[test]
    fn cell_seeds_depend_on_weights_only() {
        assert_eq!(cell_seed(7, 0.75, 1.0), cell_seed(7, 0.75, 1.0));
        assert_ne!(cell_seed(7, 0.75, 1.0), cell_seed(7, 1.0, 0.75));
    }
}
