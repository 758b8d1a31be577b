//! The `drnet` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use drnet_core::checkpoint::{self, CheckpointError};
use drnet_core::data::{DataError, Sample, Side};
use drnet_core::evaluation::{
    check_grid, check_lopo, evaluate, fold_seed, fold_split, holdout_split, noise_distance, run_sweep_cell, EvalError,
    EvalOptions, GuidancePolicy, Protocol,
};
use drnet_core::models::ModelVariant;
use drnet_core::seed::derive_seed;
use drnet_core::synth::{synth_generate, SynthConfig};
use drnet_core::training::{train, TrainError};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::dataset::{load_dataset, save_dataset, DatasetError, LoadedDataset, SideFilter, LABELS_FILE};
use crate::fsutil::{non_empty_dir, write_atomic};
use crate::manifest::{DatasetInfo, RunManifest, MANIFEST_FILE};
use crate::report::{self, AblationRow, FoldResult, NoiseRow, NoiseTable, RunResults, SubjectTable, SweepCellResult};

pub const RESULTS_FILE: &str = "results.json";
pub const SUMMARY_FILE: &str = "summary.md";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

const DEFAULT_ALPHAS: &str = "0,0.25,0.5,0.75,1";
const DEFAULT_BETAS: &str = "0.25,0.5,0.75,1";

#[derive(Debug, Parser)]
#[command(name = "drnet", version, about = "Differential-residual gaze estimation")]
pub struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled eye-image dataset.
    Synth(SynthArgs),
    /// Train one model; evaluates on held-out subjects when eval.holdout > 0.
    Train(RunArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Retrain over an alpha x beta grid of loss weights.
    Sweep(SweepArgs),
    /// Train and compare model variants under one protocol.
    Ablate(AblateArgs),
    /// Leave-one-person-out with clean and noisy guidance.
    Lopo(LopoArgs),
    /// Merge the results of finished runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    subjects: usize,
    #[arg(long)]
    per_subject: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = drnet_core::data::DEFAULT_HEIGHT)]
    height: usize,
    #[arg(long, default_value_t = drnet_core::data::DEFAULT_WIDTH)]
    width: usize,
    /// Standard deviation of additive pixel noise.
    #[arg(long)]
    pixel_noise: Option<f64>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override one config key, e.g. `--set loss.alpha=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// random_seeded, fixed_noisy or both.
    #[arg(long, default_value = "random_seeded")]
    policy: String,
    /// Defaults to `eval-<policy>` next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Evaluation seed; defaults to the seed stored in the checkpoint.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = DEFAULT_ALPHAS)]
    alphas: String,
    #[arg(long, default_value = DEFAULT_BETAS)]
    betas: String,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated variant names; all variants by default.
    #[arg(long)]
    variants: Option<String>,
    /// Number of training seeds, starting at train.seed.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct LopoArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Output directories of finished runs.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    /// Process exit status: 1 usage, 2 data, 3 numeric.
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(format!("checkpoint: {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            e if e.is_numeric() => CliError::Numeric(format!("training diverged: {e}")),
            TrainError::Config(m) => CliError::Usage(format!("invalid training config: {m}")),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Runs the CLI and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.command, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn execute(command: Command, argv: Vec<String>) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, argv),
        Command::Train(a) => train_cmd(a, argv),
        Command::Eval(a) => eval_cmd(a, argv),
        Command::Sweep(a) => sweep_cmd(a, argv),
        Command::Ablate(a) => ablate_cmd(a, argv),
        Command::Lopo(a) => lopo_cmd(a, argv),
        Command::Report(a) => report_cmd(a, argv),
    }
}

/// An output directory together with its manifest.
struct RunDir {
    dir: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    fn create(dir: &Path, force: bool, inputs: &[&Path], manifest: RunManifest) -> Result<Self> {
        guard_inputs(dir, inputs)?;
        if non_empty_dir(dir) {
            if !force {
                return Err(CliError::Usage(format!(
                    "output directory {} is not empty; pass --force to replace it",
                    dir.display()
                )));
            }
            if !dir.join(MANIFEST_FILE).is_file() {
                return Err(CliError::Usage(format!(
                    "refusing to replace {}: it was not written by drnet (no {MANIFEST_FILE})",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(dir)?;
        }
        std::fs::create_dir_all(dir)?;
        manifest.write(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.manifest.outputs.push(name.to_string());
        Ok(())
    }

    fn put_results(&mut self, r: &RunResults) -> Result<()> {
        let text = serde_json::to_string_pretty(r).expect("results serialize");
        self.put(RESULTS_FILE, format!("{text}\n").as_bytes())
    }

    fn finish<T>(mut self, outcome: Result<T>) -> Result<T> {
        let status = match &outcome {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("failed: {e}"),
        };
        self.manifest.finish(&self.dir, &status)?;
        outcome
    }
}

/// Output directories may not be, or lie inside, an input directory.
fn guard_inputs(out: &Path, inputs: &[&Path]) -> Result<()> {
    let out_abs = std::path::absolute(out)?;
    for input in inputs {
        let Ok(inp) = input.canonicalize() else { continue };
        let out_real = out_abs.canonicalize().unwrap_or_else(|_| out_abs.clone());
        if out_real.starts_with(&inp) {
            return Err(CliError::Usage(format!(
                "output directory {} lies inside input {}; inputs are never modified",
                out.display(),
                input.display()
            )));
        }
    }
    Ok(())
}

fn load_config(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    for s in sets {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Adopts the dataset's image size unless the config names a different one explicitly.
fn fit_shape(cfg: &mut RunConfig, samples: &[Sample]) -> Result<()> {
    let Some(first) = samples.first() else {
        return Ok(());
    };
    let (h, w) = (first.image.height(), first.image.width());
    let b = &mut cfg.train.model.backbone;
    let default = RunConfig::default().train.model.backbone;
    if (b.height, b.width) == (h, w) {
        return Ok(());
    }
    if (b.height, b.width) == (default.height, default.width) {
        b.height = h;
        b.width = w;
        return Ok(());
    }
    Err(CliError::Data(format!(
        "dataset images are {h}x{w} but the config asks for {}x{}",
        b.height, b.width
    )))
}

fn load_data(path: &Path, cfg: &mut RunConfig) -> Result<LoadedDataset> {
    let data = load_dataset(path, cfg.convention, cfg.side)?;
    if data.samples.is_empty() {
        return Err(CliError::Data(format!(
            "{} holds no samples after filtering",
            path.display()
        )));
    }
    fit_shape(cfg, &data.samples)?;
    Ok(data)
}

fn dataset_info(path: &Path, d: &LoadedDataset) -> DatasetInfo {
    DatasetInfo {
        path: path.display().to_string(),
        sha256: d.fingerprint.clone(),
        samples: d.samples.len(),
    }
}

fn protocol(cfg: &RunConfig) -> Protocol {
    let mut p = Protocol::new(cfg.train.clone());
    p.holdout = cfg.holdout;
    p.noise = cfg.noise;
    p
}

fn eval_options(cfg: &RunConfig, policy: GuidancePolicy, seed: u64) -> EvalOptions {
    let mut o = EvalOptions::new(policy, seed);
    o.noise = cfg.noise;
    o.batch_size = cfg.eval_batch_size;
    o
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} worker threads: {e}")))
}

fn parse_list(flag: &str, text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::Usage(format!("{flag}: {s:?} is not a number")))
        })
        .collect()
}

fn synth(a: SynthArgs, argv: Vec<String>) -> Result<()> {
    if a.subjects < 2 {
        return Err(CliError::Usage(format!(
            "--subjects {}: at least 2 subjects are needed for pair sampling and held-out evaluation (3 for leave-one-person-out)",
            a.subjects
        )));
    }
    if a.per_subject < 4 {
        return Err(CliError::Usage(format!(
            "--per-subject {}: at least 4 images per subject are needed",
            a.per_subject
        )));
    }
    let mut cfg = SynthConfig::new(a.subjects, a.per_subject, a.seed);
    cfg.height = a.height;
    cfg.width = a.width;
    if let Some(n) = a.pixel_noise {
        if !(n.is_finite() && n >= 0.0) {
            return Err(CliError::Usage("--pixel-noise must be a non-negative number".into()));
        }
        cfg.pixel_noise = n;
    }
    let samples = synth_generate(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut run = RunDir::create(&a.out, a.force, &[], RunManifest::new("synth", argv, a.seed))?;
    let outcome = (|| {
        save_dataset(&run.dir, &samples)?;
        let loaded = load_dataset(
            &run.dir,
            drnet_core::geometry::Convention::CameraFacing,
            SideFilter::All,
        )?;
        run.manifest.dataset = Some(dataset_info(&a.out, &loaded));
        run.manifest.outputs.push(LABELS_FILE.to_string());
        Ok(())
    })();
    run.finish(outcome)
}

fn train_cmd(a: RunArgs, argv: Vec<String>) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), &a.set, a.seed)?;
    let data = load_data(&a.data, &mut cfg)?;
    let mut manifest = RunManifest::new("train", argv, cfg.train.seed);
    manifest.config = Some(cfg.to_text());
    manifest.dataset = Some(dataset_info(&a.data, &data));
    let mut run = RunDir::create(&a.out, a.force, &[&a.data], manifest)?;
    let outcome = train_run(&mut run, &cfg, &data.samples);
    run.finish(outcome)
}

fn train_run(run: &mut RunDir, cfg: &RunConfig, samples: &[Sample]) -> Result<()> {
    let (train_set, held) = if cfg.holdout > 0 {
        holdout_split(samples, cfg.holdout)?
    } else {
        (samples.to_vec(), Vec::new())
    };
    run.put("config.cfg", cfg.to_text().as_bytes())?;
    let validation = (!held.is_empty()).then_some(held.as_slice());
    let out = train(&cfg.train, &train_set, validation)?;
    run.put(
        CHECKPOINT_FILE,
        &checkpoint::encode(&out.model, cfg.train.seed, cfg.train.weights),
    )?;
    run.put("history.csv", report::history_csv(&out.history).as_bytes())?;

    let variant = cfg.train.variant();
    let mut md = format!("# Training run: {}\n\n", variant.label());
    let _ = writeln!(
        md,
        "{} training images, {} epochs run, alpha = {}, beta = {}, seed {}.\n",
        train_set.len(),
        out.history.records.len(),
        cfg.train.weights.alpha(),
        cfg.train.weights.beta(),
        cfg.train.seed
    );
    if let Some(last) = out.history.records.last() {
        let _ = writeln!(
            md,
            "Final epoch: total loss {:.6}, training angular error {:.4} deg.\n",
            last.total, last.train_angular_error
        );
    }
    if let Some(e) = out.diagnostics.stopped_after_epoch {
        let _ = writeln!(md, "Early stopping after epoch {e}.\n");
    }
    let heldout = if held.is_empty() {
        None
    } else {
        let r = evaluate(
            &out.model,
            &held,
            &eval_options(cfg, GuidancePolicy::RandomSeeded, protocol(cfg).eval_seed()),
        )?;
        let t = SubjectTable::from(&r);
        run.put("metrics.csv", report::metrics_csv(&t).as_bytes())?;
        md.push_str("## Held-out subjects\n\n");
        md.push_str(&report::subject_table_md(&t));
        Some(t)
    };
    run.put(SUMMARY_FILE, md.as_bytes())?;
    run.put_results(&RunResults::Train {
        variant: variant.name().to_string(),
        heldout,
    })
}

fn eval_cmd(a: EvalArgs, argv: Vec<String>) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), &a.set, None)?;
    let bytes = std::fs::read(&a.checkpoint)
        .map_err(|e| CliError::Data(format!("cannot read checkpoint {}: {e}", a.checkpoint.display())))?;
    let ckpt = checkpoint::decode(&bytes, None)?;
    let policies: Vec<GuidancePolicy> = match a.policy.as_str() {
        "both" => vec![GuidancePolicy::RandomSeeded, GuidancePolicy::FixedNoisy],
        p => vec![GuidancePolicy::parse(p)
            .ok_or_else(|| CliError::Usage(format!("--policy {p:?}: expected random_seeded, fixed_noisy or both")))?],
    };
    let b = &ckpt.model.config().backbone;
    cfg.train.model.backbone.height = b.height;
    cfg.train.model.backbone.width = b.width;
    let data = load_data(&a.data, &mut cfg)?;
    let seed = a.seed.unwrap_or(ckpt.seed);
    let out = a.out.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval-{}", a.policy))
    });
    let mut manifest = RunManifest::new("eval", argv, seed);
    manifest.config = Some(cfg.to_text());
    manifest.dataset = Some(dataset_info(&a.data, &data));
    let mut run = RunDir::create(&out, a.force, &[&a.data], manifest)?;
    let outcome = (|| {
        let eval_seed = derive_seed(seed, "eval", 0);
        let variant = ckpt.model.variant();
        let mut md = format!("# Evaluation: {}\n\n", variant.label());
        let results = if policies.len() == 2 {
            let d = noise_distance(&ckpt.model, &data.samples, eval_seed, cfg.noise)?;
            let table = NoiseTable::from_distance(&d, cfg.noise.mode.name());
            let clean = SubjectTable::from(&d.clean);
            run.put("metrics.csv", report::metrics_csv(&clean).as_bytes())?;
            run.put("noise.csv", report::noise_csv(&table.rows).as_bytes())?;
            write_quartiles(&mut run, variant.name(), &table.rows)?;
            let _ = writeln!(
                md,
                "Guidance noise `{}` on {:.0}% of guidance images.\n",
                cfg.noise.mode.name(),
                cfg.noise.fraction * 100.0
            );
            md.push_str(&report::noise_table_md(&table.rows));
            RunResults::Noise {
                variant: variant.name().to_string(),
                table,
            }
        } else {
            let r = evaluate(&ckpt.model, &data.samples, &eval_options(&cfg, policies[0], eval_seed))?;
            let t = SubjectTable::from(&r);
            run.put("metrics.csv", report::metrics_csv(&t).as_bytes())?;
            md.push_str(&report::subject_table_md(&t));
            RunResults::Eval {
                variant: variant.name().to_string(),
                table: t,
            }
        };
        run.put(SUMMARY_FILE, md.as_bytes())?;
        run.put_results(&results)
    })();
    run.finish(outcome)
}

fn write_quartiles(run: &mut RunDir, label: &str, rows: &[NoiseRow]) -> Result<()> {
    let distances = rows.iter().map(|r| r.distance).collect();
    run.put(
        "quartiles.csv",
        report::quartiles_csv(&[(label.to_string(), distances)]).as_bytes(),
    )
}

fn start_run(a: &RunArgs, command: &str, argv: Vec<String>) -> Result<(RunConfig, LoadedDataset, RunDir)> {
    let mut cfg = load_config(a.config.as_deref(), &a.set, a.seed)?;
    let data = load_data(&a.data, &mut cfg)?;
    let mut manifest = RunManifest::new(command, argv, cfg.train.seed);
    manifest.config = Some(cfg.to_text());
    manifest.dataset = Some(dataset_info(&a.data, &data));
    let run = RunDir::create(&a.out, a.force, &[&a.data], manifest)?;
    Ok((cfg, data, run))
}

fn sweep_cmd(a: SweepArgs, argv: Vec<String>) -> Result<()> {
    let alphas = parse_list("--alphas", &a.alphas)?;
    let betas = parse_list("--betas", &a.betas)?;
    check_grid(&alphas, &betas).map_err(|e| CliError::Usage(e.to_string()))?;
    let workers = pool(a.jobs)?;
    let (cfg, data, mut run) = start_run(&a.run, "sweep", argv)?;
    let outcome = (|| {
        let p = protocol(&cfg);
        holdout_split(&data.samples, p.holdout)?;
        let grid: Vec<(f64, f64)> = alphas
            .iter()
            .flat_map(|&x| betas.iter().map(move |&y| (x, y)))
            .collect();
        let cells = workers.install(|| {
            grid.par_iter()
                .map(|&(x, y)| run_sweep_cell(&p, &data.samples, x, y))
                .collect::<Vec<_>>()
        });
        let best = drnet_core::evaluation::best_cell(&cells);
        let cells: Vec<SweepCellResult> = cells
            .into_iter()
            .map(|c| SweepCellResult {
                alpha: c.alpha,
                beta: c.beta,
                seed: c.seed,
                error: c.error.as_ref().ok().copied(),
                failure: c.error.err(),
            })
            .collect();
        let surface = report::surface_csv(&cells);
        run.put("surface.csv", surface.as_bytes())?;
        run.put("metrics.csv", surface.as_bytes())?;
        let mut md = format!(
            "# Loss-weight sweep: {}\n\nHeld-out mean angular error (deg) per cell.\n\n",
            cfg.train.variant().label()
        );
        md.push_str(&report::sweep_grid_md(&alphas, &betas, &cells, best));
        run.put(SUMMARY_FILE, md.as_bytes())?;
        run.put_results(&RunResults::Sweep {
            variant: cfg.train.variant().name().to_string(),
            alphas: alphas.clone(),
            betas: betas.clone(),
            cells,
            best,
        })
    })();
    run.finish(outcome)
}

struct AblationUnit {
    all: std::result::Result<f64, String>,
    left: Option<f64>,
    right: Option<f64>,
    gamma: Option<f64>,
}

fn ablation_unit(p: &Protocol, cfg: &RunConfig, samples: &[Sample], variant: ModelVariant) -> AblationUnit {
    let failed = |e: String| AblationUnit {
        all: Err(e),
        left: None,
        right: None,
        gamma: None,
    };
    let (train_set, held) = match holdout_split(samples, p.holdout) {
        Ok(s) => s,
        Err(e) => return failed(e.to_string()),
    };
    let mut tc = p.train.clone();
    tc.model.variant = variant;
    let model = match train(&tc, &train_set, None) {
        Ok(o) => o.model,
        Err(e) => return failed(e.to_string()),
    };
    let opts = eval_options(cfg, GuidancePolicy::RandomSeeded, p.eval_seed());
    let side_error = |side: Side| {
        let subset: Vec<Sample> = held.iter().filter(|s| s.side == side).cloned().collect();
        evaluate(&model, &subset, &opts).ok().map(|r| r.overall_mean)
    };
    AblationUnit {
        all: evaluate(&model, &held, &opts)
            .map(|r| r.overall_mean)
            .map_err(|e| e.to_string()),
        left: side_error(Side::Left),
        right: side_error(Side::Right),
        gamma: model.gamma(),
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let ok: Vec<f64> = values.flatten().collect();
    (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
}

fn ablate_cmd(a: AblateArgs, argv: Vec<String>) -> Result<()> {
    let variants: Vec<ModelVariant> = match &a.variants {
        None => ModelVariant::ALL.to_vec(),
        Some(list) => list
            .split(',')
            .map(|v| {
                ModelVariant::parse(v.trim())
                    .ok_or_else(|| CliError::Usage(format!("--variants: unknown variant {v:?}")))
            })
            .collect::<Result<_>>()?,
    };
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let workers = pool(a.jobs)?;
    let (cfg, data, mut run) = start_run(&a.run, "ablate", argv)?;
    let outcome = (|| {
        let seeds: Vec<u64> = (0..a.seeds as u64).map(|k| cfg.train.seed.wrapping_add(k)).collect();
        holdout_split(&data.samples, cfg.holdout)?;
        let units: Vec<(usize, ModelVariant)> = variants
            .iter()
            .flat_map(|&v| (0..seeds.len()).map(move |k| (k, v)))
            .collect();
        let results = workers.install(|| {
            units
                .par_iter()
                .map(|&(k, v)| {
                    let mut c = cfg.clone();
                    c.train.seed = seeds[k];
                    ablation_unit(&protocol(&c), &c, &data.samples, v)
                })
                .collect::<Vec<_>>()
        });
        let mut rows = Vec::new();
        let mut gamma = vec![None; seeds.len()];
        for (vi, &v) in variants.iter().enumerate() {
            let mine = &results[vi * seeds.len()..(vi + 1) * seeds.len()];
            if v == ModelVariant::NoAd {
                gamma = mine.iter().map(|u| u.gamma).collect();
            }
            rows.push(AblationRow {
                variant: v.name().to_string(),
                label: v.label().to_string(),
                all: mean_of(mine.iter().map(|u| u.all.as_ref().ok().copied())),
                left: mean_of(mine.iter().map(|u| u.left)),
                right: mean_of(mine.iter().map(|u| u.right)),
                per_seed_all: mine.iter().map(|u| u.all.as_ref().ok().copied()).collect(),
                failures: mine.iter().filter_map(|u| u.all.as_ref().err().cloned()).collect(),
            });
        }
        let drnet = rows.iter().find(|r| r.variant == "drnet").and_then(|r| r.all);
        let exceptions: Vec<String> = match drnet {
            Some(d) => rows
                .iter()
                .filter(|r| r.variant != "drnet" && r.all.is_some_and(|e| e < d))
                .map(|r| r.label.clone())
                .collect(),
            None => Vec::new(),
        };
        let mut metrics = String::from("variant,seed,error\n");
        for r in &rows {
            for (s, e) in seeds.iter().zip(&r.per_seed_all) {
                let _ = writeln!(
                    metrics,
                    "{},{s},{}",
                    r.variant,
                    e.map_or_else(String::new, |v| v.to_string())
                );
            }
        }
        run.put("metrics.csv", metrics.as_bytes())?;
        let groups: Vec<(String, Vec<f64>)> = rows
            .iter()
            .map(|r| (r.variant.clone(), r.per_seed_all.iter().flatten().copied().collect()))
            .collect();
        run.put("quartiles.csv", report::quartiles_csv(&groups).as_bytes())?;
        let mut md = String::from("# Ablation\n\n");
        md.push_str(&report::ablation_md(&rows, &exceptions, seeds.len()));
        let gammas: Vec<String> = gamma.iter().flatten().map(|g| format!("{g:.4}")).collect();
        if !gammas.is_empty() {
            let _ = writeln!(
                md,
                "\nLearned mixing weight of DRNet_NoAD per seed: {}.",
                gammas.join(", ")
            );
        }
        run.put(SUMMARY_FILE, md.as_bytes())?;
        run.put_results(&RunResults::Ablate {
            seeds,
            rows,
            exceptions,
            gamma,
        })
    })();
    run.finish(outcome)
}

fn lopo_fold(cfg: &RunConfig, samples: &[Sample], subject: &str) -> std::result::Result<NoiseRow, String> {
    let (train_set, test_set) = fold_split(samples, subject);
    let mut tc = cfg.train.clone();
    tc.seed = fold_seed(cfg.train.seed, subject);
    let model = train(&tc, &train_set, None).map_err(|e| e.to_string())?.model;
    let d = noise_distance(&model, &test_set, derive_seed(cfg.train.seed, "eval", 0), cfg.noise)
        .map_err(|e| e.to_string())?;
    Ok(NoiseRow {
        subject: subject.to_string(),
        clean: d.clean.overall_mean,
        noisy: d.noisy.overall_mean,
        distance: d.mean,
    })
}

fn lopo_cmd(a: LopoArgs, argv: Vec<String>) -> Result<()> {
    let workers = pool(a.jobs)?;
    let (cfg, data, mut run) = start_run(&a.run, "lopo", argv)?;
    let outcome = (|| {
        let subjects = check_lopo(&data.samples)?;
        let folds: Vec<FoldResult> = workers.install(|| {
            subjects
                .par_iter()
                .map(|s| match lopo_fold(&cfg, &data.samples, s) {
                    Ok(row) => FoldResult {
                        subject: s.clone(),
                        noise: Some(row),
                        failure: None,
                    },
                    Err(e) => FoldResult {
                        subject: s.clone(),
                        noise: None,
                        failure: Some(e),
                    },
                })
                .collect()
        });
        let rows: Vec<NoiseRow> = folds.iter().filter_map(|f| f.noise.clone()).collect();
        let clean = SubjectTable {
            rows: rows
                .iter()
                .map(|r| report::SubjectRow {
                    subject: r.subject.clone(),
                    error: r.clean,
                    n: data.samples.iter().filter(|s| s.subject() == r.subject).count(),
                })
                .collect(),
            overall_mean: mean_of(rows.iter().map(|r| Some(r.clean))).unwrap_or(f64::NAN),
            n_samples: data.samples.len(),
            policy: GuidancePolicy::RandomSeeded.name().to_string(),
            noise_mode: None,
        };
        run.put("metrics.csv", report::metrics_csv(&clean).as_bytes())?;
        run.put("noise.csv", report::noise_csv(&rows).as_bytes())?;
        let variant = cfg.train.variant();
        write_quartiles(&mut run, variant.name(), &rows)?;
        let mut md = format!(
            "# Leave-one-person-out: {}\n\nEach row is a model trained without that person. Guidance noise `{}` on {:.0}% of guidance images.\n\n",
            variant.label(),
            cfg.noise.mode.name(),
            cfg.noise.fraction * 100.0
        );
        md.push_str(&report::noise_table_md(&rows));
        for f in folds.iter().filter(|f| f.failure.is_some()) {
            let _ = writeln!(
                md,
                "- fold {} failed: {}",
                f.subject,
                f.failure.as_deref().unwrap_or("")
            );
        }
        run.put(SUMMARY_FILE, md.as_bytes())?;
        run.put_results(&RunResults::Lopo {
            variant: variant.name().to_string(),
            folds,
            noise_mode: cfg.noise.mode.name().to_string(),
        })
    })();
    run.finish(outcome)
}

fn read_results(dir: &Path) -> Result<RunResults> {
    let path = dir.join(RESULTS_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Data(format!("{}: {e} (is this a finished run directory?)", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Names runs by variant, falling back to the directory name when variants repeat.
fn run_labels(dirs: &[PathBuf], results: &[RunResults]) -> Vec<String> {
    let names: Vec<&str> = results.iter().map(|r| r.variant()).collect();
    let unique = names.iter().collect::<std::collections::BTreeSet<_>>().len() == names.len();
    dirs.iter()
        .zip(&names)
        .map(|(d, n)| {
            if unique {
                n.to_string()
            } else {
                d.file_name()
                    .map_or_else(|| d.display().to_string(), |f| f.to_string_lossy().into_owned())
            }
        })
        .collect()
}

fn report_cmd(a: ReportArgs, argv: Vec<String>) -> Result<()> {
    let results: Vec<RunResults> = a.runs.iter().map(|d| read_results(d)).collect::<Result<_>>()?;
    let inputs: Vec<&Path> = a.runs.iter().map(PathBuf::as_path).collect();
    let mut run = RunDir::create(&a.out, a.force, &inputs, RunManifest::new("report", argv, 0))?;
    let outcome = (|| {
        if let [only] = a.runs.as_slice() {
            let summary = std::fs::read(only.join(SUMMARY_FILE))?;
            return run.put(SUMMARY_FILE, &summary);
        }
        let labels = run_labels(&a.runs, &results);
        let mut md = format!("# Comparison of {} runs\n\n", results.len());
        if let Some(noise) = results.iter().map(RunResults::noise_rows).collect::<Option<Vec<_>>>() {
            md.push_str(&report::noise_comparison_md(&labels, &noise));
            let _ = writeln!(md, "\n{}", report::REFERENCE_DISTANCES);
            let groups: Vec<(String, Vec<f64>)> = labels
                .iter()
                .zip(&noise)
                .map(|(l, rows)| (l.clone(), rows.iter().map(|r| r.distance).collect()))
                .collect();
            run.put("quartiles.csv", report::quartiles_csv(&groups).as_bytes())?;
        } else if let Some(tables) = results
            .iter()
            .map(RunResults::subject_table)
            .collect::<Option<Vec<_>>>()
        {
            md.push_str(&subject_comparison_md(&labels, &tables));
            let groups: Vec<(String, Vec<f64>)> = labels
                .iter()
                .zip(&tables)
                .map(|(l, t)| (l.clone(), t.rows.iter().map(|r| r.error).collect()))
                .collect();
            run.put("quartiles.csv", report::quartiles_csv(&groups).as_bytes())?;
        } else if results.iter().all(|r| matches!(r, RunResults::Sweep { .. })) {
            let mut surface = String::from("run,alpha,beta,error\n");
            for (label, r) in labels.iter().zip(&results) {
                if let RunResults::Sweep {
                    alphas,
                    betas,
                    cells,
                    best,
                    ..
                } = r
                {
                    let _ = writeln!(md, "## {label}\n");
                    md.push_str(&report::sweep_grid_md(alphas, betas, cells, *best));
                    md.push('\n');
                    for c in cells {
                        let e = c.error.map_or_else(String::new, |v| v.to_string());
                        let _ = writeln!(surface, "{label},{},{},{e}", c.alpha, c.beta);
                    }
                }
            }
            run.put("surface.csv", surface.as_bytes())?;
        } else if results.iter().all(|r| matches!(r, RunResults::Ablate { .. })) {
            for (label, r) in labels.iter().zip(&results) {
                if let RunResults::Ablate {
                    seeds,
                    rows,
                    exceptions,
                    ..
                } = r
                {
                    let _ = writeln!(md, "## {label}\n");
                    md.push_str(&report::ablation_md(rows, exceptions, seeds.len()));
                    md.push('\n');
                }
            }
        } else {
            let kinds: Vec<String> = labels
                .iter()
                .zip(&results)
                .map(|(l, r)| format!("{l} ({})", r.kind()))
                .collect();
            return Err(CliError::Usage(format!(
                "cannot combine runs of different kinds: {}",
                kinds.join(", ")
            )));
        }
        run.put(SUMMARY_FILE, md.as_bytes())
    })();
    run.finish(outcome)
}

fn subject_comparison_md(labels: &[String], tables: &[&SubjectTable]) -> String {
    let mut out = format!(
        "**{}**\n\n| Subject | Angular error (deg) |\n|---|---|\n",
        labels.join(" versus ")
    );
    let mut subjects: Vec<&str> = tables
        .iter()
        .flat_map(|t| t.rows.iter().map(|r| r.subject.as_str()))
        .collect();
    subjects.sort_unstable();
    subjects.dedup();
    for s in subjects {
        let cells: Vec<Option<f64>> = tables
            .iter()
            .map(|t| t.rows.iter().find(|r| r.subject == s).map(|r| r.error))
            .collect();
        let _ = writeln!(out, "| {s} | {} |", report::versus(&cells));
    }
    let avg: Vec<Option<f64>> = tables.iter().map(|t| Some(t.subject_average())).collect();
    let _ = writeln!(out, "| Average | {} |", report::versus(&avg));
    out
}
