//! Run results and their CSV / markdown renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use drnet_core::evaluation::{EvalReport, NoiseDistance};
use drnet_core::training::TrainHistory;
use serde::{Deserialize, Serialize};

/// Per-subject errors of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTable {
    pub rows: Vec<SubjectRow>,
    /// Sample-weighted mean, degrees.
    pub overall_mean: f64,
    pub n_samples: usize,
    pub policy: String,
    pub noise_mode: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRow {
    pub subject: String,
    pub error: f64,
    pub n: usize,
}

impl From<&EvalReport> for SubjectTable {
    fn from(r: &EvalReport) -> Self {
        Self {
            rows: r
                .per_subject
                .iter()
                .map(|(k, v)| SubjectRow {
                    subject: k.clone(),
                    error: v.mean,
                    n: v.n,
                })
                .collect(),
            overall_mean: r.overall_mean,
            n_samples: r.n_samples,
            policy: r.guidance_policy.name().to_string(),
            noise_mode: r.noise_mode.map(|m| m.name().to_string()),
        }
    }
}

impl SubjectTable {
    pub fn subject_average(&self) -> f64 {
        self.rows.iter().map(|r| r.error).sum::<f64>() / self.rows.len() as f64
    }
}

/// Clean versus noisy-guidance errors of one person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub subject: String,
    pub clean: f64,
    pub noisy: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseTable {
    pub rows: Vec<NoiseRow>,
    pub noise_mode: String,
}

impl NoiseTable {
    pub fn from_distance(d: &NoiseDistance, mode: &str) -> Self {
        Self {
            rows: d
                .per_subject
                .iter()
                .map(|(k, dist)| NoiseRow {
                    subject: k.clone(),
                    clean: d.clean.per_subject[k].mean,
                    noisy: d.noisy.per_subject[k].mean,
                    distance: *dist,
                })
                .collect(),
            noise_mode: mode.to_string(),
        }
    }

    /// Column averages `(clean, noisy, distance)` over persons.
    pub fn averages(&self) -> (f64, f64, f64) {
        let n = self.rows.len() as f64;
        let sum = |f: fn(&NoiseRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        (sum(|r| r.clean), sum(|r| r.noisy), sum(|r| r.distance))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCellResult {
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub error: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub label: String,
    /// Seed-averaged errors on all / left / right held-out images; `None` when unavailable.
    pub all: Option<f64>,
    pub left: Option<f64>,
    pub right: Option<f64>,
    pub per_seed_all: Vec<Option<f64>>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub subject: String,
    pub noise: Option<NoiseRow>,
    pub failure: Option<String>,
}

/// Machine-readable results of a run, stored as `results.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunResults {
    Train {
        variant: String,
        heldout: Option<SubjectTable>,
    },
    Eval {
        variant: String,
        table: SubjectTable,
    },
    Noise {
        variant: String,
        table: NoiseTable,
    },
    Sweep {
        variant: String,
        alphas: Vec<f64>,
        betas: Vec<f64>,
        cells: Vec<SweepCellResult>,
        best: Option<(f64, f64)>,
    },
    Ablate {
        seeds: Vec<u64>,
        rows: Vec<AblationRow>,
        exceptions: Vec<String>,
        gamma: Vec<Option<f64>>,
    },
    Lopo {
        variant: String,
        folds: Vec<FoldResult>,
        noise_mode: String,
    },
}

impl RunResults {
    pub fn kind(&self) -> &'static str {
        match self {
            RunResults::Train { .. } => "train",
            RunResults::Eval { .. } => "eval",
            RunResults::Noise { .. } => "noise",
            RunResults::Sweep { .. } => "sweep",
            RunResults::Ablate { .. } => "ablate",
            RunResults::Lopo { .. } => "lopo",
        }
    }

    /// Label used for this run in comparisons.
    pub fn variant(&self) -> &str {
        match self {
            RunResults::Train { variant, .. }
            | RunResults::Eval { variant, .. }
            | RunResults::Noise { variant, .. }
            | RunResults::Sweep { variant, .. }
            | RunResults::Lopo { variant, .. } => variant,
            RunResults::Ablate { .. } => "ablation",
        }
    }

    /// Per-person noise rows (noise and lopo runs).
    pub fn noise_rows(&self) -> Option<Vec<NoiseRow>> {
        match self {
            RunResults::Noise { table, .. } => Some(table.rows.clone()),
            RunResults::Lopo { folds, .. } => Some(folds.iter().filter_map(|f| f.noise.clone()).collect()),
            _ => None,
        }
    }

    /// Per-subject errors (train with held-out data, eval).
    pub fn subject_table(&self) -> Option<&SubjectTable> {
        match self {
            RunResults::Train { heldout, .. } => heldout.as_ref(),
            RunResults::Eval { table, .. } => Some(table),
            _ => None,
        }
    }
}

/// Published full-scale distance averages, shown next to noise comparisons as context.
pub const REFERENCE_DISTANCES: &str = "Reference full-scale averages of the distance (two-stream vs DRNet): \
MPIIGaze 0.34-0.16, Eyediap 0.73-0.41. They are context for reading the table, not targets for this run.";

pub fn f2(v: f64) -> String {
    format!("{v:.2}")
}

fn opt2(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), f2)
}

/// Joins one value per compared run in the "A-B" notation.
pub fn versus(values: &[Option<f64>]) -> String {
    values.iter().map(|v| opt2(*v)).collect::<Vec<_>>().join("-")
}

pub fn history_csv(h: &TrainHistory) -> String {
    let mut out = String::from("epoch,lr,la,lb,total,train_angular_error\n");
    for r in &h.records {
        let la = r.la.map_or_else(String::new, |v| v.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.lr, la, r.lb, r.total, r.train_angular_error
        );
    }
    out
}

pub fn metrics_csv(t: &SubjectTable) -> String {
    let mut out = String::from("subject,error\n");
    for r in &t.rows {
        let _ = writeln!(out, "{},{}", r.subject, r.error);
    }
    out
}

pub fn noise_csv(t: &[NoiseRow]) -> String {
    let mut out = String::from("subject,clean,noisy,distance\n");
    for r in t {
        let _ = writeln!(out, "{},{},{},{}", r.subject, r.clean, r.noisy, r.distance);
    }
    out
}

pub fn surface_csv(cells: &[SweepCellResult]) -> String {
    let mut out = String::from("alpha,beta,error\n");
    for c in cells {
        let e = c.error.map_or_else(String::new, |v| v.to_string());
        let _ = writeln!(out, "{},{},{}", c.alpha, c.beta, e);
    }
    out
}

pub fn subject_table_md(t: &SubjectTable) -> String {
    let mut out = String::from("| Subject | Angular error (deg) | Images |\n|---|---|---|\n");
    for r in &t.rows {
        let _ = writeln!(out, "| {} | {} | {} |", r.subject, f2(r.error), r.n);
    }
    let _ = writeln!(out, "| Average | {} | {} |", f2(t.subject_average()), t.n_samples);
    let _ = writeln!(
        out,
        "\nSample-weighted mean: {:.4} deg over {} images (guidance policy `{}`{}).",
        t.overall_mean,
        t.n_samples,
        t.policy,
        t.noise_mode
            .as_ref()
            .map_or(String::new(), |m| format!(", noise `{m}`"))
    );
    out
}

/// One person per row: clean error, noisy-guidance error and their distance.
pub fn noise_table_md(rows: &[NoiseRow]) -> String {
    let mut out = String::from("| Person | No_Invalid_Image | Fixed_Invalid_Image | Distance |\n|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} |",
            r.subject,
            f2(r.clean),
            f2(r.noisy),
            f2(r.distance)
        );
    }
    if !rows.is_empty() {
        let t = NoiseTable {
            rows: rows.to_vec(),
            noise_mode: String::new(),
        };
        let (c, n, d) = t.averages();
        let _ = writeln!(out, "| Average | {} | {} | {} |", f2(c), f2(n), f2(d));
    }
    out
}

/// Several runs side by side, every cell in "A-B" notation.
pub fn noise_comparison_md(labels: &[String], runs: &[Vec<NoiseRow>]) -> String {
    let mut out = format!(
        "**{}**\n\n| Person | No_Invalid_Image | Fixed_Invalid_Image | Distance |\n|---|---|---|---|\n",
        labels.join(" versus ")
    );
    let maps: Vec<BTreeMap<&str, &NoiseRow>> = runs
        .iter()
        .map(|rows| rows.iter().map(|r| (r.subject.as_str(), r)).collect())
        .collect();
    let mut persons: Vec<&str> = maps.iter().flat_map(|m| m.keys().copied()).collect();
    persons.sort_unstable();
    persons.dedup();
    let pick = |p: &str, f: fn(&NoiseRow) -> f64| -> Vec<Option<f64>> {
        maps.iter().map(|m| m.get(p).map(|r| f(r))).collect()
    };
    for p in &persons {
        let _ = writeln!(
            out,
            "| {p} | {} | {} | {} |",
            versus(&pick(p, |r| r.clean)),
            versus(&pick(p, |r| r.noisy)),
            versus(&pick(p, |r| r.distance))
        );
    }
    let avg = |f: fn(&NoiseRow) -> f64| -> Vec<Option<f64>> {
        runs.iter()
            .map(|rows| (!rows.is_empty()).then(|| rows.iter().map(f).sum::<f64>() / rows.len() as f64))
            .collect()
    };
    let _ = writeln!(
        out,
        "| Average | {} | {} | {} |",
        versus(&avg(|r| r.clean)),
        versus(&avg(|r| r.noisy)),
        versus(&avg(|r| r.distance))
    );
    let _ = writeln!(
        out,
        "\nNo_Invalid_Image and Fixed_Invalid_Image are the errors with clean and noisy guidance images. \
Distance is their absolute difference per person. (-): versus."
    );
    out
}

/// alpha rows by beta columns; the best cell in bold, failed cells as "-".
pub fn sweep_grid_md(alphas: &[f64], betas: &[f64], cells: &[SweepCellResult], best: Option<(f64, f64)>) -> String {
    let mut out = String::from("| alpha \\ beta |");
    for b in betas {
        let _ = write!(out, " {b} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(betas.len()));
    out.push('\n');
    for &a in alphas {
        let _ = write!(out, "| {a} |");
        for &b in betas {
            let cell = cells.iter().find(|c| c.alpha == a && c.beta == b);
            let text = match cell.and_then(|c| c.error) {
                Some(e) if best == Some((a, b)) => format!("**{}**", f2(e)),
                Some(e) => f2(e),
                None => "-".to_string(),
            };
            let _ = write!(out, " {text} |");
        }
        out.push('\n');
    }
    match best {
        Some((a, b)) => {
            let _ = writeln!(
                out,
                "\nBest cell: alpha = {a}, beta = {b} (ties go to the larger alpha, then the larger beta)."
            );
        }
        None => out.push_str("\nNo cell completed.\n"),
    }
    let failed: Vec<&SweepCellResult> = cells.iter().filter(|c| c.failure.is_some()).collect();
    for c in failed {
        let _ = writeln!(
            out,
            "- cell alpha = {}, beta = {} failed: {}",
            c.alpha,
            c.beta,
            c.failure.as_deref().unwrap_or("")
        );
    }
    out
}

pub fn ablation_md(rows: &[AblationRow], exceptions: &[String], seeds: usize) -> String {
    let mut out = String::from("| Method | Synthetic (L/R/All) |\n|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {}/{}/{} |",
            r.label,
            opt2(r.left),
            opt2(r.right),
            opt2(r.all)
        );
    }
    let _ = writeln!(out, "\nErrors in degrees on held-out subjects, averaged over {seeds} seed(s). \"-\" marks an empty or failed split.");
    if exceptions.is_empty() {
        out.push_str("\nDRNet has the lowest All error of the compared variants.\n");
    } else {
        let _ = writeln!(
            out,
            "\nFlagged: lower All error than DRNet for {}.",
            exceptions.join(", ")
        );
    }
    for r in rows {
        for f in &r.failures {
            let _ = writeln!(out, "- {} failed: {f}", r.label);
        }
    }
    out
}

/// `(min, q1, median, q3, max)` with linear interpolation between order statistics.
pub fn quartiles(values: &[f64]) -> Option<[f64; 5]> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (v.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    Some([v[0], q(0.25), q(0.5), q(0.75), v[v.len() - 1]])
}

pub fn quartiles_csv(groups: &[(String, Vec<f64>)]) -> String {
    let mut out = String::from("variant,min,q1,median,q3,max\n");
    for (name, values) in groups {
        if let Some(q) = quartiles(values) {
            let _ = writeln!(out, "{name},{},{},{},{},{}", q[0], q[1], q[2], q[3], q[4]);
        }
    }
    out
}
