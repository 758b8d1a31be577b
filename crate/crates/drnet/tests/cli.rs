//! End-to-end runs of the `drnet` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drnet::cli::{CHECKPOINT_FILE, RESULTS_FILE, SUMMARY_FILE};
use drnet::dataset::{load_dataset, save_dataset, SideFilter, LABELS_FILE};
use drnet::manifest::{RunManifest, MANIFEST_FILE};
use drnet::report::{quartiles, RunResults};
use drnet_core::evaluation::holdout_split;
use drnet_core::geometry::Convention;

const FAST: &[&str] = &["--set", "train.epochs=1", "--set", "train.batch_size=16"];

fn drnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drnet")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(args: &[&str]) {
    let o = drnet(args);
    assert_eq!(code(&o), 0, "drnet {args:?}: {}", stderr(&o));
}

fn synth(root: &Path, subjects: usize, per: usize) -> PathBuf {
    let d = root.join(format!("data-{subjects}x{per}"));
    ok(&[
        "synth",
        "--subjects",
        &subjects.to_string(),
        "--per-subject",
        &per.to_string(),
        "--seed",
        "4",
        "--out",
        s(&d),
    ]);
    d
}

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

/// Every file under `dir` with its bytes.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn results(dir: &Path) -> RunResults {
    serde_json::from_slice(&std::fs::read(dir.join(RESULTS_FILE)).unwrap()).unwrap()
}

#[test]
fn synth_rejects_a_single_subject() {
    let t = tempfile::tempdir().unwrap();
    let o = drnet(&[
        "synth",
        "--subjects",
        "1",
        "--per-subject",
        "10",
        "--out",
        s(&t.path().join("d")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("at least 2 subjects"), "{}", stderr(&o));
    assert!(!t.path().join("d").exists());
    let o = drnet(&[
        "synth",
        "--subjects",
        "3",
        "--per-subject",
        "2",
        "--out",
        s(&t.path().join("d")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("at least 4 images per subject"));
}

#[test]
fn synth_is_deterministic_and_writes_a_manifest() {
    let t = tempfile::tempdir().unwrap();
    let a = synth(t.path(), 3, 5);
    let b = t.path().join("again");
    ok(&[
        "synth",
        "--subjects",
        "3",
        "--per-subject",
        "5",
        "--seed",
        "4",
        "--out",
        s(&b),
    ]);
    assert_eq!(
        std::fs::read(a.join(LABELS_FILE)).unwrap(),
        std::fs::read(b.join(LABELS_FILE)).unwrap()
    );
    let m = RunManifest::read(&a).unwrap();
    let loaded = load_dataset(&a, Convention::CameraFacing, SideFilter::All).unwrap();
    assert_eq!(m.dataset.unwrap().sha256, loaded.fingerprint);
    assert_eq!(m.status, "ok");
    assert_eq!(loaded.samples.len(), 15);
}

#[test]
fn output_directories_need_force_and_a_manifest() {
    let t = tempfile::tempdir().unwrap();
    let data = synth(t.path(), 4, 6);
    let out = t.path().join("run");
    let args = with(&["train", "--data", s(&data), "--out", s(&out)], FAST);
    ok(&args);
    let o = drnet(&args);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--force"));
    ok(&with(&args, &["--force"]));

    let foreign = t.path().join("foreign");
    std::fs::create_dir(&foreign).unwrap();
    std::fs::write(foreign.join("notes.txt"), "keep").unwrap();
    let o = drnet(&with(
        &["train", "--data", s(&data), "--out", s(&foreign), "--force"],
        FAST,
    ));
    assert_eq!(code(&o), 1);
    assert_eq!(std::fs::read_to_string(foreign.join("notes.txt")).unwrap(), "keep");
}

#[test]
fn config_errors_are_usage_errors() {
    let t = tempfile::tempdir().unwrap();
    let data = synth(t.path(), 4, 6);
    let out = s(&t.path().join("o")).to_string();
    let o = drnet(&[
        "train",
        "--data",
        s(&data),
        "--out",
        &out,
        "--set",
        "train.learning_rate=1",
    ]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("train.learning_rate") && err.contains("train.lr0") && err.contains("eval.noise_mode"));

    let cfg = t.path().join("run.cfg");
    std::fs::write(&cfg, "# base\nloss.alpha = 0.5\nloss.beta = 2\n").unwrap();
    let o = drnet(&["train", "--data", s(&data), "--out", &out, "--config", s(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    assert_eq!(code(&drnet(&["train", "--bogus"])), 1);
    assert_eq!(code(&drnet(&["--help"])), 0);
}

#[test]
fn data_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let o = drnet(&[
        "train",
        "--data",
        s(&t.path().join("missing")),
        "--out",
        s(&t.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);

    let data = synth(t.path(), 4, 6);
    let labels = std::fs::read_to_string(data.join(LABELS_FILE)).unwrap();
    let broken = t.path().join("broken");
    std::fs::create_dir(&broken).unwrap();
    for e in std::fs::read_dir(&data).unwrap().flatten() {
        if e.path().is_dir() {
            let dst = broken.join(e.file_name());
            std::fs::create_dir(&dst).unwrap();
            for f in std::fs::read_dir(e.path()).unwrap().flatten() {
                std::fs::copy(f.path(), dst.join(f.file_name())).unwrap();
            }
        }
    }
    let mut lines: Vec<String> = labels.lines().map(String::from).collect();
    lines[4] = lines[4].replace(",left,", ",up,").replace(",right,", ",up,");
    std::fs::write(broken.join(LABELS_FILE), lines.join("\n") + "\n").unwrap();
    let o = drnet(&["train", "--data", s(&broken), "--out", s(&t.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("labels.csv:5:"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_3_and_is_recorded() {
    let t = tempfile::tempdir().unwrap();
    let data = synth(t.path(), 4, 6);
    let out = t.path().join("o");
    let o = drnet(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--set",
        "train.lr0=1e300",
        "--set",
        "train.grad_clip=none",
        "--set",
        "train.epochs=3",
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
    let m = RunManifest::read(&out).unwrap();
    assert!(m.status.starts_with("failed"));
    assert!(m.finished_unix_ms.is_some());
}

#[test]
fn train_writes_artifacts_with_a_complete_manifest() {
    let t = tempfile::tempdir().unwrap();
    let data = synth(t.path(), 4, 6);
    let out = t.path().join("o");
    ok(&with(
        &["train", "--data", s(&data), "--out", s(&out), "--seed", "9"],
        FAST,
    ));
    let m = RunManifest::read(&out).unwrap();
    assert_eq!(m.command, "train");
    assert_eq!(m.seed, 9);
    assert_eq!(m.status, "ok");
    assert!(m.argv.contains(&"train.epochs=1".to_string()));
    assert!(m.config.as_deref().unwrap().contains("train.seed = 9\n"));
    let fp = load_dataset(&data, Convention::CameraFacing, SideFilter::All)
        .unwrap()
        .fingerprint;
    assert_eq!(m.dataset.as_ref().unwrap().sha256, fp);
    for f in &m.outputs {
        assert!(out.join(f).is_file(), "{f}");
    }
    for f in [
        CHECKPOINT_FILE,
        "history.csv",
        "metrics.csv",
        SUMMARY_FILE,
        RESULTS_FILE,
        "config.cfg",
    ] {
        assert!(m.outputs.contains(&f.to_string()), "{f}");
    }
    for (f, header) in [
        ("history.csv", "epoch,lr,la,lb,total,train_angular_error"),
        ("metrics.csv", "subject,error"),
    ] {
        let text = std::fs::read_to_string(out.join(f)).unwrap();
        assert!(!text.contains('\r'));
        assert_eq!(text.lines().next(), Some(header));
    }
    // the effective config reproduces the run
    let again = t.path().join("again");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&again),
        "--config",
        s(&out.join("config.cfg")),
    ]);
    assert_eq!(
        std::fs::read(out.join(CHECKPOINT_FILE)).unwrap(),
        std::fs::read(again.join(CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn eval_of_a_checkpoint_matches_the_training_run() {
    let t = tempfile::tempdir().unwrap();
    let data = synth(t.path(), 4, 8);
    let out = t.path().join("o");
    ok(&with(&["train", "--data", s(&data), "--out", s(&out)], FAST));

    let samples = load_dataset(&data, Convention::CameraFacing, SideFilter::All)
        .unwrap()
        .samples;
    let (_, held) = holdout_split(&samples, 2).unwrap();
    let held_dir = t.path().join("held");
    save_dataset(&held_dir, &held).unwrap();
    let ckpt = out.join(CHECKPOINT_FILE);
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&held_dir)]);
    let default_out = out.join("eval-random_seeded");
    assert_eq!(
        std::fs::read(default_out.join("metrics.csv")).unwrap(),
        std::fs::read(out.join("metrics.csv")).unwrap()
    );

    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&held_dir),
        "--policy",
        "both",
    ]);
    let both = out.join("eval-both");
    let summary = std::fs::read_to_string(both.join(SUMMARY_FILE)).unwrap();
    assert!(summary.contains("| Person | No_Invalid_Image | Fixed_Invalid_Image | Distance |"));
    assert!(matches!(results(&both), RunResults::Noise { .. }));
    assert_eq!(
        code(&drnet(&[
            "eval",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&held_dir),
            "--policy",
            "worst"
        ])),
        1
    );
    assert_eq!(
        code(&drnet(&[
            "eval",
            "--checkpoint",
            s(&data.join(LABELS_FILE)),
            "--data",
            s(&held_dir)
        ])),
        2
    );
}

#[test]
fn inputs_are_never_modified() {
    let t = tempfile::tempdir().unwrap();
    let data = synth(t.path(), 4, 6);
    let before = snapshot(&data);
    let o = drnet(&with(
        &["train", "--data", s(&data), "--out", s(&data.join("run"))],
        FAST,
    ));
    assert_eq!(code(&o), 1);
    assert_eq!(
        code(&drnet(&with(
            &["train", "--data", s(&data), "--out", s(&data), "--force"],
            FAST
        ))),
        1
    );
    ok(&with(
        &["lopo", "--data", s(&data), "--out", s(&t.path().join("lopo"))],
        FAST,
    ));
    ok(&with(
        &["train", "--data", s(&data), "--out", s(&t.path().join("tr"))],
        FAST,
    ));
    assert_eq!(snapshot(&data), before);
}

#[test]
fn sweep_results_do_not_depend_on_jobs() {
    let t = tempfile::tempdir().unwrap();
    let data = synth(t.path(), 4, 6);
    let run = |jobs: &str, name: &str| {
        let out = t.path().join(name);
        ok(&with(
            &[
                "sweep",
                "--data",
                s(&data),
                "--out",
                s(&out),
                "--alphas",
                "0.5,1",
                "--betas",
                "0.5,1",
                "--jobs",
                jobs,
            ],
            FAST,
        ));
        out
    };
    let (a, b) = (run("1", "one"), run("3", "three"));
    let surface = std::fs::read_to_string(a.join("surface.csv")).unwrap();
    assert_eq!(surface, std::fs::read_to_string(b.join("surface.csv")).unwrap());
    assert_eq!(surface.lines().next(), Some("alpha,beta,error"));
    assert_eq!(surface.lines().count(), 5);
    assert_eq!(
        code(&drnet(&[
            "sweep",
            "--data",
            s(&data),
            "--out",
            s(&t.path().join("x")),
            "--alphas",
            "0.5,2"
        ])),
        1
    );
}

#[test]
fn ablation_lists_every_requested_variant() {
    let t = tempfile::tempdir().unwrap();
    let data = synth(t.path(), 4, 8);
    let out = t.path().join("ab");
    ok(&with(
        &[
            "ablate",
            "--data",
            s(&data),
            "--out",
            s(&out),
            "--variants",
            "drnet,two_stream,no_ad",
            "--seeds",
            "2",
            "--jobs",
            "3",
        ],
        FAST,
    ));
    let summary = std::fs::read_to_string(out.join(SUMMARY_FILE)).unwrap();
    assert!(summary.contains("| Method | Synthetic (L/R/All) |"));
    for label in ["| DRNet |", "| Two-stream |", "| DRNet_NoAD |"] {
        assert!(summary.contains(label), "{label}");
    }
    let RunResults::Ablate { seeds, rows, gamma, .. } = results(&out) else {
        panic!("wrong kind")
    };
    assert_eq!(seeds.len(), 2);
    assert!(rows.iter().all(|r| r.per_seed_all.len() == 2 && r.all.is_some()));
    assert!(gamma.iter().all(Option::is_some));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3 * 2);
    assert_eq!(
        code(&drnet(&[
            "ablate",
            "--data",
            s(&data),
            "--out",
            s(&t.path().join("y")),
            "--variants",
            "resnet"
        ])),
        1
    );
}

/// numpy's default percentile, or the same rule written out when numpy is unavailable.
fn reference_quartiles(values: &[f64]) -> Vec<f64> {
    let list = values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",");
    let script = format!(
        "import numpy as np\nv = np.array([{list}])\nprint(' '.join(repr(float(x)) for x in [v.min(), *np.percentile(v, [25, 50, 75]), v.max()]))"
    );
    if let Ok(o) = Command::new("python3").args(["-c", &script]).output() {
        if o.status.success() {
            return String::from_utf8(o.stdout)
                .unwrap()
                .split_whitespace()
                .map(|x| x.parse().unwrap())
                .collect();
        }
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let i = pos as usize;
        let frac = pos - i as f64;
        if i + 1 < v.len() {
            v[i] * (1.0 - frac) + v[i + 1] * frac
        } else {
            v[i]
        }
    };
    vec![v[0], at(0.25), at(0.5), at(0.75), v[v.len() - 1]]
}

#[test]
fn report_merges_noise_runs_and_matches_independent_quartiles() {
    let t = tempfile::tempdir().unwrap();
    let data = synth(t.path(), 4, 8);
    let run = |variant: &str| {
        let out = t.path().join(variant);
        ok(&with(
            &[
                "lopo",
                "--data",
                s(&data),
                "--out",
                s(&out),
                "--set",
                &format!("model.variant={variant}"),
            ],
            FAST,
        ));
        out
    };
    let (two, dr) = (run("two_stream"), run("drnet"));

    let single = t.path().join("single");
    ok(&["report", s(&dr), "--out", s(&single)]);
    assert_eq!(
        std::fs::read(single.join(SUMMARY_FILE)).unwrap(),
        std::fs::read(dr.join(SUMMARY_FILE)).unwrap()
    );

    let merged = t.path().join("merged");
    ok(&["report", s(&two), s(&dr), "--out", s(&merged)]);
    let summary = std::fs::read_to_string(merged.join(SUMMARY_FILE)).unwrap();
    assert!(summary.contains("**two_stream versus drnet**"));
    assert!(summary.contains("0.34-0.16") && summary.contains("0.73-0.41"));
    assert_eq!(summary.matches("| p0").count(), 4);

    let csv = std::fs::read_to_string(merged.join("quartiles.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("variant,min,q1,median,q3,max"));
    for (line, dir) in csv.lines().skip(1).zip([&two, &dr]) {
        let distances: Vec<f64> = results(dir).noise_rows().unwrap().iter().map(|r| r.distance).collect();
        let emitted: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        let expected = reference_quartiles(&distances);
        assert_eq!(emitted.len(), 5);
        for (a, b) in emitted.iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-9, "{line}: {emitted:?} vs {expected:?}");
        }
        assert_eq!(quartiles(&distances).unwrap().to_vec(), emitted);
    }

    let tr = t.path().join("tr");
    ok(&with(&["train", "--data", s(&data), "--out", s(&tr)], FAST));
    let o = drnet(&["report", s(&dr), s(&tr), "--out", s(&t.path().join("mixed"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("cannot combine"));
    let o = drnet(&["report", s(&data), "--out", s(&t.path().join("nores"))]);
    assert_eq!(code(&o), 2);
    assert!(!t.path().join("mixed").join(SUMMARY_FILE).exists());
    assert!(t.path().join("mixed").join(MANIFEST_FILE).exists());
}

#[test]
fn lopo_needs_three_subjects() {
    let t = tempfile::tempdir().unwrap();
    let data = synth(t.path(), 2, 6);
    let o = drnet(&with(
        &["lopo", "--data", s(&data), "--out", s(&t.path().join("o"))],
        FAST,
    ));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("at least 3 subjects"));
}

#[test]
fn side_filter_restricts_training_data() {
    let t = tempfile::tempdir().unwrap();
    let data = synth(t.path(), 3, 12);
    let out = t.path().join("left");
    ok(&with(
        &[
            "train",
            "--data",
            s(&data),
            "--out",
            s(&out),
            "--set",
            "data.side=left",
            "--set",
            "eval.holdout=1",
        ],
        FAST,
    ));
    let RunResults::Train {
        heldout: Some(table), ..
    } = results(&out)
    else {
        panic!("no held-out table")
    };
    let left = load_dataset(&data, Convention::CameraFacing, SideFilter::Left)
        .unwrap()
        .samples;
    assert_eq!(table.n_samples, left.iter().filter(|x| x.subject() == "p02").count());
}
