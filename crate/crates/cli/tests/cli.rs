use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn edgelab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgelab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("EDGELAB_WORKERS")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

const SHORT: &str = r#"
[run]
task = "dyck"
seed = 7
steps = 60
checkpoint_interval = 20

[run.data]
n_train = 20
n_test = 100
"#;

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn malformed_config_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.toml",
        &format!("{SHORT}\n[run.optim]\nlr = 1e-3\nweight_decay = 1.0\nlearning_rat = 2\n"),
    );
    let out = edgelab(&["train", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
    assert!(text(&out).contains("learning_rat"), "{}", text(&out));

    let cfg = write_config(
        tmp.path(),
        "neg.toml",
        &format!("{SHORT}\n[run.optim]\nlr = -1.0\nweight_decay = 1.0\n"),
    );
    let out = edgelab(&["train", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
}

#[test]
fn usage_errors_exit_with_config_status() {
    let tmp = tempfile::tempdir().unwrap();
    let out = edgelab(&["train"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let out = edgelab(&["--help"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn rerun_gives_identical_logs_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "short.toml", SHORT);
    for dir in ["a", "b"] {
        let out = edgelab(
            &["train", cfg.to_str().unwrap(), "--out", dir, "--step-log"],
            tmp.path(),
        );
        assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    }
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for f in [
        "config.resolved",
        "metrics.log",
        "snapshots.log",
        "decomp.log",
        "summary.json",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    for phase in ["init", "pre_grok", "late"] {
        assert!(a.join("checkpoints").join(format!("{phase}.ckpt")).exists(), "{phase}");
    }
    let resolved = fs::read_to_string(a.join("config.resolved")).unwrap();
    assert!(
        resolved.contains("[run.model]") || resolved.contains("[model]"),
        "{resolved}"
    );

    let out = edgelab(&["analyze", "a"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(
        text(&out).contains("snapshots true, decompositions true"),
        "{}",
        text(&out)
    );

    for args in [
        vec!["ablate", "a", "--controls", "3", "--eval-limit", "50"],
        vec!["sweep", "a", "--k", "1", "--points", "5", "--eval-limit", "50"],
        vec!["sweep", "a", "--random", "3", "--points", "5", "--eval-limit", "50"],
        vec!["curvature", "a", "--random", "1", "--eval-limit", "50"],
        vec!["probe", "a", "--sequences", "40"],
        vec!["fourier", "a", "--eval-limit", "50", "--response-limit", "50"],
    ] {
        let out = edgelab(&args, tmp.path());
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", text(&out));
    }
    let out = edgelab(&["sweep", "a", "--k", "99"], tmp.path());
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));

    let out = edgelab(&["report", "a"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let reports = a.join("reports");
    for f in [
        "metrics.csv",
        "accuracy.svg",
        "grad_fraction.svg",
        "spectrum.svg",
        "rotation.svg",
        "ablation.svg",
        "probes.svg",
        "pathnorm.svg",
        "spectra.svg",
        "attention_layer0.svg",
        "sweep_loss.svg",
    ] {
        assert!(reports.join(f).exists(), "{f} missing");
    }
    let missing = fs::read_to_string(reports.join("missing.txt")).unwrap();
    assert!(missing.contains("wd_table.json"), "{missing}");

    let first = fs::read(reports.join("grad_fraction.svg")).unwrap();
    let out = edgelab(&["report", "a"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(first, fs::read(reports.join("grad_fraction.svg")).unwrap());
}

#[test]
fn report_on_empty_dir_lists_missing_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir(tmp.path().join("empty")).unwrap();
    let out = edgelab(&["report", "empty"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let t = text(&out);
    for f in [
        "config.resolved",
        "metrics.log",
        "snapshots.log",
        "decomp.log",
        "checkpoints",
    ] {
        assert!(t.contains(f), "{t}");
    }
}

#[test]
fn suite_check_fails_when_decayed_runs_do_not_grok() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{SHORT}\n[suite]\nseeds = [1, 2]\nweight_decays = [0.0, 1.0]\n");
    let cfg = write_config(tmp.path(), "suite.toml", &body);
    let out = Command::new(env!("CARGO_BIN_EXE_edgelab"))
        .args(["suite", cfg.to_str().unwrap(), "--out", "s", "--check"])
        .current_dir(tmp.path())
        .env("EDGELAB_WORKERS", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", text(&out));
    assert!(text(&out).contains("did not grok"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("s/suite.json")).unwrap()).unwrap();
    assert_eq!(manifest["cells"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["aggregates"]["hit_rate"][1]["runs"], 2);

    let out = edgelab(&["report", "s"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(tmp.path().join("s/reports/aggregates.csv").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_edgelab"))
        .args(["suite", cfg.to_str().unwrap()])
        .current_dir(tmp.path())
        .env("EDGELAB_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gapflow_writes_trajectories_and_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/gapflow.toml");
    let out = edgelab(&["gapflow", spec.to_str().unwrap(), "--out", "g"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let grid = fs::read_to_string(tmp.path().join("g/phase_grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 25);
    // no driving gives pure damping; strong driving without decay is gradient dominated
    assert!(
        grid.lines()
            .any(|l| l.starts_with("1,0,") && l.ends_with("compression")),
        "{grid}"
    );
    assert!(
        grid.lines().any(|l| l.starts_with("0,0.8,") && l.ends_with("mixed")),
        "{grid}"
    );
    assert!(tmp.path().join("g/trajectories.csv").exists());
    assert!(tmp.path().join("g/phase_grid.svg").exists());

    let bad = fs::read_to_string(&spec)
        .unwrap()
        .replace("field = \"grad_edge\"", "field = \"grad_egde\"");
    let bad_path = write_config(tmp.path(), "bad.toml", &bad);
    let out = edgelab(&["gapflow", bad_path.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out).contains("grad_egde"));
}
