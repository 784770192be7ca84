use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use edgelab::decomp::UpdateDecomposition;
use edgelab::interventions::{SweepCurve, WdRow};
use edgelab::pipeline::AblationStudy;
use edgelab::rundir::{
    self, RunSummary, CHECKPOINT_DIR, CONFIG_FILE, DECOMP_LOG, METRICS_LOG, REPORT_DIR, SNAPSHOTS_LOG, SUMMARY_FILE,
};
use edgelab::spectral::SnapshotRecord;
use edgelab::trainer::MetricsRecord;
use serde::de::DeserializeOwned;

use crate::measure::{CurvatureSet, FourierSet, ProbeSet, CURVATURE_FILE, FOURIER_FILE, WD_FILE};
use crate::output::{num, opt, write_svg, Table};
use crate::runs::{SuiteManifest, ABLATION_FILE, PROBES_FILE, SUITE_FILE};
use crate::svg::{BarChart, Heatmap, LineChart, Series};

const DIRECTIONS: usize = 3;
pub const MISSING_FILE: &str = "missing.txt";

/// Collects artifacts a report could not use.
struct Missing(Vec<String>);

impl Missing {
    fn check(&mut self, path: &Path, name: &str) -> bool {
        let found = path.exists();
        if !found {
            self.0.push(format!("{name}: not found"));
        }
        found
    }

    fn keep<T>(&mut self, name: &str, r: Result<T, rundir::RunDirError>) -> Option<T> {
        r.map_err(|e| self.0.push(format!("{name}: unreadable ({e})"))).ok()
    }

    fn read<T: DeserializeOwned>(&mut self, path: &Path, name: &str) -> Option<T> {
        if !self.check(path, name) {
            return None;
        }
        self.keep(name, rundir::read_json(path))
    }

    fn lines<T: DeserializeOwned>(&mut self, path: &Path, name: &str) -> Option<Vec<T>> {
        if !self.check(path, name) {
            return None;
        }
        self.keep(name, rundir::read_jsonl(path))
    }
}

pub fn report(dir: &Path) -> anyhow::Result<()> {
    if !dir.is_dir() {
        anyhow::bail!("{} is not a directory", dir.display());
    }
    if dir.join(SUITE_FILE).exists() {
        return suite_report(dir);
    }
    let missing = run_report(dir)?;
    if missing.is_empty() {
        println!("report complete: {}", dir.join(REPORT_DIR).display());
    } else {
        println!("report written with {} missing artifacts:", missing.len());
        for m in &missing {
            println!("  {m}");
        }
    }
    Ok(())
}

/// Writes every table and plot the run directory supports; returns what was missing.
pub fn run_report(dir: &Path) -> anyhow::Result<Vec<String>> {
    let core = [
        CONFIG_FILE,
        METRICS_LOG,
        SNAPSHOTS_LOG,
        DECOMP_LOG,
        SUMMARY_FILE,
        CHECKPOINT_DIR,
    ];
    if core.iter().all(|f| !dir.join(f).exists()) {
        anyhow::bail!("{} holds no run artifacts; missing: {}", dir.display(), core.join(", "));
    }
    let out = dir.join(REPORT_DIR);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut missing = Missing(Vec::new());
    if !dir.join(CONFIG_FILE).exists() {
        missing.0.push(format!("{CONFIG_FILE}: not found"));
    }
    if !dir.join(CHECKPOINT_DIR).is_dir() {
        missing.0.push(format!("{CHECKPOINT_DIR}/: not found"));
    }
    let summary: Option<RunSummary> = missing.read(&dir.join(SUMMARY_FILE), SUMMARY_FILE);
    let grok = summary.as_ref().and_then(|s| s.grok_step);
    let flip = summary.as_ref().and_then(|s| s.flip_step);
    let marks = |m: &mut Vec<(f64, String)>| {
        if let Some(g) = grok {
            m.push((g as f64, "grok".into()));
        }
        if let Some(f) = flip {
            m.push((f as f64, "flip".into()));
        }
    };

    if let Some(metrics) = missing.lines::<MetricsRecord>(&dir.join(METRICS_LOG), METRICS_LOG) {
        let mut t = Table::new(&["step", "train_loss", "train_acc", "test_loss", "test_acc", "param_norm"]);
        for m in &metrics {
            t.push(vec![
                m.step.to_string(),
                num(m.train_loss),
                num(m.train_acc),
                num(m.test_loss),
                num(m.test_acc),
                num(m.param_norm),
            ]);
        }
        t.write(&out.join("metrics.csv"))?;
        let mut chart = LineChart {
            title: "accuracy".into(),
            x_label: "step".into(),
            y_label: "accuracy".into(),
            series: vec![
                Series::line("train", metrics.iter().map(|m| (m.step as f64, m.train_acc)).collect()),
                Series::line("test", metrics.iter().map(|m| (m.step as f64, m.test_acc)).collect()),
            ],
            ..Default::default()
        };
        marks(&mut chart.marks);
        write_svg(&out.join("accuracy.svg"), &chart.render())?;
    }

    if let Some(decomps) = missing.lines::<UpdateDecomposition>(&dir.join(DECOMP_LOG), DECOMP_LOG) {
        let mut t = Table::new(&["step", "k", "a_grad", "a_wd", "grad_fraction", "alignment"]);
        for d in &decomps {
            for s in &d.directions {
                t.push(vec![
                    d.step.to_string(),
                    s.k.to_string(),
                    num(s.a_grad),
                    num(s.a_wd),
                    opt(s.grad_fraction),
                    format!("{:?}", s.alignment).to_lowercase(),
                ]);
            }
        }
        t.write(&out.join("grad_fraction.csv"))?;
        let mut chart = LineChart {
            title: "gradient share of the update".into(),
            x_label: "step".into(),
            y_label: "grad fraction".into(),
            series: (1..=DIRECTIONS)
                .map(|k| {
                    Series::line(
                        &format!("v{k}"),
                        decomps
                            .iter()
                            .filter_map(|d| Some((d.step as f64, d.fraction(k)?)))
                            .collect(),
                    )
                })
                .collect(),
            ..Default::default()
        };
        marks(&mut chart.marks);
        write_svg(&out.join("grad_fraction.svg"), &chart.render())?;
    }

    if let Some(snaps) = missing.lines::<SnapshotRecord>(&dir.join(SNAPSHOTS_LOG), SNAPSHOTS_LOG) {
        let mut t = Table::new(&[
            "step", "sigma1", "sigma2", "sigma3", "g23", "k_star", "rot1", "rot2", "rot3",
        ]);
        let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(f64::NAN);
        let rot = |s: &SnapshotRecord, i: usize| s.rotation.get(i).copied().flatten();
        for s in &snaps {
            t.push(vec![
                s.step.to_string(),
                num(at(&s.sigma, 0)),
                num(at(&s.sigma, 1)),
                num(at(&s.sigma, 2)),
                num(s.g23),
                s.k_star.to_string(),
                opt(rot(s, 0)),
                opt(rot(s, 1)),
                opt(rot(s, 2)),
            ]);
        }
        t.write(&out.join("spectrum.csv"))?;
        let mut series: Vec<Series> = (0..DIRECTIONS)
            .map(|i| {
                Series::line(
                    &format!("sigma{}", i + 1),
                    snaps.iter().map(|s| (s.step as f64, at(&s.sigma, i))).collect(),
                )
            })
            .collect();
        series.push(Series::line(
            "g23",
            snaps.iter().map(|s| (s.step as f64, s.g23)).collect(),
        ));
        let mut chart = LineChart {
            title: "singular values and gap".into(),
            x_label: "step".into(),
            y_label: "value (log)".into(),
            series,
            log_y: true,
            ..Default::default()
        };
        marks(&mut chart.marks);
        write_svg(&out.join("spectrum.svg"), &chart.render())?;
        let mut chart = LineChart {
            title: "direction rotation between windows".into(),
            x_label: "step".into(),
            y_label: "degrees".into(),
            series: (0..DIRECTIONS)
                .map(|i| {
                    Series::line(
                        &format!("v{}", i + 1),
                        snaps.iter().filter_map(|s| Some((s.step as f64, rot(s, i)?))).collect(),
                    )
                })
                .collect(),
            ..Default::default()
        };
        marks(&mut chart.marks);
        write_svg(&out.join("rotation.svg"), &chart.render())?;
    }

    if let Some(a) = missing.read::<AblationStudy>(&out.join(ABLATION_FILE), ABLATION_FILE) {
        let deltas: Vec<f64> = a.controls.iter().map(|c| c.delta_acc).collect();
        let lo = deltas.iter().copied().fold(0.0, f64::min);
        let hi = deltas.iter().copied().fold(0.0, f64::max);
        let mean = if deltas.is_empty() {
            0.0
        } else {
            deltas.iter().sum::<f64>() / deltas.len() as f64
        };
        let chart = BarChart {
            title: format!("ablation of the top {} directions at step {}", a.dims, a.step),
            y_label: "delta accuracy".into(),
            labels: vec!["edge".into(), "random mean".into()],
            values: vec![a.edge.delta_acc, mean],
            errors: None,
            band: Some((lo, hi, "random range".into())),
        };
        write_svg(&out.join("ablation.svg"), &chart.render())?;
    }

    if let Some(p) = missing.read::<ProbeSet>(&out.join(PROBES_FILE), PROBES_FILE) {
        let rows: Vec<_> = p.depth.iter().chain(&p.compositional).collect();
        let chart = BarChart {
            title: format!("probe R² at block {} (step {})", p.layer, p.step),
            y_label: "held-out R²".into(),
            labels: rows.iter().map(|r| format!("{} {}", r.kind.name(), r.target)).collect(),
            values: rows.iter().map(|r| r.test_r2).collect(),
            ..Default::default()
        };
        write_svg(&out.join("probes.svg"), &chart.render())?;
    }

    if let Some(c) = missing.read::<CurvatureSet>(&out.join(CURVATURE_FILE), CURVATURE_FILE) {
        let chart = LineChart {
            title: "update size against function change".into(),
            x_label: "sigma".into(),
            y_label: "|delta loss| (log)".into(),
            series: vec![Series::scatter(
                "directions",
                c.pathnorm.iter().map(|r| (r.sigma, r.delta_loss)).collect(),
            )],
            log_y: true,
            ..Default::default()
        };
        write_svg(&out.join("pathnorm.svg"), &chart.render())?;
        let chart = BarChart {
            title: format!("directional curvature at step {}", c.step),
            y_label: "second difference".into(),
            labels: c.readings.iter().map(|r| r.direction.clone()).collect(),
            values: c.readings.iter().map(|r| r.value).collect(),
            ..Default::default()
        };
        write_svg(&out.join("curvature.svg"), &chart.render())?;
    }

    if let Some(f) = missing.read::<FourierSet>(&out.join(FOURIER_FILE), FOURIER_FILE) {
        let chart = LineChart {
            title: format!("positional power, mean removed (step {})", f.step),
            x_label: "frequency".into(),
            y_label: "share".into(),
            series: f
                .spectra
                .iter()
                .map(|s| {
                    Series::line(
                        &format!("layer {}", s.layer),
                        s.centered_fractions
                            .iter()
                            .enumerate()
                            .map(|(w, v)| (w as f64, *v))
                            .collect(),
                    )
                })
                .collect(),
            ..Default::default()
        };
        write_svg(&out.join("spectra.svg"), &chart.render())?;
        for a in &f.attention {
            let Some(first) = a.mean_maps.first() else { continue };
            let n = (first.len() as f64).sqrt().round() as usize;
            let heads = a.mean_maps.len() as f64;
            let values = (0..first.len())
                .map(|i| a.mean_maps.iter().map(|m| m[i]).sum::<f64>() / heads)
                .collect();
            let heat = Heatmap {
                title: format!("layer {} mean attention (entropy {:.3})", a.layer, a.entropy),
                rows: n,
                cols: n,
                values,
            };
            write_svg(&out.join(format!("attention_layer{}.svg", a.layer)), &heat.render())?;
        }
        if let Some(func) = &f.functional {
            let chart = LineChart {
                title: format!(
                    "edge response per label (peak {}, elevation {:.2})",
                    func.edge.fourier.peak, func.edge.fourier.elevation
                ),
                x_label: "label".into(),
                y_label: "mean squared response".into(),
                series: std::iter::once(&func.edge)
                    .chain(&func.bulk)
                    .map(|d| {
                        Series::line(
                            &format!("v{}", d.k),
                            d.fourier
                                .means
                                .iter()
                                .enumerate()
                                .map(|(i, v)| (i as f64, *v))
                                .collect(),
                        )
                    })
                    .collect(),
                log_y: true,
                ..Default::default()
            };
            write_svg(&out.join("edge_function.svg"), &chart.render())?;
        }
    }

    if let Some(rows) = missing.read::<Vec<WdRow>>(&out.join(WD_FILE), WD_FILE) {
        let mut t = Table::new(&["weight_decay", "accuracy", "depth_r2", "entropy", "param_norm"]);
        for r in &rows {
            t.push(vec![
                num(r.weight_decay),
                num(r.accuracy),
                num(r.depth_r2),
                num(r.entropy),
                num(r.param_norm),
            ]);
        }
        t.write(&out.join("wd_table.csv"))?;
        let chart = BarChart {
            title: "depth probe R² after continued training".into(),
            y_label: "linear R²".into(),
            labels: rows.iter().map(|r| format!("wd {}", r.weight_decay)).collect(),
            values: rows.iter().map(|r| r.depth_r2).collect(),
            ..Default::default()
        };
        write_svg(&out.join("wd_table.svg"), &chart.render())?;
    }

    let mut sweeps = Vec::new();
    if let Ok(entries) = fs::read_dir(&out) {
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                name.starts_with("sweep-") && name.ends_with(".json")
            })
            .collect();
        paths.sort();
        for p in paths {
            let name = p
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("")
                .trim_end_matches(".json")
                .to_string();
            if let Some(c) = missing.read::<SweepCurve>(&p, &name) {
                sweeps.push((name, c));
            }
        }
    }
    if sweeps.is_empty() {
        missing.0.push("sweep-*.json: not found".into());
    } else {
        for (metric, pick) in [("loss", 0), ("kl", 1)] {
            let chart = LineChart {
                title: format!("{metric} along swept directions"),
                x_label: "eps".into(),
                y_label: metric.into(),
                series: sweeps
                    .iter()
                    .map(|(name, c)| {
                        let ys = if pick == 0 { &c.loss } else { &c.kl };
                        Series::line(
                            name.trim_start_matches("sweep-"),
                            c.eps.iter().copied().zip(ys.iter().copied()).collect(),
                        )
                    })
                    .collect(),
                ..Default::default()
            };
            write_svg(&out.join(format!("sweep_{metric}.svg")), &chart.render())?;
        }
    }

    let text: String = missing.0.iter().map(|m| format!("{m}\n")).collect();
    fs::write(out.join(MISSING_FILE), text).with_context(|| format!("writing {}", out.join(MISSING_FILE).display()))?;
    Ok(missing.0)
}

fn suite_report(dir: &Path) -> anyhow::Result<()> {
    let manifest: SuiteManifest = rundir::read_json(&dir.join(SUITE_FILE))?;
    let out = dir.join(REPORT_DIR);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut t = Table::new(&[
        "seed",
        "weight_decay",
        "status",
        "grok_step",
        "flip_step",
        "final_test_acc",
        "ablation_delta",
        "max_control_delta",
        "mlp_r2",
    ]);
    for c in &manifest.cells {
        t.push(vec![
            c.seed.to_string(),
            num(c.weight_decay),
            format!("{:?}", c.status).to_lowercase(),
            opt(c.grok_step),
            opt(c.flip_step),
            opt(c.final_test_acc),
            opt(c.ablation_delta),
            opt(c.max_control_delta),
            opt(c.mlp_r2),
        ]);
    }
    t.write(&out.join("cells.csv"))?;
    let a = &manifest.aggregates;
    let mut t = Table::new(&["metric", "weight_decay", "value", "sd", "n"]);
    for h in &a.hit_rate {
        t.push(vec![
            "hit_rate".into(),
            num(h.weight_decay),
            num(h.grokked as f64 / h.runs.max(1) as f64),
            String::new(),
            h.runs.to_string(),
        ]);
    }
    for (name, m) in [("ablation_delta", &a.ablation_delta), ("mlp_r2", &a.mlp_r2)] {
        if let Some(m) = m {
            t.push(vec![
                name.into(),
                String::new(),
                num(m.mean),
                num(m.sd),
                m.n.to_string(),
            ]);
        }
    }
    t.write(&out.join("aggregates.csv"))?;
    let chart = BarChart {
        title: "grok hit rate".into(),
        y_label: "share of runs".into(),
        labels: a.hit_rate.iter().map(|h| format!("wd {}", h.weight_decay)).collect(),
        values: a
            .hit_rate
            .iter()
            .map(|h| h.grokked as f64 / h.runs.max(1) as f64)
            .collect(),
        ..Default::default()
    };
    write_svg(&out.join("hit_rate.svg"), &chart.render())?;
    let mut bars = BarChart {
        title: "suite aggregates (mean ± sd)".into(),
        y_label: "value".into(),
        errors: Some(Vec::new()),
        ..Default::default()
    };
    for (name, m) in [("edge ablation", &a.ablation_delta), ("MLP probe R²", &a.mlp_r2)] {
        if let Some(m) = m {
            bars.labels.push(name.into());
            bars.values.push(m.mean);
            bars.errors.as_mut().expect("set above").push(m.sd);
        }
    }
    write_svg(&out.join("aggregates.svg"), &bars.render())?;
    let mut incomplete = 0;
    for c in &manifest.cells {
        match run_report(&c.dir) {
            Ok(m) if m.is_empty() => {}
            Ok(m) => {
                incomplete += 1;
                println!("{}: {} missing artifacts", c.dir.display(), m.len());
            }
            Err(e) => {
                incomplete += 1;
                println!("{}: {e:#}", c.dir.display());
            }
        }
    }
    println!(
        "suite report: {} cells ({} with missing artifacts) in {}",
        manifest.cells.len(),
        incomplete,
        out.display()
    );
    Ok(())
}
