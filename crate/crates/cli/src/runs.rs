use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Context;
use edgelab::analysis::{self, AnalyzedRun};
use edgelab::decomp::Aggregation;
use edgelab::pipeline::{self, AblationStudy};
use edgelab::probes::{self, ProbeKind};
use edgelab::rundir::{self, RunLogs, RunSummary, StepLogReader, StepLogWriter, STEP_LOG, SUMMARY_FILE};
use edgelab::tasks::TaskKind;
use edgelab::trainer::{Phase, RunConfig, TrainError};
use serde::{Deserialize, Serialize};

use crate::config::{self, CheckFailed, ConfigError, ExperimentConfig};
use crate::measure::ProbeSet;
use crate::output::{reports_dir, write_json};

pub const SUITE_FILE: &str = "suite.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const PROBES_FILE: &str = "probes.json";

/// Trains `run` into `dir` and writes the run directory.
pub fn train_into(
    run: &RunConfig,
    mode: Aggregation,
    dir: &Path,
    step_log: bool,
) -> anyhow::Result<(AnalyzedRun, RunSummary)> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let analyzed = if step_log {
        let mut w = StepLogWriter::create(&dir.join(STEP_LOG))?;
        let r = analysis::run_analyzed_with(run, mode, &mut w)?;
        w.finish()?;
        r
    } else {
        analysis::run_analyzed_with(run, mode, &mut ())?
    };
    let summary = rundir::write_run(dir, &analyzed)?;
    Ok((analyzed, summary))
}

fn describe(summary: &RunSummary) -> String {
    let acc = summary.final_metrics.as_ref().map_or(f64::NAN, |m| m.test_acc);
    format!(
        "seed {} wd {}: grok {} flip {} final test acc {:.4}",
        summary.seed,
        summary.weight_decay,
        summary.grok_step.map_or("-".into(), |s| s.to_string()),
        summary.flip_step.map_or("-".into(), |s| s.to_string()),
        acc
    )
}

pub fn train(path: &Path, out: Option<&Path>, step_log: bool) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(path)?;
    let dir = cfg.output_dir(out);
    let (_, summary) = train_into(
        &cfg.run,
        cfg.analysis.aggregation,
        &dir,
        step_log || cfg.output.step_log,
    )?;
    println!("{}", describe(&summary));
    println!("run directory: {}", dir.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub weight_decay: f64,
    pub dir: PathBuf,
    pub status: CellStatus,
    pub error: Option<String>,
    pub grok_step: Option<usize>,
    pub flip_step: Option<usize>,
    pub final_test_acc: Option<f64>,
    pub ablation_delta: Option<f64>,
    pub max_control_delta: Option<f64>,
    pub mlp_r2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        let n = xs.len();
        if n == 0 {
            return None;
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(Self {
            mean,
            sd: var.sqrt(),
            n,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitRate {
    pub weight_decay: f64,
    pub grokked: usize,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub hit_rate: Vec<HitRate>,
    pub ablation_delta: Option<MeanSd>,
    pub mlp_r2: Option<MeanSd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub cells: Vec<CellResult>,
    pub aggregates: Aggregates,
}

pub fn aggregate(cells: &[CellResult]) -> Aggregates {
    let mut wds: Vec<f64> = cells.iter().map(|c| c.weight_decay).collect();
    wds.sort_by(f64::total_cmp);
    wds.dedup();
    let ok = || cells.iter().filter(|c| c.status == CellStatus::Ok);
    Aggregates {
        hit_rate: wds
            .into_iter()
            .map(|w| HitRate {
                weight_decay: w,
                grokked: ok().filter(|c| c.weight_decay == w && c.grok_step.is_some()).count(),
                runs: ok().filter(|c| c.weight_decay == w).count(),
            })
            .collect(),
        ablation_delta: MeanSd::of(&ok().filter_map(|c| c.ablation_delta).collect::<Vec<_>>()),
        mlp_r2: MeanSd::of(&ok().filter_map(|c| c.mlp_r2).collect::<Vec<_>>()),
    }
}

/// Rebuilds a cell's entry from its run directory.
pub fn load_cell(dir: &Path, seed: u64, weight_decay: f64) -> CellResult {
    let mut cell = CellResult {
        seed,
        weight_decay,
        dir: dir.to_path_buf(),
        status: CellStatus::Failed,
        error: None,
        grok_step: None,
        flip_step: None,
        final_test_acc: None,
        ablation_delta: None,
        max_control_delta: None,
        mlp_r2: None,
    };
    let summary: RunSummary = match rundir::read_json(&dir.join(SUMMARY_FILE)) {
        Ok(s) => s,
        Err(e) => {
            cell.error = Some(e.to_string());
            return cell;
        }
    };
    cell.status = CellStatus::Ok;
    cell.grok_step = summary.grok_step;
    cell.flip_step = summary.flip_step;
    cell.final_test_acc = summary.final_metrics.map(|m| m.test_acc);
    let reports = dir.join(rundir::REPORT_DIR);
    if let Ok(a) = rundir::read_json::<AblationStudy>(&reports.join(ABLATION_FILE)) {
        cell.ablation_delta = Some(a.edge.delta_acc);
        cell.max_control_delta = Some(a.max_control);
    }
    if let Ok(p) = rundir::read_json::<ProbeSet>(&reports.join(PROBES_FILE)) {
        cell.mlp_r2 = p.depth.iter().find(|r| r.kind == ProbeKind::Mlp).map(|r| r.test_r2);
    }
    cell
}

fn cell_dir(root: &Path, seed: u64, wd: f64) -> PathBuf {
    root.join(format!("seed{seed}-wd{wd}"))
}

/// Trains one cell and, when it grokked, runs the late-checkpoint ablation and probes.
fn run_cell(exp: &ExperimentConfig, run: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let (analyzed, summary) = train_into(run, exp.analysis.aggregation, dir, exp.output.step_log)?;
    if summary.grok_step.is_none() {
        return Ok(());
    }
    let late = &analyzed.outcome.checkpoints.late;
    let reports = reports_dir(dir)?;
    let a = &exp.analysis;
    if a.ablation {
        let snap = analyzed
            .phase_snapshots
            .get(&Phase::Late)
            .context("no spectral snapshot at the late checkpoint")?;
        let eval = pipeline::eval_batches(run, a.eval_limit)?;
        let study = pipeline::ablation_study(&late.model, snap, a.ablation_dims, a.controls, run.seed, &eval)?;
        write_json(&reports.join(ABLATION_FILE), &study)?;
    }
    if a.probes && run.task == TaskKind::Dyck {
        let batches = pipeline::eval_batches(run, Some(a.probe_sequences))?;
        let layer = pipeline::last_block(&late.model);
        let data = probes::capture_rows(&late.model, &batches, layer)?;
        let depth = probes::depth_probes(&data, &a.mlp, run.seed)?;
        let set = ProbeSet {
            step: late.step,
            layer,
            depth: depth.to_vec(),
            compositional: probes::compositional_probe(&data, batches[0].out_len(), run.seed)?,
        };
        write_json(&reports.join(PROBES_FILE), &set)?;
    }
    Ok(())
}

pub fn run_suite(exp: &ExperimentConfig, root: &Path, workers: usize) -> anyhow::Result<SuiteManifest> {
    let spec = exp
        .suite
        .as_ref()
        .ok_or_else(|| ConfigError("missing [suite] section".into()))?;
    let cells: Vec<(u64, f64)> = spec
        .seeds
        .iter()
        .flat_map(|&s| spec.weight_decays.iter().map(move |&w| (s, w)))
        .collect();
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let errors: Mutex<Vec<Option<String>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(seed, wd)) = cells.get(i) else { break };
                let mut run = exp.run.clone();
                run.seed = seed;
                run.optim.weight_decay = wd;
                let dir = cell_dir(root, seed, wd);
                eprintln!("cell seed {seed} wd {wd}: started");
                let res = run_cell(exp, &run, &dir);
                if let Err(e) = &res {
                    eprintln!("cell seed {seed} wd {wd}: failed: {e:#}");
                    errors.lock().expect("no poisoned workers")[i] = Some(format!("{e:#}"));
                } else {
                    eprintln!("cell seed {seed} wd {wd}: done");
                }
            });
        }
    });
    let errors = errors.into_inner().expect("no poisoned workers");
    let results: Vec<CellResult> = cells
        .iter()
        .zip(errors)
        .map(|(&(seed, wd), err)| {
            let mut c = load_cell(&cell_dir(root, seed, wd), seed, wd);
            if let Some(e) = err {
                c.status = CellStatus::Failed;
                c.error = Some(e);
            }
            c
        })
        .collect();
    let manifest = SuiteManifest {
        aggregates: aggregate(&results),
        cells: results,
    };
    write_json(&root.join(SUITE_FILE), &manifest)?;
    Ok(manifest)
}

/// Problems with the hit-rate contract: decayed runs grok, undecayed ones do not.
pub fn hit_rate_failures(m: &SuiteManifest) -> Vec<String> {
    let mut out = Vec::new();
    for c in &m.cells {
        let name = format!("seed {} wd {}", c.seed, c.weight_decay);
        match (c.status, c.weight_decay > 0.0, c.grok_step) {
            (CellStatus::Failed, ..) => out.push(format!("{name} failed")),
            (_, true, None) => out.push(format!("{name} did not grok")),
            (_, false, Some(s)) => out.push(format!("{name} grokked at {s} without decay")),
            _ => {}
        }
    }
    out
}

pub fn suite(path: &Path, out: Option<&Path>, check: bool) -> anyhow::Result<()> {
    let exp = ExperimentConfig::load(path)?;
    let workers = config::workers()?;
    let root = out
        .map(Path::to_path_buf)
        .or_else(|| exp.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-suite", exp.run.task.name())));
    let m = run_suite(&exp, &root, workers)?;
    for h in &m.aggregates.hit_rate {
        println!("wd {}: grokked {}/{}", h.weight_decay, h.grokked, h.runs);
    }
    if let Some(a) = &m.aggregates.ablation_delta {
        println!("edge ablation delta acc: {:.3} ± {:.3} (n={})", a.mean, a.sd, a.n);
    }
    if let Some(p) = &m.aggregates.mlp_r2 {
        println!("MLP depth probe R²: {:.3} ± {:.3} (n={})", p.mean, p.sd, p.n);
    }
    println!("suite manifest: {}", root.join(SUITE_FILE).display());
    let failures = hit_rate_failures(&m);
    if check && !failures.is_empty() {
        return Err(CheckFailed(failures).into());
    }
    Ok(())
}

pub const ANALYZE_SNAPSHOTS: &str = "analyze-snapshots.log";
pub const ANALYZE_DECOMP: &str = "analyze-decomp.log";

pub fn analyze(run: &Path, mode: Aggregation) -> anyhow::Result<()> {
    let logs = RunLogs::load(run)?;
    let reader = StepLogReader::open(&run.join(STEP_LOG))
        .with_context(|| "no step log; train with --step-log to enable analyze")?;
    let steps = reader.map(|r| r.map_err(|e| TrainError::Observer(e.to_string())));
    let (snapshots, decomps) = analysis::replay(&logs.config, mode, steps)?;
    let reports = reports_dir(run)?;
    rundir::write_jsonl(&reports.join(ANALYZE_SNAPSHOTS), &snapshots)?;
    rundir::write_jsonl(&reports.join(ANALYZE_DECOMP), &decomps)?;
    println!("{} snapshots, {} decompositions", snapshots.len(), decomps.len());
    println!(
        "matches logged: snapshots {}, decompositions {}",
        snapshots == logs.snapshots,
        decomps == logs.decomps
    );
    Ok(())
}
