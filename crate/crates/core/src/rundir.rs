//! On-disk layout of a run directory and its logs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, AnalyzedRun};
use crate::decomp::{flip_detector, UpdateDecomposition};
use crate::model::checkpoint::{Checkpoint, CheckpointError};
use crate::model::{Model, ParamVector};
use crate::spectral::{SnapshotRecord, SpectralSnapshot};
use crate::trainer::{MetricsRecord, Phase, RunConfig, StepObserver, StepRecord, TrainError};

pub const CONFIG_FILE: &str = "config.resolved";
pub const METRICS_LOG: &str = "metrics.log";
pub const SNAPSHOTS_LOG: &str = "snapshots.log";
pub const DECOMP_LOG: &str = "decomp.log";
pub const SUMMARY_FILE: &str = "summary.json";
pub const STEP_LOG: &str = "steps.bin";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const REPORT_DIR: &str = "reports";

const STEP_MAGIC: &[u8; 8] = b"EDGESTEP";

#[derive(Debug, thiserror::Error)]
pub enum RunDirError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("{0}: not a step log")]
    StepLog(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunDirError + '_ {
    move |source| RunDirError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Headline numbers of a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub weight_decay: f64,
    pub steps: usize,
    pub grok_step: Option<usize>,
    pub flip_step: Option<usize>,
    pub final_metrics: Option<MetricsRecord>,
    /// Step of each saved phase checkpoint.
    pub phases: BTreeMap<String, usize>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), RunDirError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for (i, item) in items.iter().enumerate() {
        let line = serde_json::to_string(item).map_err(|source| RunDirError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RunDirError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| RunDirError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunDirError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| RunDirError::Json {
        path: path.to_path_buf(),
        line: 0,
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, RunDirError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| RunDirError::Json {
        path: path.to_path_buf(),
        line: source.line(),
        source,
    })
}

/// The run config with every preset default filled in.
pub fn resolve(cfg: &RunConfig) -> RunConfig {
    let mut r = cfg.clone();
    r.model = Some(cfg.model_config());
    r.eval_interval = Some(cfg.eval_every());
    r.data.seed = Some(cfg.data.seed.unwrap_or(cfg.seed));
    r
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> Result<(), RunDirError> {
    let path = dir.join(CONFIG_FILE);
    let text = toml::to_string_pretty(&resolve(cfg)).map_err(|e| RunDirError::Config {
        path: path.clone(),
        message: e.to_string(),
    })?;
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_config(dir: &Path) -> Result<RunConfig, RunDirError> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    toml::from_str(&text).map_err(|e| RunDirError::Config {
        path,
        message: e.to_string(),
    })
}

pub fn checkpoint_path(dir: &Path, phase: Phase) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("{}.ckpt", phase.name()))
}

pub fn vectors_path(dir: &Path, phase: Phase) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("{}.vec", phase.name()))
}

/// Writes logs, phase checkpoints and their spectral sidecars.
pub fn write_run(dir: &Path, run: &AnalyzedRun) -> Result<RunSummary, RunDirError> {
    let ck_dir = dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ck_dir).map_err(io_err(&ck_dir))?;
    let reports = dir.join(REPORT_DIR);
    fs::create_dir_all(&reports).map_err(io_err(&reports))?;
    write_config(dir, &run.config)?;
    write_jsonl(&dir.join(METRICS_LOG), &run.outcome.metrics)?;
    write_jsonl(&dir.join(SNAPSHOTS_LOG), &run.snapshots)?;
    write_jsonl(&dir.join(DECOMP_LOG), &run.decomps)?;
    let mut phases = BTreeMap::new();
    for (phase, ck) in run.outcome.checkpoints.named() {
        let path = checkpoint_path(dir, phase);
        ck.save(&path)
            .map_err(|source| RunDirError::Checkpoint { path, source })?;
        if let Some(snap) = run.phase_snapshots.get(&phase) {
            let path = vectors_path(dir, phase);
            analysis::save_vectors(&path, snap, run.config.seed)
                .map_err(|source| RunDirError::Checkpoint { path, source })?;
        }
        phases.insert(phase.name().to_string(), ck.step);
    }
    let summary = RunSummary {
        seed: run.config.seed,
        weight_decay: run.config.optim.weight_decay,
        steps: run.config.steps,
        grok_step: run.grok_step(),
        flip_step: flip_detector(&run.decomps, 1),
        final_metrics: run.outcome.metrics.last().cloned(),
        phases,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Logs of a run directory.
#[derive(Clone, Debug)]
pub struct RunLogs {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub metrics: Vec<MetricsRecord>,
    pub snapshots: Vec<SnapshotRecord>,
    pub decomps: Vec<UpdateDecomposition>,
    pub summary: RunSummary,
}

impl RunLogs {
    pub fn load(dir: &Path) -> Result<Self, RunDirError> {
        Ok(Self {
            dir: dir.to_path_buf(),
            config: read_config(dir)?,
            metrics: read_jsonl(&dir.join(METRICS_LOG))?,
            snapshots: read_jsonl(&dir.join(SNAPSHOTS_LOG))?,
            decomps: read_jsonl(&dir.join(DECOMP_LOG))?,
            summary: read_json(&dir.join(SUMMARY_FILE))?,
        })
    }

    pub fn grok_step(&self) -> Option<usize> {
        self.summary.grok_step
    }

    pub fn checkpoint(&self, phase: Phase) -> Result<Checkpoint, RunDirError> {
        load_checkpoint(&self.dir, phase)
    }

    pub fn vectors(&self, phase: Phase) -> Result<SpectralSnapshot, RunDirError> {
        load_phase_vectors(&self.dir, phase)
    }
}

pub fn load_checkpoint(dir: &Path, phase: Phase) -> Result<Checkpoint, RunDirError> {
    let path = checkpoint_path(dir, phase);
    Checkpoint::load(&path).map_err(|source| RunDirError::Checkpoint { path, source })
}

pub fn load_phase_vectors(dir: &Path, phase: Phase) -> Result<SpectralSnapshot, RunDirError> {
    let path = vectors_path(dir, phase);
    analysis::load_vectors(&path).map_err(|source| RunDirError::Checkpoint { path, source })
}

/// Streams step records to a little-endian binary log.
pub struct StepLogWriter {
    w: BufWriter<fs::File>,
    path: PathBuf,
    dim: Option<usize>,
}

impl StepLogWriter {
    pub fn create(path: &Path) -> Result<Self, RunDirError> {
        let f = fs::File::create(path).map_err(io_err(path))?;
        Ok(Self {
            w: BufWriter::new(f),
            path: path.to_path_buf(),
            dim: None,
        })
    }

    pub fn write(&mut self, r: &StepRecord) -> Result<(), RunDirError> {
        let first = self.dim.is_none();
        self.dim = Some(r.delta_grad.len());
        write_step(&mut self.w, r, first).map_err(io_err(&self.path))
    }

    pub fn finish(mut self) -> Result<(), RunDirError> {
        self.w.flush().map_err(io_err(&self.path))
    }
}

impl StepObserver for StepLogWriter {
    fn on_step(&mut self, rec: &StepRecord) -> Result<(), TrainError> {
        self.write(rec).map_err(|e| TrainError::Observer(e.to_string()))
    }

    fn on_eval(&mut self, _rec: &mut MetricsRecord, _model: &Model) -> Result<(), TrainError> {
        Ok(())
    }
}

fn write_step(w: &mut impl Write, r: &StepRecord, header: bool) -> io::Result<()> {
    if header {
        w.write_all(STEP_MAGIC)?;
        w.write_all(&(r.delta_grad.len() as u64).to_le_bytes())?;
    }
    w.write_all(&(r.step as u64).to_le_bytes())?;
    for x in [r.train_loss, r.train_acc, r.param_norm] {
        w.write_all(&x.to_le_bytes())?;
    }
    let (tl, ta) = r.test.unwrap_or((f64::NAN, f64::NAN));
    w.write_all(&[r.test.is_some() as u8])?;
    w.write_all(&tl.to_le_bytes())?;
    w.write_all(&ta.to_le_bytes())?;
    for x in r.delta_grad.0.iter().chain(&r.delta_wd.0) {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a binary step log back into records.
pub struct StepLogReader {
    r: BufReader<fs::File>,
    path: PathBuf,
    dim: usize,
}

impl StepLogReader {
    pub fn open(path: &Path) -> Result<Self, RunDirError> {
        let f = fs::File::open(path).map_err(io_err(path))?;
        let mut r = BufReader::new(f);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err(path))?;
        if &magic != STEP_MAGIC {
            return Err(RunDirError::StepLog(path.to_path_buf()));
        }
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(io_err(path))?;
        Ok(Self {
            r,
            path: path.to_path_buf(),
            dim: u64::from_le_bytes(b) as usize,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn read_one(&mut self) -> io::Result<Option<StepRecord>> {
        let mut b = [0u8; 8];
        match self.r.read_exact(&mut b) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e),
        }
        let step = u64::from_le_bytes(b) as usize;
        let mut head = [0u8; 41];
        self.r.read_exact(&mut head)?;
        let at = |i: usize| f64::from_le_bytes(head[i..i + 8].try_into().expect("8 bytes"));
        let (train_loss, train_acc, param_norm) = (at(0), at(8), at(16));
        let flag = head[24];
        let (tl, ta) = (at(25), at(33));
        let mut buf = vec![0u8; 16 * self.dim];
        self.r.read_exact(&mut buf)?;
        let vals: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let (g, w) = vals.split_at(self.dim);
        Ok(Some(StepRecord {
            step,
            delta_grad: ParamVector(g.to_vec()),
            delta_wd: ParamVector(w.to_vec()),
            train_loss,
            train_acc,
            test: (flag == 1).then_some((tl, ta)),
            param_norm,
        }))
    }
}

impl Iterator for StepLogReader {
    type Item = Result<StepRecord, RunDirError>;

    fn next(&mut self) -> Option<Self::Item> {
        let path = self.path.clone();
        self.read_one().map_err(io_err(&path)).transpose()
    }
}
