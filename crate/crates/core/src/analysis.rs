//! Online spectral and decomposition logging attached to a training run.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use crate::decomp::{decompose, Aggregation, UpdateDecomposition};
use crate::model::checkpoint::{CheckpointError, FileKind, Manifest, TensorEntry, TensorFile};
use crate::model::{Model, ParamVector};
use crate::nncore::Tensor;
use crate::spectral::{snapshot, SnapshotRecord, SpectralSnapshot, TrajectoryWindow, WindowBuffer};
use crate::trainer::{self, MetricsRecord, Phase, RunConfig, StepObserver, StepRecord, TrainError, TrainOutcome};

/// Consumes the step stream and keeps the snapshot and decomposition logs.
pub struct Analyzer {
    buf: WindowBuffer<StepRecord>,
    mode: Aggregation,
    prev: Option<SpectralSnapshot>,
    latest: Option<SpectralSnapshot>,
    keep_every: usize,
    recent_evals: usize,
    pub snapshots: Vec<SnapshotRecord>,
    pub decomps: Vec<UpdateDecomposition>,
    /// Full snapshots retained at checkpoint steps.
    pub kept: BTreeMap<usize, SpectralSnapshot>,
    recent: VecDeque<(usize, SpectralSnapshot)>,
}

impl Analyzer {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            buf: WindowBuffer::new(cfg.spectral.window, cfg.spectral.stride),
            mode: Aggregation::WindowSum,
            prev: None,
            latest: None,
            keep_every: cfg.checkpoint_interval,
            recent_evals: trainer::GROK_SUSTAIN + 1,
            snapshots: Vec::new(),
            decomps: Vec::new(),
            kept: BTreeMap::new(),
            recent: VecDeque::new(),
        }
    }

    pub fn with_aggregation(mut self, mode: Aggregation) -> Self {
        self.mode = mode;
        self
    }

    /// The retained snapshot for `step`, if any.
    pub fn snapshot_at(&self, step: usize) -> Option<&SpectralSnapshot> {
        self.kept
            .get(&step)
            .or_else(|| self.recent.iter().find(|(s, _)| *s == step).map(|(_, x)| x))
    }

    fn process(&mut self) -> Result<(), TrainError> {
        let recs: Vec<&StepRecord> = self.buf.items().map(|(_, r)| r).collect();
        let end_step = recs.last().map_or(0, |r| r.step);
        let window = TrajectoryWindow {
            rows: recs.iter().map(|r| r.delta()).collect(),
            end_step,
        };
        let snap = match snapshot(&window) {
            Ok(s) => s,
            // a frozen window has no directions to report
            Err(crate::spectral::SpectralError::ZeroWindow) => return Ok(()),
            Err(e) => return Err(TrainError::Observer(e.to_string())),
        };
        let d = decompose(&recs, &snap, self.mode).map_err(|e| TrainError::Observer(e.to_string()))?;
        self.snapshots.push(snap.summary(self.prev.as_ref()));
        self.decomps.push(d);
        self.prev = Some(snap.clone());
        self.latest = Some(snap);
        Ok(())
    }
}

impl StepObserver for Analyzer {
    fn on_step(&mut self, rec: &StepRecord) -> Result<(), TrainError> {
        if self.buf.push(rec.step, rec.clone()) {
            self.process()?;
        }
        Ok(())
    }

    fn on_eval(&mut self, rec: &mut MetricsRecord, _model: &Model) -> Result<(), TrainError> {
        let Some(snap) = self.latest.as_ref().filter(|s| s.end_step == rec.step) else {
            return Ok(());
        };
        rec.sigma = Some(snap.sigma.clone());
        if rec.step.is_multiple_of(self.keep_every) {
            self.kept.insert(rec.step, snap.clone());
        }
        if self.recent.len() == self.recent_evals {
            self.recent.pop_front();
        }
        self.recent.push_back((rec.step, snap.clone()));
        Ok(())
    }
}

/// A finished run with its analysis logs.
pub struct AnalyzedRun {
    pub config: RunConfig,
    pub outcome: TrainOutcome,
    pub snapshots: Vec<SnapshotRecord>,
    pub decomps: Vec<UpdateDecomposition>,
    /// Snapshot of the window ending at each phase checkpoint (init has none).
    pub phase_snapshots: BTreeMap<Phase, SpectralSnapshot>,
    pub periodic_snapshots: BTreeMap<usize, SpectralSnapshot>,
}

impl AnalyzedRun {
    pub fn grok_step(&self) -> Option<usize> {
        self.outcome.grok_step
    }
}

/// Forwards the step stream to two observers.
pub struct Tee<'a>(pub &'a mut dyn StepObserver, pub &'a mut dyn StepObserver);

impl StepObserver for Tee<'_> {
    fn on_step(&mut self, rec: &StepRecord) -> Result<(), TrainError> {
        self.0.on_step(rec)?;
        self.1.on_step(rec)
    }

    fn on_eval(&mut self, rec: &mut MetricsRecord, model: &Model) -> Result<(), TrainError> {
        self.0.on_eval(rec, model)?;
        self.1.on_eval(rec, model)
    }
}

pub fn run_analyzed(cfg: &RunConfig) -> Result<AnalyzedRun, TrainError> {
    run_analyzed_with(cfg, Aggregation::WindowSum, &mut ())
}

/// Trains with online analysis; `extra` sees every step after the analyzer.
pub fn run_analyzed_with(
    cfg: &RunConfig,
    mode: Aggregation,
    extra: &mut dyn StepObserver,
) -> Result<AnalyzedRun, TrainError> {
    let mut an = Analyzer::new(cfg).with_aggregation(mode);
    let outcome = trainer::train(cfg, &mut Tee(&mut an, extra))?;
    let mut phase_snapshots = BTreeMap::new();
    for (phase, ck) in outcome.checkpoints.named() {
        if let Some(s) = an.snapshot_at(ck.step) {
            phase_snapshots.insert(phase, s.clone());
        }
    }
    // the last window always closes at the final step when strides align
    if let std::collections::btree_map::Entry::Vacant(e) = phase_snapshots.entry(Phase::Late) {
        if let Some(s) = an
            .latest
            .as_ref()
            .filter(|s| s.end_step == outcome.checkpoints.late.step)
        {
            e.insert(s.clone());
        }
    }
    Ok(AnalyzedRun {
        config: cfg.clone(),
        snapshots: std::mem::take(&mut an.snapshots),
        decomps: std::mem::take(&mut an.decomps),
        periodic_snapshots: std::mem::take(&mut an.kept),
        phase_snapshots,
        outcome,
    })
}

/// Replays a step stream through a fresh analyzer.
pub fn replay(
    cfg: &RunConfig,
    mode: Aggregation,
    steps: impl IntoIterator<Item = Result<StepRecord, TrainError>>,
) -> Result<(Vec<SnapshotRecord>, Vec<UpdateDecomposition>), TrainError> {
    let mut an = Analyzer::new(cfg).with_aggregation(mode);
    for r in steps {
        an.on_step(&r?)?;
    }
    Ok((an.snapshots, an.decomps))
}

/// Writes singular vectors and values of a snapshot as a vector sidecar.
pub fn save_vectors(path: &Path, snap: &SpectralSnapshot, seed: u64) -> Result<(), CheckpointError> {
    let p = snap.vectors.first().map_or(0, |v| v.len());
    let file = TensorFile {
        kind: FileKind::Vectors,
        manifest: Manifest {
            config: None,
            step: snap.end_step,
            seed,
            tensors: (1..=snap.width())
                .map(|k| TensorEntry {
                    name: format!("v{k}"),
                    shape: vec![p],
                    decay: false,
                })
                .collect(),
            extra: serde_json::json!({ "sigma": snap.sigma, "valid": snap.valid, "u": snap.u }),
        },
        tensors: snap.vectors.iter().map(|v| Tensor::vector(v.0.clone())).collect(),
    };
    file.save(path)
}

pub fn load_vectors(path: &Path) -> Result<SpectralSnapshot, CheckpointError> {
    let f = TensorFile::load(path, FileKind::Vectors)?;
    let get = |key: &str| f.manifest.extra.get(key).cloned().unwrap_or_default();
    let sigma: Vec<f64> = serde_json::from_value(get("sigma"))?;
    let valid: Vec<bool> = serde_json::from_value(get("valid"))?;
    let u: Vec<Vec<f64>> = serde_json::from_value(get("u"))?;
    if sigma.len() != f.tensors.len() || valid.len() != f.tensors.len() {
        return Err(CheckpointError::Payload);
    }
    Ok(SpectralSnapshot {
        end_step: f.manifest.step,
        sigma,
        u,
        valid,
        vectors: f.tensors.into_iter().map(|t| ParamVector(t.into_data())).collect(),
    })
}
