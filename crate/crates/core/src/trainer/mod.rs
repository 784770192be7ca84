//! Full-batch AdamW training with an exact per-step update split, grok
//! detection and phase checkpoints.

mod data;
mod optim;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::model::checkpoint::{Checkpoint, CheckpointError};
use crate::model::{Batch, Metrics, Model, ModelConfig, ModelError, ParamVector};
use crate::nncore::NnError;
use crate::tasks::{TaskError, TaskKind};

pub use data::TaskData;
pub use optim::{adamw_update, OptState, OptimConfig, UpdateParts};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("no gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("analysis hook failed: {0}")]
    Observer(String),
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Dyck sequence length.
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    /// Test examples used by the periodic evaluation (all when absent).
    #[serde(default)]
    pub eval_subset: Option<usize>,
    /// Fixed gradient batch size (full batch when absent).
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Dataset seed (defaults to the run seed).
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_modulus")]
    pub modulus: usize,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
}

fn default_n_train() -> usize {
    50
}
fn default_n_test() -> usize {
    5000
}
fn default_seq_len() -> usize {
    crate::tasks::DYCK_DEFAULT_LEN
}
fn default_modulus() -> usize {
    97
}
fn default_train_frac() -> f64 {
    0.5
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: default_n_train(),
            n_test: default_n_test(),
            seq_len: default_seq_len(),
            eval_subset: None,
            batch_size: None,
            seed: None,
            modulus: default_modulus(),
            train_frac: default_train_frac(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    /// Trajectory window length W.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Steps between snapshots.
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_window() -> usize {
    5
}
fn default_stride() -> usize {
    5
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window: default_window(),
            stride: default_stride(),
        }
    }
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub seed: u64,
    pub steps: usize,
    /// Defaults to the task preset.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub optim: OptimConfig,
    /// Defaults to 20 (Dyck) or 50 (SCAN, modadd).
    #[serde(default)]
    pub eval_interval: Option<usize>,
    #[serde(default = "default_ckpt_interval")]
    pub checkpoint_interval: usize,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub spectral: WindowConfig,
}

fn default_ckpt_interval() -> usize {
    100
}

impl RunConfig {
    pub fn dyck(seed: u64, weight_decay: f64) -> Self {
        Self {
            task: TaskKind::Dyck,
            seed,
            steps: 3000,
            model: None,
            optim: OptimConfig {
                weight_decay,
                ..OptimConfig::default()
            },
            eval_interval: None,
            checkpoint_interval: default_ckpt_interval(),
            data: DataConfig::default(),
            spectral: WindowConfig::default(),
        }
    }

    pub fn scan(seed: u64, weight_decay: f64) -> Self {
        Self {
            task: TaskKind::Scan,
            data: DataConfig {
                n_train: crate::tasks::SCAN_TRAIN,
                n_test: crate::tasks::SCAN_TEST,
                ..DataConfig::default()
            },
            ..Self::dyck(seed, weight_decay)
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| match self.task {
            TaskKind::Dyck => ModelConfig::dyck(),
            TaskKind::Scan => ModelConfig::scan_small(),
            TaskKind::Modadd => ModelConfig::modadd(self.data.modulus),
        })
    }

    pub fn eval_every(&self) -> usize {
        self.eval_interval.unwrap_or(match self.task {
            TaskKind::Dyck => 20,
            TaskKind::Scan | TaskKind::Modadd => 50,
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model_config().validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.eval_every() == 0 {
            return bad("eval_interval must be positive");
        }
        if self.checkpoint_interval == 0 || !self.checkpoint_interval.is_multiple_of(self.eval_every()) {
            return bad("checkpoint_interval must be a positive multiple of eval_interval");
        }
        if self.spectral.window < 2 || self.spectral.stride == 0 {
            return bad("spectral window must be >= 2 and stride >= 1");
        }
        if !(self.optim.lr >= 0.0 && self.optim.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// One optimizer step, restricted to the attention view.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub delta_grad: ParamVector,
    pub delta_wd: ParamVector,
    /// Loss and accuracy of the gradient batch before the update.
    pub train_loss: f64,
    pub train_acc: f64,
    /// Present on evaluation steps.
    pub test: Option<(f64, f64)>,
    /// Norm of all parameters after the update.
    pub param_norm: f64,
}

impl StepRecord {
    pub fn delta(&self) -> ParamVector {
        ParamVector(
            self.delta_grad
                .0
                .iter()
                .zip(&self.delta_wd.0)
                .map(|(g, w)| g + w)
                .collect(),
        )
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub param_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    PreGrok,
    Grok,
    Late,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Init, Phase::PreGrok, Phase::Grok, Phase::Late];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::PreGrok => "pre_grok",
            Phase::Grok => "grok",
            Phase::Late => "late",
        }
    }
}

#[derive(Clone, Debug)]
pub struct PhaseCheckpoints {
    pub init: Checkpoint,
    pub pre_grok: Checkpoint,
    /// Present iff grokking was detected.
    pub grok: Option<Checkpoint>,
    pub late: Checkpoint,
    pub periodic: Vec<Checkpoint>,
}

impl PhaseCheckpoints {
    pub fn get(&self, phase: Phase) -> Option<&Checkpoint> {
        match phase {
            Phase::Init => Some(&self.init),
            Phase::PreGrok => Some(&self.pre_grok),
            Phase::Grok => self.grok.as_ref(),
            Phase::Late => Some(&self.late),
        }
    }

    pub fn named(&self) -> Vec<(Phase, &Checkpoint)> {
        Phase::ALL.iter().filter_map(|&p| self.get(p).map(|c| (p, c))).collect()
    }
}

/// Hooks for consumers of the step stream.
pub trait StepObserver {
    fn on_step(&mut self, _rec: &StepRecord) -> Result<(), TrainError> {
        Ok(())
    }
    /// Called after each evaluation; may annotate the record.
    fn on_eval(&mut self, _rec: &mut MetricsRecord, _model: &Model) -> Result<(), TrainError> {
        Ok(())
    }
}

impl StepObserver for () {}

pub struct TrainOutcome {
    pub checkpoints: PhaseCheckpoints,
    pub metrics: Vec<MetricsRecord>,
    pub grok_step: Option<usize>,
    pub model: Model,
    pub opt: OptState,
}

pub const GROK_TEST_ACC: f64 = 0.9;
pub const GROK_TRAIN_ACC: f64 = 0.99;
pub const GROK_SUSTAIN: usize = 3;
pub const GROK_TRAIN_LEAD: usize = 100;

/// First evaluation step where test accuracy reaches 0.9 and stays there for
/// the next three evaluations, provided train accuracy hit 0.99 at least 100
/// steps before it.
pub fn detect_grok(log: &[MetricsRecord]) -> Option<usize> {
    let train_hit = log.iter().find(|r| r.train_acc >= GROK_TRAIN_ACC)?.step;
    (0..log.len().saturating_sub(GROK_SUSTAIN)).find_map(|i| {
        let r = &log[i];
        let sustained = log[i..=i + GROK_SUSTAIN].iter().all(|x| x.test_acc >= GROK_TEST_ACC);
        (sustained && train_hit + GROK_TRAIN_LEAD <= r.step).then_some(r.step)
    })
}

const EVAL_CHUNK: usize = 500;

struct Evaluator {
    train: Vec<Batch>,
    test: Vec<Batch>,
}

impl Evaluator {
    fn new(data: &TaskData, cfg: &RunConfig) -> Self {
        Self {
            train: data.train_eval_batches(EVAL_CHUNK),
            test: data.test_batches(cfg.data.eval_subset, EVAL_CHUNK),
        }
    }

    fn run(&self, model: &Model, step: usize) -> Result<MetricsRecord, TrainError> {
        let tr = model.evaluate(&self.train).map_err(|e| diverged(step, e))?;
        let te = model.evaluate(&self.test).map_err(|e| diverged(step, e))?;
        Ok(MetricsRecord {
            step,
            train_loss: tr.loss(),
            train_acc: tr.accuracy(),
            test_loss: te.loss(),
            test_acc: te.accuracy(),
            param_norm: model.params.norm(),
            sigma: None,
        })
    }
}

fn diverged(step: usize, e: ModelError) -> TrainError {
    match e {
        ModelError::Nn(NnError::NonFinite(op)) => TrainError::Diverged {
            step,
            reason: format!("non-finite value in {op}"),
        },
        other => TrainError::Model(other),
    }
}

fn checkpoint(model: &Model, step: usize, seed: u64, phase: Option<Phase>) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        step,
        seed,
        extra: match phase {
            Some(p) => serde_json::json!({ "phase": p.name() }),
            None => serde_json::Value::Null,
        },
    }
}

/// Trains a fresh model for `cfg.steps` steps.
pub fn train(cfg: &RunConfig, observer: &mut dyn StepObserver) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let model = Model::build(cfg.model_config(), cfg.seed)?;
    let opt = OptState::new(&model, cfg.optim.clone());
    let data = TaskData::generate(cfg)?;
    run_loop(cfg, &data, model, opt, 0, observer)
}

/// Overrides applied when continuing from a checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinueOverrides {
    pub weight_decay: Option<f64>,
    pub lr: Option<f64>,
    pub steps: Option<usize>,
}

/// Resumes training from `ck` with fresh optimizer moments.
pub fn continue_from(
    ck: &Checkpoint,
    base: &RunConfig,
    overrides: ContinueOverrides,
    observer: &mut dyn StepObserver,
) -> Result<TrainOutcome, TrainError> {
    let mut cfg = base.clone();
    if let Some(w) = overrides.weight_decay {
        cfg.optim.weight_decay = w;
    }
    if let Some(lr) = overrides.lr {
        cfg.optim.lr = lr;
    }
    if let Some(s) = overrides.steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    if ck.model.config != cfg.model_config() {
        return Err(TrainError::Config(
            "checkpoint model config differs from run config".into(),
        ));
    }
    let data = TaskData::generate(&cfg)?;
    let opt = OptState::new(&ck.model, cfg.optim.clone());
    run_loop(&cfg, &data, ck.model.clone(), opt, ck.step, observer)
}

fn run_loop(
    cfg: &RunConfig,
    data: &TaskData,
    mut model: Model,
    mut opt: OptState,
    start: usize,
    observer: &mut dyn StepObserver,
) -> Result<TrainOutcome, TrainError> {
    let eval_every = cfg.eval_every();
    let end = start + cfg.steps;
    let batches = data.train_batches(cfg.data.batch_size, cfg.seed);
    let evaluator = Evaluator::new(data, cfg);

    let mut metrics = Vec::new();
    let mut periodic = vec![checkpoint(&model, start, cfg.seed, None)];
    let init = checkpoint(&model, start, cfg.seed, Some(Phase::Init));
    // models at the most recent evaluations, so the grok step can be
    // recovered once the sustain window confirms it
    let mut recent: VecDeque<(usize, Model)> = VecDeque::with_capacity(GROK_SUSTAIN + 1);
    let mut grok: Option<Checkpoint> = None;

    let mut rec0 = evaluator.run(&model, start)?;
    observer.on_eval(&mut rec0, &model)?;
    metrics.push(rec0);
    recent.push_back((start, model.clone()));

    for step in start + 1..=end {
        let batch = &batches[(step - 1) % batches.len()];
        let (m, grads): (Metrics, _) = model.loss_and_grads(batch).map_err(|e| diverged(step, e))?;
        if !m.loss().is_finite() {
            return Err(TrainError::Diverged {
                step,
                reason: "loss is not finite".into(),
            });
        }
        let parts = adamw_update(&mut model, &grads, &mut opt)?;
        let (delta_grad, delta_wd) = parts.attention(&model);
        let is_eval = step % eval_every == 0 || step == end;
        let mut eval_rec = if is_eval {
            Some(evaluator.run(&model, step)?)
        } else {
            None
        };
        let rec = StepRecord {
            step,
            delta_grad,
            delta_wd,
            train_loss: m.loss(),
            train_acc: m.accuracy(),
            test: eval_rec.as_ref().map(|r| (r.test_loss, r.test_acc)),
            param_norm: model.params.norm(),
        };
        observer.on_step(&rec)?;
        if let Some(mut r) = eval_rec.take() {
            observer.on_eval(&mut r, &model)?;
            metrics.push(r);
            if recent.len() > GROK_SUSTAIN {
                recent.pop_front();
            }
            recent.push_back((step, model.clone()));
            if grok.is_none() && start == 0 {
                if let Some(g) = detect_grok(&metrics) {
                    let (_, gm) = recent
                        .iter()
                        .find(|(s, _)| *s == g)
                        .expect("grok step is within the retained evaluations");
                    grok = Some(checkpoint(gm, g, cfg.seed, Some(Phase::Grok)));
                }
            }
        }
        if step % cfg.checkpoint_interval == 0 {
            periodic.push(checkpoint(&model, step, cfg.seed, None));
        }
    }

    let anchor = grok
        .as_ref()
        .map_or(start + cfg.steps / 2, |g| start + (g.step - start) / 2);
    let mut pre = periodic
        .iter()
        .rev()
        .find(|c| c.step <= anchor)
        .cloned()
        .unwrap_or_else(|| init.clone());
    pre.extra = serde_json::json!({ "phase": Phase::PreGrok.name() });
    let late = checkpoint(&model, end, cfg.seed, Some(Phase::Late));
    Ok(TrainOutcome {
        grok_step: grok.as_ref().map(|g| g.step),
        checkpoints: PhaseCheckpoints {
            init,
            pre_grok: pre,
            grok,
            late,
            periodic,
        },
        metrics,
        model,
        opt,
    })
}

/// Recomputes the full-model parameter delta of one update from its parts.
pub fn reconstruct(parts: &UpdateParts) -> Vec<Vec<f64>> {
    parts
        .grad
        .iter()
        .zip(&parts.wd)
        .map(|(g, w)| g.iter().zip(w).map(|(a, b)| a + b).collect())
        .collect()
}

#[cfg(test)]
mod tests;
