//! Measurements on trained runs, shared by the command line and the
//! acceptance checks.

use serde::{Deserialize, Serialize};

use crate::decomp::{alignment_share, mean_fraction, Alignment, UpdateDecomposition};
use crate::gapflow::{self, ClassLabel, ClassThresholds, Evidence};
use crate::interventions::{self, AblationResult, InterventionError};
use crate::model::{Arch, Batch, Model};
use crate::nncore::{NnError, Tensor, IGNORE_INDEX};
use crate::probes::{self, ProbeError};
use crate::spectra::{self, EdgeFourierReport, SpectraError};
use crate::spectral::{mean_rotation, SnapshotRecord, SpectralSnapshot};
use crate::trainer::{RunConfig, TaskData, TrainError};

pub const EVAL_CHUNK: usize = 250;
/// Edge responses use a step of this fraction of the direction's singular value.
pub const RESPONSE_SCALE: f64 = 0.1;
/// An edge sharing its peak with a bulk direction must be this much sharper.
pub const SEPARATION_RATIO: f64 = 2.0;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Intervention(#[from] InterventionError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("direction v{0} is not valid in this snapshot")]
    InvalidDirection(usize),
    #[error("no labelled positions in the evaluation batches")]
    NoLabels,
}

/// Test examples (the first `limit`) in evaluation chunks.
pub fn eval_batches(cfg: &RunConfig, limit: Option<usize>) -> Result<Vec<Batch>, TrainError> {
    Ok(TaskData::generate(cfg)?.test_batches(limit, EVAL_CHUNK))
}

pub fn train_eval_batches(cfg: &RunConfig) -> Result<Vec<Batch>, TrainError> {
    Ok(TaskData::generate(cfg)?.train_eval_batches(EVAL_CHUNK))
}

/// Index of the residual capture of the last block that produces the output.
pub fn last_block(model: &Model) -> usize {
    match model.config.arch {
        Arch::DecoderOnly => model.config.n_layers.saturating_sub(1),
        Arch::EncoderDecoder => model.config.n_dec_layers.saturating_sub(1),
    }
}

/// Edge ablation against random subspaces of the same dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationStudy {
    pub step: usize,
    pub dims: usize,
    pub edge: AblationResult,
    pub controls: Vec<AblationResult>,
    pub max_control: f64,
    pub impact_ratio: f64,
}

pub fn ablation_study(
    model: &Model,
    snap: &SpectralSnapshot,
    dims: usize,
    controls: usize,
    seed: u64,
    eval: &[Batch],
) -> Result<AblationStudy, PipelineError> {
    let basis = interventions::edge_basis(snap, dims);
    if basis.len() < dims {
        return Err(PipelineError::InvalidDirection(basis.len() + 1));
    }
    let edge = interventions::ablate(model, snap.end_step, "edge", &basis, eval)?;
    let random = interventions::random_control(model, snap.end_step, dims, controls, seed, eval)?;
    Ok(AblationStudy {
        step: snap.end_step,
        dims,
        impact_ratio: interventions::impact_ratio(std::slice::from_ref(&edge), &random),
        max_control: random.iter().map(|r| r.delta_acc.abs()).fold(0.0, f64::max),
        edge,
        controls: random,
    })
}

/// Per-position responses to one direction, grouped by task label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionFunction {
    pub k: usize,
    pub eps: f64,
    pub fourier: EdgeFourierReport,
    /// Held-out R² of the label from the response.
    pub functional_r2: f64,
}

fn labelled_responses(
    model: &Model,
    snap: &SpectralSnapshot,
    k: usize,
    batches: &[Batch],
    layer: usize,
) -> Result<(f64, Vec<f64>, Vec<usize>), PipelineError> {
    let dir = snap.direction(k).map_err(|_| PipelineError::InvalidDirection(k))?;
    let eps = RESPONSE_SCALE * snap.sigma[k - 1];
    let resp = spectra::edge_response(model, dir, eps, batches, layer)?;
    let labels = batches.iter().flat_map(|b| b.targets().iter().copied());
    let (values, labels): (Vec<f64>, Vec<usize>) =
        resp.into_iter().zip(labels).filter(|(_, l)| *l != IGNORE_INDEX).unzip();
    if values.is_empty() {
        return Err(PipelineError::NoLabels);
    }
    Ok((eps, values, labels))
}

pub fn direction_function(
    model: &Model,
    snap: &SpectralSnapshot,
    k: usize,
    batches: &[Batch],
    layer: usize,
    seed: u64,
) -> Result<DirectionFunction, PipelineError> {
    let (eps, values, labels) = labelled_responses(model, snap, k, batches, layer)?;
    // labels absent from the sample (unused token ids) are dropped from the basis
    let mut present = labels.clone();
    present.sort_unstable();
    present.dedup();
    let dense: Vec<usize> = labels
        .iter()
        .map(|l| present.binary_search(l).expect("present"))
        .collect();
    let fourier = spectra::basis_fourier(k, &values, &dense, present.len())?;
    let x = Tensor::matrix(values.len(), 1, values)?;
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let functional_r2 = match probes::fit_linear(&x, &y, None, seed) {
        Ok(r) => r.test_r2,
        // a direction with no effect carries no label information
        Err(ProbeError::ConstantTarget) => 0.0,
        Err(e) => return Err(e.into()),
    };
    Ok(DirectionFunction {
        k,
        eps,
        fourier,
        functional_r2,
    })
}

/// Edge function, bulk functions and whether the two separate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionalReport {
    pub edge: DirectionFunction,
    pub bulk: Vec<DirectionFunction>,
    pub separation: bool,
}

/// Measures `v_1` against the valid directions past the snapshot's `k*`.
pub fn functional_report(
    model: &Model,
    snap: &SpectralSnapshot,
    batches: &[Batch],
    layer: usize,
    seed: u64,
) -> Result<FunctionalReport, PipelineError> {
    let edge = direction_function(model, snap, 1, batches, layer, seed)?;
    let first_bulk = snap.k_star().k.max(1) + 1;
    let mut bulk = Vec::new();
    for k in first_bulk..=snap.width() {
        if snap.valid[k - 1] {
            bulk.push(direction_function(model, snap, k, batches, layer, seed)?);
        }
    }
    let peaks: Vec<(usize, f64)> = bulk.iter().map(|b| (b.fourier.peak, b.fourier.elevation)).collect();
    let separation =
        !peaks.is_empty() && gapflow::separated((edge.fourier.peak, edge.fourier.elevation), &peaks, SEPARATION_RATIO);
    Ok(FunctionalReport { edge, bulk, separation })
}

/// Mean `v_k` grad fraction over windows before and after `split`.
pub fn phase_fractions(decomps: &[UpdateDecomposition], k: usize, split: usize) -> (Option<f64>, Option<f64>) {
    let pre = split.checked_sub(1).and_then(|e| mean_fraction(decomps, k, 0..=e));
    (pre, mean_fraction(decomps, k, split + 1..=usize::MAX))
}

/// Alignment picture on the post-grok windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub edge_aligned: Option<f64>,
    /// Share of windows where `v_k` is opposed, for each bulk `k`.
    pub bulk_opposed: Vec<(usize, Option<f64>)>,
}

pub fn post_alignment(decomps: &[UpdateDecomposition], from: usize, to: usize, bulk: &[usize]) -> AlignmentSummary {
    AlignmentSummary {
        edge_aligned: alignment_share(decomps, 1, Alignment::Aligned, from..=to),
        bulk_opposed: bulk
            .iter()
            .map(|&k| (k, alignment_share(decomps, k, Alignment::Opposed, from..=to)))
            .collect(),
    }
}

/// Classifier evidence from the late windows (`from` on) and a functional report.
pub fn class_evidence(
    decomps: &[UpdateDecomposition],
    snapshots: &[SnapshotRecord],
    from: usize,
    functional: &FunctionalReport,
) -> Evidence {
    Evidence {
        grad_fraction: mean_fraction(decomps, 1, from..=usize::MAX).unwrap_or(f64::NAN),
        rotation_deg: mean_rotation(snapshots, 1, from..=usize::MAX).unwrap_or(f64::NAN),
        functional_r2: functional.edge.functional_r2,
        separation: Some(functional.separation),
    }
}

pub fn classify_run(
    decomps: &[UpdateDecomposition],
    snapshots: &[SnapshotRecord],
    from: usize,
    functional: &FunctionalReport,
    th: &ClassThresholds,
) -> ClassLabel {
    gapflow::classify(&class_evidence(decomps, snapshots, from, functional), th)
}
