//! Causal probes on the attention view: subspace ablation, random controls,
//! perturbation sweeps, directional curvature and path-norm pairs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::checkpoint::Checkpoint;
use crate::model::{dot, Batch, Metrics, Model, ModelError, ParamVector};
use crate::nncore::{Tensor, IGNORE_INDEX};
use crate::probes::{self, ProbeError};
use crate::spectra::{self, SpectraError};
use crate::spectral::SpectralSnapshot;
use crate::trainer::{self, ContinueOverrides, RunConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum InterventionError {
    #[error("basis vector {0} has zero norm (or lies in the span of earlier vectors)")]
    ZeroBasisVector(usize),
    #[error("vector has dimension {got}, attention view has {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("ε grid must be symmetric about 0 and contain 0")]
    BadGrid,
    #[error("non-finite loss at ε = {0}")]
    NonFinite(f64),
    #[error("step size must be positive")]
    BadStep,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
}

/// Orthonormalizes `basis` by modified Gram-Schmidt (two passes).
pub fn orthonormalize(basis: &[ParamVector]) -> Result<Vec<ParamVector>, InterventionError> {
    let mut out: Vec<ParamVector> = Vec::with_capacity(basis.len());
    for (i, b) in basis.iter().enumerate() {
        let n0 = b.norm();
        if n0 == 0.0 {
            return Err(InterventionError::ZeroBasisVector(i));
        }
        let mut v = b.0.clone();
        for _ in 0..2 {
            for q in &out {
                let c = dot(&q.0, &v);
                v.iter_mut().zip(&q.0).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = ParamVector(v);
        let nn = n.norm();
        if nn <= 1e-12 * n0 {
            return Err(InterventionError::ZeroBasisVector(i));
        }
        out.push(ParamVector(n.0.iter().map(|x| x / nn).collect()));
    }
    Ok(out)
}

/// `θ − Σ_b ⟨b, θ⟩ b` for an orthonormal basis.
pub fn project_out(theta: &ParamVector, basis: &[ParamVector]) -> ParamVector {
    let mut v = theta.0.clone();
    for b in basis {
        let c = dot(&b.0, &v);
        v.iter_mut().zip(&b.0).for_each(|(x, y)| *x -= c * y);
    }
    ParamVector(v)
}

fn check_dim(model: &Model, v: &ParamVector) -> Result<(), InterventionError> {
    let expected = model.attention_dim();
    if v.len() != expected {
        return Err(InterventionError::Dimension { got: v.len(), expected });
    }
    Ok(())
}

/// Copy of `model` with `basis` projected out of its attention view.
pub fn ablated_model(model: &Model, basis: &[ParamVector]) -> Result<Model, InterventionError> {
    for b in basis {
        check_dim(model, b)?;
    }
    let q = orthonormalize(basis)?;
    let mut m = model.clone();
    if !q.is_empty() {
        m.set_attention_view(&project_out(&model.attention_view(), &q))?;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    /// `edge`, `random-<i>`, or a caller label.
    pub basis: String,
    pub step: usize,
    pub base_acc: f64,
    pub ablated_acc: f64,
    pub delta_acc: f64,
}

pub fn ablate(
    model: &Model,
    step: usize,
    label: &str,
    basis: &[ParamVector],
    eval: &[Batch],
) -> Result<AblationResult, InterventionError> {
    let base = model.evaluate(eval)?.accuracy();
    let ablated = ablated_model(model, basis)?.evaluate(eval)?.accuracy();
    Ok(AblationResult {
        basis: label.to_string(),
        step,
        base_acc: base,
        ablated_acc: ablated,
        delta_acc: ablated - base,
    })
}

/// The leading `dims` singular directions of a snapshot.
pub fn edge_basis(snap: &SpectralSnapshot, dims: usize) -> Vec<ParamVector> {
    (1..=dims).filter_map(|k| snap.direction(k).ok().cloned()).collect()
}

/// `dim` standard-normal directions in the attention view.
pub fn random_basis(p: usize, dim: usize, seed: u64) -> Vec<ParamVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim)
        .map(|_| ParamVector((0..p).map(|_| StandardNormal.sample(&mut rng)).collect()))
        .collect()
}

/// Ablates `trials` random `dim`-dimensional subspaces.
pub fn random_control(
    model: &Model,
    step: usize,
    dim: usize,
    trials: usize,
    seed: u64,
    eval: &[Batch],
) -> Result<Vec<AblationResult>, InterventionError> {
    let base = model.evaluate(eval)?.accuracy();
    let p = model.attention_dim();
    (0..trials)
        .map(|t| {
            let basis = random_basis(p, dim, seed.wrapping_mul(1_000_003).wrapping_add(t as u64));
            let acc = ablated_model(model, &basis)?.evaluate(eval)?.accuracy();
            Ok(AblationResult {
                basis: format!("random-{t}"),
                step,
                base_acc: base,
                ablated_acc: acc,
                delta_acc: acc - base,
            })
        })
        .collect()
}

/// `|mean edge Δacc| / max |random Δacc|` (infinite when the controls are exactly zero).
pub fn impact_ratio(edge: &[AblationResult], random: &[AblationResult]) -> f64 {
    let e = edge.iter().map(|r| r.delta_acc.abs()).sum::<f64>() / edge.len().max(1) as f64;
    let r = random.iter().map(|r| r.delta_acc.abs()).fold(0.0, f64::max);
    if r == 0.0 {
        f64::INFINITY
    } else {
        e / r
    }
}

fn perturbed(model: &Model, base: &ParamVector, dir: &ParamVector, eps: f64) -> Result<Model, InterventionError> {
    let mut m = model.clone();
    let v = ParamVector(base.0.iter().zip(&dir.0).map(|(t, d)| t + eps * d).collect());
    m.set_attention_view(&v)?;
    Ok(m)
}

fn unit(model: &Model, direction: &ParamVector) -> Result<ParamVector, InterventionError> {
    check_dim(model, direction)?;
    direction.normalized().ok_or(InterventionError::ZeroBasisVector(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub direction: String,
    pub eps: Vec<f64>,
    pub loss: Vec<f64>,
    pub kl: Vec<f64>,
    pub base_loss: f64,
    /// ε values whose loss was not finite.
    pub nonfinite: Vec<f64>,
}

impl SweepCurve {
    pub fn max_kl(&self) -> f64 {
        self.kl.iter().copied().filter(|k| k.is_finite()).fold(0.0, f64::max)
    }

    pub fn max_loss_change(&self) -> f64 {
        self.loss
            .iter()
            .filter(|l| l.is_finite())
            .map(|l| (l - self.base_loss).abs())
            .fold(0.0, f64::max)
    }
}

/// `n` points uniform on `[-r, r]` (41 on `[-2, 2]` by default).
pub fn eps_grid(r: f64, n: usize) -> Vec<f64> {
    let n = n.max(1) | 1;
    (0..n)
        .map(|i| {
            let x = -r + 2.0 * r * i as f64 / (n - 1).max(1) as f64;
            if i == n / 2 {
                0.0
            } else {
                x
            }
        })
        .collect()
}

pub fn default_grid() -> Vec<f64> {
    eps_grid(2.0, 41)
}

fn log_softmax_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lz = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            row.iter().map(|v| v - lz).collect()
        })
        .collect()
}

/// Mean over labelled positions of `KL(base ‖ other)`, plus the count.
fn kl_sum(base: &Tensor, other: &Tensor, targets: &[usize]) -> (f64, usize) {
    let lp = log_softmax_rows(base);
    let lq = log_softmax_rows(other);
    let mut s = 0.0;
    let mut n = 0;
    for (r, &t) in targets.iter().enumerate() {
        if t == IGNORE_INDEX {
            continue;
        }
        s += lp[r]
            .iter()
            .zip(&lq[r])
            .map(|(a, b)| a.exp() * (a - b))
            .sum::<f64>()
            .max(0.0);
        n += 1;
    }
    (s, n)
}

/// Loss and output divergence as the model moves by `ε·v` for each `ε`.
pub fn eps_sweep(
    model: &Model,
    label: &str,
    direction: &ParamVector,
    grid: &[f64],
    eval: &[Batch],
) -> Result<SweepCurve, InterventionError> {
    let symmetric = grid.contains(&0.0) && grid.iter().all(|e| grid.iter().any(|f| (f + e).abs() < 1e-12));
    if !symmetric {
        return Err(InterventionError::BadGrid);
    }
    let v = unit(model, direction)?;
    let theta = model.attention_view();
    let base_logits: Vec<Tensor> = eval.iter().map(|b| model.logits(b)).collect::<Result<_, _>>()?;
    let base_loss = model.evaluate(eval)?.loss();
    let mut curve = SweepCurve {
        direction: label.to_string(),
        eps: grid.to_vec(),
        loss: Vec::with_capacity(grid.len()),
        kl: Vec::with_capacity(grid.len()),
        base_loss,
        nonfinite: Vec::new(),
    };
    for &e in grid {
        if e == 0.0 {
            curve.loss.push(base_loss);
            curve.kl.push(0.0);
            continue;
        }
        let m = perturbed(model, &theta, &v, e)?;
        let mut metrics = Metrics::default();
        let (mut ks, mut kn) = (0.0, 0);
        let mut ok = true;
        for (b, bl) in eval.iter().zip(&base_logits) {
            match m.logits(b) {
                Ok(l) => {
                    metrics.merge(&b.score(&l)?);
                    let (s, n) = kl_sum(bl, &l, b.targets());
                    ks += s;
                    kn += n;
                }
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        let loss = metrics.loss();
        if !ok || !loss.is_finite() {
            curve.nonfinite.push(e);
            curve.loss.push(f64::NAN);
            curve.kl.push(f64::NAN);
        } else {
            curve.loss.push(loss);
            curve.kl.push(ks / kn.max(1) as f64);
        }
    }
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReading {
    pub direction: String,
    pub eps: f64,
    /// `vᵀHv` from the central second difference at `eps`.
    pub value: f64,
    /// The same estimate at `eps/2`.
    pub half_value: f64,
    /// The two readings agree within 20%.
    pub consistent: bool,
}

/// Central second difference of a scalar function along `t`.
pub fn second_difference(
    f: impl Fn(f64) -> Result<f64, InterventionError>,
    eps: f64,
) -> Result<f64, InterventionError> {
    let (lp, l0, lm) = (f(eps)?, f(0.0)?, f(-eps)?);
    for (l, e) in [(lp, eps), (l0, 0.0), (lm, -eps)] {
        if !l.is_finite() {
            return Err(InterventionError::NonFinite(e));
        }
    }
    Ok((lp - 2.0 * l0 + lm) / (eps * eps))
}

/// `v̂ᵀHv̂` of the loss on `eval` along a direction in the attention view.
pub fn directional_curvature(
    model: &Model,
    label: &str,
    direction: &ParamVector,
    eps: f64,
    eval: &[Batch],
) -> Result<CurvatureReading, InterventionError> {
    if !(eps > 0.0) {
        return Err(InterventionError::BadStep);
    }
    let v = unit(model, direction)?;
    let theta = model.attention_view();
    let loss = |e: f64| -> Result<f64, InterventionError> {
        if e == 0.0 {
            return Ok(model.evaluate(eval)?.loss());
        }
        Ok(perturbed(model, &theta, &v, e)?.evaluate(eval)?.loss())
    };
    let value = second_difference(loss, eps)?;
    let half_value = second_difference(loss, eps / 2.0)?;
    let scale = value.abs().max(half_value.abs());
    Ok(CurvatureReading {
        direction: label.to_string(),
        eps,
        value,
        half_value,
        consistent: scale == 0.0 || (value - half_value).abs() <= 0.2 * scale || scale < 1e-6,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathNormRow {
    pub step: usize,
    pub k: usize,
    pub sigma: f64,
    /// `|L(θ + c σ_k v_k) − L(θ)|`.
    pub delta_loss: f64,
}

/// Scale factor applied to `σ_k` when perturbing along `v_k`.
pub const PATHNORM_SCALE: f64 = 1.0;

pub fn pathnorm_table(
    model: &Model,
    snap: &SpectralSnapshot,
    eval: &[Batch],
) -> Result<Vec<PathNormRow>, InterventionError> {
    let base = model.evaluate(eval)?.loss();
    let theta = model.attention_view();
    let mut rows = Vec::new();
    for k in 1..=snap.width() {
        let sigma = snap.sigma[k - 1];
        let delta_loss = match snap.direction(k) {
            Ok(v) if sigma > 0.0 => {
                check_dim(model, v)?;
                let l = perturbed(model, &theta, v, PATHNORM_SCALE * sigma)?
                    .evaluate(eval)?
                    .loss();
                (l - base).abs()
            }
            _ => 0.0,
        };
        rows.push(PathNormRow {
            step: snap.end_step,
            k,
            sigma,
            delta_loss,
        });
    }
    Ok(rows)
}

/// One row of the weight-decay intervention table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WdRow {
    pub weight_decay: f64,
    pub from_step: usize,
    pub steps: usize,
    pub accuracy: f64,
    /// Held-out R² of a linear depth probe on the last block.
    pub depth_r2: f64,
    /// Mean attention entropy of the first block (nats).
    pub entropy: f64,
    pub param_norm: f64,
}

/// Continues `ck` for `steps` at each weight decay in `wds` and measures the
/// result on `eval` (accuracy, attention entropy) and `probe` (depth R²).
pub fn wd_intervention(
    ck: &Checkpoint,
    base: &RunConfig,
    wds: &[f64],
    steps: usize,
    eval: &[Batch],
    probe: &[Batch],
    seed: u64,
) -> Result<Vec<WdRow>, InterventionError> {
    let mut rows = Vec::with_capacity(wds.len());
    for &wd in wds {
        let out = trainer::continue_from(
            ck,
            base,
            ContinueOverrides {
                weight_decay: Some(wd),
                lr: None,
                steps: Some(steps),
            },
            &mut (),
        )?;
        let model = out.model;
        let accuracy = model.evaluate(eval)?.accuracy();
        let layer = model.config.n_layers.saturating_sub(1);
        let data = probes::capture_rows(&model, probe, layer)?;
        let depth_r2 = probes::fit_linear(&data.x, &data.depth_targets(), None, seed)?.test_r2;
        let attn = spectra::model_attention(&model, eval)?;
        let entropy = attn.first().map(|a| a.entropy).ok_or(SpectraError::Empty)?;
        rows.push(WdRow {
            weight_decay: wd,
            from_step: ck.step,
            steps,
            accuracy,
            depth_r2,
            entropy,
            param_norm: model.params.norm(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
