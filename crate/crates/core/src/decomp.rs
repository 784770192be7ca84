//! Projections of the gradient and weight-decay parts of each update onto the
//! window's singular directions.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::spectral::SpectralSnapshot;
use crate::trainer::StepRecord;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DecompError {
    #[error("window covers steps {got:?}, snapshot expects {expected:?}")]
    WindowMismatch { got: Vec<usize>, expected: Vec<usize> },
    #[error("vector dimension {0} does not match snapshot dimension {1}")]
    Dimension(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Both parts push the same way.
    Aligned,
    Opposed,
    /// One of the projections is zero.
    Degenerate,
}

impl Alignment {
    pub fn of(a: f64, b: f64) -> Self {
        let s = a * b;
        if s > 0.0 {
            Alignment::Aligned
        } else if s < 0.0 {
            Alignment::Opposed
        } else {
            Alignment::Degenerate
        }
    }
}

/// How per-step projections are combined over the window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Fractions from the window-summed projections.
    #[default]
    WindowSum,
    /// Mean of per-step fractions.
    PerStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionSplit {
    /// 1-based direction index.
    pub k: usize,
    pub a_grad: f64,
    pub a_wd: f64,
    /// `None` when the direction is invalid or both projections vanish.
    pub grad_fraction: Option<f64>,
    pub alignment: Alignment,
}

impl DirectionSplit {
    pub fn wd_fraction(&self) -> Option<f64> {
        self.grad_fraction.map(|f| 1.0 - f)
    }
}

/// One line of the decomposition log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateDecomposition {
    pub step: usize,
    pub directions: Vec<DirectionSplit>,
}

impl UpdateDecomposition {
    pub fn fraction(&self, k: usize) -> Option<f64> {
        self.directions.get(k.checked_sub(1)?)?.grad_fraction
    }

    pub fn alignment(&self, k: usize) -> Option<Alignment> {
        Some(self.directions.get(k.checked_sub(1)?)?.alignment)
    }
}

fn fraction(g: f64, w: f64) -> Option<f64> {
    let e = g * g + w * w;
    (e > 0.0).then(|| g * g / e)
}

/// Splits the window's update energy along each valid `v_k`.
pub fn decompose(
    records: &[&StepRecord],
    snap: &SpectralSnapshot,
    mode: Aggregation,
) -> Result<UpdateDecomposition, DecompError> {
    let w = snap.width();
    let expected: Vec<usize> = (snap.end_step + 1 - w.min(snap.end_step + 1)..=snap.end_step).collect();
    let got: Vec<usize> = records.iter().map(|r| r.step).collect();
    if got != expected {
        return Err(DecompError::WindowMismatch { got, expected });
    }
    let p = snap.vectors[0].len();
    if let Some(r) = records
        .iter()
        .find(|r| r.delta_grad.len() != p || r.delta_wd.len() != p)
    {
        return Err(DecompError::Dimension(r.delta_grad.len().max(r.delta_wd.len()), p));
    }
    let directions = (0..w)
        .map(|i| {
            let k = i + 1;
            if !snap.valid[i] {
                return DirectionSplit {
                    k,
                    a_grad: 0.0,
                    a_wd: 0.0,
                    grad_fraction: None,
                    alignment: Alignment::Degenerate,
                };
            }
            let v = &snap.vectors[i];
            let per: Vec<(f64, f64)> = records
                .iter()
                .map(|r| (v.dot(&r.delta_grad.0), v.dot(&r.delta_wd.0)))
                .collect();
            let a_grad: f64 = per.iter().map(|x| x.0).sum();
            let a_wd: f64 = per.iter().map(|x| x.1).sum();
            let grad_fraction = match mode {
                Aggregation::WindowSum => fraction(a_grad, a_wd),
                Aggregation::PerStep => {
                    let f: Vec<f64> = per.iter().filter_map(|&(g, w)| fraction(g, w)).collect();
                    (!f.is_empty()).then(|| f.iter().sum::<f64>() / f.len() as f64)
                }
            };
            DirectionSplit {
                k,
                a_grad,
                a_wd,
                grad_fraction,
                alignment: Alignment::of(a_grad, a_wd),
            }
        })
        .collect();
    Ok(UpdateDecomposition {
        step: snap.end_step,
        directions,
    })
}

pub const FLIP_THRESHOLD: f64 = 0.5;
pub const FLIP_PERSIST: usize = 3;

/// First window where the grad fraction on `v_k` drops below one half and
/// stays there for three consecutive windows.
pub fn flip_detector(series: &[UpdateDecomposition], k: usize) -> Option<usize> {
    let below: Vec<bool> = series
        .iter()
        .map(|d| d.fraction(k).is_some_and(|f| f < FLIP_THRESHOLD))
        .collect();
    (0..series.len().saturating_sub(FLIP_PERSIST - 1))
        .find(|&i| below[i..i + FLIP_PERSIST].iter().all(|&b| b))
        .map(|i| series[i].step)
}

/// Mean grad fraction on `v_k` over windows ending in `range`.
pub fn mean_fraction(series: &[UpdateDecomposition], k: usize, range: RangeInclusive<usize>) -> Option<f64> {
    let f: Vec<f64> = series
        .iter()
        .filter(|d| range.contains(&d.step))
        .filter_map(|d| d.fraction(k))
        .collect();
    (!f.is_empty()).then(|| f.iter().sum::<f64>() / f.len() as f64)
}

/// Share of windows in `range` whose `v_k` alignment equals `which`.
pub fn alignment_share(
    series: &[UpdateDecomposition],
    k: usize,
    which: Alignment,
    range: RangeInclusive<usize>,
) -> Option<f64> {
    let a: Vec<Alignment> = series
        .iter()
        .filter(|d| range.contains(&d.step))
        .filter_map(|d| d.alignment(k))
        .collect();
    (!a.is_empty()).then(|| a.iter().filter(|&&x| x == which).count() as f64 / a.len() as f64)
}
