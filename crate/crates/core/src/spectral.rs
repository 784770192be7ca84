//! Singular structure of the rolling trajectory matrix of parameter updates.

use std::collections::VecDeque;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::linalg::{dot, sym_eigen};
use crate::model::ParamVector;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SpectralError {
    #[error("trajectory window is all zero")]
    ZeroWindow,
    #[error("window needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("rows have inconsistent lengths")]
    Ragged,
    #[error("direction {0} is degenerate (zero singular value)")]
    InvalidDirection(usize),
    #[error("direction index {k} out of range for window {w}")]
    NoSuchDirection { k: usize, w: usize },
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("gap is zero at the reference window")]
    ZeroReferenceGap,
    #[error("no snapshots in step range {0}..={1}")]
    EmptyRange(usize, usize),
}

/// `W` consecutive attention-view deltas ending at `end_step`.
#[derive(Clone, Debug)]
pub struct TrajectoryWindow {
    pub rows: Vec<ParamVector>,
    pub end_step: usize,
}

/// Directions with `σ_k ≤ INVALID_REL · σ_1` carry no usable direction.
pub const INVALID_REL: f64 = 1e-10;

/// Singular values and right singular vectors of one window.
#[derive(Clone, Debug)]
pub struct SpectralSnapshot {
    pub end_step: usize,
    /// Descending.
    pub sigma: Vec<f64>,
    /// Unit right singular vectors (zero where invalid).
    pub vectors: Vec<ParamVector>,
    /// Left singular vectors, `u[k][i]` is the weight of row `i`.
    pub u: Vec<Vec<f64>>,
    pub valid: Vec<bool>,
}

fn hestenes_pass(y: &mut [Vec<f64>], q: &mut [Vec<f64>]) -> bool {
    let w = y.len();
    let mut rotated = false;
    for i in 0..w {
        for j in i + 1..w {
            let a = dot(&y[i], &y[i]);
            let b = dot(&y[j], &y[j]);
            let c = dot(&y[i], &y[j]);
            if c == 0.0 || c.abs() <= 1e-15 * (a * b).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (b - a) / (2.0 * c);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let t = if zeta == 0.0 { 1.0 } else { t };
            let cs = 1.0 / (1.0 + t * t).sqrt();
            let sn = cs * t;
            let (lo, hi) = y.split_at_mut(j);
            for (yi, yj) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
                let (u, v) = (*yi, *yj);
                *yi = cs * u - sn * v;
                *yj = sn * u + cs * v;
            }
            for row in q.iter_mut() {
                let (u, v) = (row[i], row[j]);
                row[i] = cs * u - sn * v;
                row[j] = sn * u + cs * v;
            }
        }
    }
    rotated
}

/// Thin SVD of the window through its `W×W` Gram matrix.
///
/// The Gram eigenvectors rotate the rows into a nearly orthogonal set; a few
/// one-sided Jacobi passes then finish the orthogonalization so that small
/// singular values keep their relative accuracy.
pub fn snapshot(window: &TrajectoryWindow) -> Result<SpectralSnapshot, SpectralError> {
    let w = window.rows.len();
    if w < 2 {
        return Err(SpectralError::TooFewRows(w));
    }
    let p = window.rows[0].len();
    if window.rows.iter().any(|r| r.len() != p) {
        return Err(SpectralError::Ragged);
    }
    let mut gram = vec![0.0; w * w];
    for i in 0..w {
        for j in 0..=i {
            let g = window.rows[i].dot(&window.rows[j].0);
            gram[i * w + j] = g;
            gram[j * w + i] = g;
        }
    }
    if gram.iter().all(|&g| g == 0.0) {
        return Err(SpectralError::ZeroWindow);
    }
    let (_, evecs) = sym_eigen(&gram, w);
    // y_k = Xᵀ u_k, and q[i][k] = u_k[i]
    let mut y: Vec<Vec<f64>> = evecs
        .iter()
        .map(|u| {
            let mut acc = vec![0.0; p];
            for (ui, row) in u.iter().zip(&window.rows) {
                for (a, x) in acc.iter_mut().zip(&row.0) {
                    *a += ui * x;
                }
            }
            acc
        })
        .collect();
    let mut q: Vec<Vec<f64>> = (0..w).map(|i| evecs.iter().map(|u| u[i]).collect()).collect();
    for _ in 0..10 {
        if !hestenes_pass(&mut y, &mut q) {
            break;
        }
    }
    let norms: Vec<f64> = y.iter().map(|r| dot(r, r).sqrt()).collect();
    let mut order: Vec<usize> = (0..w).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let s1 = norms[order[0]];
    if s1 == 0.0 {
        return Err(SpectralError::ZeroWindow);
    }
    let mut snap = SpectralSnapshot {
        end_step: window.end_step,
        sigma: Vec::with_capacity(w),
        vectors: Vec::with_capacity(w),
        u: Vec::with_capacity(w),
        valid: Vec::with_capacity(w),
    };
    for &k in &order {
        let s = norms[k];
        let ok = s > INVALID_REL * s1;
        snap.sigma.push(if ok { s } else { 0.0 });
        snap.valid.push(ok);
        snap.u.push(q.iter().map(|row| row[k]).collect());
        snap.vectors.push(if ok {
            ParamVector(y[k].iter().map(|x| x / s).collect())
        } else {
            ParamVector::zeros(p)
        });
    }
    Ok(snap)
}

impl SpectralSnapshot {
    pub fn width(&self) -> usize {
        self.sigma.len()
    }

    /// `σ_k² − σ_{k+1}²` for `k = 1..W−1` (index 0 is `k = 1`).
    pub fn gaps(&self) -> Vec<f64> {
        self.sigma.windows(2).map(|s| s[0] * s[0] - s[1] * s[1]).collect()
    }

    pub fn g23(&self) -> f64 {
        if self.sigma.len() < 3 {
            0.0
        } else {
            self.sigma[1].powi(2) - self.sigma[2].powi(2)
        }
    }

    pub fn k_star(&self) -> KStar {
        k_star(&self.sigma)
    }

    /// Direction `k` (1-based), if valid.
    pub fn direction(&self, k: usize) -> Result<&ParamVector, SpectralError> {
        if k == 0 || k > self.width() {
            return Err(SpectralError::NoSuchDirection { k, w: self.width() });
        }
        if !self.valid[k - 1] {
            return Err(SpectralError::InvalidDirection(k));
        }
        Ok(&self.vectors[k - 1])
    }

    pub fn summary(&self, prev: Option<&SpectralSnapshot>) -> SnapshotRecord {
        let ks = self.k_star();
        let overlap: Vec<Option<f64>> = (1..=self.width())
            .map(|k| prev.and_then(|p| overlap_sq(p, self, k).ok()))
            .collect();
        SnapshotRecord {
            step: self.end_step,
            sigma: self.sigma.clone(),
            gaps: self.gaps(),
            g23: self.g23(),
            k_star: ks.k,
            k_star_degenerate: ks.degenerate,
            rotation: overlap
                .iter()
                .map(|o| o.map(|c| c.sqrt().min(1.0).acos().to_degrees()))
                .collect(),
            overlap_sq: overlap,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KStar {
    /// 1-based.
    pub k: usize,
    /// All singular values equal (every gap zero).
    pub degenerate: bool,
}

/// Index of the largest adjacent squared gap, ties to the smallest `k`.
pub fn k_star(sigma: &[f64]) -> KStar {
    let gaps: Vec<f64> = sigma.windows(2).map(|s| s[0] * s[0] - s[1] * s[1]).collect();
    let mut best = 0;
    for (i, &g) in gaps.iter().enumerate() {
        if g > gaps[best] {
            best = i;
        }
    }
    let scale = sigma.first().map_or(0.0, |s| s * s);
    KStar {
        k: best + 1,
        degenerate: gaps.iter().all(|&g| g.abs() <= 1e-12 * scale),
    }
}

/// `|⟨v_k(a), v_k(b)⟩|²`.
pub fn overlap_sq(a: &SpectralSnapshot, b: &SpectralSnapshot, k: usize) -> Result<f64, SpectralError> {
    let va = a.direction(k)?;
    let vb = b.direction(k)?;
    if va.len() != vb.len() {
        return Err(SpectralError::DimensionMismatch(va.len(), vb.len()));
    }
    Ok(va.dot(&vb.0).powi(2))
}

/// Angle in degrees between `v_k` of two snapshots, ignoring sign.
pub fn rotation(prev: &SpectralSnapshot, curr: &SpectralSnapshot, k: usize) -> Result<f64, SpectralError> {
    let c = overlap_sq(prev, curr, k)?.sqrt();
    Ok(c.min(1.0).acos().to_degrees())
}

/// One line of the snapshot log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub step: usize,
    pub sigma: Vec<f64>,
    pub gaps: Vec<f64>,
    pub g23: f64,
    pub k_star: usize,
    #[serde(default)]
    pub k_star_degenerate: bool,
    /// Degrees versus the previous snapshot, per direction.
    pub rotation: Vec<Option<f64>>,
    /// `|⟨v_k(prev), v_k⟩|²`, the per-window stability term.
    pub overlap_sq: Vec<Option<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Compression {
    pub ratio: f64,
    /// The later gap is zero.
    pub infinite: bool,
}

fn mean_in<'a>(
    series: &'a [SnapshotRecord],
    range: &RangeInclusive<usize>,
    f: impl Fn(&'a SnapshotRecord) -> Option<f64>,
) -> Option<f64> {
    let v: Vec<f64> = series
        .iter()
        .filter(|r| range.contains(&r.step))
        .filter_map(f)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Ratio of the mean `g23` over steps `a` to the mean over steps `b`.
pub fn gap_compression(
    series: &[SnapshotRecord],
    a: RangeInclusive<usize>,
    b: RangeInclusive<usize>,
) -> Result<Compression, SpectralError> {
    let ga = mean_in(series, &a, |r| Some(r.g23)).ok_or(SpectralError::EmptyRange(*a.start(), *a.end()))?;
    let gb = mean_in(series, &b, |r| Some(r.g23)).ok_or(SpectralError::EmptyRange(*b.start(), *b.end()))?;
    compression_ratio(ga, gb)
}

pub fn compression_ratio(ga: f64, gb: f64) -> Result<Compression, SpectralError> {
    if ga <= 0.0 {
        return Err(SpectralError::ZeroReferenceGap);
    }
    Ok(if gb <= 0.0 {
        Compression {
            ratio: f64::INFINITY,
            infinite: true,
        }
    } else {
        Compression {
            ratio: ga / gb,
            infinite: false,
        }
    })
}

/// Stability coefficient: mean of `|⟨v_k(t), v_k(t+stride)⟩|²` over the
/// snapshots in `range` (1-based `k`).
pub fn stability(series: &[SnapshotRecord], k: usize, range: RangeInclusive<usize>) -> Option<f64> {
    mean_in(series, &range, |r| r.overlap_sq.get(k - 1).copied().flatten())
}

/// Mean rotation of `v_k` over the snapshots in `range`.
pub fn mean_rotation(series: &[SnapshotRecord], k: usize, range: RangeInclusive<usize>) -> Option<f64> {
    mean_in(series, &range, |r| r.rotation.get(k - 1).copied().flatten())
}

/// Ring of the most recent `window` items; a snapshot is due every `stride`
/// steps once the ring is full.
#[derive(Debug)]
pub struct WindowBuffer<T> {
    window: usize,
    stride: usize,
    items: VecDeque<(usize, T)>,
}

impl<T> WindowBuffer<T> {
    pub fn new(window: usize, stride: usize) -> Self {
        Self {
            window,
            stride: stride.max(1),
            items: VecDeque::with_capacity(window + 1),
        }
    }

    /// Adds the item for `step` and reports whether a snapshot is due.
    pub fn push(&mut self, step: usize, item: T) -> bool {
        if self.items.len() == self.window {
            self.items.pop_front();
        }
        self.items.push_back((step, item));
        self.items.len() == self.window && step.is_multiple_of(self.stride)
    }

    /// Buffered `(step, item)` pairs, oldest first.
    pub fn items(&self) -> impl Iterator<Item = &(usize, T)> {
        self.items.iter()
    }
}
