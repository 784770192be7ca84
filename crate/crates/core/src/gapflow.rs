//! Gap flow simulator and the edge-class classifier.

use serde::{Deserialize, Serialize};

use crate::decomp::UpdateDecomposition;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GapFlowError {
    #[error("time step must be positive, got {0}")]
    BadStep(f64),
    #[error("displacement d_{0} must be positive")]
    ZeroDisplacement(&'static str),
    #[error("learning rate must be positive")]
    BadLearningRate,
    #[error("window must be at least 2")]
    BadWindow,
    #[error("no decomposition records for direction {0}")]
    MissingLogs(usize),
}

/// Parameters of the gap ODE at the edge `k*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapFlowState {
    pub gap: f64,
    pub h_edge: f64,
    pub h_next: f64,
    pub h_mean: f64,
    pub d_mean: f64,
    pub d_edge: f64,
    pub d_next: f64,
    /// Gradient projection onto the edge direction.
    pub grad_edge: f64,
    pub grad_next: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub window: usize,
}

/// The three contributions to `dg/dt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapTerms {
    pub curvature: f64,
    pub damping: f64,
    pub driving: f64,
}

impl GapTerms {
    pub fn total(&self) -> f64 {
        self.curvature + self.damping + self.driving
    }
}

impl GapFlowState {
    pub fn validate(&self) -> Result<(), GapFlowError> {
        if !(self.lr > 0.0) {
            return Err(GapFlowError::BadLearningRate);
        }
        if self.window < 2 {
            return Err(GapFlowError::BadWindow);
        }
        if !(self.d_edge > 0.0) {
            return Err(GapFlowError::ZeroDisplacement("edge"));
        }
        if !(self.d_next > 0.0) {
            return Err(GapFlowError::ZeroDisplacement("next"));
        }
        Ok(())
    }

    pub fn terms(&self) -> Result<GapTerms, GapFlowError> {
        self.validate()?;
        let eta = self.lr;
        Ok(GapTerms {
            curvature: -eta * (self.h_edge - self.h_next) * self.d_mean,
            damping: -eta * (self.h_mean + self.weight_decay) * self.gap,
            driving: eta
                * self.window as f64
                * (self.grad_edge.powi(2) / self.d_edge - self.grad_next.powi(2) / self.d_next),
        })
    }

    /// Fixed point when the curvature term vanishes: `driving / (η(h̄ + ω))`.
    pub fn steady_gap(&self) -> Result<Option<f64>, GapFlowError> {
        let t = self.terms()?;
        let rate = self.lr * (self.h_mean + self.weight_decay);
        Ok((rate > 0.0).then(|| (t.driving + t.curvature) / rate))
    }
}

/// One explicit Euler step; returns the new gap.
pub fn gap_step(state: &GapFlowState, dt: f64) -> Result<f64, GapFlowError> {
    if !(dt > 0.0) {
        return Err(GapFlowError::BadStep(dt));
    }
    Ok(state.gap + dt * state.terms()?.total())
}

/// Gap trajectory over `steps` Euler steps, starting value included.
pub fn simulate(state: &GapFlowState, dt: f64, steps: usize) -> Result<Vec<f64>, GapFlowError> {
    let mut s = state.clone();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(s.gap);
    for _ in 0..steps {
        s.gap = gap_step(&s, dt)?;
        out.push(s.gap);
    }
    Ok(out)
}

/// Window energies on one direction: gradient (driving) vs decay (damping).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermBalance {
    pub step: usize,
    pub driving: f64,
    pub damping: f64,
}

impl TermBalance {
    pub fn total(&self) -> f64 {
        self.driving + self.damping
    }

    pub fn damping_share(&self) -> Option<f64> {
        let t = self.total();
        (t > 0.0).then(|| self.damping / t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseBalance {
    pub driving: f64,
    pub damping: f64,
    pub windows: usize,
}

impl PhaseBalance {
    pub fn damping_share(&self) -> Option<f64> {
        let t = self.driving + self.damping;
        (t > 0.0).then(|| self.damping / t)
    }
}

pub fn term_balance(series: &[UpdateDecomposition], k: usize) -> Result<Vec<TermBalance>, GapFlowError> {
    let out: Vec<TermBalance> = series
        .iter()
        .filter_map(|d| {
            d.directions.iter().find(|s| s.k == k).map(|s| TermBalance {
                step: d.step,
                driving: s.a_grad * s.a_grad,
                damping: s.a_wd * s.a_wd,
            })
        })
        .collect();
    if out.is_empty() {
        return Err(GapFlowError::MissingLogs(k));
    }
    Ok(out)
}

/// Summed energies before `split` and from `split` on.
pub fn phase_balance(balance: &[TermBalance], split: usize) -> (PhaseBalance, PhaseBalance) {
    let sum = |pred: &dyn Fn(usize) -> bool| {
        balance.iter().filter(|b| pred(b.step)).fold(
            PhaseBalance {
                driving: 0.0,
                damping: 0.0,
                windows: 0,
            },
            |acc, b| PhaseBalance {
                driving: acc.driving + b.driving,
                damping: acc.damping + b.damping,
                windows: acc.windows + 1,
            },
        )
    };
    (sum(&|s| s < split), sum(&|s| s >= split))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeClass {
    Functional,
    Mixed,
    Compression,
}

impl EdgeClass {
    pub fn name(self) -> &'static str {
        match self {
            EdgeClass::Functional => "functional",
            EdgeClass::Mixed => "mixed",
            EdgeClass::Compression => "compression",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    /// Late-phase gradient share of the edge direction.
    pub grad_fraction: f64,
    pub rotation_deg: f64,
    /// Held-out R² of the task label from edge responses.
    pub functional_r2: f64,
    /// Whether edge and bulk responses concentrate on different task modes;
    /// `None` when not measured.
    pub separation: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassThresholds {
    pub compression_grad: f64,
    pub compression_r2: f64,
    pub functional_grad: f64,
    pub functional_r2: f64,
}

impl Default for ClassThresholds {
    fn default() -> Self {
        Self {
            compression_grad: 0.2,
            compression_r2: 0.2,
            functional_grad: 0.5,
            functional_r2: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub class: EdgeClass,
    pub evidence: Evidence,
}

/// A functional label needs demonstrated edge/bulk separation; without it a
/// gradient-driven, informative edge is mixed.
pub fn classify(evidence: &Evidence, th: &ClassThresholds) -> ClassLabel {
    let e = evidence;
    let class = if e.grad_fraction < th.compression_grad && e.functional_r2 < th.compression_r2 {
        EdgeClass::Compression
    } else if e.grad_fraction > th.functional_grad && e.functional_r2 > th.functional_r2 && e.separation == Some(true) {
        EdgeClass::Functional
    } else {
        EdgeClass::Mixed
    };
    ClassLabel {
        class,
        evidence: evidence.clone(),
    }
}

/// Edge/bulk separation: the edge concentrates at least `ratio` times more
/// sharply than every bulk direction, or peaks on a different mode.
pub fn separated(edge: (usize, f64), bulk: &[(usize, f64)], ratio: f64) -> bool {
    let (peak, elev) = edge;
    bulk.iter().all(|&(p, e)| p != peak || elev >= ratio * e)
}
