//! Fourier views of representations and edge responses, and attention statistics.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::model::{Batch, Model, ModelError, ParamVector};
use crate::nncore::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum SpectraError {
    #[error("expected a [batch, len, channels] tensor, got shape {0:?}")]
    Shape(Vec<usize>),
    #[error("sequence lengths differ: {0} vs {1}")]
    Ragged(usize, usize),
    #[error("no data")]
    Empty,
    #[error("label class {0} has no examples")]
    EmptyClass(usize),
    #[error("label {label} outside domain of size {domain}")]
    LabelRange { label: usize, domain: usize },
    #[error("non-finite activation in the perturbed forward pass")]
    NonFinite,
    #[error("layer {0} not captured")]
    NoLayer(usize),
    #[error("direction has dimension {got}, attention view has {expected}")]
    Dimension { got: usize, expected: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Power of a real length-`n` signal folded onto `0..=n/2` (`|X_ω|²/n²`).
pub fn folded_power(signal: &[f64], fft: &dyn rustfft::Fft<f64>) -> Vec<f64> {
    let n = signal.len();
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fft.process(&mut buf);
    let norm = (n * n) as f64;
    (0..=n / 2)
        .map(|w| {
            let p = buf[w].norm_sqr() / norm;
            if w == 0 || 2 * w == n {
                p
            } else {
                2.0 * p
            }
        })
        .collect()
}

fn fractions(power: &[f64]) -> Vec<f64> {
    let total: f64 = power.iter().sum();
    if total > 0.0 {
        power.iter().map(|p| p / total).collect()
    } else {
        vec![0.0; power.len()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerSpectrum {
    pub layer: usize,
    /// Mean power per frequency `0..=T/2` of the raw states.
    pub power: Vec<f64>,
    pub fractions: Vec<f64>,
    /// Fractions after removing each sequence's per-channel mean.
    pub centered_fractions: Vec<f64>,
    pub dc_fraction: f64,
    /// Dominant frequency of the centered spectrum.
    pub peak: usize,
}

/// Accumulates positional power over many `[batch, T, d]` tensors.
pub struct SpectrumAccumulator {
    len: usize,
    raw: Vec<f64>,
    centered: Vec<f64>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl SpectrumAccumulator {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            raw: vec![0.0; len / 2 + 1],
            centered: vec![0.0; len / 2 + 1],
            fft: FftPlanner::new().plan_fft_forward(len),
        }
    }

    pub fn push(&mut self, states: &Tensor) -> Result<(), SpectraError> {
        let [b, t, d] = states.shape() else {
            return Err(SpectraError::Shape(states.shape().to_vec()));
        };
        if *t != self.len {
            return Err(SpectraError::Ragged(self.len, *t));
        }
        let x = states.data();
        let mut sig = vec![0.0; *t];
        for e in 0..*b {
            for c in 0..*d {
                for (i, s) in sig.iter_mut().enumerate() {
                    *s = x[(e * t + i) * d + c];
                }
                for (a, p) in self.raw.iter_mut().zip(folded_power(&sig, self.fft.as_ref())) {
                    *a += p;
                }
                let mean = sig.iter().sum::<f64>() / *t as f64;
                sig.iter_mut().for_each(|s| *s -= mean);
                for (a, p) in self.centered.iter_mut().zip(folded_power(&sig, self.fft.as_ref())) {
                    *a += p;
                }
            }
        }
        Ok(())
    }

    pub fn finish(self, layer: usize) -> PowerSpectrum {
        let fr = fractions(&self.raw);
        let centered = fractions(&self.centered);
        let peak = centered
            .iter()
            .enumerate()
            .skip(1)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(w, _)| w);
        PowerSpectrum {
            layer,
            dc_fraction: fr[0],
            power: self.raw,
            fractions: fr,
            centered_fractions: centered,
            peak,
        }
    }
}

pub fn positional_spectrum(states: &[Tensor], layer: usize) -> Result<PowerSpectrum, SpectraError> {
    let first = states.first().ok_or(SpectraError::Empty)?;
    let len = *first
        .shape()
        .get(1)
        .ok_or_else(|| SpectraError::Shape(first.shape().to_vec()))?;
    let mut acc = SpectrumAccumulator::new(len);
    for s in states {
        acc.push(s)?;
    }
    Ok(acc.finish(layer))
}

/// Positional spectra of every block's residual output over `batches`.
pub fn model_spectra(model: &Model, batches: &[Batch]) -> Result<Vec<PowerSpectrum>, SpectraError> {
    let mut accs: Vec<SpectrumAccumulator> = Vec::new();
    for b in batches {
        let cap = model.forward_capture(b)?;
        if accs.is_empty() {
            let len = b.out_len();
            accs = cap.resid.iter().map(|_| SpectrumAccumulator::new(len)).collect();
        }
        for (a, r) in accs.iter_mut().zip(&cap.resid) {
            a.push(r)?;
        }
    }
    if accs.is_empty() {
        return Err(SpectraError::Empty);
    }
    Ok(accs.into_iter().enumerate().map(|(l, a)| a.finish(l)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub layer: usize,
    /// Mean attention map per head, `T×T` row-major.
    pub mean_maps: Vec<Vec<f64>>,
    /// Mean row entropy per head (nats).
    pub head_entropy: Vec<f64>,
    pub head_kl: Vec<f64>,
    pub entropy: f64,
    /// Mean `KL(row ‖ uniform over positions ≤ t)`.
    pub kl_uniform: f64,
}

/// Mean row entropy of uniform causal attention over `len` positions.
pub fn uniform_backward_entropy(len: usize) -> f64 {
    (1..=len).map(|t| (t as f64).ln()).sum::<f64>() / len as f64
}

/// Entropy and uniform-KL statistics of causal attention maps `[batch, heads, T, T]`.
pub fn attention_stats(maps: &[Tensor], layer: usize) -> Result<AttentionStats, SpectraError> {
    let first = maps.first().ok_or(SpectraError::Empty)?;
    let &[_, h, t, _] = first.shape() else {
        return Err(SpectraError::Shape(first.shape().to_vec()));
    };
    let mut mean_maps = vec![vec![0.0; t * t]; h];
    let mut ent = vec![0.0; h];
    let mut kl = vec![0.0; h];
    let mut count = 0usize;
    for m in maps {
        let &[b, hh, tt, tk] = m.shape() else {
            return Err(SpectraError::Shape(m.shape().to_vec()));
        };
        if hh != h || tt != t || tk != t {
            return Err(SpectraError::Ragged(t, tt));
        }
        let x = m.data();
        for e in 0..b {
            for head in 0..h {
                let base = (e * h + head) * t * t;
                for row in 0..t {
                    let r = &x[base + row * t..base + row * t + row + 1];
                    let hrow: f64 = -r.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
                    ent[head] += hrow;
                    kl[head] += (((row + 1) as f64).ln() - hrow).max(0.0);
                }
                for (a, v) in mean_maps[head].iter_mut().zip(&x[base..base + t * t]) {
                    *a += v;
                }
            }
        }
        count += b;
    }
    let rows = (count * t) as f64;
    mean_maps.iter_mut().flatten().for_each(|v| *v /= count as f64);
    let head_entropy: Vec<f64> = ent.iter().map(|e| e / rows).collect();
    let head_kl: Vec<f64> = kl.iter().map(|k| k / rows).collect();
    Ok(AttentionStats {
        layer,
        entropy: head_entropy.iter().sum::<f64>() / h as f64,
        kl_uniform: head_kl.iter().sum::<f64>() / h as f64,
        mean_maps,
        head_entropy,
        head_kl,
    })
}

/// Attention statistics of every self-attention block over `batches`.
pub fn model_attention(model: &Model, batches: &[Batch]) -> Result<Vec<AttentionStats>, SpectraError> {
    let mut per_layer: Vec<Vec<Tensor>> = Vec::new();
    for b in batches {
        let cap = model.forward_capture(b)?;
        per_layer.resize_with(cap.attn.len(), Vec::new);
        for (l, a) in cap.attn.into_iter().enumerate() {
            per_layer[l].push(a);
        }
    }
    per_layer
        .iter()
        .enumerate()
        .map(|(l, m)| attention_stats(m, l))
        .collect()
}

/// Squared change of block `layer`'s residual output per example-position
/// when the attention view moves by `eps·v̂`.
pub fn edge_response(
    model: &Model,
    direction: &ParamVector,
    eps: f64,
    batches: &[Batch],
    layer: usize,
) -> Result<Vec<f64>, SpectraError> {
    let p = model.attention_dim();
    if direction.len() != p {
        return Err(SpectraError::Dimension {
            got: direction.len(),
            expected: p,
        });
    }
    let Some(v) = direction.normalized() else {
        return Ok(batches
            .iter()
            .flat_map(|b| vec![0.0; b.batch_size() * b.out_len()])
            .collect());
    };
    let mut moved = model.clone();
    let theta = model.attention_view();
    moved.set_attention_view(&ParamVector(
        theta.0.iter().zip(&v.0).map(|(t, d)| t + eps * d).collect(),
    ))?;
    let mut out = Vec::new();
    for b in batches {
        let base = model.forward_capture(b)?;
        let pert = moved.forward_capture(b)?;
        let (h0, h1) = match (base.resid.get(layer), pert.resid.get(layer)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(SpectraError::NoLayer(layer)),
        };
        if !h1.is_finite() {
            return Err(SpectraError::NonFinite);
        }
        let d = *h0.shape().last().expect("rank ≥ 1");
        out.extend(
            h0.data()
                .chunks(d)
                .zip(h1.data().chunks(d))
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (y - x).powi(2)).sum::<f64>()),
        );
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeFourierReport {
    pub k: usize,
    /// Mean response per label `0..D`.
    pub means: Vec<f64>,
    /// `|DFT|` of the label means for `ω = 0..=D/2`.
    pub magnitudes: Vec<f64>,
    /// Share of non-constant power at each `ω = 1..=D/2` (index 0 unused).
    pub fractions: Vec<f64>,
    /// Largest non-constant share.
    pub concentration: f64,
    /// Concentration relative to an even spread over the non-constant frequencies.
    pub elevation: f64,
    pub peak: usize,
}

/// Fourier analysis of per-label mean responses over a label domain of size `domain`.
pub fn basis_fourier(
    k: usize,
    values: &[f64],
    labels: &[usize],
    domain: usize,
) -> Result<EdgeFourierReport, SpectraError> {
    if domain == 0 || values.is_empty() {
        return Err(SpectraError::Empty);
    }
    let mut sums = vec![0.0; domain];
    let mut counts = vec![0usize; domain];
    for (&v, &l) in values.iter().zip(labels) {
        if l >= domain {
            return Err(SpectraError::LabelRange { label: l, domain });
        }
        sums[l] += v;
        counts[l] += 1;
    }
    if let Some(d) = counts.iter().position(|&c| c == 0) {
        return Err(SpectraError::EmptyClass(d));
    }
    let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let fft = FftPlanner::new().plan_fft_forward(domain);
    let power = folded_power(&means, fft.as_ref());
    let magnitudes = {
        let mut buf: Vec<Complex<f64>> = means.iter().map(|&x| Complex::new(x, 0.0)).collect();
        fft.process(&mut buf);
        buf[..=domain / 2].iter().map(|c| c.norm()).collect()
    };
    let ac: f64 = power[1..].iter().sum();
    let scale = means.iter().map(|m| m * m).sum::<f64>().max(f64::MIN_POSITIVE);
    let mut fractions = vec![0.0; power.len()];
    if ac > 1e-12 * scale {
        for w in 1..power.len() {
            fractions[w] = power[w] / ac;
        }
    }
    let (peak, concentration) =
        fractions
            .iter()
            .enumerate()
            .skip(1)
            .fold((0, 0.0), |best, (w, &f)| if f > best.1 { (w, f) } else { best });
    Ok(EdgeFourierReport {
        k,
        means,
        magnitudes,
        elevation: concentration * (power.len() - 1) as f64,
        fractions,
        concentration,
        peak,
    })
}
