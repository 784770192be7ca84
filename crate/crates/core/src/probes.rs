//! Regression probes on captured residual states, plus depth-centroid geometry.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::linalg::{cholesky_solve, dot, gram_cols, sym_eigen, LinalgError};
use crate::model::{Batch, Model, ModelError};
use crate::nncore::{Graph, NnError, Tensor};
use crate::tasks::DYCK_OPEN;

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("target is constant; R² is undefined")]
    ConstantTarget,
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("features have {rows} rows but targets have {targets}")]
    Shape { rows: usize, targets: usize },
    #[error("need at least two depth classes")]
    SingleDepth,
    #[error("all centroids coincide")]
    DegenerateCentroids,
    #[error("layer {layer} not captured (model has {available})")]
    NoLayer { layer: usize, available: usize },
    #[error("probes need a decoder batch")]
    WrongBatch,
    #[error("MLP probe diverged at step size {0}")]
    Diverged(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Linear,
    Quadratic,
    Mlp,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Quadratic => "quadratic",
            ProbeKind::Mlp => "mlp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    pub layer: Option<usize>,
    pub target: String,
    pub train_r2: f64,
    pub test_r2: f64,
    pub lambda: Option<f64>,
    pub features: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub seed: u64,
    /// Free-form fit settings, e.g. `pca=64` or `hidden=64 steps=2000 lr=0.01`.
    pub settings: String,
}

/// Held-out fraction of rows.
pub const HOLDOUT: f64 = 0.2;
/// Ridge strength relative to `tr(XᵀX)/n`.
pub const RIDGE_REL: f64 = 1e-3;
pub const QUAD_PCA_CAP: usize = 64;

/// Seeded 80/20 row split; `(train, held_out)` are disjoint and cover `0..n`.
pub fn split_rows(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>), ProbeError> {
    if n < 5 {
        return Err(ProbeError::TooFewRows { need: 5, got: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64 * HOLDOUT).round() as usize).clamp(1, n - 1);
    let test = idx.split_off(n - n_test);
    Ok((idx, test))
}

pub fn r_squared(y: &[f64], pred: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let sse: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    if sst == 0.0 {
        if sse == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - sse / sst
    }
}

fn gather(x: &Tensor, rows: &[usize]) -> Vec<f64> {
    rows.iter().flat_map(|&r| x.row(r).iter().copied()).collect()
}

fn check(x: &Tensor, y: &[f64]) -> Result<(), ProbeError> {
    if x.rows() != y.len() {
        return Err(ProbeError::Shape {
            rows: x.rows(),
            targets: y.len(),
        });
    }
    if y.iter().all(|v| *v == y[0]) {
        return Err(ProbeError::ConstantTarget);
    }
    Ok(())
}

/// Ridge regression with an unpenalized intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct Ridge {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    means: Vec<f64>,
}

impl Ridge {
    /// Fits on row-major `x` (`n×d`); `lambda = None` uses the relative default.
    pub fn fit(x: &[f64], n: usize, d: usize, y: &[f64], lambda: Option<f64>) -> Result<Self, ProbeError> {
        let means: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64)
            .collect();
        let xc: Vec<f64> = x.iter().enumerate().map(|(i, v)| v - means[i % d]).collect();
        let ym = y.iter().sum::<f64>() / n as f64;
        let yc: Vec<f64> = y.iter().map(|v| v - ym).collect();
        let mut a = gram_cols(&xc, n, d);
        let trace: f64 = (0..d).map(|j| a[j * d + j]).sum();
        let lambda = lambda.unwrap_or(RIDGE_REL * trace / n as f64).max(1e-12);
        for j in 0..d {
            a[j * d + j] += lambda;
        }
        let b: Vec<f64> = (0..d).map(|j| (0..n).map(|i| xc[i * d + j] * yc[i]).sum()).collect();
        let weights = cholesky_solve(&a, d, &b, 1)?;
        let intercept = ym - dot(&means, &weights);
        Ok(Self {
            weights,
            intercept,
            lambda,
            means,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        x.chunks(self.weights.len())
            .map(|r| self.intercept + dot(r, &self.weights))
            .collect()
    }

    /// Residual of the penalized normal equations `(XcᵀXc + λI)w − Xcᵀyc`.
    pub fn normal_residual(&self, x: &[f64], y: &[f64]) -> f64 {
        let d = self.weights.len();
        let n = y.len();
        let ym = y.iter().sum::<f64>() / n as f64;
        let mut r = vec![0.0; d];
        for (row, &yi) in x.chunks(d).zip(y) {
            let xc: Vec<f64> = row.iter().zip(&self.means).map(|(a, m)| a - m).collect();
            let e = dot(&xc, &self.weights) - (yi - ym);
            r.iter_mut().zip(&xc).for_each(|(acc, v)| *acc += v * e);
        }
        r.iter()
            .zip(&self.weights)
            .map(|(a, w)| (a + self.lambda * w).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn ridge_report(
    kind: ProbeKind,
    x: &Tensor,
    y: &[f64],
    lambda: Option<f64>,
    seed: u64,
    settings: String,
) -> Result<ProbeReport, ProbeError> {
    check(x, y)?;
    let (train, test) = split_rows(x.rows(), seed)?;
    let d = x.cols();
    let xt = gather(x, &train);
    let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
    let fit = Ridge::fit(&xt, train.len(), d, &yt, lambda)?;
    let xh = gather(x, &test);
    let yh: Vec<f64> = test.iter().map(|&i| y[i]).collect();
    Ok(ProbeReport {
        kind,
        layer: None,
        target: String::new(),
        train_r2: r_squared(&yt, &fit.predict(&xt)),
        test_r2: r_squared(&yh, &fit.predict(&xh)),
        lambda: Some(fit.lambda),
        features: d,
        train_rows: train.len(),
        test_rows: test.len(),
        seed,
        settings,
    })
}

pub fn fit_linear(x: &Tensor, y: &[f64], lambda: Option<f64>, seed: u64) -> Result<ProbeReport, ProbeError> {
    ridge_report(ProbeKind::Linear, x, y, lambda, seed, String::new())
}

/// Projects rows onto the top `cap` principal axes of the `fit_rows` subset.
fn pca_project(x: &Tensor, fit_rows: &[usize], cap: usize) -> Tensor {
    let d = x.cols();
    if d <= cap {
        return x.clone();
    }
    let n = fit_rows.len();
    let sub = gather(x, fit_rows);
    let means: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| sub[i * d + j]).sum::<f64>() / n as f64)
        .collect();
    let xc: Vec<f64> = sub.iter().enumerate().map(|(i, v)| v - means[i % d]).collect();
    let (_, axes) = sym_eigen(&gram_cols(&xc, n, d), d);
    let data = (0..x.rows())
        .flat_map(|r| {
            let c: Vec<f64> = x.row(r).iter().zip(&means).map(|(a, m)| a - m).collect();
            axes[..cap].iter().map(move |ax| dot(&c, ax)).collect::<Vec<_>>()
        })
        .collect();
    Tensor::matrix(x.rows(), cap, data).expect("shape matches")
}

/// `[z, z_i z_j for i ≤ j]` for every row.
pub fn quadratic_features(x: &Tensor) -> Tensor {
    let d = x.cols();
    let width = d + d * (d + 1) / 2;
    let mut data = Vec::with_capacity(x.rows() * width);
    for r in 0..x.rows() {
        let z = x.row(r);
        data.extend_from_slice(z);
        for i in 0..d {
            for j in i..d {
                data.push(z[i] * z[j]);
            }
        }
    }
    Tensor::matrix(x.rows(), width, data).expect("shape matches")
}

/// Ridge on linear and pairwise-product features, after a PCA cap.
pub fn fit_quadratic(x: &Tensor, y: &[f64], lambda: Option<f64>, seed: u64) -> Result<ProbeReport, ProbeError> {
    check(x, y)?;
    let (train, _) = split_rows(x.rows(), seed)?;
    let z = pca_project(x, &train, QUAD_PCA_CAP);
    let q = quadratic_features(&z);
    let settings = format!("pca={}", z.cols());
    ridge_report(ProbeKind::Quadratic, &q, y, lambda, seed, settings)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSettings {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for MlpSettings {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 2000,
            lr: 1e-2,
        }
    }
}

struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[f64], n: usize, d: usize) -> Self {
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64)
            .collect();
        let scale = (0..d)
            .map(|j| {
                let v = (0..n).map(|i| (x[i * d + j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.scale[i % d])
            .collect()
    }
}

const MLP_PARAMS: [&str; 4] = ["w1", "b1", "w2", "b2"];

fn mlp_graph(g: &mut Graph, w: &[Tensor], x: Tensor, trainable: bool) -> Result<crate::nncore::NodeId, NnError> {
    let ids: Vec<_> = MLP_PARAMS
        .iter()
        .zip(w)
        .map(|(n, t)| {
            if trainable {
                g.param(n, t.clone())
            } else {
                g.input(t.clone())
            }
        })
        .collect::<Result<_, _>>()?;
    let xi = g.input(x)?;
    let h = g.matmul(xi, ids[0])?;
    let h = g.add(h, ids[1])?;
    let h = g.relu(h)?;
    let o = g.matmul(h, ids[2])?;
    g.add(o, ids[3])
}

fn train_mlp(x: &Tensor, y: &Tensor, cfg: &MlpSettings, lr: f64, seed: u64) -> Result<Option<Vec<Tensor>>, ProbeError> {
    let d = x.cols();
    let h = cfg.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = |rows: usize, cols: usize, std: f64| {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(&mut rng)).collect()).expect("shape")
    };
    let mut w = vec![
        init(d, h, (2.0 / d as f64).sqrt()),
        Tensor::zeros(&[h]),
        init(h, 1, (1.0 / h as f64).sqrt()),
        Tensor::zeros(&[1]),
    ];
    let mut m: Vec<Vec<f64>> = w.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut v = m.clone();
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    for t in 1..=cfg.steps {
        let mut g = Graph::new();
        let out = mlp_graph(&mut g, &w, x.clone(), true)?;
        let target = g.input(y.clone())?;
        let diff = g.sub(out, target)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.mean(sq)?;
        if !g.value(loss).item().is_finite() {
            return Ok(None);
        }
        let grads = g.backward(loss)?;
        let (c1, c2) = (1.0 - f64::powi(b1, t as i32), 1.0 - f64::powi(b2, t as i32));
        for (i, name) in MLP_PARAMS.iter().enumerate() {
            let gr = grads.get(name).expect("registered parameter");
            for (j, (p, gv)) in w[i].data_mut().iter_mut().zip(gr.data()).enumerate() {
                m[i][j] = b1 * m[i][j] + (1.0 - b1) * gv;
                v[i][j] = b2 * v[i][j] + (1.0 - b2) * gv * gv;
                *p -= lr * (m[i][j] / c1) / ((v[i][j] / c2).sqrt() + eps);
            }
        }
    }
    Ok(w.iter().all(Tensor::is_finite).then_some(w))
}

fn mlp_predict(w: &[Tensor], x: Tensor) -> Result<Vec<f64>, ProbeError> {
    let mut g = Graph::new();
    let out = mlp_graph(&mut g, w, x, false)?;
    Ok(g.value(out).data().to_vec())
}

/// One-hidden-layer ReLU regressor trained full-batch with Adam on
/// standardized inputs and targets.
pub fn fit_mlp(x: &Tensor, y: &[f64], cfg: &MlpSettings, seed: u64) -> Result<ProbeReport, ProbeError> {
    check(x, y)?;
    let (train, test) = split_rows(x.rows(), seed)?;
    let d = x.cols();
    let xt = gather(x, &train);
    let sx = Standardizer::fit(&xt, train.len(), d);
    let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
    let sy = Standardizer::fit(&yt, yt.len(), 1);
    let xt_s = Tensor::matrix(train.len(), d, sx.apply(&xt))?;
    let yt_s = Tensor::matrix(train.len(), 1, sy.apply(&yt))?;
    let mut lr = cfg.lr;
    let mut weights = train_mlp(&xt_s, &yt_s, cfg, lr, seed)?;
    if weights.is_none() {
        lr /= 10.0;
        weights = train_mlp(&xt_s, &yt_s, cfg, lr, seed)?;
    }
    let w = weights.ok_or(ProbeError::Diverged(lr))?;
    let unscale = |p: Vec<f64>| -> Vec<f64> { p.iter().map(|v| v * sy.scale[0] + sy.mean[0]).collect() };
    let pred_t = unscale(mlp_predict(&w, xt_s)?);
    let xh = Tensor::matrix(test.len(), d, sx.apply(&gather(x, &test)))?;
    let pred_h = unscale(mlp_predict(&w, xh)?);
    let yh: Vec<f64> = test.iter().map(|&i| y[i]).collect();
    Ok(ProbeReport {
        kind: ProbeKind::Mlp,
        layer: None,
        target: String::new(),
        train_r2: r_squared(&yt, &pred_t),
        test_r2: r_squared(&yh, &pred_h),
        lambda: None,
        features: d,
        train_rows: train.len(),
        test_rows: test.len(),
        seed,
        settings: format!("hidden={} steps={} lr={}", cfg.hidden, cfg.steps, lr),
    })
}

/// Position-pooled residual rows of one block with their token and depth.
#[derive(Clone, Debug)]
pub struct ProbeData {
    pub layer: usize,
    /// `rows × d_model`.
    pub x: Tensor,
    pub tokens: Vec<usize>,
    pub depths: Vec<usize>,
}

impl ProbeData {
    pub fn depth_targets(&self) -> Vec<f64> {
        self.depths.iter().map(|&d| d as f64).collect()
    }
}

/// Captures block `layer` of a decoder model over Dyck batches.
pub fn capture_rows(model: &Model, batches: &[Batch], layer: usize) -> Result<ProbeData, ProbeError> {
    let mut data = Vec::new();
    let mut tokens = Vec::new();
    let mut depths = Vec::new();
    let mut d = 0;
    for b in batches {
        let Batch::Decoder {
            tokens: toks, targets, ..
        } = b
        else {
            return Err(ProbeError::WrongBatch);
        };
        let cap = model.forward_capture(b)?;
        let r = cap.resid.get(layer).ok_or(ProbeError::NoLayer {
            layer,
            available: cap.resid.len(),
        })?;
        d = *r.shape().last().expect("rank ≥ 1");
        data.extend_from_slice(r.data());
        tokens.extend_from_slice(toks);
        depths.extend_from_slice(targets);
    }
    let rows = tokens.len();
    Ok(ProbeData {
        layer,
        x: Tensor::matrix(rows, d, data)?,
        tokens,
        depths,
    })
}

fn labelled(mut r: ProbeReport, layer: usize, target: &str) -> ProbeReport {
    r.layer = Some(layer);
    r.target = target.to_string();
    r
}

/// Linear, quadratic and MLP depth probes on the same rows.
pub fn depth_probes(data: &ProbeData, mlp: &MlpSettings, seed: u64) -> Result<[ProbeReport; 3], ProbeError> {
    let y = data.depth_targets();
    Ok([
        labelled(fit_linear(&data.x, &y, None, seed)?, data.layer, "depth"),
        labelled(fit_quadratic(&data.x, &y, None, seed)?, data.layer, "depth"),
        labelled(fit_mlp(&data.x, &y, mlp, seed)?, data.layer, "depth"),
    ])
}

/// Token identity and running depth read linearly from the states, and
/// depth read from token × previous-sum cross terms.
pub fn compositional_probe(data: &ProbeData, seq_len: usize, seed: u64) -> Result<Vec<ProbeReport>, ProbeError> {
    let is_open: Vec<f64> = data.tokens.iter().map(|&t| (t == DYCK_OPEN) as u8 as f64).collect();
    let depth = data.depth_targets();
    let mut cross = Vec::with_capacity(depth.len() * 3);
    for (i, &o) in is_open.iter().enumerate() {
        let prev = if i % seq_len == 0 { 0.0 } else { depth[i - 1] };
        let sign = 2.0 * o - 1.0;
        cross.extend_from_slice(&[sign, prev, sign * prev]);
    }
    let cross = Tensor::matrix(depth.len(), 3, cross)?;
    Ok(vec![
        labelled(fit_linear(&data.x, &is_open, None, seed)?, data.layer, "token"),
        labelled(fit_linear(&data.x, &depth, None, seed)?, data.layer, "running_depth"),
        labelled(fit_linear(&cross, &depth, None, seed)?, data.layer, "cross_terms"),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub depths: Vec<usize>,
    /// Centroid coordinates on the first two principal axes.
    pub coords: Vec<[f64; 2]>,
    /// Explained-variance ratios, descending.
    pub explained: Vec<f64>,
    pub mean_distance: f64,
}

/// Per-depth centroids of the rows and their principal geometry.
pub fn depth_geometry(data: &ProbeData) -> Result<GeometryReport, ProbeError> {
    let d = data.x.cols();
    let mut groups: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (r, &depth) in data.depths.iter().enumerate() {
        let e = groups.entry(depth).or_insert_with(|| (vec![0.0; d], 0));
        e.0.iter_mut().zip(data.x.row(r)).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    if groups.len() < 2 {
        return Err(ProbeError::SingleDepth);
    }
    let depths: Vec<usize> = groups.keys().copied().collect();
    let cents: Vec<Vec<f64>> = groups
        .into_values()
        .map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    let m = cents.len();
    let mut dist = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            dist += cents[i]
                .iter()
                .zip(&cents[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
        }
    }
    let mean_distance = dist / (m * (m - 1) / 2) as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| cents.iter().map(|c| c[j]).sum::<f64>() / m as f64)
        .collect();
    let centered: Vec<Vec<f64>> = cents
        .iter()
        .map(|c| c.iter().zip(&mean).map(|(a, b)| a - b).collect())
        .collect();
    // the centroid Gram matrix shares its nonzero spectrum with the covariance
    let gram: Vec<f64> = (0..m * m).map(|k| dot(&centered[k / m], &centered[k % m])).collect();
    let (vals, vecs) = sym_eigen(&gram, m);
    let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    if total <= 1e-300 {
        return Err(ProbeError::DegenerateCentroids);
    }
    let explained = vals.iter().map(|v| v.max(0.0) / total).collect();
    let coords = (0..m)
        .map(|i| {
            let c = |k: usize| vecs.get(k).map_or(0.0, |v| v[i] * vals[k].max(0.0).sqrt());
            [c(0), c(1)]
        })
        .collect();
    Ok(GeometryReport {
        depths,
        coords,
        explained,
        mean_distance,
    })
}
