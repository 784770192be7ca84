//! End-to-end acceptance checks. Runs are cached under
//! `target/acceptance` (override with `EDGELAB_ACCEPTANCE_DIR`); set
//! `EDGELAB_ACCEPTANCE_STRICT=1` to exit non-zero when a check fails.

use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use edgelab::analysis;
use edgelab::decomp;
use edgelab::gapflow::{self, ClassThresholds, EdgeClass, GapFlowState};
use edgelab::interventions::{self, WdRow};
use edgelab::model::{Batch, Model, ModelConfig, ParamVector};
use edgelab::pipeline::{self, AblationStudy, FunctionalReport};
use edgelab::probes::{self, MlpSettings, ProbeKind, ProbeReport};
use edgelab::rundir::{self, RunLogs};
use edgelab::spectra::{self, folded_power};
use edgelab::spectral::{self, mean_rotation, SnapshotRecord, TrajectoryWindow};
use edgelab::tasks::gen_dyck;
use edgelab::trainer::{self, DataConfig, OptimConfig, Phase, RunConfig, TaskData};
use edgelab::trainer::{adamw_update, OptState};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

type Res<T> = Result<T, Box<dyn Error>>;

const SEEDS: [u64; 3] = [42, 137, 2024];
const EVAL_LIMIT: usize = 1000;
const GROK_RANGE: (usize, usize) = (300, 3000);
/// Half-width in steps of the windows counted as the grok region.
const GROK_REGION: usize = 300;
/// Half-width of the windows whose rotations count as "at grok".
const ROTATION_REGION: usize = 100;
const FLIP_TOLERANCE: usize = 300;
const PROBE_SEQUENCES: usize = 200;
const RESPONSE_SEQUENCES: usize = 500;
const WD_STEPS: usize = 2000;
const WD_GRID: [f64; 4] = [0.0, 0.5, 1.0, 2.0];
/// Reference rows: (weight decay, accuracy, linear R²).
const WD_TARGETS: [(f64, f64, f64); 2] = [(0.0, 0.973, 0.987), (2.0, 0.985, 0.709)];
const WD_TARGET_TOL: f64 = 0.05;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: usize, name: &'static str, r: Res<(bool, String)>) -> Outcome {
    match r {
        Ok((pass, detail)) => Outcome { id, name, pass, detail },
        Err(e) => Outcome {
            id,
            name,
            pass: false,
            detail: format!("error: {e}"),
        },
    }
}

fn root() -> PathBuf {
    std::env::var_os("EDGELAB_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

fn dyck_cfg(seed: u64, weight_decay: f64) -> RunConfig {
    let mut c = RunConfig::dyck(seed, weight_decay);
    c.data.eval_subset = Some(EVAL_LIMIT);
    c
}

/// Mini-grammar SCAN run sized for a single core.
fn scan_cfg(seed: u64) -> RunConfig {
    let mut c = RunConfig::scan(seed, 1.0);
    c.data.n_train = 512;
    let mut m = c.model_config();
    m.init_std = 0.2;
    c.model = Some(m);
    c
}

/// Loads a cached run whose resolved config matches, or trains it.
fn ensure_run(cfg: &RunConfig) -> Res<RunLogs> {
    let name = format!("{}-seed{}-wd{}", cfg.task.name(), cfg.seed, cfg.optim.weight_decay);
    let dir = root().join(name);
    let want = toml::to_string_pretty(&rundir::resolve(cfg))?;
    let cached = fs::read_to_string(dir.join(rundir::CONFIG_FILE)).ok();
    if cached.as_deref() == Some(want.as_str()) {
        if let Ok(logs) = RunLogs::load(&dir) {
            return Ok(logs);
        }
    }
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let t = Instant::now();
    let run = analysis::run_analyzed(cfg)?;
    rundir::write_run(&dir, &run)?;
    eprintln!("trained {} in {:.0}s", dir.display(), t.elapsed().as_secs_f64());
    Ok(RunLogs::load(&dir)?)
}

/// Measurement cached next to the run it was taken on.
fn cached<T: Serialize + DeserializeOwned>(logs: &RunLogs, name: &str, f: impl FnOnce() -> Res<T>) -> Res<T> {
    let path = logs.dir.join(rundir::REPORT_DIR).join(name);
    if let Ok(v) = rundir::read_json(&path) {
        return Ok(v);
    }
    let v = f()?;
    fs::create_dir_all(path.parent().expect("report dir"))?;
    rundir::write_json(&path, &v)?;
    Ok(v)
}

fn grok(logs: &RunLogs) -> Res<usize> {
    logs.grok_step()
        .ok_or_else(|| format!("seed {} did not grok", logs.config.seed).into())
}

fn region(grok: usize, half: usize) -> std::ops::RangeInclusive<usize> {
    grok.saturating_sub(half)..=grok + half
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.3}"))
}

fn grokking(decayed: &[RunLogs], plain: &[RunLogs]) -> Res<(bool, String)> {
    let steps: Vec<Option<usize>> = decayed.iter().map(RunLogs::grok_step).collect();
    let in_range = steps
        .iter()
        .filter(|s| s.is_some_and(|s| (GROK_RANGE.0..=GROK_RANGE.1).contains(&s)))
        .count();
    let plain_grok = plain.iter().filter(|l| l.grok_step().is_some()).count();
    Ok((
        in_range == decayed.len() && plain_grok == 0,
        format!(
            "wd=1 grok steps {:?} ({in_range}/{} in range); wd=0 grokked {plain_grok}/{}",
            steps,
            decayed.len(),
            plain.len()
        ),
    ))
}

fn flip(decayed: &[RunLogs]) -> Res<(bool, String)> {
    let mut pass = true;
    let mut parts = Vec::new();
    for l in decayed {
        let g = grok(l)?;
        let (pre, post) = pipeline::phase_fractions(&l.decomps, 1, g);
        let flip = decomp::flip_detector(&l.decomps, 1);
        let align = pipeline::post_alignment(&l.decomps, g + 1, usize::MAX, &[3, 4]);
        let bulk_opposed = align.bulk_opposed.iter().any(|(_, s)| s.is_some_and(|s| s > 0.5));
        let ok = pre.is_some_and(|p| p > 0.8)
            && post.is_some_and(|p| p < 0.2)
            && flip.is_some_and(|f| f.abs_diff(g) <= FLIP_TOLERANCE)
            && align.edge_aligned.is_some_and(|s| s > 0.5)
            && bulk_opposed;
        pass &= ok;
        parts.push(format!(
            "seed {}: pre {} post {} flip {:?} grok {g} aligned {} bulk opposed {:?}",
            l.config.seed,
            fmt_opt(pre),
            fmt_opt(post),
            flip,
            fmt_opt(align.edge_aligned),
            align
                .bulk_opposed
                .iter()
                .map(|(k, s)| (*k, s.map(|x| (x * 100.0).round() / 100.0)))
                .collect::<Vec<_>>()
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn k_star_share(snaps: &[SnapshotRecord], range: &std::ops::RangeInclusive<usize>) -> Option<f64> {
    let w: Vec<&SnapshotRecord> = snaps.iter().filter(|s| range.contains(&s.step)).collect();
    (!w.is_empty()).then(|| w.iter().filter(|s| s.k_star == 1).count() as f64 / w.len() as f64)
}

fn compression(decayed: &[RunLogs]) -> Res<(bool, String)> {
    let mut pass = true;
    let mut parts = Vec::new();
    for l in decayed {
        let g = grok(l)?;
        let before = g.saturating_sub(GROK_REGION)..=g.saturating_sub(1);
        let after = g + 1..=g + GROK_REGION;
        let c = spectral::gap_compression(&l.snapshots, before, after)?;
        let share = k_star_share(&l.snapshots, &region(g, GROK_REGION));
        let ok = c.ratio >= 10.0 && share.is_some_and(|s| s >= 0.8);
        pass &= ok;
        parts.push(format!(
            "seed {}: g23 ratio {:.3e} k*=1 share {}",
            l.config.seed,
            c.ratio,
            fmt_opt(share)
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn eval(cfg: &RunConfig) -> Res<Vec<Batch>> {
    Ok(pipeline::eval_batches(cfg, Some(EVAL_LIMIT))?)
}

fn ablation(logs: &RunLogs) -> Res<AblationStudy> {
    cached(logs, "acceptance-ablation.json", || {
        let ck = logs.checkpoint(Phase::Late)?;
        let snap = logs.vectors(Phase::Late)?;
        Ok(pipeline::ablation_study(
            &ck.model,
            &snap,
            2,
            20,
            logs.config.seed,
            &eval(&logs.config)?,
        )?)
    })
}

fn ablation_ok(a: &AblationStudy) -> bool {
    a.edge.delta_acc <= -0.2 && a.controls.len() == 20 && a.max_control < 1e-3 && a.impact_ratio >= 100.0
}

fn ablation_check(decayed: &[RunLogs]) -> Res<(bool, String)> {
    let mut pass = true;
    let mut parts = Vec::new();
    for l in decayed {
        let a = ablation(l)?;
        pass &= ablation_ok(&a);
        parts.push(format!(
            "seed {}: edge {:.3} max random {:.1e} ratio {:.0}",
            l.config.seed, a.edge.delta_acc, a.max_control, a.impact_ratio
        ));
    }
    Ok((pass, parts.join("; ")))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Flatness {
    edge_curvature: f64,
    max_kl: f64,
}

fn flatness(logs: &RunLogs) -> Res<Flatness> {
    cached(logs, "acceptance-flatness-test.json", || {
        let ck = logs.checkpoint(Phase::Late)?;
        let snap = logs.vectors(Phase::Late)?;
        let v1 = snap.direction(1)?;
        let test = eval(&logs.config)?;
        let c = interventions::directional_curvature(&ck.model, "v1", v1, 1e-2, &test)?;
        let sweep = interventions::eps_sweep(&ck.model, "v1", v1, &interventions::default_grid(), &test)?;
        Ok(Flatness {
            edge_curvature: c.value,
            max_kl: if sweep.nonfinite.is_empty() {
                sweep.max_kl()
            } else {
                f64::INFINITY
            },
        })
    })
}

/// Largest curvature over the bulk directions of a run's late snapshot.
fn bulk_curvature(logs: &RunLogs) -> Res<f64> {
    cached(logs, "acceptance-bulk-curvature-test.json", || {
        let ck = logs.checkpoint(Phase::Late)?;
        let snap = logs.vectors(Phase::Late)?;
        let test = eval(&logs.config)?;
        let mut best = f64::NEG_INFINITY;
        for k in snap.k_star().k.max(1) + 1..=snap.width() {
            if let Ok(v) = snap.direction(k) {
                best = best.max(interventions::directional_curvature(&ck.model, "bulk", v, 1e-2, &test)?.value);
            }
        }
        Ok(best)
    })
}

fn flatness_check(decayed: &[RunLogs], plain: &[RunLogs]) -> Res<(bool, String)> {
    let bulk = bulk_curvature(&plain[0])?;
    let mut pass = true;
    let mut parts = vec![format!("memorized bulk curvature {bulk:.4}")];
    for l in decayed {
        let f = flatness(l)?;
        pass &= f.edge_curvature < 0.3 && bulk > 3.0 * f.edge_curvature && f.max_kl < 1e-3;
        parts.push(format!(
            "seed {}: edge curvature {:.4} max KL {:.2e}",
            l.config.seed, f.edge_curvature, f.max_kl
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn probes_late(logs: &RunLogs) -> Res<Vec<ProbeReport>> {
    cached(logs, "acceptance-probes.json", || {
        let ck = logs.checkpoint(Phase::Late)?;
        let batches = pipeline::eval_batches(&logs.config, Some(PROBE_SEQUENCES))?;
        let data = probes::capture_rows(&ck.model, &batches, pipeline::last_block(&ck.model))?;
        Ok(probes::depth_probes(&data, &MlpSettings::default(), logs.config.seed)?.to_vec())
    })
}

fn probe_check(decayed: &[RunLogs]) -> Res<(bool, String)> {
    let mut pass = true;
    let mut parts = Vec::new();
    for l in decayed {
        let p = probes_late(l)?;
        let r2 = |k: ProbeKind| p.iter().find(|r| r.kind == k).map_or(f64::NAN, |r| r.test_r2);
        let (lin, quad, mlp) = (r2(ProbeKind::Linear), r2(ProbeKind::Quadratic), r2(ProbeKind::Mlp));
        pass &= mlp >= 0.95 && mlp >= lin + 0.05 && quad < mlp - 0.1;
        parts.push(format!(
            "seed {}: linear {lin:.3} quadratic {quad:.3} mlp {mlp:.3}",
            l.config.seed
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn wd_check(logs: &RunLogs) -> Res<(bool, String)> {
    let rows: Vec<WdRow> = cached(logs, &format!("acceptance-wd-{WD_STEPS}.json"), || {
        let ck = logs.checkpoint(Phase::Grok)?;
        let probe = pipeline::eval_batches(&logs.config, Some(PROBE_SEQUENCES))?;
        Ok(interventions::wd_intervention(
            &ck,
            &logs.config,
            &WD_GRID,
            WD_STEPS,
            &eval(&logs.config)?,
            &probe,
            logs.config.seed,
        )?)
    })?;
    let acc_ok = rows.iter().all(|r| r.accuracy >= 0.95);
    let r2_down = rows.windows(2).all(|w| w[1].depth_r2 < w[0].depth_r2);
    let norm_down = rows.windows(2).all(|w| w[1].param_norm < w[0].param_norm);
    let ent_up = rows.windows(2).all(|w| w[1].entropy >= w[0].entropy);
    let targets_ok = WD_TARGETS.iter().all(|&(w, acc, r2)| {
        rows.iter()
            .find(|r| r.weight_decay == w)
            .is_some_and(|r| (r.accuracy - acc).abs() <= WD_TARGET_TOL && (r.depth_r2 - r2).abs() <= WD_TARGET_TOL)
    });
    let table = rows
        .iter()
        .map(|r| {
            format!(
                "wd {}: acc {:.3} R² {:.3} H {:.3} |θ| {:.1}",
                r.weight_decay, r.accuracy, r.depth_r2, r.entropy, r.param_norm
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    Ok((
        acc_ok && r2_down && norm_down && ent_up && targets_ok,
        format!(
            "{table} [acc {acc_ok} R² down {r2_down} norm down {norm_down} entropy up {ent_up} targets {targets_ok}]"
        ),
    ))
}

fn fourier_check(decayed: &[RunLogs], plain: &[RunLogs]) -> Res<(bool, String)> {
    let uniform = spectra::uniform_backward_entropy(trainer::DataConfig::default().seq_len);
    let mut pass = true;
    let mut parts = Vec::new();
    for l in decayed {
        let model = l.checkpoint(Phase::Late)?.model;
        let ev = eval(&l.config)?;
        let sp = spectra::model_spectra(&model, &ev)?;
        let at = spectra::model_attention(&model, &ev)?;
        let ok = sp.get(1).is_some_and(|s| s.peak == 12)
            && at
                .first()
                .is_some_and(|a| (a.entropy - uniform).abs() <= 0.2 && a.kl_uniform < 0.05);
        pass &= ok;
        parts.push(format!(
            "seed {}: layer1 peak {:?} layer0 entropy {:.4} (uniform {uniform:.4}) KL {:.4}",
            l.config.seed,
            sp.get(1).map(|s| s.peak),
            at.first().map_or(f64::NAN, |a| a.entropy),
            at.first().map_or(f64::NAN, |a| a.kl_uniform)
        ));
    }
    for l in plain {
        let model = l.checkpoint(Phase::Late)?.model;
        let sp = spectra::model_spectra(&model, &eval(&l.config)?)?;
        let dc = sp.get(1).map_or(f64::NAN, |s| s.dc_fraction);
        pass &= dc >= 0.6;
        parts.push(format!("memorized seed {}: layer1 DC share {dc:.3}", l.config.seed));
    }
    Ok((pass, parts.join("; ")))
}

fn functional(logs: &RunLogs) -> Res<FunctionalReport> {
    cached(logs, "acceptance-functional.json", || {
        let ck = logs.checkpoint(Phase::Late)?;
        let snap = logs.vectors(Phase::Late)?;
        let batches = pipeline::eval_batches(&logs.config, Some(RESPONSE_SEQUENCES))?;
        Ok(pipeline::functional_report(
            &ck.model,
            &snap,
            &batches,
            pipeline::last_block(&ck.model),
            logs.config.seed,
        )?)
    })
}

fn edge_fourier_check(decayed: &[RunLogs]) -> Res<(bool, String)> {
    let mut pass = true;
    let mut parts = Vec::new();
    for l in decayed {
        let f = functional(l)?;
        let e = &f.edge.fourier;
        pass &= e.peak == 1 && (2.0..=8.0).contains(&e.elevation);
        parts.push(format!(
            "seed {}: peak {} elevation {:.2}",
            l.config.seed, e.peak, e.elevation
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn rotation_check(decayed: &[RunLogs]) -> Res<(bool, String)> {
    let mut r1 = Vec::new();
    let mut r3 = Vec::new();
    for l in decayed {
        let g = grok(l)?;
        let range = region(g, ROTATION_REGION);
        r1.push(mean_rotation(&l.snapshots, 1, range.clone()).ok_or("no windows at grok")?);
        r3.push(mean_rotation(&l.snapshots, 3, range).ok_or("no windows at grok")?);
    }
    let m1 = r1.iter().sum::<f64>() / r1.len() as f64;
    let m3 = r3.iter().sum::<f64>() / r3.len() as f64;
    Ok((
        m3 - m1 >= 15.0,
        format!("mean rotation v1 {m1:.1}° v3 {m3:.1}° per run v1 {r1:.1?} v3 {r3:.1?}"),
    ))
}

fn tiny_model(seed: u64) -> Res<(Model, Batch)> {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 8,
        max_len: 12,
        ..ModelConfig::dyck()
    };
    let model = Model::build(cfg, seed)?;
    Ok((model, Batch::dyck(&gen_dyck(6, 12, seed)?)))
}

fn autodiff_vs_fd() -> Res<(bool, String)> {
    let (model, batch) = tiny_model(3)?;
    let (_, grads) = model.loss_and_grads(&batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for p in model.params.iter() {
        let g = grads
            .get(&p.name)
            .ok_or_else(|| format!("no gradient for {}", p.name))?;
        for _ in 0..3 {
            let i = rng.random_range(0..p.value.len());
            let at = |d: f64| -> Res<f64> {
                let mut m = model.clone();
                m.params.get_mut(&p.name).expect("present").data_mut()[i] += d;
                Ok(m.loss_and_metrics(&batch)?.loss())
            };
            let fd = (at(h)? - at(-h)?) / (2.0 * h);
            let an = g.data()[i];
            let scale = an.abs().max(fd.abs());
            if scale > 1e-7 {
                worst = worst.max((an - fd).abs() / scale);
            }
        }
    }
    Ok((worst < 1e-4, format!("max rel err {worst:.1e}")))
}

fn gram_vs_dense() -> Res<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for (w, p) in [(5usize, 40usize), (5, 400), (3, 2000)] {
        let rows: Vec<Vec<f64>> = (0..w)
            .map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let snap = spectral::snapshot(&TrajectoryWindow {
            rows: rows.iter().cloned().map(ParamVector).collect(),
            end_step: w,
        })?;
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let svd = DMatrix::from_row_slice(w, p, &flat).svd(false, true);
        let vt = svd.v_t.ok_or("no right vectors")?;
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        for (k, &i) in idx.iter().enumerate() {
            worst = worst.max((snap.sigma[k] - svd.singular_values[i]).abs());
            let ov: f64 = (0..p).map(|c| vt[(i, c)] * snap.vectors[k].0[c]).sum::<f64>().abs();
            worst = worst.max(1.0 - ov);
        }
    }
    Ok((worst <= 1e-8, format!("max deviation {worst:.1e}")))
}

fn decomposition_exact() -> Res<(bool, String)> {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 8,
        ..ModelConfig::dyck()
    };
    let run = RunConfig {
        model: Some(cfg.clone()),
        data: DataConfig {
            n_train: 6,
            n_test: 10,
            seq_len: 12,
            ..DataConfig::default()
        },
        optim: OptimConfig {
            lr: 1e-2,
            weight_decay: 1.0,
            warmup: 3,
            ..OptimConfig::default()
        },
        ..RunConfig::dyck(7, 1.0)
    };
    let data = TaskData::generate(&run)?;
    let batch = &data.train_batches(None, 0)[0];
    let mut model = Model::build(cfg, 3)?;
    let mut opt = OptState::new(&model, run.optim.clone());
    let mut worst: f64 = 0.0;
    for _ in 0..6 {
        let before = model.clone();
        let (_, grads) = model.loss_and_grads(batch)?;
        let parts = adamw_update(&mut model, &grads, &mut opt)?;
        let recon = trainer::reconstruct(&parts);
        let (mut err, mut tot) = (0.0f64, 0.0f64);
        for ((p, q), r) in model.params.iter().zip(before.params.iter()).zip(&recon) {
            for ((a, b), d) in p.value.data().iter().zip(q.value.data()).zip(r) {
                err += ((a - b) - d).powi(2);
                tot += d * d;
            }
        }
        worst = worst.max(err.sqrt() / tot.sqrt().max(f64::MIN_POSITIVE));
    }
    Ok((worst <= 1e-12, format!("max relative residual {worst:.1e}")))
}

fn euler_vs_exponential() -> Res<(bool, String)> {
    let s = GapFlowState {
        gap: 2.0,
        h_edge: 0.3,
        h_next: 0.3,
        h_mean: 0.5,
        d_mean: 1.0,
        d_edge: 1.0,
        d_next: 1.0,
        grad_edge: 0.0,
        grad_next: 0.0,
        lr: 1.0,
        weight_decay: 1.0,
        window: 10,
    };
    let g = *gapflow::simulate(&s, 1e-3, 1000)?.last().ok_or("empty trajectory")?;
    let exact = 2.0 * (-1.5f64).exp();
    let rel = (g / exact - 1.0).abs();
    Ok((rel < 0.01, format!("relative error {rel:.2e}")))
}

fn parseval() -> Res<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for t in [7usize, 24, 64] {
        let sig: Vec<f64> = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fft = rustfft::FftPlanner::new().plan_fft_forward(t);
        let p = folded_power(&sig, fft.as_ref());
        let ms = sig.iter().map(|x| x * x).sum::<f64>() / t as f64;
        worst = worst.max((p.iter().sum::<f64>() - ms).abs() / ms);
    }
    Ok((worst < 1e-9, format!("max relative error {worst:.1e}")))
}

fn ablation_idempotent() -> Res<(bool, String)> {
    let (model, _) = tiny_model(5)?;
    let basis = interventions::random_basis(model.attention_dim(), 2, 3);
    let once = interventions::ablated_model(&model, &basis)?;
    let twice = interventions::ablated_model(&once, &basis)?;
    let diff = once
        .attention_view()
        .0
        .iter()
        .zip(&twice.attention_view().0)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok((diff < 1e-12, format!("max change on re-ablation {diff:.1e}")))
}

fn kl_at_zero() -> Res<(bool, String)> {
    let (model, batch) = tiny_model(9)?;
    let v = interventions::random_basis(model.attention_dim(), 1, 4).remove(0);
    let curve = interventions::eps_sweep(&model, "random", &v, &interventions::eps_grid(1.0, 9), &[batch])?;
    let mid = curve.eps.iter().position(|e| *e == 0.0).ok_or("grid lacks zero")?;
    let nonneg = curve.kl.iter().all(|k| k.is_nan() || *k >= 0.0);
    Ok((
        curve.kl[mid] == 0.0 && nonneg,
        format!("KL(0) = {}, all non-negative {nonneg}", curve.kl[mid]),
    ))
}

fn oracles() -> Res<(bool, String)> {
    let checks: [(&str, fn() -> Res<(bool, String)>); 7] = [
        ("autodiff", autodiff_vs_fd),
        ("svd", gram_vs_dense),
        ("decomposition", decomposition_exact),
        ("euler", euler_vs_exponential),
        ("parseval", parseval),
        ("idempotence", ablation_idempotent),
        ("kl0", kl_at_zero),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, f) in checks {
        let (ok, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        pass &= ok;
        parts.push(format!("{name} {} ({detail})", if ok { "ok" } else { "FAILED" }));
    }
    Ok((pass, parts.join("; ")))
}

fn scan_check(logs: &RunLogs) -> Res<(bool, String)> {
    let g = grok(logs)?;
    let (_, post) = pipeline::phase_fractions(&logs.decomps, 1, g);
    let a = ablation(logs)?;
    let f = functional(logs)?;
    let label = pipeline::classify_run(&logs.decomps, &logs.snapshots, g, &f, &ClassThresholds::default());
    let class_ok = matches!(label.class, EdgeClass::Compression | EdgeClass::Mixed);
    let pass = post.is_some_and(|p| p < 0.2) && a.edge.delta_acc <= -0.2 && a.max_control < 1e-3 && class_ok;
    Ok((
        pass,
        format!(
            "grok {g}; post-grok v1 grad {}; edge {:.3} max random {:.1e}; class {} (grad {:.3} rot {:.1}° R² {:.3})",
            fmt_opt(post),
            a.edge.delta_acc,
            a.max_control,
            label.class.name(),
            label.evidence.grad_fraction,
            label.evidence.rotation_deg,
            label.evidence.functional_r2
        ),
    ))
}

fn dyck_runs(wd: f64) -> Res<Vec<RunLogs>> {
    SEEDS.iter().map(|&s| ensure_run(&dyck_cfg(s, wd))).collect()
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results = vec![outcome(11, "oracle and property suites", oracles())];
    match (dyck_runs(1.0), dyck_runs(0.0)) {
        (Ok(decayed), Ok(plain)) => {
            let grokked: Vec<RunLogs> = decayed.iter().filter(|l| l.grok_step().is_some()).cloned().collect();
            results.push(outcome(
                1,
                "grokking with and without decay",
                grokking(&decayed, &plain),
            ));
            results.push(outcome(2, "gradient to decay flip", flip(&decayed)));
            results.push(outcome(3, "gap compression and k*", compression(&decayed)));
            results.push(outcome(4, "edge ablation against random", ablation_check(&grokked)));
            results.push(outcome(5, "flatness of the edge", flatness_check(&grokked, &plain)));
            results.push(outcome(6, "probe inversion", probe_check(&grokked)));
            results.push(outcome(
                7,
                "weight decay intervention",
                grokked
                    .first()
                    .ok_or_else(|| "no grokked run".into())
                    .and_then(wd_check),
            ));
            results.push(outcome(
                8,
                "positional spectra and attention",
                fourier_check(&grokked, &plain),
            ));
            results.push(outcome(9, "edge depth spectrum", edge_fourier_check(&grokked)));
            results.push(outcome(10, "rotation hierarchy", rotation_check(&decayed)));
        }
        (Err(e), _) | (_, Err(e)) => {
            for (id, name) in [
                (1, "grokking with and without decay"),
                (2, "gradient to decay flip"),
                (3, "gap compression and k*"),
                (4, "edge ablation against random"),
                (5, "flatness of the edge"),
                (6, "probe inversion"),
                (7, "weight decay intervention"),
                (8, "positional spectra and attention"),
                (9, "edge depth spectrum"),
                (10, "rotation hierarchy"),
            ] {
                results.push(outcome(id, name, Err(format!("training failed: {e}").into())));
            }
        }
    }
    results.push(outcome(
        12,
        "scaled SCAN",
        ensure_run(&scan_cfg(42)).and_then(|l| scan_check(&l)),
    ));
    results.sort_by_key(|r| r.id);

    println!();
    for r in &results {
        println!(
            "criterion {:>2} {}: {} | {}",
            r.id,
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    println!(
        "acceptance: {} passed, {failed} failed in {:.0}s",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    let strict = std::env::var("EDGELAB_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && failed > 0 {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    }
}
