use std::path::PathBuf;

use anyhow::Context;
use edgelab::gapflow::{ClassLabel, ClassThresholds};
use edgelab::interventions::{self, CurvatureReading, PathNormRow, WdRow};
use edgelab::model::checkpoint::Checkpoint;
use edgelab::model::ParamVector;
use edgelab::pipeline::{self, FunctionalReport};
use edgelab::probes::{self, MlpSettings, ProbeReport};
use edgelab::rundir::{self, RunLogs};
use edgelab::spectra::{self, AttentionStats, PowerSpectrum};
use edgelab::spectral::SpectralSnapshot;
use edgelab::tasks::TaskKind;
use edgelab::trainer::{Phase, RunConfig};
use serde::{Deserialize, Serialize};

use crate::config::ConfigError;
use crate::output::{num, reports_dir, write_json, Table};
use crate::runs::{ABLATION_FILE, PROBES_FILE};
use crate::Target;

pub const CURVATURE_FILE: &str = "curvature.json";
pub const FOURIER_FILE: &str = "fourier.json";
pub const WD_FILE: &str = "wd_table.json";

struct Loaded {
    dir: PathBuf,
    config: RunConfig,
    ck: Checkpoint,
    snap: Option<SpectralSnapshot>,
}

impl Loaded {
    fn open(t: &Target) -> anyhow::Result<Self> {
        let phase: Phase = t.phase.into();
        let config = rundir::read_config(&t.run)?;
        let ck = rundir::load_checkpoint(&t.run, phase)
            .with_context(|| format!("no {} checkpoint in {}", phase.name(), t.run.display()))?;
        let snap = rundir::load_phase_vectors(&t.run, phase).ok();
        Ok(Self {
            dir: t.run.clone(),
            config,
            ck,
            snap,
        })
    }

    fn snap(&self) -> anyhow::Result<&SpectralSnapshot> {
        self.snap
            .as_ref()
            .context("no spectral snapshot stored for this checkpoint")
    }

    fn direction(&self, k: Option<usize>, random: Option<u64>) -> anyhow::Result<(String, ParamVector)> {
        match (k, random) {
            (Some(k), _) => {
                let v = self
                    .snap()?
                    .direction(k)
                    .map_err(|_| ConfigError(format!("--k {k}: no such valid direction")))?;
                Ok((format!("v{k}"), v.clone()))
            }
            (None, Some(seed)) => {
                let v = interventions::random_basis(self.ck.model.attention_dim(), 1, seed).remove(0);
                Ok((format!("random{seed}"), v))
            }
            (None, None) => Err(ConfigError("give a direction with --k or --random".into()).into()),
        }
    }
}

pub fn ablate(t: &Target, dims: usize, controls: usize, seed: u64) -> anyhow::Result<()> {
    let l = Loaded::open(t)?;
    let eval = pipeline::eval_batches(&l.config, t.limit())?;
    let study = pipeline::ablation_study(&l.ck.model, l.snap()?, dims, controls, seed, &eval)?;
    let reports = reports_dir(&l.dir)?;
    write_json(&reports.join(ABLATION_FILE), &study)?;
    let mut table = Table::new(&["basis", "step", "base_acc", "ablated_acc", "delta_acc"]);
    for r in std::iter::once(&study.edge).chain(&study.controls) {
        table.push(vec![
            r.basis.clone(),
            r.step.to_string(),
            num(r.base_acc),
            num(r.ablated_acc),
            num(r.delta_acc),
        ]);
    }
    table.write(&reports.join("ablation.csv"))?;
    println!(
        "edge delta acc {:.4}; max |random delta| {:.2e}; impact ratio {:.1}",
        study.edge.delta_acc, study.max_control, study.impact_ratio
    );
    Ok(())
}

pub fn sweep(t: &Target, k: Option<usize>, random: Option<u64>, range: f64, points: usize) -> anyhow::Result<()> {
    if !(range > 0.0) || points < 3 {
        return Err(ConfigError("--range must be positive and --points at least 3".into()).into());
    }
    let l = Loaded::open(t)?;
    let (label, dir) = l.direction(k, random)?;
    let eval = pipeline::eval_batches(&l.config, t.limit())?;
    let curve = interventions::eps_sweep(
        &l.ck.model,
        &label,
        &dir,
        &interventions::eps_grid(range, points),
        &eval,
    )?;
    let reports = reports_dir(&l.dir)?;
    let stem = format!("sweep-{}-{}", t.phase_name(), label);
    write_json(&reports.join(format!("{stem}.json")), &curve)?;
    let mut table = Table::new(&["eps", "loss", "kl"]);
    for i in 0..curve.eps.len() {
        table.push(vec![num(curve.eps[i]), num(curve.loss[i]), num(curve.kl[i])]);
    }
    table.write(&reports.join(format!("{stem}.csv")))?;
    println!(
        "{label}: max KL {:.3e}, max |loss change| {:.3e}, non-finite at {} points",
        curve.max_kl(),
        curve.max_loss_change(),
        curve.nonfinite.len()
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureSet {
    pub step: usize,
    pub train_loss: bool,
    pub readings: Vec<CurvatureReading>,
    pub pathnorm: Vec<PathNormRow>,
}

pub fn curvature(t: &Target, eps: f64, random: usize, seed: u64, train_loss: bool) -> anyhow::Result<()> {
    let l = Loaded::open(t)?;
    let snap = l.snap()?;
    let eval = if train_loss {
        pipeline::train_eval_batches(&l.config)?
    } else {
        pipeline::eval_batches(&l.config, t.limit())?
    };
    let model = &l.ck.model;
    let mut readings = Vec::new();
    for k in 1..=snap.width() {
        if let Ok(v) = snap.direction(k) {
            readings.push(interventions::directional_curvature(
                model,
                &format!("v{k}"),
                v,
                eps,
                &eval,
            )?);
        }
    }
    for (i, v) in interventions::random_basis(model.attention_dim(), random, seed)
        .iter()
        .enumerate()
    {
        readings.push(interventions::directional_curvature(
            model,
            &format!("random{i}"),
            v,
            eps,
            &eval,
        )?);
    }
    let set = CurvatureSet {
        step: l.ck.step,
        train_loss,
        pathnorm: interventions::pathnorm_table(model, snap, &eval)?,
        readings,
    };
    let reports = reports_dir(&l.dir)?;
    write_json(&reports.join(CURVATURE_FILE), &set)?;
    let mut table = Table::new(&["direction", "eps", "curvature", "half_step", "consistent"]);
    for r in &set.readings {
        table.push(vec![
            r.direction.clone(),
            num(r.eps),
            num(r.value),
            num(r.half_value),
            r.consistent.to_string(),
        ]);
        println!("{}: {:.4} (half step {:.4})", r.direction, r.value, r.half_value);
    }
    table.write(&reports.join("curvature.csv"))?;
    let mut table = Table::new(&["step", "k", "sigma", "delta_loss"]);
    for r in &set.pathnorm {
        table.push(vec![
            r.step.to_string(),
            r.k.to_string(),
            num(r.sigma),
            num(r.delta_loss),
        ]);
    }
    table.write(&reports.join("pathnorm.csv"))?;
    Ok(())
}

/// Probe fits on one block of one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub step: usize,
    pub layer: usize,
    pub depth: Vec<ProbeReport>,
    pub compositional: Vec<ProbeReport>,
}

pub fn probe(t: &Target, layer: Option<usize>, sequences: usize, seed: u64) -> anyhow::Result<()> {
    let l = Loaded::open(t)?;
    if l.config.task != TaskKind::Dyck {
        return Err(ConfigError("probes need a Dyck run".into()).into());
    }
    let layer = layer.unwrap_or_else(|| pipeline::last_block(&l.ck.model));
    let batches = pipeline::eval_batches(&l.config, Some(sequences.max(1)))?;
    let data = probes::capture_rows(&l.ck.model, &batches, layer)?;
    let set = ProbeSet {
        step: l.ck.step,
        layer,
        depth: probes::depth_probes(&data, &MlpSettings::default(), seed)?.to_vec(),
        compositional: probes::compositional_probe(&data, batches[0].out_len(), seed)?,
    };
    let reports = reports_dir(&l.dir)?;
    write_json(&reports.join(PROBES_FILE), &set)?;
    let mut table = Table::new(&["kind", "target", "layer", "train_r2", "test_r2", "settings"]);
    for r in set.depth.iter().chain(&set.compositional) {
        table.push(vec![
            r.kind.name().into(),
            r.target.clone(),
            layer.to_string(),
            num(r.train_r2),
            num(r.test_r2),
            r.settings.clone(),
        ]);
        println!("{} {}: test R² {:.4}", r.kind.name(), r.target, r.test_r2);
    }
    table.write(&reports.join("probes.csv"))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierSet {
    pub step: usize,
    pub spectra: Vec<PowerSpectrum>,
    pub attention: Vec<AttentionStats>,
    pub functional: Option<FunctionalReport>,
    pub class: Option<ClassLabel>,
}

pub fn fourier(t: &Target, response_limit: usize, seed: u64) -> anyhow::Result<()> {
    let l = Loaded::open(t)?;
    let logs = RunLogs::load(&l.dir)?;
    let model = &l.ck.model;
    let eval = pipeline::eval_batches(&l.config, t.limit())?;
    let is_dyck = l.config.task == TaskKind::Dyck;
    let (spectra, attention) = if is_dyck {
        (
            spectra::model_spectra(model, &eval)?,
            spectra::model_attention(model, &eval)?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let mut functional = None;
    let mut class = None;
    if let Some(snap) = &l.snap {
        let batches = pipeline::eval_batches(&l.config, Some(response_limit.max(1)))?;
        let f = pipeline::functional_report(model, snap, &batches, pipeline::last_block(model), seed)?;
        let from = logs.grok_step().unwrap_or(l.config.steps / 2);
        class = Some(pipeline::classify_run(
            &logs.decomps,
            &logs.snapshots,
            from,
            &f,
            &ClassThresholds::default(),
        ));
        functional = Some(f);
    }
    let set = FourierSet {
        step: l.ck.step,
        spectra,
        attention,
        functional,
        class,
    };
    let reports = reports_dir(&l.dir)?;
    write_json(&reports.join(FOURIER_FILE), &set)?;
    let mut table = Table::new(&["layer", "freq", "power", "fraction", "centered_fraction"]);
    for s in &set.spectra {
        for (w, p) in s.power.iter().enumerate() {
            table.push(vec![
                s.layer.to_string(),
                w.to_string(),
                num(*p),
                num(s.fractions[w]),
                num(s.centered_fractions[w]),
            ]);
        }
        println!(
            "layer {}: DC share {:.3}, centered peak at {}",
            s.layer, s.dc_fraction, s.peak
        );
    }
    table.write(&reports.join("spectra.csv"))?;
    let mut table = Table::new(&["layer", "entropy", "kl_uniform"]);
    for a in &set.attention {
        table.push(vec![a.layer.to_string(), num(a.entropy), num(a.kl_uniform)]);
        println!(
            "layer {} attention: entropy {:.4}, KL to uniform {:.4}",
            a.layer, a.entropy, a.kl_uniform
        );
    }
    table.write(&reports.join("attention.csv"))?;
    if let Some(f) = &set.functional {
        let mut table = Table::new(&["k", "peak", "elevation", "concentration", "functional_r2"]);
        for d in std::iter::once(&f.edge).chain(&f.bulk) {
            table.push(vec![
                d.k.to_string(),
                d.fourier.peak.to_string(),
                num(d.fourier.elevation),
                num(d.fourier.concentration),
                num(d.functional_r2),
            ]);
        }
        table.write(&reports.join("edge_function.csv"))?;
        println!(
            "edge: peak {} elevation {:.2} functional R² {:.3}; separated from bulk: {}",
            f.edge.fourier.peak, f.edge.fourier.elevation, f.edge.functional_r2, f.separation
        );
    }
    if let Some(c) = &set.class {
        println!("class: {}", c.class.name());
    }
    Ok(())
}

pub fn intervene(t: &Target, wds: &[f64], steps: usize, probe_sequences: usize, seed: u64) -> anyhow::Result<()> {
    if wds.is_empty() || wds.iter().any(|w| !(*w >= 0.0)) {
        return Err(ConfigError("--wd needs non-negative weight decays".into()).into());
    }
    let l = Loaded::open(t)?;
    let eval = pipeline::eval_batches(&l.config, t.limit())?;
    let probe = pipeline::eval_batches(&l.config, Some(probe_sequences.max(1)))?;
    let rows: Vec<WdRow> = interventions::wd_intervention(&l.ck, &l.config, wds, steps, &eval, &probe, seed)?;
    let reports = reports_dir(&l.dir)?;
    write_json(&reports.join(WD_FILE), &rows)?;
    let mut table = Table::new(&[
        "weight_decay",
        "from_step",
        "steps",
        "accuracy",
        "depth_r2",
        "entropy",
        "param_norm",
    ]);
    for r in &rows {
        table.push(vec![
            num(r.weight_decay),
            r.from_step.to_string(),
            r.steps.to_string(),
            num(r.accuracy),
            num(r.depth_r2),
            num(r.entropy),
            num(r.param_norm),
        ]);
        println!(
            "wd {}: acc {:.3} R² {:.3} entropy {:.3} norm {:.1}",
            r.weight_decay, r.accuracy, r.depth_r2, r.entropy, r.param_norm
        );
    }
    table.write(&reports.join("wd_table.csv"))?;
    Ok(())
}
