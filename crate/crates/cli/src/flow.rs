use std::fs;
use std::path::Path;

use anyhow::Context;
use edgelab::gapflow::{self, ClassThresholds, EdgeClass, Evidence, GapFlowState};
use serde::{Deserialize, Serialize};

use crate::config::ConfigError;
use crate::output::{num, write_json, write_svg, Table};
use crate::svg::{Heatmap, LineChart, Series};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub field: String,
    pub values: Vec<f64>,
}

/// Evidence the simulator cannot produce, held fixed over the grid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assumed {
    #[serde(default)]
    pub functional_r2: f64,
    #[serde(default)]
    pub rotation_deg: f64,
    #[serde(default)]
    pub separation: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub dt: f64,
    pub steps: usize,
    #[serde(default = "one")]
    pub record_every: usize,
    pub base: GapFlowState,
    pub x: Axis,
    pub y: Axis,
    #[serde(default)]
    pub assume: Assumed,
    #[serde(default)]
    pub thresholds: ClassThresholds,
}

fn one() -> usize {
    1
}

const FIELDS: [&str; 11] = [
    "gap",
    "h_edge",
    "h_next",
    "h_mean",
    "d_mean",
    "d_edge",
    "d_next",
    "grad_edge",
    "grad_next",
    "lr",
    "weight_decay",
];

fn set_field(s: &mut GapFlowState, field: &str, v: f64) -> Result<(), ConfigError> {
    let slot = match field {
        "gap" => &mut s.gap,
        "h_edge" => &mut s.h_edge,
        "h_next" => &mut s.h_next,
        "h_mean" => &mut s.h_mean,
        "d_mean" => &mut s.d_mean,
        "d_edge" => &mut s.d_edge,
        "d_next" => &mut s.d_next,
        "grad_edge" => &mut s.grad_edge,
        "grad_next" => &mut s.grad_next,
        "lr" => &mut s.lr,
        "weight_decay" => &mut s.weight_decay,
        other => {
            return Err(ConfigError(format!(
                "unknown sweep field `{other}`, expected one of {}",
                FIELDS.join(", ")
            )))
        }
    };
    *slot = v;
    Ok(())
}

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let spec: Self = toml::from_str(text).map_err(|e| ConfigError(e.to_string().trim_end().to_string()))?;
        if !(spec.dt > 0.0) || spec.steps == 0 || spec.record_every == 0 {
            return Err(ConfigError("dt, steps and record_every must be positive".into()));
        }
        for (name, axis) in [("x", &spec.x), ("y", &spec.y)] {
            if axis.values.is_empty() {
                return Err(ConfigError(format!("{name}.values must be non-empty")));
            }
            set_field(&mut spec.base.clone(), &axis.field, 0.0)?;
        }
        spec.base.validate().map_err(|e| ConfigError(format!("base: {e}")))?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub x: f64,
    pub y: f64,
    pub final_gap: f64,
    pub steady_gap: Option<f64>,
    /// Share of the driving term in the final driving + damping magnitude.
    pub driving_share: f64,
    pub class: EdgeClass,
}

pub struct Simulated {
    pub cells: Vec<GridCell>,
    pub trajectories: Vec<Vec<f64>>,
}

pub fn simulate_grid(spec: &SweepSpec) -> anyhow::Result<Simulated> {
    let mut cells = Vec::new();
    let mut trajectories = Vec::new();
    for &y in &spec.y.values {
        for &x in &spec.x.values {
            let mut s = spec.base.clone();
            set_field(&mut s, &spec.x.field, x)?;
            set_field(&mut s, &spec.y.field, y)?;
            let traj = gapflow::simulate(&s, spec.dt, spec.steps)
                .with_context(|| format!("{}={x}, {}={y}", spec.x.field, spec.y.field))?;
            let mut last = s.clone();
            last.gap = *traj.last().expect("start value included");
            let terms = last.terms()?;
            let total = terms.driving.abs() + terms.damping.abs();
            let driving_share = if total > 0.0 { terms.driving.abs() / total } else { 0.0 };
            let label = gapflow::classify(
                &Evidence {
                    grad_fraction: driving_share,
                    rotation_deg: spec.assume.rotation_deg,
                    functional_r2: spec.assume.functional_r2,
                    separation: spec.assume.separation,
                },
                &spec.thresholds,
            );
            cells.push(GridCell {
                x,
                y,
                final_gap: last.gap,
                steady_gap: s.steady_gap()?,
                driving_share,
                class: label.class,
            });
            trajectories.push(traj);
        }
    }
    Ok(Simulated { cells, trajectories })
}

fn class_code(c: EdgeClass) -> f64 {
    match c {
        EdgeClass::Compression => 0.0,
        EdgeClass::Mixed => 1.0,
        EdgeClass::Functional => 2.0,
    }
}

pub fn gapflow(spec_path: &Path, out: &Path) -> anyhow::Result<()> {
    let text = fs::read_to_string(spec_path).map_err(|e| ConfigError(format!("{}: {e}", spec_path.display())))?;
    let spec = SweepSpec::parse(&text).map_err(|e| ConfigError(format!("{}: {}", spec_path.display(), e.0)))?;
    let sim = simulate_grid(&spec)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut table = Table::new(&[&spec.x.field, &spec.y.field, "t", "gap"]);
    for (c, traj) in sim.cells.iter().zip(&sim.trajectories) {
        for (i, g) in traj.iter().enumerate().step_by(spec.record_every) {
            table.push(vec![num(c.x), num(c.y), num(i as f64 * spec.dt), num(*g)]);
        }
    }
    table.write(&out.join("trajectories.csv"))?;

    let mut table = Table::new(&[
        &spec.x.field,
        &spec.y.field,
        "final_gap",
        "steady_gap",
        "driving_share",
        "class",
    ]);
    for c in &sim.cells {
        table.push(vec![
            num(c.x),
            num(c.y),
            num(c.final_gap),
            c.steady_gap.map_or_else(String::new, num),
            num(c.driving_share),
            c.class.name().into(),
        ]);
    }
    table.write(&out.join("phase_grid.csv"))?;
    write_json(&out.join("phase_grid.json"), &sim.cells)?;

    let (nx, ny) = (spec.x.values.len(), spec.y.values.len());
    // rows run from the largest y value down so the picture reads like a plot
    let values = (0..ny)
        .rev()
        .flat_map(|r| sim.cells[r * nx..(r + 1) * nx].iter().map(|c| class_code(c.class)))
        .collect();
    let heat = Heatmap {
        title: format!(
            "class over {} (x) and {} (y): 0 compression, 1 mixed, 2 functional",
            spec.x.field, spec.y.field
        ),
        rows: ny,
        cols: nx,
        values,
    };
    write_svg(&out.join("phase_grid.svg"), &heat.render())?;

    let mid = ny / 2;
    let chart = LineChart {
        title: format!("gap trajectories at {} = {}", spec.y.field, spec.y.values[mid]),
        x_label: "t".into(),
        y_label: "gap".into(),
        series: (0..nx.min(8))
            .map(|i| {
                let idx = mid * nx + i * nx / nx.min(8);
                let traj = &sim.trajectories[idx];
                let pts = traj
                    .iter()
                    .enumerate()
                    .step_by(spec.record_every)
                    .map(|(t, g)| (t as f64 * spec.dt, *g))
                    .collect();
                Series::line(&format!("{}={}", spec.x.field, sim.cells[idx].x), pts)
            })
            .collect(),
        ..Default::default()
    };
    write_svg(&out.join("trajectories.svg"), &chart.render())?;

    let counts = [EdgeClass::Compression, EdgeClass::Mixed, EdgeClass::Functional]
        .map(|k| (k.name(), sim.cells.iter().filter(|c| c.class == k).count()));
    println!(
        "{} cells: {}",
        sim.cells.len(),
        counts
            .iter()
            .map(|(n, c)| format!("{n} {c}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    println!("outputs in {}", out.display());
    Ok(())
}
