use edgelab::analysis::run_analyzed;
use edgelab::interventions;
use edgelab::model::ModelConfig;
use edgelab::pipeline;
use edgelab::rundir::{self, RunLogs};
use edgelab::trainer::{DataConfig, OptimConfig, Phase, RunConfig};

fn cfg() -> RunConfig {
    RunConfig {
        steps: 40,
        eval_interval: Some(10),
        checkpoint_interval: 20,
        model: Some(ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 8,
            ..ModelConfig::dyck()
        }),
        data: DataConfig {
            n_train: 10,
            n_test: 40,
            seq_len: 12,
            ..DataConfig::default()
        },
        optim: OptimConfig {
            lr: 1e-2,
            warmup: 3,
            ..OptimConfig::default()
        },
        ..RunConfig::dyck(11, 1.0)
    }
}

#[test]
fn measurements_on_a_reloaded_run_match_the_live_model() {
    let cfg = cfg();
    let run = run_analyzed(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    rundir::write_run(dir.path(), &run).unwrap();

    let logs = RunLogs::load(dir.path()).unwrap();
    assert_eq!(logs.snapshots, run.snapshots);
    assert_eq!(logs.decomps.len(), run.decomps.len());
    assert_eq!(logs.grok_step(), run.grok_step());

    let live = &run.outcome.model;
    let loaded = logs.checkpoint(Phase::Late).unwrap().model;
    let snap = logs.vectors(Phase::Late).unwrap();
    assert_eq!(snap.sigma, run.phase_snapshots[&Phase::Late].sigma);

    let eval = pipeline::eval_batches(&logs.config, None).unwrap();
    let a = pipeline::ablation_study(live, &snap, 2, 4, 3, &eval).unwrap();
    let b = pipeline::ablation_study(&loaded, &snap, 2, 4, 3, &eval).unwrap();
    assert_eq!(a, b);

    let v1 = snap.direction(1).unwrap();
    let grid = interventions::eps_grid(1.0, 5);
    let s1 = interventions::eps_sweep(live, "v1", v1, &grid, &eval).unwrap();
    let s2 = interventions::eps_sweep(&loaded, "v1", v1, &grid, &eval).unwrap();
    assert_eq!(s1.loss, s2.loss);
    assert_eq!(s1.kl[2], 0.0);
}

#[test]
fn a_resolved_config_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cfg();
    rundir::write_config(dir.path(), &cfg).unwrap();
    let back = rundir::read_config(dir.path()).unwrap();
    assert_eq!(back, rundir::resolve(&cfg));
    assert_eq!(back.model_config(), cfg.model_config());
}
