use super::*;
use crate::model::ModelConfig;

fn rec(step: usize, train_acc: f64, test_acc: f64) -> MetricsRecord {
    MetricsRecord {
        step,
        train_loss: 0.0,
        train_acc,
        test_loss: 0.0,
        test_acc,
        param_norm: 0.0,
        sigma: None,
    }
}

#[test]
fn grok_on_first_sustained_crossing() {
    // test acc ramps 0.2 -> 0.95, train perfect from step 100
    let log: Vec<_> = (0..=30)
        .map(|i| {
            let step = i * 20;
            let train = if step >= 100 { 1.0 } else { 0.5 };
            rec(step, train, (0.2 + 0.03 * i as f64).min(0.95))
        })
        .collect();
    let expect = log.iter().find(|r| r.test_acc >= 0.9).unwrap().step;
    assert_eq!(detect_grok(&log), Some(expect));
}

#[test]
fn plateau_is_not_grok() {
    let log: Vec<_> = (0..50).map(|i| rec(i * 20, 1.0, 0.5)).collect();
    assert_eq!(detect_grok(&log), None);
}

#[test]
fn transient_spike_is_not_grok() {
    let mut log: Vec<_> = (0..50).map(|i| rec(i * 20, 1.0, 0.6)).collect();
    log[20].test_acc = 0.91;
    assert_eq!(detect_grok(&log), None);
}

#[test]
fn grok_needs_train_lead() {
    // test and train cross together: the first 100 steps after do not count
    let log: Vec<_> = (0..30)
        .map(|i| {
            rec(
                i * 20,
                if i >= 10 { 1.0 } else { 0.3 },
                if i >= 10 { 0.95 } else { 0.3 },
            )
        })
        .collect();
    assert_eq!(detect_grok(&log), Some(300));
}

fn tiny_cfg(weight_decay: f64) -> RunConfig {
    RunConfig {
        steps: 12,
        eval_interval: Some(4),
        checkpoint_interval: 4,
        model: Some(ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 8,
            ..ModelConfig::dyck()
        }),
        data: DataConfig {
            n_train: 6,
            n_test: 10,
            seq_len: 12,
            ..DataConfig::default()
        },
        optim: OptimConfig {
            lr: 1e-2,
            weight_decay,
            warmup: 3,
            ..OptimConfig::default()
        },
        ..RunConfig::dyck(7, weight_decay)
    }
}

#[test]
fn update_split_reconstructs_parameter_delta() {
    let cfg = tiny_cfg(1.0);
    let data = TaskData::generate(&cfg).unwrap();
    let batch = &data.train_batches(None, 0)[0];
    let mut model = Model::build(cfg.model_config(), 3).unwrap();
    let mut opt = OptState::new(&model, cfg.optim.clone());
    for _ in 0..6 {
        let before = model.clone();
        let (_, grads) = model.loss_and_grads(batch).unwrap();
        let parts = adamw_update(&mut model, &grads, &mut opt).unwrap();
        let recon = reconstruct(&parts);
        let (mut err, mut tot) = (0.0, 0.0);
        for ((p, q), r) in model.params.iter().zip(before.params.iter()).zip(&recon) {
            for ((a, b), d) in p.value.data().iter().zip(q.value.data()).zip(r) {
                err += ((a - b) - d).powi(2);
                tot += d * d;
            }
        }
        assert!(err.sqrt() <= 1e-12 * tot.sqrt(), "{err} {tot}");
        // the attention view parts add up to the attention delta
        let (g, w) = parts.attention(&model);
        let dv: Vec<f64> = model
            .attention_view()
            .0
            .iter()
            .zip(&before.attention_view().0)
            .map(|(a, b)| a - b)
            .collect();
        for ((x, y), d) in g.0.iter().zip(&w.0).zip(&dv) {
            assert!((x + y - d).abs() <= 1e-12 * (1.0 + d.abs()));
        }
    }
}

#[derive(Default)]
struct Collect {
    steps: Vec<StepRecord>,
}

impl StepObserver for Collect {
    fn on_step(&mut self, rec: &StepRecord) -> Result<(), TrainError> {
        self.steps.push(rec.clone());
        Ok(())
    }
}

#[test]
fn zero_decay_emits_zero_wd_component() {
    let mut obs = Collect::default();
    train(&tiny_cfg(0.0), &mut obs).unwrap();
    assert_eq!(obs.steps.len(), 12);
    for r in &obs.steps {
        assert!(r.delta_wd.0.iter().all(|&x| x == 0.0));
        assert!(r.delta_grad.norm() > 0.0);
    }
}

#[test]
fn training_is_deterministic() {
    let a = train(&tiny_cfg(1.0), &mut ()).unwrap();
    let b = train(&tiny_cfg(1.0), &mut ()).unwrap();
    let la: Vec<String> = a.metrics.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    let lb: Vec<String> = b.metrics.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    assert_eq!(la, lb);
    assert_eq!(a.model, b.model);
    // evaluations at 0, 4, 8, 12
    assert_eq!(a.metrics.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 4, 8, 12]);
}

#[test]
fn phase_checkpoints_without_grok() {
    let out = train(&tiny_cfg(1.0), &mut ()).unwrap();
    let ck = &out.checkpoints;
    assert!(ck.grok.is_none() || out.grok_step.is_some());
    assert_eq!(ck.init.step, 0);
    assert_eq!(ck.late.step, 12);
    // max/2 = 6 rounds down to the checkpoint grid
    assert_eq!(ck.pre_grok.step, 4);
    assert_eq!(
        ck.periodic.iter().map(|c| c.step).collect::<Vec<_>>(),
        vec![0, 4, 8, 12]
    );
    assert_eq!(ck.late.model, out.model);
}

#[test]
fn continuation_with_zero_steps_is_identity() {
    let cfg = tiny_cfg(1.0);
    let out = train(&cfg, &mut ()).unwrap();
    let ov = ContinueOverrides {
        weight_decay: Some(0.0),
        steps: Some(0),
        ..Default::default()
    };
    let cont = continue_from(&out.checkpoints.late, &cfg, ov, &mut ()).unwrap();
    assert_eq!(cont.model, out.model);
    assert_eq!(cont.metrics.len(), 1);
    assert_eq!(cont.metrics[0].step, 12);
}

#[test]
fn continuation_rejects_other_architecture() {
    let cfg = tiny_cfg(1.0);
    let out = train(&cfg, &mut ()).unwrap();
    let other = RunConfig { model: None, ..cfg };
    assert!(matches!(
        continue_from(&out.checkpoints.late, &other, ContinueOverrides::default(), &mut ()),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn config_rejects_unknown_keys() {
    let text = "task = \"dyck\"\nseed = 1\nsteps = 10\nbogus = 3\n";
    let err = toml::from_str::<RunConfig>(text).unwrap_err().to_string();
    assert!(err.contains("bogus"), "{err}");
    let ok: RunConfig =
        toml::from_str("task = \"dyck\"\nseed = 1\nsteps = 10\n[optim]\nlr = 0.001\nweight_decay = 1.0\n").unwrap();
    assert_eq!(ok.optim.beta2, 0.98);
    assert_eq!(ok.eval_every(), 20);
}
