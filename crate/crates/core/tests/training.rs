use ubn_core::harness::{evaluate, prepare_data, probe_model, train, RunStatus, TrainConfig};
use ubn_core::monitor::CondensationTrace;

fn config(model: &str, norm: &str, epochs: usize) -> TrainConfig {
    let text = format!(
        "seed = 3\nepochs = {epochs}\nbatch_size = 16\nlr0 = 0.05\n\
         [model]\n{model}\n\
         [dataset]\nkind = \"synthetic\"\ntrain_size = 128\ntest_size = 64\n\
         dims = [2, 8, 8]\noffset_scale = 1.0\nnoise_scale = 1.0\nmargin = 3.0\n\
         [norm]\n{norm}\n"
    );
    TrainConfig::from_toml_str(&text).unwrap()
}

fn linear_config() -> TrainConfig {
    config(
        "layers = [{ type = \"linear\", out = 2 }]",
        "kind = \"bn\"",
        20,
    )
}

fn ubn_config() -> TrainConfig {
    config(
        "preset = \"tiny_conv\"\nwidth = 4",
        "kind = \"ubn\"\ntau = 0.15",
        3,
    )
}

#[test]
fn linear_model_fits_separable_data() {
    let cfg = linear_config();
    let data = prepare_data(&cfg).unwrap();
    let out = train(&cfg, &data).unwrap();
    assert_eq!(out.status, RunStatus::Completed);
    assert_eq!(out.metrics.len(), 20);
    let last = out.metrics.last().unwrap();
    assert!(last.train_acc > 0.95, "train accuracy {}", last.train_acc);
    assert!(last.train_loss < out.metrics[0].train_loss);
    assert!(out.traces.is_empty());
}

#[test]
fn identical_configs_give_identical_runs() {
    let cfg = ubn_config();
    let data = prepare_data(&cfg).unwrap();
    let a = train(&cfg, &data).unwrap();
    let b = train(&cfg, &prepare_data(&cfg).unwrap()).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.gates, b.gates);
    assert_eq!(a.probe_indices, b.probe_indices);
    assert_eq!(a.model.save(), b.model.save());
    for (x, y) in a.traces.iter().zip(&b.traces) {
        assert_eq!(x.records(), y.records());
    }
}

#[test]
fn seed_changes_the_run() {
    let cfg = ubn_config();
    let other = TrainConfig {
        seed: 4,
        ..cfg.clone()
    };
    let a = train(&cfg, &prepare_data(&cfg).unwrap()).unwrap();
    let b = train(&other, &prepare_data(&other).unwrap()).unwrap();
    assert_ne!(a.metrics, b.metrics);
}

#[test]
fn evaluation_and_probing_leave_running_statistics_untouched() {
    let cfg = ubn_config();
    let data = prepare_data(&cfg).unwrap();
    let out = train(&cfg, &data).unwrap();
    let snapshot = out.model.save();
    let states: Vec<_> = out
        .model
        .norm_layers()
        .into_iter()
        .map(|(_, l)| l.state().cloned().unwrap())
        .collect();

    evaluate(&out.model, &data.test, 7).unwrap();
    let mut traces: Vec<CondensationTrace> = out
        .model
        .norm_layers()
        .into_iter()
        .map(|(id, _)| CondensationTrace::new(id))
        .collect();
    let batch = data.train.images.select(&out.probe_indices).unwrap();
    probe_model(&out.model, &batch, 0, true, &mut traces).unwrap();

    assert_eq!(out.model.save(), snapshot);
    for ((_, layer), before) in out.model.norm_layers().into_iter().zip(&states) {
        let after = layer.state().unwrap();
        assert_eq!(after.s.to_bits(), before.s.to_bits());
        assert_eq!(after.step_count, before.step_count);
        for c in 0..after.channels() {
            assert_eq!(after.mu[c].to_bits(), before.mu[c].to_bits());
            assert_eq!(after.var[c].to_bits(), before.var[c].to_bits());
        }
    }
}

#[test]
fn traces_cover_every_epoch_and_gate_counts_are_cumulative() {
    let cfg = ubn_config();
    let out = train(&cfg, &prepare_data(&cfg).unwrap()).unwrap();
    assert_eq!(out.traces.len(), 3);
    for t in &out.traces {
        let epochs: Vec<usize> = t.records().iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![0, 1, 2, 3]);
    }
    let steps_per_epoch = 128u64.div_ceil(16);
    for g in &out.gates {
        assert_eq!(g.steps, g.epoch as u64 * steps_per_epoch);
        assert!(g.gate_open_steps <= g.steps);
    }
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let mut cfg = linear_config();
    cfg.schedule.lr0 = 1e300;
    let out = train(&cfg, &prepare_data(&cfg).unwrap()).unwrap();
    assert!(
        matches!(out.status, RunStatus::Diverged { .. }),
        "{:?}",
        out.status
    );
    assert!(out.check().is_err());
}
