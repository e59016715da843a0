use std::fs;

use stormadapt::detcore::train::{sample_index, train_to_dir, MetricsRow, Mode, RunFiles, METRICS_COLUMNS};
use stormadapt::experiment::{Datasets, ExperimentConfig};

fn tiny() -> (ExperimentConfig, Datasets) {
    let mut cfg = ExperimentConfig::toy_fog().with_run(Mode::Full, 9);
    cfg.data.n_train = 3;
    cfg.data.n_val = 1;
    cfg.train.stage1_iters = 3;
    cfg.train.stage2_iters = 2;
    cfg.train.checkpoint_every = 2;
    let data = Datasets::generate(&cfg.data).unwrap();
    (cfg, data)
}

#[test]
fn metrics_log_has_one_header_and_one_row_per_iteration() {
    let (cfg, data) = tiny();
    let dir = tempfile::tempdir().unwrap();
    train_to_dir(cfg.model.clone(), cfg.train, cfg.regularizers(), &data.train, dir.path()).unwrap();
    let text = fs::read_to_string(RunFiles::in_dir(dir.path()).metrics).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_COLUMNS.join(","));
    assert_eq!(lines.len(), 1 + cfg.train.total_iters());
    for (i, line) in lines[1..].iter().enumerate() {
        assert!(line.starts_with(&format!("{i},")));
    }
}

#[test]
fn resuming_after_a_crash_matches_an_uninterrupted_run() {
    let (cfg, data) = tiny();
    let whole = tempfile::tempdir().unwrap();
    let reference = train_to_dir(cfg.model.clone(), cfg.train, cfg.regularizers(), &data.train, whole.path()).unwrap();

    // Crash simulation: a checkpoint at iteration 2 and a log that already
    // holds one row past it.
    let crashed = tempfile::tempdir().unwrap();
    let files = RunFiles::in_dir(crashed.path());
    let mut t = cfg.trainer().unwrap();
    let mut w = csv::Writer::from_path(&files.metrics).unwrap();
    for i in 0..3 {
        let out = t.step(&data.train[sample_index(cfg.train.seed, data.train.len(), i)]).unwrap();
        w.serialize(MetricsRow::from(&out)).unwrap();
        if i == 1 {
            t.checkpoint().save(&files.checkpoint).unwrap();
        }
    }
    w.flush().unwrap();

    let resumed = train_to_dir(cfg.model.clone(), cfg.train, cfg.regularizers(), &data.train, crashed.path()).unwrap();
    assert_eq!(resumed.params, reference.params);
    assert_eq!(resumed.checkpoint(), reference.checkpoint());
    assert_eq!(
        fs::read(files.metrics).unwrap(),
        fs::read(RunFiles::in_dir(whole.path()).metrics).unwrap()
    );
}
