//! Experiment configuration and the ablation runner.

use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::autograd::Params;
use crate::detcore::checkpoint::restore_into;
use crate::detcore::train::{train_in_memory, train_to_dir, DmpConfig, Mode, Regularizers, TrainConfig, Trainer};
use crate::detcore::{Checkpoint, CheckpointHeader, Detector, ModelConfig};
use crate::error::{Error, Result};
use crate::evalkit::{self, EvalDomain, MapResult};
use crate::metricreg::MetricRegConfig;
use crate::revgrad::AdvGrlConfig;
use crate::seeds::rng_for;
use crate::toyscenes::{
    generate_split, read_dataset, write_dataset, AlignedTriplet, DatasetManifest, DatasetSpec, ManifestInfo, Sample,
    Split,
};
use crate::weathergen::Intensity;

/// Every setting of a run, as read from a JSON config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub advgrl: AdvGrlConfig,
    pub metricreg: MetricRegConfig,
    pub dmp: DmpConfig,
}

impl ExperimentConfig {
    /// The toy Clear to Fog benchmark used by the test suite and shipped as
    /// `configs/toy-fog.json`.
    pub fn toy_fog() -> Self {
        let mut cfg = Self::default();
        cfg.train.gamma = 0.01;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::decode(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        if self.model.classes != self.data.scene.classes {
            return Err(Error::Input(format!(
                "model has {} classes but the data has {}",
                self.model.classes, self.data.scene.classes
            )));
        }
        self.train.validate()?;
        self.advgrl.validate()?;
        self.metricreg.validate()?;
        self.dmp.validate()
    }

    pub fn regularizers(&self) -> Regularizers {
        Regularizers {
            advgrl: self.advgrl,
            metricreg: self.metricreg,
            dmp: self.dmp,
        }
    }

    pub fn with_run(&self, mode: Mode, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.mode = mode;
        c.train.seed = seed;
        c
    }

    pub fn trainer(&self) -> Result<Trainer> {
        Trainer::new(self.model.clone(), self.train, self.regularizers())
    }

    /// Writes `config.json` and `seed.txt` into a run directory.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.save(&dir.join(CONFIG_FILE))?;
        let seed_path = dir.join(SEED_FILE);
        fs::write(&seed_path, format!("{}\n", self.train.seed)).map_err(|e| Error::io(&seed_path, e))
    }
}

pub const CONFIG_FILE: &str = "config.json";
pub const SEED_FILE: &str = "seed.txt";
pub const SUMMARY_FILE: &str = "ablation_summary.csv";

/// Rebuilds a trained detector from a checkpoint file.
pub fn load_detector(path: &Path) -> Result<(Detector, Params, CheckpointHeader)> {
    let ck = Checkpoint::load(path)?;
    let (det, mut params) = Detector::new(ck.header.model.clone(), &mut rng_for(ck.header.seed, &[]))?;
    restore_into(&mut params, &ck.params).map_err(|e| Error::decode(path, e))?;
    Ok((det, params, ck.header))
}

/// Generates both splits and writes them to `<dir>/train` and `<dir>/val`.
pub fn synth_dataset(spec: &DatasetSpec, dir: &Path) -> Result<[DatasetManifest; 2]> {
    spec.validate()?;
    let write = |split: Split| {
        let samples = generate_split(spec, split)?;
        let info = ManifestInfo {
            split: split.name().to_string(),
            target_weather: spec.triplet.target,
            classes: spec.scene.classes,
            seed: spec.seed,
            spec_hash: spec.spec_hash(),
        };
        write_dataset(&samples, &dir.join(split.name()), &info)
    };
    Ok([write(Split::Train)?, write(Split::Val)?])
}

/// Training triplets and validation samples of one dataset.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Vec<AlignedTriplet>,
    pub val: Vec<Sample>,
}

impl Datasets {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        Ok(Self {
            train: generate_split(spec, Split::Train)?.into_iter().map(|s| s.triplet).collect(),
            val: generate_split(spec, Split::Val)?,
        })
    }

    /// Loads a dataset written by [`synth_dataset`].
    pub fn load(train: &Path, val: &Path) -> Result<Self> {
        Ok(Self {
            train: read_dataset(train)?.1.into_iter().map(|s| s.triplet).collect(),
            val: read_dataset(val)?.1,
        })
    }
}

/// Evaluation of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub target: MapResult,
    pub clear: MapResult,
    pub levels: Vec<(Intensity, f64)>,
    pub ordering_rate: f64,
}

pub fn evaluate_run(trainer: &Trainer, cfg: &ExperimentConfig, val: &[Sample]) -> Result<RunReport> {
    let (det, params) = (&trainer.detector, &trainer.params);
    let target = evalkit::evaluate(det, params, val, EvalDomain::Target(cfg.data.triplet.target_level))?;
    let clear = evalkit::evaluate(det, params, val, EvalDomain::Clear)?;
    let mut levels = Vec::new();
    for level in Intensity::ALL {
        let map = if level == cfg.data.triplet.target_level {
            target.map
        } else {
            evalkit::evaluate(det, params, val, EvalDomain::Target(level))?.map
        };
        levels.push((level, map));
    }
    let feats = evalkit::triplet_features(det, params, val)?;
    let ordering_rate = evalkit::ordering_rate(&evalkit::distance_records(&feats))?;
    Ok(RunReport {
        mode: trainer.cfg.mode,
        seed: trainer.cfg.seed,
        target,
        clear,
        levels,
        ordering_rate,
    })
}

/// One summary row per (mode, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub seed: u64,
    pub map_target: f64,
    pub map_clear: f64,
    pub map_small: f64,
    pub map_medium: f64,
    pub map_large: f64,
    pub ordering_rate: f64,
}

impl From<&RunReport> for AblationRow {
    fn from(r: &RunReport) -> Self {
        let level = |l: Intensity| r.levels.iter().find(|(x, _)| *x == l).map(|(_, m)| *m).unwrap_or(f64::NAN);
        Self {
            mode: r.mode.name().to_string(),
            seed: r.seed,
            map_target: r.target.map,
            map_clear: r.clear.map,
            map_small: level(Intensity::Small),
            map_medium: level(Intensity::Medium),
            map_large: level(Intensity::Large),
            ordering_rate: r.ordering_rate,
        }
    }
}

/// Seeds `base, base + 1, ...` for `count` runs.
pub fn seed_list(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base + i).collect()
}

/// Trains and evaluates every mode with every seed, in order. With an output
/// directory each run writes `<mode>/seed_<n>/` with its config snapshot,
/// checkpoint and metrics log.
pub fn run_ablation(
    base: &ExperimentConfig,
    data: &Datasets,
    modes: &[Mode],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Vec<RunReport>> {
    let mut reports = Vec::new();
    for &mode in modes {
        for &seed in seeds {
            let cfg = base.with_run(mode, seed);
            info!("ablation run {mode} seed {seed}");
            let trainer = match out {
                Some(dir) => {
                    let run_dir = run_dir(dir, mode, seed);
                    cfg.write_snapshot(&run_dir)?;
                    train_to_dir(cfg.model.clone(), cfg.train, cfg.regularizers(), &data.train, &run_dir)?
                }
                None => {
                    let mut t = cfg.trainer()?;
                    train_in_memory(&mut t, &data.train)?;
                    t
                }
            };
            reports.push(evaluate_run(&trainer, &cfg, &data.val)?);
        }
    }
    Ok(reports)
}

pub fn run_dir(root: &Path, mode: Mode, seed: u64) -> std::path::PathBuf {
    root.join(mode.name()).join(format!("seed_{seed}"))
}

pub fn write_summary(reports: &[RunReport], path: &Path) -> Result<()> {
    let rows: Vec<AblationRow> = reports.iter().map(AblationRow::from).collect();
    evalkit::write_csv(&rows, path)
}

/// Mean of `f` over the reports of one mode.
pub fn mode_mean(reports: &[RunReport], mode: Mode, f: impl Fn(&RunReport) -> f64) -> Option<f64> {
    let vals: Vec<f64> = reports.iter().filter(|r| r.mode == mode).map(f).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_rejects_unknown_sections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let cfg = ExperimentConfig::toy_fog();
        cfg.save(&path).unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
        fs::write(&path, r#"{"trian": {}}"#).unwrap();
        assert!(ExperimentConfig::load(&path).unwrap_err().is_input_error());
        fs::write(&path, r#"{"train": {"gamma": 0.001}}"#).unwrap();
        let partial = ExperimentConfig::load(&path).unwrap();
        assert_eq!(partial.train.gamma, 0.001);
        assert_eq!(partial.train.momentum, 0.9);
    }

    #[test]
    fn synthesized_dataset_loads_back() {
        let mut spec = DatasetSpec::default();
        spec.n_train = 3;
        spec.n_val = 2;
        let dir = tempfile::tempdir().unwrap();
        synth_dataset(&spec, dir.path()).unwrap();
        let loaded = Datasets::load(&dir.path().join("train"), &dir.path().join("val")).unwrap();
        let fresh = Datasets::generate(&spec).unwrap();
        assert_eq!(loaded.train.len(), 3);
        assert_eq!(loaded.val.len(), 2);
        assert_eq!(loaded.val[1].triplet.source.boxes, fresh.val[1].triplet.source.boxes);
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.classes = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shipped_config_matches_preset() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy-fog.json");
        assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::toy_fog());
    }

    #[test]
    fn tiny_ablation_writes_run_directories() {
        let mut cfg = ExperimentConfig::toy_fog();
        cfg.data.n_train = 2;
        cfg.data.n_val = 2;
        cfg.train.stage1_iters = 2;
        cfg.train.stage2_iters = 1;
        let data = Datasets::generate(&cfg.data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let reports = run_ablation(&cfg, &data, &[Mode::SourceOnly, Mode::Full], &[0, 1], Some(dir.path())).unwrap();
        assert_eq!(reports.len(), 4);
        for mode in ["source-only", "full"] {
            for seed in [0, 1] {
                let run = dir.path().join(mode).join(format!("seed_{seed}"));
                for f in ["config.json", "seed.txt", "model.ckpt", "metrics.csv"] {
                    assert!(run.join(f).exists(), "{}", run.join(f).display());
                }
            }
        }
        let summary = dir.path().join(SUMMARY_FILE);
        write_summary(&reports, &summary).unwrap();
        let rows = csv::Reader::from_path(&summary).unwrap().records().count();
        assert_eq!(rows, 4);
        let (det, params, header) = load_detector(&run_dir(dir.path(), Mode::Full, 1).join("model.ckpt")).unwrap();
        assert_eq!(header.iteration, 3);
        assert_eq!(det.cfg, cfg.model);
        let trained = crate::detcore::train::Trainer::from_checkpoint(
            &Checkpoint::load(&run_dir(dir.path(), Mode::Full, 1).join("model.ckpt")).unwrap(),
            cfg.train,
            cfg.regularizers(),
        )
        .unwrap();
        assert_eq!(trained.params, params);
        assert_eq!(seed_list(5, 3), vec![5, 6, 7]);
    }
}
