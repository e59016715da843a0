use std::env;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use stormadapt::detcore::train::train_to_dir;
use stormadapt::detcore::{CameraMode, Mode};
use stormadapt::evalkit::{self, EvalDomain};
use stormadapt::experiment::{self, Datasets, ExperimentConfig};
use stormadapt::toyscenes::{read_dataset, DatasetSpec, Weather};
use stormadapt::weathergen::Intensity;
use stormadapt::{Error, Result};

const OUT_ENV: &str = "STORMADAPT_OUT";
const DEFAULT_OUT: &str = "runs";

#[derive(Parser, Debug)]
#[command(name = "stormadapt", version, about = "Domain-adaptive object detection under synthetic fog and rain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a toy Clear to Fog (or Rain) dataset with train and val splits.
    SynthDataset(SynthArgs),
    /// Train one configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint at several weather intensities.
    Eval(EvalArgs),
    /// Write hardness and triplet-distance diagnostics for a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Train and evaluate several modes over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Base config whose `data` section is used; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long, value_parser = parse_with::<Weather>)]
    target: Option<Weather>,
    #[arg(long, value_parser = parse_with::<Intensity>)]
    fog_level: Option<Intensity>,
    #[arg(long, value_parser = parse_with::<Intensity>)]
    rain_level: Option<Intensity>,
    #[arg(long)]
    seed: Option<u64>,
    /// Defaults to `<output root>/data`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Flags shared by `train` and `ablate`; each one overrides the config file.
#[derive(Args, Debug)]
struct RunOverrides {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by `synth-dataset`; without it data is generated
    /// from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_parser = parse_camera)]
    camera: Option<CameraMode>,
    #[arg(long)]
    stage1_iters: Option<usize>,
    #[arg(long)]
    stage2_iters: Option<usize>,
    /// Output root; overrides the environment variable.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunOverrides,
    #[arg(long, value_parser = parse_with::<Mode>)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Comma-separated list drawn from clear, small, medium, large.
    #[arg(long, default_value = "small,medium,large")]
    levels: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Two comma-separated paths: hardness CSV, then distances CSV.
    #[arg(long)]
    out: Option<String>,
    /// Optional CSV of 2D feature projections.
    #[arg(long)]
    projection: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// `all` for the five-step ladder, `every` for all nine modes, or a
    /// comma-separated list.
    #[arg(long, default_value = "all")]
    modes: String,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// First seed; later runs use consecutive seeds.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_with<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_camera(s: &str) -> std::result::Result<CameraMode, String> {
    match s {
        "aligned" => Ok(CameraMode::Aligned),
        "cross-camera" => Ok(CameraMode::CrossCamera),
        other => Err(format!("unknown camera mode `{other}` (expected aligned or cross-camera)")),
    }
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Input(format!("missing required flag --{flag}")))
}

fn output_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Config file merged with flag overrides, plus where the run writes.
#[derive(Debug)]
struct RunConfig {
    config: ExperimentConfig,
    out_root: PathBuf,
}

impl RunConfig {
    fn resolve(o: &RunOverrides, mode: Option<Mode>, seed: Option<u64>) -> Result<Self> {
        let mut config = ExperimentConfig::load(required(&o.config, "config")?)?;
        if let Some(m) = mode {
            config.train.mode = m;
        }
        if let Some(s) = seed {
            config.train.seed = s;
        }
        if let Some(g) = o.gamma {
            config.train.gamma = g;
        }
        if let Some(c) = o.camera {
            config.train.camera = c;
        }
        if let Some(n) = o.stage1_iters {
            config.train.stage1_iters = n;
        }
        if let Some(n) = o.stage2_iters {
            config.train.stage2_iters = n;
        }
        config.validate()?;
        Ok(Self {
            config,
            out_root: output_root(o.out.as_deref()),
        })
    }

    fn datasets(&self, data: Option<&Path>) -> Result<Datasets> {
        match data {
            Some(dir) => Datasets::load(&dir.join("train"), &dir.join("val")),
            None => Datasets::generate(&self.config.data),
        }
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => ExperimentConfig::load(p)?.data,
        None => DatasetSpec::default(),
    };
    if let Some(n) = a.n_train {
        spec.n_train = n;
    }
    if let Some(n) = a.n_val {
        spec.n_val = n;
    }
    if let Some(t) = a.target {
        spec.triplet.target = t;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let (fog, rain) = (a.fog_level, a.rain_level);
    let (target_level, aux_level) = match spec.triplet.target {
        Weather::Fog => (fog, rain),
        Weather::Rain => (rain, fog),
    };
    if let Some(l) = target_level {
        spec.triplet.target_level = l;
    }
    if let Some(l) = aux_level {
        spec.triplet.auxiliary_level = l;
    }
    let dir = a.out_dir.clone().unwrap_or_else(|| output_root(None).join("data"));
    let [train, val] = experiment::synth_dataset(&spec, &dir)?;
    println!(
        "wrote {} train and {} val samples to {}",
        train.records.len(),
        val.records.len(),
        dir.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let run = RunConfig::resolve(&a.run, a.mode, a.seed)?;
    let cfg = &run.config;
    let data = run.datasets(a.run.data.as_deref())?;
    let dir = experiment::run_dir(&run.out_root, cfg.train.mode, cfg.train.seed);
    cfg.write_snapshot(&dir)?;
    info!("training {} seed {} into {}", cfg.train.mode, cfg.train.seed, dir.display());
    let trainer = train_to_dir(cfg.model.clone(), cfg.train, cfg.regularizers(), &data.train, &dir)?;
    let report = experiment::evaluate_run(&trainer, cfg, &data.val)?;
    println!(
        "{} seed {}: target mAP {:.4}, clear mAP {:.4}, ordering rate {:.3}",
        cfg.train.mode, cfg.train.seed, report.target.map, report.clear.map, report.ordering_rate
    );
    println!("run directory: {}", dir.display());
    Ok(())
}

fn parse_levels(s: &str) -> Result<Vec<EvalDomain>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| match t {
            "clear" => Ok(EvalDomain::Clear),
            level => level.parse().map(EvalDomain::Target),
        })
        .collect::<Result<Vec<_>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(Error::Input("--levels is empty".into()))
            } else {
                Ok(v)
            }
        })
}

fn eval(a: &EvalArgs) -> Result<()> {
    let domains = parse_levels(&a.levels)?;
    let (det, params, _) = experiment::load_detector(required(&a.checkpoint, "checkpoint")?)?;
    let (manifest, samples) = read_dataset(required(&a.manifest, "manifest")?)?;
    let out = required(&a.out, "out")?;
    let rows = evalkit::intensity_sweep(&det, &params, &samples, &domains)?;
    evalkit::write_sweep_csv(&rows, &manifest.classes, out)?;
    for r in &rows {
        println!("{:<7} mAP {:.4}", r.level, r.map);
    }
    Ok(())
}

fn diagnose(a: &DiagnoseArgs) -> Result<()> {
    let outs: Vec<&str> = required(&a.out, "out")?.split(',').map(str::trim).collect();
    let [hardness_path, distances_path] = outs[..] else {
        return Err(Error::Input("--out expects two comma-separated paths: hardness,distances".into()));
    };
    let (det, params, _) = experiment::load_detector(required(&a.checkpoint, "checkpoint")?)?;
    let (_, samples) = read_dataset(required(&a.manifest, "manifest")?)?;
    let feats = evalkit::triplet_features(&det, &params, &samples)?;
    let pairs: Vec<_> = feats
        .iter()
        .map(|f| (f.sample_id.clone(), f.source.clone(), f.target.clone()))
        .collect();
    evalkit::write_csv(&evalkit::hardness_rank(&pairs)?, Path::new(hardness_path))?;
    let distances = evalkit::distance_records(&feats);
    evalkit::write_csv(&distances, Path::new(distances_path))?;
    if let Some(p) = &a.projection {
        evalkit::write_csv(&evalkit::feature_projection(&feats)?, p)?;
    }
    println!("ordering rate {:.3} over {} samples", evalkit::ordering_rate(&distances)?, distances.len());
    Ok(())
}

fn parse_modes(s: &str) -> Result<Vec<Mode>> {
    match s.trim() {
        "all" => Ok(Mode::LADDER.to_vec()),
        "every" => Ok(Mode::ALL.to_vec()),
        list => list.split(',').map(|m| m.trim().parse()).collect(),
    }
}

fn ablate(a: &AblateArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(Error::Input("--seeds must be at least 1".into()));
    }
    let modes = parse_modes(&a.modes)?;
    let run = RunConfig::resolve(&a.run, None, a.seed)?;
    let data = run.datasets(a.run.data.as_deref())?;
    let seeds = experiment::seed_list(run.config.train.seed, a.seeds);
    std::fs::create_dir_all(&run.out_root).map_err(|e| Error::Io {
        path: run.out_root.clone(),
        source: e,
    })?;
    let reports = experiment::run_ablation(&run.config, &data, &modes, &seeds, Some(&run.out_root))?;
    let summary = run.out_root.join(experiment::SUMMARY_FILE);
    experiment::write_summary(&reports, &summary)?;
    for m in &modes {
        let mean = experiment::mode_mean(&reports, *m, |r| r.target.map).unwrap_or(f64::NAN);
        println!("{:<12} mean target mAP {:.4}", m.name(), mean);
    }
    println!("summary: {}", summary.display());
    Ok(())
}

fn dispatch<I: IntoIterator<Item = OsString>>(args: I) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::SynthDataset(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    dispatch(env::args_os())
}
