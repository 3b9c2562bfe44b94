//! Command-line driver: one subcommand per stage plus `e2e`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::eval::{digest, EvalError, Report, REPORT_VERSION};
use crate::fusion::{read_track, track_estimates, write_track, FusionError};
use crate::geometry::GeometryError;
use crate::numerics::NumericsError;
use crate::patchnet::{infer, train, write_loss_trace, Hyper, Model, PatchError};
use crate::planes::{run_planes, MatchSource, PlaneError, PlaneOptions, PLANES_VERSION};
use crate::simulator::{generate_dataset, load_manifest, read_trajectory, SceneConfig, SimError, MANIFEST_VERSION};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical degeneracy: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        match e {
            GeometryError::Estimation(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => CliError::Usage(e.to_string()),
            SimError::Geometry(g) => g.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PlaneError> for CliError {
    fn from(e: PlaneError) -> Self {
        match e {
            PlaneError::Sim(s) => s.into(),
            PlaneError::Geometry(g) => g.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PatchError> for CliError {
    fn from(e: PatchError) -> Self {
        match e {
            PatchError::Config(_) => CliError::Usage(e.to_string()),
            PatchError::Numerics(n) => n.into(),
            PatchError::Planes(p) => p.into(),
            PatchError::Sim(s) => s.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Degenerate(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "pathfinder", version, about = "Passive NLOS tracking from a moving camera")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Extract, track and difference planes.
    Planes {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Correspondence CSV path with `{frame}` and `{plane}` placeholders.
        #[arg(long)]
        matches: Option<String>,
    },
    /// Train both networks.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        planes: PathBuf,
        #[arg(long)]
        hyper: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Estimate and fuse a trajectory.
    Infer {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        planes: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Planes per frame pair; defaults to the model's setting.
        #[arg(long)]
        planes_per_sequence: Option<usize>,
    },
    /// Score an estimated trajectory.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Simulate, track planes, train, infer and evaluate in one directory.
    E2e {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workdir: PathBuf,
        #[arg(long)]
        seed: u64,
    },
}

fn default_iou() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct E2eConfig {
    pub scene: SceneConfig,
    pub hyper: Hyper,
    #[serde(default = "default_iou")]
    pub iou: f64,
    /// Frames in a held-out sequence rendered with a different seed; 0 scores the training sequence.
    #[serde(default)]
    pub eval_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub command: String,
    pub config_digest: String,
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, u32>,
}

fn versions() -> BTreeMap<String, u32> {
    BTreeMap::from([
        ("manifest".to_string(), MANIFEST_VERSION),
        ("planes".to_string(), PLANES_VERSION),
        ("model".to_string(), 1),
        ("report".to_string(), REPORT_VERSION),
    ])
}

fn write_stamp(path: &Path, command: &str, config_digest: String, seed: Option<u64>) -> Result<(), CliError> {
    let s = Stamp { command: command.into(), config_digest, seed, versions: versions() };
    write_json(path, &s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).expect("plain data serializes");
    std::fs::write(path, json + "\n").map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, Vec<u8>), CliError> {
    let bytes = read_bytes(path)?;
    let value = serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok((value, bytes))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn simulate(config: &SceneConfig, out: &Path, seed: u64) -> Result<(), CliError> {
    let config = SceneConfig { seed, ..config.clone() };
    create_dir(out)?;
    generate_dataset(&config, out)?;
    let cfg = serde_json::to_vec(&config).expect("config serializes");
    write_stamp(&out.join("stamp.json"), "simulate", digest(&[&cfg]), Some(seed))
}

pub fn planes(dataset: &Path, out: &Path, iou: f64, matches: Option<String>) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&iou) {
        return Err(CliError::Usage(format!("--iou {iou} outside [0, 1]")));
    }
    let manifest = load_manifest(dataset)?;
    let source = match matches {
        Some(t) => MatchSource::File(t),
        None => PlaneOptions::default().source,
    };
    let opts = PlaneOptions { iou, source, seed: manifest.config.seed, ..PlaneOptions::default() };
    create_dir(out)?;
    run_planes(dataset, out, &opts)?;
    let cfg = format!("{iou:?}|{:?}", opts.source);
    write_stamp(&out.join("stamp.json"), "planes", digest(&[cfg.as_bytes()]), Some(opts.seed))
}

pub fn train_cmd(dataset: &Path, planes_dir: &Path, hyper: &Hyper, model: &Path, seed: u64) -> Result<(), CliError> {
    hyper.validate()?;
    let out = train(dataset, planes_dir, hyper, seed)?;
    if let Some(parent) = model.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    out.model.save(model)?;
    write_loss_trace(&with_suffix(model, ".loss.csv"), &out.trace)?;
    let cfg = serde_json::to_vec(hyper).expect("hyper serializes");
    write_stamp(&with_suffix(model, ".stamp.json"), "train", digest(&[&cfg]), Some(seed))
}

pub fn infer_cmd(dataset: &Path, planes_dir: &Path, model_path: &Path, out: &Path, m: Option<usize>) -> Result<(), CliError> {
    let model = Model::load(model_path)?;
    let m = m.unwrap_or(model.hyper.planes_per_sequence);
    if m == 0 {
        return Err(CliError::Usage("--planes-per-sequence must be positive".into()));
    }
    let scale = load_manifest(dataset)?.config.scale();
    let frames = infer(dataset, planes_dir, &model, m)?;
    write_track(out, &track_estimates(&frames, scale)?)?;
    write_stamp(&with_suffix(out, ".stamp.json"), "infer", digest(&[&read_bytes(model_path)?, &m.to_le_bytes()]), None)
}

pub fn eval_cmd(gt: &Path, est: &Path, report: &Path, config_digest: Option<String>) -> Result<Report, CliError> {
    let truth = read_trajectory(gt)?;
    let estimate = read_track(est)?;
    let config_digest = match config_digest {
        Some(d) => d,
        None => digest(&[&read_bytes(gt)?, &read_bytes(est)?]),
    };
    let r = Report::compute(&truth, &estimate, config_digest)?;
    r.save(report)?;
    r.write_ate_csv(&report.with_extension("ate.csv"))?;
    Ok(r)
}

/// Full pipeline in `workdir`; stage runtimes go to `timings.json`, everything else is deterministic.
pub fn e2e(config: &E2eConfig, config_bytes: &[u8], workdir: &Path, seed: u64) -> Result<Report, CliError> {
    config.hyper.validate()?;
    create_dir(workdir)?;
    let config_digest = digest(&[config_bytes, &seed.to_le_bytes()]);
    let mut timings = BTreeMap::new();
    let mut timed = |name: &str, start: Instant| {
        timings.insert(name.to_string(), start.elapsed().as_secs_f64());
    };

    let (train_data, train_planes) = (workdir.join("train_data"), workdir.join("train_planes"));
    let t = Instant::now();
    simulate(&config.scene, &train_data, seed)?;
    timed("simulate", t);
    let t = Instant::now();
    planes(&train_data, &train_planes, config.iou, None)?;
    timed("planes", t);
    let model = workdir.join("model.pfnd");
    let t = Instant::now();
    train_cmd(&train_data, &train_planes, &config.hyper, &model, seed)?;
    timed("train", t);

    let (eval_data, eval_planes) = if config.eval_frames > 0 {
        let (d, p) = (workdir.join("eval_data"), workdir.join("eval_planes"));
        let held_out = SceneConfig { duration: config.eval_frames as f64 / config.scene.fps, ..config.scene.clone() };
        let t = Instant::now();
        simulate(&held_out, &d, seed.wrapping_add(HELD_OUT_SEED_OFFSET))?;
        planes(&d, &p, config.iou, None)?;
        timed("simulate_eval", t);
        (d, p)
    } else {
        (train_data, train_planes)
    };
    let est = workdir.join("estimate.csv");
    let t = Instant::now();
    infer_cmd(&eval_data, &eval_planes, &model, &est, None)?;
    timed("infer", t);
    let t = Instant::now();
    let manifest = load_manifest(&eval_data)?;
    let report = eval_cmd(&eval_data.join(&manifest.trajectory), &est, &workdir.join("report.json"), Some(config_digest.clone()))?;
    timed("eval", t);
    write_stamp(&workdir.join("stamp.json"), "e2e", config_digest, Some(seed))?;
    write_json(&workdir.join("timings.json"), &timings)?;
    Ok(report)
}

/// Seed offset of the held-out sequence in `e2e`.
pub const HELD_OUT_SEED_OFFSET: u64 = 1_000_003;

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let (cfg, _): (SceneConfig, _) = parse_json(&config)?;
            simulate(&cfg, &out, seed)
        }
        Command::Planes { dataset, out, iou, matches } => planes(&dataset, &out, iou, matches),
        Command::Train { dataset, planes, hyper, model, seed } => {
            let (h, _): (Hyper, _) = parse_json(&hyper)?;
            train_cmd(&dataset, &planes, &h, &model, seed)
        }
        Command::Infer { dataset, planes, model, out, planes_per_sequence } => {
            infer_cmd(&dataset, &planes, &model, &out, planes_per_sequence)
        }
        Command::Eval { gt, est, report } => eval_cmd(&gt, &est, &report, None).map(|_| ()),
        Command::E2e { config, workdir, seed } => {
            let (cfg, bytes): (E2eConfig, _) = parse_json(&config)?;
            e2e(&cfg, &bytes, &workdir, seed).map(|_| ())
        }
    }
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("pathfinder: {e}");
            e.exit_code()
        }
    }
}
