//! Command-line front end: `synth`, `train`, `register`, `eval` and `replay`.
//!
//! Every command ends by writing `run_manifest.json` into its output
//! directory. Exit codes: 0 success, 1 usage or config error, 2 runtime or
//! data error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Normalization;
use crate::metrics::{evaluate, reverse_consistency, EvalReport};
use crate::multiscale::{fit_multiscale, register_multiscale, MultiscaleConfig};
use crate::synthbench::{list_pairs, load_pair, sha256_file, write_benchmark, SynthConfig};
use crate::trainer::{fit, CycleModel, FitOptions, PairDataset, TrainConfig};
use crate::warp::{spatial_transform, Composition, DisplacementField, Image};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const THREADS_ENV: &str = "CYCLEMORPH_THREADS";

#[derive(Parser, Debug)]
#[command(name = "cyclemorph", version, about = "Cycle-consistent deformable image registration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic benchmark directory.
    Synth(SynthArgs),
    /// Train the registration networks on a benchmark directory.
    Train(TrainArgs),
    /// Register a moving image onto a fixed image with trained networks.
    Register(RegisterArgs),
    /// Score a registration against a pair and its ground truth.
    Eval(EvalArgs),
    /// Re-run the command recorded in a run manifest and compare checksums.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub multiscale: bool,
    /// Checkpoint to continue single-scale training from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub sum_normalization: bool,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub multiscale: bool,
    #[arg(long)]
    pub plain_sum_fusion: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory written by `register`.
    #[arg(long)]
    pub registration: PathBuf,
    /// Pair directory holding moving/fixed images and any ground truth.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training directory; enables the reverse-consistency metrics.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    /// Also write PNG difference and field images.
    #[arg(long)]
    pub plots: bool,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Training file: the global-stage `TrainConfig` plus the multiscale section.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub train: TrainConfig,
    pub multiscale: MultiscaleConfig,
    /// Local-stage overrides; defaults to the global settings.
    pub local: Option<TrainConfig>,
    pub patches_per_pair: usize,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self { train: TrainConfig::default(), multiscale: MultiscaleConfig::default(), local: None, patches_per_pair: 8 }
    }
}

impl TrainFile {
    fn local_config(&self) -> TrainConfig {
        self.local.clone().unwrap_or_else(|| self.train.clone())
    }
}

/// Record of one command run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub input_checksums: BTreeMap<String, String>,
    /// Artifact path relative to the output directory, with its SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
    pub tool_version: String,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Runtime(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

/// Parses `argv` (program name first), runs it and returns the exit code.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let recorded: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, recorded) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

/// Caps the global rayon pool from `CYCLEMORPH_THREADS` if set.
pub fn configure_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        // a second call in the same process finds the pool built already
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli, argv: Vec<String>) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, argv).map(|_| ()),
        Command::Train(a) => cmd_train(&a, argv).map(|_| ()),
        Command::Register(a) => cmd_register(&a, argv).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a, argv).map(|_| ()),
        Command::Replay(a) => cmd_replay(&a),
    }
}

fn read_config<C: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<C> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        usage(format!("invalid config {} at field `{field}`: {}", path.display(), e.inner()))
    })
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::io(dir, e)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn checksums(root: &Path, names: &[String]) -> Result<BTreeMap<String, String>> {
    names.iter().map(|n| Ok((n.clone(), sha256_file(&root.join(n))?))).collect()
}

fn finish(
    out: &Path,
    command: &str,
    argv: Vec<String>,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: BTreeMap<String, String>,
    artifacts: &[String],
    started: Instant,
) -> Result<RunManifest> {
    let manifest = RunManifest {
        command: command.to_string(),
        argv,
        config,
        seeds,
        input_checksums: inputs,
        artifacts: checksums(out, artifacts)?,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn input_checksum(map: &mut BTreeMap<String, String>, path: &Path) -> Result<()> {
    map.insert(path.display().to_string(), sha256_file(path)?);
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs, argv: Vec<String>) -> CliResult<RunManifest> {
    let started = Instant::now();
    let mut cfg: SynthConfig = read_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(usage)?;
    create_dir(&a.out)?;
    let bench = write_benchmark(&a.out, &cfg)?;
    let mut artifacts: Vec<String> = bench.checksums.keys().cloned().collect();
    artifacts.push(crate::synthbench::MANIFEST_FILE.to_string());
    let mut inputs = BTreeMap::new();
    input_checksum(&mut inputs, &a.config)?;
    let config = serde_json::to_value(&cfg).map_err(Error::from)?;
    Ok(finish(&a.out, "synth", argv, config, vec![cfg.seed], inputs, &artifacts, started)?)
}

fn load_dataset(data: &Path) -> Result<(PairDataset, BTreeMap<String, String>)> {
    let mut pairs = Vec::new();
    let mut inputs = BTreeMap::new();
    for dir in list_pairs(data)? {
        let (m, f, _) = load_pair(&dir)?;
        input_checksum(&mut inputs, &dir.join("moving.dtf"))?;
        input_checksum(&mut inputs, &dir.join("fixed.dtf"))?;
        pairs.push((m, f));
    }
    if pairs.is_empty() {
        return Err(Error::invalid(format!("no pairs found under {}", data.display())));
    }
    Ok((PairDataset::new(pairs), inputs))
}

fn files_in(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_file() && name != MANIFEST_FILE && !name.ends_with(".partial") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

pub fn cmd_train(a: &TrainArgs, argv: Vec<String>) -> CliResult<RunManifest> {
    let started = Instant::now();
    let mut file: TrainFile = read_config(&a.config)?;
    if let Some(s) = a.seed {
        file.train.seed = s;
        if let Some(l) = file.local.as_mut() {
            l.seed = s;
        }
    }
    if a.sum_normalization {
        file.train.hp.normalization = Normalization::Sum;
        if let Some(l) = file.local.as_mut() {
            l.hp.normalization = Normalization::Sum;
        }
    }
    if a.multiscale && a.resume.is_some() {
        return Err(usage("--resume applies to single-scale training only"));
    }
    file.train.validate().map_err(usage)?;
    if a.multiscale {
        file.local_config().validate().map_err(usage)?;
        if file.patches_per_pair == 0 {
            return Err(usage("patches_per_pair must be >= 1"));
        }
    }
    let (dataset, mut inputs) = load_dataset(&a.data)?;
    create_dir(&a.out)?;
    let opts = FitOptions { out_dir: Some(a.out.clone()), resume: a.resume.clone(), stage: None };
    let mut seeds = vec![file.train.seed];
    if a.multiscale {
        let local = file.local_config();
        seeds.push(local.seed);
        // pre-flight so lattice problems surface before any training
        file.multiscale.validate(dataset.pairs[0].0.lattice()).map_err(usage)?;
        fit_multiscale(&dataset, &file.train, &local, &file.multiscale, file.patches_per_pair, &opts)?;
    } else {
        dataset.check_compatible(&file.train.net)?;
        if let Some(r) = &a.resume {
            input_checksum(&mut inputs, r)?;
        }
        fit(&dataset, &file.train, &opts)?;
    }
    let stored = StoredRun { multiscale: a.multiscale, train: file.clone() };
    write_json(&a.out.join(RUN_CONFIG_FILE), &stored)?;
    let artifacts = files_in(&a.out)?;
    let config = serde_json::to_value(&stored).map_err(Error::from)?;
    Ok(finish(&a.out, "train", argv, config, seeds, inputs, &artifacts, started)?)
}

/// Settings `register` needs from a training directory.
pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoredRun {
    pub multiscale: bool,
    pub train: TrainFile,
}

/// Trained networks loaded from a `train` output directory.
pub struct TrainedModels {
    pub run: StoredRun,
    pub global: CycleModel,
    pub local: Option<CycleModel>,
}

pub fn load_trained(dir: &Path) -> Result<TrainedModels> {
    let path = dir.join(RUN_CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let run: StoredRun = serde_json::from_str(&text)?;
    let global = CycleModel::load(dir.join("global.cmk"), &run.train.train.net)?;
    let local = if run.multiscale {
        Some(CycleModel::load(dir.join("local.cmk"), &run.train.local_config().net)?)
    } else {
        None
    };
    Ok(TrainedModels { run, global, local })
}

pub fn cmd_register(a: &RegisterArgs, argv: Vec<String>) -> CliResult<RunManifest> {
    let started = Instant::now();
    let models = load_trained(&a.checkpoints)?;
    let moving = Image::load(&a.moving)?;
    let fixed = Image::load(&a.fixed)?;
    if moving.lattice() != fixed.lattice() {
        return Err(Failure::Runtime(Error::invalid(format!(
            "moving lattice {:?} differs from fixed lattice {:?}",
            moving.lattice(),
            fixed.lattice()
        ))));
    }
    create_dir(&a.out)?;
    let mut ms = models.run.train.multiscale.clone();
    if a.plain_sum_fusion {
        ms.composition = Composition::PlainSum;
    }
    let mut artifacts = vec!["deformed.dtf".to_string(), "phi_final.dtf".to_string()];
    let t0 = Instant::now();
    let (deformed, phi) = if a.multiscale {
        let local = models
            .local
            .as_ref()
            .ok_or_else(|| usage("--multiscale needs checkpoints trained with --multiscale"))?;
        let out = register_multiscale(&models.global.gx, &local.gx, &moving, &fixed, &ms)?;
        out.phi_global.save(a.out.join("phi_global.dtf"))?;
        out.phi_local.save(a.out.join("phi_local.dtf"))?;
        artifacts.push("phi_global.dtf".into());
        artifacts.push("phi_local.dtf".into());
        (out.deformed, out.phi_final)
    } else {
        models.global.gx.config.check_lattice(fixed.lattice())?;
        let phi = models.global.gx.predict(&moving, &fixed)?;
        (spatial_transform(&moving, &phi)?, phi)
    };
    let runtime = t0.elapsed().as_secs_f64();
    deformed.save(a.out.join("deformed.dtf"))?;
    phi.save(a.out.join("phi_final.dtf"))?;
    let mut inputs = BTreeMap::new();
    input_checksum(&mut inputs, &a.moving)?;
    input_checksum(&mut inputs, &a.fixed)?;
    for name in ["global.cmk", "local.cmk"] {
        let p = a.checkpoints.join(name);
        if p.exists() {
            input_checksum(&mut inputs, &p)?;
        }
    }
    let config = serde_json::json!({
        "multiscale": a.multiscale,
        "multiscale_config": ms,
        "net": models.run.train.train.net,
        "runtime_seconds": runtime,
    });
    let seeds = vec![models.run.train.train.seed];
    Ok(finish(&a.out, "register", argv, config, seeds, inputs, &artifacts, started)?)
}

/// Fills an `EvalReport` from registration outputs and a pair directory.
pub fn eval_report(registration: &Path, data: &Path, checkpoints: Option<&Path>) -> Result<EvalReport> {
    let (moving, fixed, truth) = load_pair(data)?;
    let deformed = Image::load(registration.join("deformed.dtf"))?;
    let phi = DisplacementField::load(registration.join("phi_final.dtf"))?;
    let mut report = evaluate(&moving, &fixed, &deformed, &phi, &truth.as_ground_truth())?;
    let manifest = registration.join(MANIFEST_FILE);
    if manifest.exists() {
        report.runtime_seconds = RunManifest::load(&manifest)?.config.get("runtime_seconds").and_then(|v| v.as_f64());
    }
    if let Some(dir) = checkpoints {
        let models = load_trained(dir)?;
        match models.global.gx.config.check_lattice(fixed.lattice()) {
            Ok(()) => {
                let (n, s) = reverse_consistency(&models.global.gx, &models.global.gy, &moving, &fixed)?;
                report.reverse_nmse = Some(n);
                report.reverse_ssim = Some(s);
            }
            Err(e) => log::warn!("reverse consistency skipped: {e}"),
        }
    }
    Ok(report)
}

pub fn cmd_eval(a: &EvalArgs, argv: Vec<String>) -> CliResult<RunManifest> {
    let started = Instant::now();
    let report = eval_report(&a.registration, &a.data, a.checkpoints.as_deref())?;
    create_dir(&a.out)?;
    write_json(&a.out.join("eval_report.json"), &report)?;
    let artifacts = vec!["eval_report.json".to_string()];
    if a.plots {
        // plots are for people; failures only warn and they stay out of the manifest
        if let Err(e) = write_plots(&a.registration, &a.data, &a.out) {
            log::warn!("plot emission failed: {e}");
        }
    }
    let mut inputs = BTreeMap::new();
    for p in [a.registration.join("deformed.dtf"), a.registration.join("phi_final.dtf")] {
        input_checksum(&mut inputs, &p)?;
    }
    for name in ["moving.dtf", "fixed.dtf"] {
        input_checksum(&mut inputs, &a.data.join(name))?;
    }
    let config = serde_json::json!({ "reverse": a.checkpoints.is_some(), "plots": a.plots });
    Ok(finish(&a.out, "eval", argv, config, Vec::new(), inputs, &artifacts, started)?)
}

/// Middle slice of a single-channel volume (or the image itself in 2D).
fn middle_slice(lattice: &[usize], data: &[f32]) -> (usize, usize, Vec<f32>) {
    let (h, w) = (lattice[lattice.len() - 2], lattice[lattice.len() - 1]);
    let offset = if lattice.len() == 3 { lattice[0] / 2 * h * w } else { 0 };
    (h, w, data[offset..offset + h * w].to_vec())
}

fn write_plots(registration: &Path, data: &Path, out: &Path) -> Result<()> {
    let fixed = Image::load(data.join("fixed.dtf"))?;
    let moving = Image::load(data.join("moving.dtf"))?;
    let deformed = Image::load(registration.join("deformed.dtf"))?;
    let phi = DisplacementField::load(registration.join("phi_final.dtf"))?;
    let lattice = fixed.lattice().to_vec();
    let plane = |img: &Image| middle_slice(&lattice, img.channel(0));

    let (h, w, f) = plane(&fixed);
    let (_, _, m) = plane(&moving);
    let (_, _, d) = plane(&deformed);
    // before | after, absolute difference to the fixed image
    let mut diff = image::GrayImage::new(2 * w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let to_u8 = |v: f32| (v.abs().min(1.0) * 255.0).round() as u8;
            diff.put_pixel(x as u32, y as u32, image::Luma([to_u8(m[i] - f[i])]));
            diff.put_pixel((w + x) as u32, y as u32, image::Luma([to_u8(d[i] - f[i])]));
        }
    }
    let p = out.join("difference.png");
    diff.save(&p).map_err(|e| Error::format("png", format!("{}: {e}", p.display())))?;

    // direction as hue, magnitude as brightness, over the in-plane components
    let r = lattice.len();
    let (_, _, uy) = middle_slice(&lattice, phi.component(r - 2));
    let (_, _, ux) = middle_slice(&lattice, phi.component(r - 1));
    let max = uy.iter().zip(&ux).map(|(a, b)| a.hypot(*b)).fold(1e-6f32, f32::max);
    let mut field = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mag = uy[i].hypot(ux[i]) / max;
            let angle = uy[i].atan2(ux[i]);
            let ch = |shift: f32| ((0.5 + 0.5 * (angle + shift).cos()) * mag * 255.0).round() as u8;
            let tau = std::f32::consts::TAU;
            field.put_pixel(x as u32, y as u32, image::Rgb([ch(0.0), ch(tau / 3.0), ch(2.0 * tau / 3.0)]));
        }
    }
    let p = out.join("field.png");
    field.save(&p).map_err(|e| Error::format("png", format!("{}: {e}", p.display())))?;
    Ok(())
}

/// Re-runs a manifest's command with its recorded config and checks that
/// every artifact checksum comes out the same.
pub fn cmd_replay(a: &ReplayArgs) -> CliResult<()> {
    let recorded = RunManifest::load(&a.manifest)?;
    let mut argv = recorded.argv.clone();
    // the config file may have changed since; substitute the recorded one
    let tmp_config = tempfile_path(&a.manifest)?;
    if let Some(i) = argv.iter().position(|s| s == "--config") {
        let body = match recorded.command.as_str() {
            "train" => serde_json::to_value(
                serde_json::from_value::<StoredRun>(recorded.config.clone()).map_err(Error::from)?.train,
            )
            .map_err(Error::from)?,
            _ => recorded.config.clone(),
        };
        write_json(&tmp_config, &body)?;
        if i + 1 < argv.len() {
            argv[i + 1] = tmp_config.display().to_string();
        }
    }
    let cli = Cli::try_parse_from(std::iter::once("cyclemorph".to_string()).chain(argv.iter().cloned())).map_err(usage)?;
    let fresh = match cli.command {
        Command::Synth(mut s) => {
            s.seed = None;
            cmd_synth(&s, recorded.argv.clone())
        }
        Command::Train(mut t) => {
            t.seed = None;
            t.sum_normalization = false;
            cmd_train(&t, recorded.argv.clone())
        }
        Command::Register(r) => cmd_register(&r, recorded.argv.clone()),
        Command::Eval(e) => cmd_eval(&e, recorded.argv.clone()),
        Command::Replay(_) => Err(usage("cannot replay a replay")),
    };
    let _ = fs::remove_file(&tmp_config);
    let fresh = fresh?;
    let diffs: Vec<&String> = recorded
        .artifacts
        .iter()
        .filter(|(k, v)| fresh.artifacts.get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    if diffs.is_empty() {
        println!("replay reproduced {} artifacts", recorded.artifacts.len());
        Ok(())
    } else {
        Err(Failure::Runtime(Error::invalid(format!("replay changed artifacts: {diffs:?}"))))
    }
}

fn tempfile_path(manifest: &Path) -> Result<PathBuf> {
    let digest = sha256_file(manifest)?;
    Ok(std::env::temp_dir().join(format!("cyclemorph_replay_{}_{}.json", std::process::id(), &digest[..16])))
}
