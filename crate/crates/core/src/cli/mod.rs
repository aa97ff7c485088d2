//! Command-line entry point: `gen-data`, `train`, `sample`, `reconstruct`,
//! `eval` and `gradcheck`.
//!
//! Exit codes: 0 success, 1 invalid configuration or input, 2 runtime or
//! numerical failure.

pub mod config;
pub mod svg;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{Config, ConfigError, KEYS};

use crate::encoder::EncoderConfig;
use crate::flow::Solver;
use crate::geometry::{load_dataset, load_flat_dir, load_xyz, save_dataset, save_xyz, standardize, synth_shape, GeometryError, PointCloud, ShapeDataset, ShapeKind};
use crate::metrics::{chamfer, evaluate, EvalOptions, MetricsError};
use crate::model::{Model, ModelConfig};
use crate::objective::{check_gradients, load_checkpoint, read_checkpoint, train, CheckpointError, ObjectiveError, ShapeDraw, TrainConfig};
use crate::sampler::{reconstruct, sample_shapes, GenRequest, SampleError};

#[derive(Parser, Debug)]
#[command(name = "pcflow", version, about = "Point-cloud generation with a set encoder and latent/point flows")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic sphere/box/torus dataset, standardized.
    GenData,
    /// Train a model on the dataset.
    Train {
        /// Continue from the checkpoint up to train.epochs in total.
        #[arg(long)]
        resume: bool,
    },
    /// Generate shapes from a trained model (XYZ and SVG per shape).
    Sample {
        #[arg(long)]
        n_shapes: Option<usize>,
        #[arg(long)]
        n_points: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory [default: <paths.out>/samples].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode clouds and decode them from the posterior mean.
    Reconstruct {
        /// An XYZ file or a directory of XYZ files.
        input: PathBuf,
        #[arg(long)]
        n_points: Option<usize>,
        /// Output directory [default: <paths.out>/recon].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a generated set against a reference set.
    Eval {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Report file [default: <paths.out>/metrics.json].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the objective's gradients against central differences.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_wrong_sign: bool,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } | CheckpointError::BadMagic | CheckpointError::Version(_) | CheckpointError::Corrupt(_) => {
                CliError::Invalid(format!("checkpoint: {e}"))
            }
            other => CliError::Invalid(format!("checkpoint does not match the configured model: {other}")),
        }
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        match e {
            ObjectiveError::InvalidConfig(_) => CliError::Invalid(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<SampleError> for CliError {
    fn from(e: SampleError) -> Self {
        match e {
            SampleError::InvalidRequest(_) => CliError::Invalid(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

/// Failure reading user input.
fn input_err(e: GeometryError) -> CliError {
    CliError::Invalid(e.to_string())
}

/// Failure writing output.
fn output_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn command() -> clap::Command {
    let docs = Config::documentation();
    Cli::command()
        .after_help(docs.clone())
        .mut_subcommands(|s| s.after_help(docs.clone()))
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = Config::load(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Train { resume } => cmd_train(&cfg, resume),
        Command::Sample {
            n_shapes,
            n_points,
            seed,
            out,
        } => cmd_sample(
            &cfg,
            n_shapes.unwrap_or(cfg.sample_shapes),
            n_points.unwrap_or(cfg.sample_points),
            seed.unwrap_or(cfg.sample_seed),
            out.unwrap_or_else(|| cfg.out.join("samples")),
        ),
        Command::Reconstruct { input, n_points, out } => cmd_reconstruct(
            &cfg,
            &input,
            n_points.unwrap_or(cfg.sample_points),
            out.unwrap_or_else(|| cfg.out.join("recon")),
        ),
        Command::Eval { gen, reference, out } => cmd_eval(&cfg, &gen, &reference, out.unwrap_or_else(|| cfg.out.join("metrics.json"))),
        Command::Gradcheck { inject_wrong_sign } => cmd_gradcheck(&cfg, inject_wrong_sign),
    }
}

/// Seed of shape `i` of family `f`.
fn shape_seed(seed: u64, family: usize, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((family as u64) << 32 | i as u64)
}

/// `per_family` shapes of each family, labelled and standardized.
pub fn synthetic_dataset(per_family: usize, n_points: usize, jitter: f64, seed: u64) -> Result<ShapeDataset, GeometryError> {
    let mut clouds = Vec::with_capacity(3 * per_family);
    let mut labels = Vec::with_capacity(3 * per_family);
    for (f, kind) in ShapeKind::ALL.into_iter().enumerate() {
        for i in 0..per_family {
            clouds.push(synth_shape(kind, n_points, jitter, shape_seed(seed, f, i))?);
            labels.push(kind.name().to_string());
        }
    }
    Ok(standardize(&ShapeDataset::with_labels(clouds, labels))?.0)
}

fn cmd_gen_data(cfg: &Config) -> Result<(), CliError> {
    let ds = synthetic_dataset(cfg.per_family, cfg.n_points, cfg.jitter, cfg.data_seed).map_err(output_err)?;
    let files = save_dataset(&ds, &cfg.dataset_root).map_err(output_err)?;
    println!("wrote {} shapes to {}", files.len(), cfg.dataset_root.display());
    Ok(())
}

fn load_training_set(root: &Path) -> Result<Vec<PointCloud>, CliError> {
    Ok(load_dataset(root).map_err(input_err)?.clouds)
}

fn cmd_train(cfg: &Config, resume: bool) -> Result<(), CliError> {
    let data = load_training_set(&cfg.dataset_root)?;
    let (mut model, done) = if resume {
        load_checkpoint(&cfg.checkpoint, &cfg.model())?
    } else {
        (Model::new(cfg.model(), cfg.seed).map_err(|e| CliError::Invalid(e.to_string()))?, 0)
    };
    fs::create_dir_all(&cfg.out).map_err(output_err)?;
    let log = cfg.out.join("train.log");
    if !resume && log.exists() {
        fs::remove_file(&log).map_err(output_err)?;
    }
    let remaining = cfg.epochs.saturating_sub(done);
    if remaining == 0 {
        println!("checkpoint already at epoch {done} of {}", cfg.epochs);
        return Ok(());
    }
    if let Some(parent) = cfg.checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(output_err)?;
    }
    let tc = TrainConfig {
        epochs: remaining,
        batch: cfg.batch,
        lr: cfg.lr,
        steps: cfg.steps_train,
        seed: cfg.seed,
        recon_points: (cfg.recon_points > 0).then_some(cfg.recon_points),
        clip: cfg.clip,
        checkpoint: Some(cfg.checkpoint.clone()),
        checkpoint_every: cfg.checkpoint_every,
        log: Some(log),
    };
    let logs = train(&mut model, &data, &tc, done)?;
    for l in &logs {
        println!("{}", l.line());
    }
    println!("checkpoint {} at epoch {}", cfg.checkpoint.display(), done + logs.len());
    Ok(())
}

fn load_model(cfg: &Config) -> Result<Model, CliError> {
    Ok(load_checkpoint(&cfg.checkpoint, &cfg.model())?.0)
}

fn write_cloud(dir: &Path, stem: &str, cloud: &PointCloud) -> Result<(), CliError> {
    save_xyz(cloud, &dir.join(format!("{stem}.xyz"))).map_err(output_err)?;
    fs::write(dir.join(format!("{stem}.svg")), svg::render(cloud, stem)).map_err(output_err)
}

fn cmd_sample(cfg: &Config, n_shapes: usize, n_points: usize, seed: u64, out: PathBuf) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    let clouds = sample_shapes(&GenRequest::new(n_shapes, n_points, seed, cfg.steps_eval), &model)?;
    fs::create_dir_all(&out).map_err(output_err)?;
    for (i, c) in clouds.iter().enumerate() {
        write_cloud(&out, &format!("{i:04}"), c)?;
    }
    println!("wrote {} shapes to {}", clouds.len(), out.display());
    Ok(())
}

/// XYZ files of a flat directory, or of a `<family>/` dataset layout.
fn load_cloud_dir(dir: &Path) -> Result<Vec<(PathBuf, PointCloud)>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Invalid(format!("{} is not a directory", dir.display())));
    }
    let flat = load_flat_dir(dir).map_err(input_err)?;
    if !flat.is_empty() {
        return Ok(flat);
    }
    let mut out = Vec::new();
    for (_, path) in crate::geometry::list_dataset(dir).map_err(input_err)? {
        let c = load_xyz(&path).map_err(input_err)?;
        out.push((path, c));
    }
    if out.is_empty() {
        return Err(CliError::Invalid(format!("no .xyz files in {}", dir.display())));
    }
    Ok(out)
}

fn cmd_reconstruct(cfg: &Config, input: &Path, n_points: usize, out: PathBuf) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    let inputs = if input.is_dir() {
        load_cloud_dir(input)?
    } else {
        vec![(input.to_path_buf(), load_xyz(input).map_err(input_err)?)]
    };
    fs::create_dir_all(&out).map_err(output_err)?;
    for (path, cloud) in &inputs {
        let rec = reconstruct(&model, cloud, n_points, cfg.steps_eval, cfg.sample_seed)?;
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        write_cloud(&out, &stem, &rec)?;
        let cd = chamfer(cloud, &rec).map_err(output_err)?;
        println!("{} cd={cd:.6}", path.display());
    }
    Ok(())
}

fn cmd_eval(cfg: &Config, gen_dir: &Path, ref_dir: &Path, out: PathBuf) -> Result<(), CliError> {
    let gen = load_cloud_dir(gen_dir)?;
    let reference = load_cloud_dir(ref_dir)?;
    let names = |set: &[(PathBuf, PointCloud)], i: usize| set[i].0.display().to_string();
    let g: Vec<PointCloud> = gen.iter().map(|(_, c)| c.clone()).collect();
    let r: Vec<PointCloud> = reference.iter().map(|(_, c)| c.clone()).collect();
    let opts = EvalOptions {
        grid: cfg.grid(),
        emd: cfg.emd,
    };
    let report = evaluate(&g, &r, &opts).map_err(|e| match e {
        MetricsError::UnequalClouds { set, index, found, expected } => {
            let file = if set == "generated" { names(&gen, index) } else { names(&reference, index) };
            CliError::Invalid(format!(
                "EMD needs equal cloud sizes: {file} has {found} points but {} has {expected}",
                names(&gen, 0)
            ))
        }
        other => CliError::Invalid(other.to_string()),
    })?;
    let json = report.to_json();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(output_err)?;
    }
    fs::write(&out, &json).map_err(output_err)?;
    println!("{json}");
    Ok(())
}

/// The small architecture used by `gradcheck`; the ablation switches come
/// from the configuration.
pub fn gradcheck_model(cfg: &Config) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            width: 8,
            d_k: 4,
            widen: vec![12],
            head: 8,
            d_z: cfg.gc_d_z,
            attention: cfg.attention,
            residual_blocks: cfg.residual_blocks,
        },
        decoder_hidden: vec![8, 8],
        prior_hidden: vec![8],
        bias: cfg.bias_mode,
    }
}

fn cmd_gradcheck(cfg: &Config, flip: bool) -> Result<(), CliError> {
    let model = Model::new(gradcheck_model(cfg), cfg.seed).map_err(|e| CliError::Invalid(e.to_string()))?;
    let clouds: Vec<PointCloud> = [ShapeKind::Sphere, ShapeKind::Torus]
        .into_iter()
        .enumerate()
        .map(|(i, k)| synth_shape(k, cfg.gc_points, 0.05, cfg.seed + i as u64))
        .collect::<Result<_, _>>()
        .map_err(output_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draws: Vec<ShapeDraw> = clouds.iter().map(|c| ShapeDraw::sample(&mut rng, cfg.gc_d_z, c.len(), None)).collect();
    let report = check_gradients(&model, &clouds, &draws, &Solver::new(cfg.gc_steps), cfg.gc_h, cfg.gc_tol, flip)?;
    println!("checked {} scalars ({} skipped at kinks)", report.checked, report.excluded_at_kink.len());
    println!(
        "max relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
        report.max_rel_err,
        report.worst_param.as_deref().unwrap_or("-"),
        report.worst_values.0,
        report.worst_values.1
    );
    if report.passed() {
        println!("PASS (tolerance {:.1e})", report.tol);
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: {:.3e} >= {:.1e} at {}",
            report.max_rel_err,
            report.tol,
            report.worst_param.as_deref().unwrap_or("-")
        )))
    }
}

/// Architecture digest stored in a checkpoint, as hex.
pub fn checkpoint_digest(path: &Path) -> Result<String, CliError> {
    let raw = read_checkpoint(path)?;
    Ok(raw.digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests;
