//! `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::encoder::EncoderConfig;
use crate::flow::BiasMode;
use crate::metrics::VoxelGrid;
use crate::model::ModelConfig;

/// Where a setting came from, for error messages.
#[derive(Clone, Debug, PartialEq)]
pub enum Origin {
    Line(usize),
    Flag,
    Default,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Flag => f.write_str("--set"),
            Origin::Default => f.write_str("default"),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("{origin}: unknown key {key:?}")]
    UnknownKey { origin: Origin, key: String },
    #[error("{origin}: bad value {value:?} for {key}: {reason}")]
    BadValue {
        origin: Origin,
        key: String,
        value: String,
        reason: String,
    },
    #[error("{origin}: expected key = value")]
    Syntax { origin: Origin },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {reason}")]
    Read { path: PathBuf, reason: String },
}

/// Every key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("dataset.root", "data", "dataset directory (<root>/<family>/<id>.xyz)"),
    ("data.n_points", "256", "points per synthetic shape"),
    ("data.per_family", "100", "shapes per family written by gen-data"),
    ("data.jitter", "0.05", "std of the Gaussian surface jitter"),
    ("data.seed", "0", "seed of the synthetic dataset"),
    ("model.d_z", "32", "latent dimension"),
    ("model.widths", "64,64,64", "hidden widths of the point decoder flow"),
    ("model.prior_widths", "32,32", "hidden widths of the latent prior flow"),
    ("encoder.width", "128", "per-point feature width"),
    ("encoder.d_k", "16", "attention query/key width"),
    ("encoder.widen", "256,512", "widening layer widths before pooling"),
    ("encoder.head", "256", "width of the pooled feature head"),
    ("encoder.attention", "true", "self-attention between the residual blocks"),
    ("encoder.residual_blocks", "true", "skip connections in the residual blocks"),
    ("flow.steps_train", "32", "RK4 steps while training"),
    ("flow.steps_eval", "64", "RK4 steps for sampling and reconstruction"),
    ("flow.bias_mode", "adaptive", "context bias of the decoder layers: adaptive | plain"),
    ("train.lr", "0.001", "Adam learning rate"),
    ("train.epochs", "30", "total epochs (a resumed run stops at the same total)"),
    ("train.batch", "10", "shapes per optimizer step"),
    ("train.seed", "0", "seed of initialization, shuffling and noise"),
    ("train.recon_points", "0", "points per shape scored by the decoder each step (0 = all)"),
    ("train.clip", "10", "global gradient norm clip"),
    ("train.checkpoint_every", "1", "epochs between checkpoints"),
    ("sample.n_shapes", "10", "shapes generated by sample"),
    ("sample.n_points", "2048", "points per generated or reconstructed shape"),
    ("sample.seed", "0", "seed of sample and reconstruct"),
    ("eval.jsd_grid", "28", "voxels per axis of the JSD grid"),
    ("eval.jsd_bound", "3", "JSD grid spans [-bound, bound]^3"),
    ("eval.emd", "true", "also compute the EMD metrics"),
    ("gradcheck.points", "8", "points per cloud in gradcheck"),
    ("gradcheck.d_z", "4", "latent dimension in gradcheck"),
    ("gradcheck.steps", "8", "RK4 steps in gradcheck"),
    ("gradcheck.h", "1e-5", "central-difference step"),
    ("gradcheck.tol", "1e-3", "maximum relative error"),
    ("paths.checkpoint", "model.ckpt", "checkpoint file"),
    ("paths.out", "out", "output directory (log, samples, reports)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub dataset_root: PathBuf,
    pub n_points: usize,
    pub per_family: usize,
    pub jitter: f64,
    pub data_seed: u64,
    pub d_z: usize,
    pub widths: Vec<usize>,
    pub prior_widths: Vec<usize>,
    pub enc_width: usize,
    pub d_k: usize,
    pub widen: Vec<usize>,
    pub head: usize,
    pub attention: bool,
    pub residual_blocks: bool,
    pub steps_train: usize,
    pub steps_eval: usize,
    pub bias_mode: BiasMode,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub recon_points: usize,
    pub clip: f64,
    pub checkpoint_every: usize,
    pub sample_shapes: usize,
    pub sample_points: usize,
    pub sample_seed: u64,
    pub jsd_grid: usize,
    pub jsd_bound: f64,
    pub emd: bool,
    pub gc_points: usize,
    pub gc_d_z: usize,
    pub gc_steps: usize,
    pub gc_h: f64,
    pub gc_tol: f64,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_list(v: &str) -> Result<Vec<usize>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

impl Default for Config {
    fn default() -> Self {
        // Placeholder values; every field is overwritten from KEYS.
        let mut c = Config {
            dataset_root: PathBuf::new(),
            n_points: 0,
            per_family: 0,
            jitter: 0.0,
            data_seed: 0,
            d_z: 0,
            widths: Vec::new(),
            prior_widths: Vec::new(),
            enc_width: 0,
            d_k: 0,
            widen: Vec::new(),
            head: 0,
            attention: false,
            residual_blocks: false,
            steps_train: 0,
            steps_eval: 0,
            bias_mode: BiasMode::Adaptive,
            lr: 0.0,
            epochs: 0,
            batch: 0,
            seed: 0,
            recon_points: 0,
            clip: 0.0,
            checkpoint_every: 0,
            sample_shapes: 0,
            sample_points: 0,
            sample_seed: 0,
            jsd_grid: 0,
            jsd_bound: 0.0,
            emd: false,
            gc_points: 0,
            gc_d_z: 0,
            gc_steps: 0,
            gc_h: 0.0,
            gc_tol: 0.0,
            checkpoint: PathBuf::new(),
            out: PathBuf::new(),
        };
        for (k, v, _) in KEYS {
            c.set(k, v, Origin::Default).expect("defaults parse");
        }
        c
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str, origin: Origin) -> Result<(), ConfigError> {
        let r: Result<(), String> = (|| {
            match key {
                "dataset.root" => self.dataset_root = PathBuf::from(value),
                "data.n_points" => self.n_points = parse_num(value)?,
                "data.per_family" => self.per_family = parse_num(value)?,
                "data.jitter" => self.jitter = parse_num(value)?,
                "data.seed" => self.data_seed = parse_num(value)?,
                "model.d_z" => self.d_z = parse_num(value)?,
                "model.widths" => self.widths = parse_list(value)?,
                "model.prior_widths" => self.prior_widths = parse_list(value)?,
                "encoder.width" => self.enc_width = parse_num(value)?,
                "encoder.d_k" => self.d_k = parse_num(value)?,
                "encoder.widen" => self.widen = parse_list(value)?,
                "encoder.head" => self.head = parse_num(value)?,
                "encoder.attention" => self.attention = parse_bool(value)?,
                "encoder.residual_blocks" => self.residual_blocks = parse_bool(value)?,
                "flow.steps_train" => self.steps_train = parse_num(value)?,
                "flow.steps_eval" => self.steps_eval = parse_num(value)?,
                "flow.bias_mode" => self.bias_mode = value.parse()?,
                "train.lr" => self.lr = parse_num(value)?,
                "train.epochs" => self.epochs = parse_num(value)?,
                "train.batch" => self.batch = parse_num(value)?,
                "train.seed" => self.seed = parse_num(value)?,
                "train.recon_points" => self.recon_points = parse_num(value)?,
                "train.clip" => self.clip = parse_num(value)?,
                "train.checkpoint_every" => self.checkpoint_every = parse_num(value)?,
                "sample.n_shapes" => self.sample_shapes = parse_num(value)?,
                "sample.n_points" => self.sample_points = parse_num(value)?,
                "sample.seed" => self.sample_seed = parse_num(value)?,
                "eval.jsd_grid" => self.jsd_grid = parse_num(value)?,
                "eval.jsd_bound" => self.jsd_bound = parse_num(value)?,
                "eval.emd" => self.emd = parse_bool(value)?,
                "gradcheck.points" => self.gc_points = parse_num(value)?,
                "gradcheck.d_z" => self.gc_d_z = parse_num(value)?,
                "gradcheck.steps" => self.gc_steps = parse_num(value)?,
                "gradcheck.h" => self.gc_h = parse_num(value)?,
                "gradcheck.tol" => self.gc_tol = parse_num(value)?,
                "paths.checkpoint" => self.checkpoint = PathBuf::from(value),
                "paths.out" => self.out = PathBuf::from(value),
                _ => return Err(String::new()),
            }
            Ok(())
        })();
        r.map_err(|reason| {
            if KEYS.iter().any(|(k, ..)| *k == key) {
                ConfigError::BadValue {
                    origin,
                    key: key.to_string(),
                    value: value.to_string(),
                    reason,
                }
            } else {
                ConfigError::UnknownKey {
                    origin,
                    key: key.to_string(),
                }
            }
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let origin = Origin::Line(i + 1);
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { origin: origin.clone() })?;
            self.set(k.trim(), v.trim(), origin)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or(ConfigError::Syntax { origin: Origin::Flag })?;
        self.set(k.trim(), v.trim(), Origin::Flag)
    }

    /// Defaults, then the file (if any), then the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut c = Config::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
                path: p.to_path_buf(),
                reason: e.to_string(),
            })?;
            c.apply_text(&text)?;
        }
        for kv in overrides {
            c.apply_override(kv)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("data.n_points", self.n_points),
            ("data.per_family", self.per_family),
            ("model.d_z", self.d_z),
            ("encoder.width", self.enc_width),
            ("encoder.d_k", self.d_k),
            ("encoder.head", self.head),
            ("flow.steps_train", self.steps_train),
            ("flow.steps_eval", self.steps_eval),
            ("train.batch", self.batch),
            ("train.checkpoint_every", self.checkpoint_every),
            ("sample.n_shapes", self.sample_shapes),
            ("sample.n_points", self.sample_points),
            ("eval.jsd_grid", self.jsd_grid),
            ("gradcheck.points", self.gc_points),
            ("gradcheck.d_z", self.gc_d_z),
            ("gradcheck.steps", self.gc_steps),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Invalid(format!("{k} must be at least 1")));
        }
        for (k, v) in [("model.widths", &self.widths), ("model.prior_widths", &self.prior_widths), ("encoder.widen", &self.widen)] {
            if v.contains(&0) {
                return Err(ConfigError::Invalid(format!("{k} entries must be at least 1")));
            }
        }
        let finite_pos = [
            ("train.clip", self.clip),
            ("eval.jsd_bound", self.jsd_bound),
            ("gradcheck.h", self.gc_h),
            ("gradcheck.tol", self.gc_tol),
        ];
        if let Some((k, _)) = finite_pos.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(ConfigError::Invalid(format!("{k} must be positive")));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::Invalid("train.lr must be finite and >= 0".into()));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(ConfigError::Invalid("data.jitter must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                width: self.enc_width,
                d_k: self.d_k,
                widen: self.widen.clone(),
                head: self.head,
                d_z: self.d_z,
                attention: self.attention,
                residual_blocks: self.residual_blocks,
            },
            decoder_hidden: self.widths.clone(),
            prior_hidden: self.prior_widths.clone(),
            bias: self.bias_mode,
        }
    }

    pub fn grid(&self) -> VoxelGrid {
        VoxelGrid {
            resolution: self.jsd_grid,
            bound: self.jsd_bound,
        }
    }

    /// Key table for `--help`.
    pub fn documentation() -> String {
        let w = KEYS.iter().map(|(k, ..)| k.len()).max().unwrap_or(0);
        let mut s = String::from("Config keys (key = value lines, '#' comments; --set key=value overrides):\n");
        for (k, d, doc) in KEYS {
            s.push_str(&format!("  {k:<w$}  {doc} [default: {d}]\n"));
        }
        s
    }
}
