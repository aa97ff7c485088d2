use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{batch_gradient, clip_global_norm, save_checkpoint, Adam, LossParts, ObjectiveError, ShapeDraw};
use crate::compute::ComputeError;
use crate::flow::Solver;
use crate::geometry::PointCloud;
use crate::model::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    /// Points per shape scored by the decoder each step (all when `None`).
    pub recon_points: Option<usize>,
    pub clip: f64,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 10,
            lr: 1e-3,
            steps: 32,
            seed: 0,
            recon_points: None,
            clip: 10.0,
            checkpoint: None,
            checkpoint_every: 1,
            log: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: &str| Err(ObjectiveError::InvalidConfig(m.to_string()));
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if self.steps == 0 {
            return bad("solver steps must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and >= 0");
        }
        if self.recon_points == Some(0) {
            return bad("recon points must be at least 1");
        }
        if !(self.clip > 0.0) {
            return bad("gradient clip must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub parts: LossParts,
    pub seconds: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "{} {:.9} {:.9} {:.9} {:.9} {:.3}",
            self.epoch, self.parts.recon, self.parts.prior, self.parts.entro, self.parts.total, self.seconds
        )
    }
}

/// Generator for one epoch's shuffling and draws, so resuming at an epoch
/// reproduces an uninterrupted run.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Minimizes `-(recon + prior + entro)` for `cfg.epochs` epochs after
/// `start_epoch` completed ones. Checkpoints and log lines are written when
/// configured; on a non-finite loss training stops and the last checkpoint
/// is left untouched.
pub fn train(model: &mut Model, data: &[PointCloud], cfg: &TrainConfig, start_epoch: usize) -> Result<Vec<EpochLog>, ObjectiveError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ObjectiveError::InvalidConfig("no training shapes".into()));
    }
    let solver = Solver::new(cfg.steps);
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in start_epoch + 1..=start_epoch + cfg.epochs {
        let started = Instant::now();
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut parts = Vec::with_capacity(data.len());
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&PointCloud> = chunk.iter().map(|&i| &data[i]).collect();
            let draws: Vec<ShapeDraw> = batch
                .iter()
                .map(|c| ShapeDraw::sample(&mut rng, model.d_z(), c.len(), cfg.recon_points))
                .collect();
            let (p, mut grads) = batch_gradient(model, &batch, &draws, &solver, true).map_err(|e| match e {
                ObjectiveError::InShape { index, source } => match *source {
                    ObjectiveError::Compute(ComputeError::NonFinite { .. })
                    | ObjectiveError::Flow(crate::flow::FlowError::NonFinite { .. }) => ObjectiveError::NonFiniteLoss {
                        epoch,
                        shape: chunk[index],
                    },
                    other => ObjectiveError::InShape {
                        index: chunk[index],
                        source: Box::new(other),
                    },
                },
                other => other,
            })?;
            if let Some(k) = p.iter().position(|x| !x.is_finite()) {
                return Err(ObjectiveError::NonFiniteLoss { epoch, shape: chunk[k] });
            }
            clip_global_norm(&mut grads, cfg.clip);
            adam.step(&mut model.params, &grads);
            parts.extend(p);
        }
        let log = EpochLog {
            epoch,
            parts: LossParts::mean(&parts),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("epoch {}", log.line());
        if let Some(path) = &cfg.log {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|source| ObjectiveError::Io {
                    path: path.clone(),
                    source,
                })?;
            writeln!(f, "{}", log.line()).map_err(|source| ObjectiveError::Io {
                path: path.clone(),
                source,
            })?;
        }
        let last = epoch == start_epoch + cfg.epochs;
        if let Some(path) = &cfg.checkpoint {
            if last || (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
                save_checkpoint(model, epoch, path)?;
            }
        }
        logs.push(log);
    }
    Ok(logs)
}
