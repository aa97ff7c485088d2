//! Training objective (reconstruction + prior + entropy), Adam, the
//! training loop and checkpoints.

mod adam;
mod checkpoint;
mod train;

pub use adam::{clip_global_norm, Adam};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, CheckpointError, RawCheckpoint, MAGIC, VERSION};
pub use train::{epoch_rng, train, EpochLog, TrainConfig};

use std::f64::consts::PI;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::compute::{finite_diff_compare, ComputeError, GradCheckReport, Graph, Mode, ParamSet, Tensor, Var};
use crate::encoder::{reparameterize_on, update_running_stats, EncoderError, GaussianPosterior, BN_MOMENTUM};
use crate::flow::{log_prob_on, FieldContext, FlowError, NetField, Solver};
use crate::geometry::PointCloud;
use crate::model::{Model, ModelError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("shape {index}: {source}")]
    InShape {
        index: usize,
        #[source]
        source: Box<ObjectiveError>,
    },
    #[error("non-finite loss at epoch {epoch}, shape {shape}")]
    NonFiniteLoss { epoch: usize, shape: usize },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}

/// Per-shape averages, in nats.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub recon: f64,
    pub prior: f64,
    pub entro: f64,
    pub total: f64,
}

impl LossParts {
    pub fn new(recon: f64, prior: f64, entro: f64) -> Self {
        Self {
            recon,
            prior,
            entro,
            total: recon + prior + entro,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.recon.is_finite() && self.prior.is_finite() && self.entro.is_finite()
    }

    /// Mean of several parts.
    pub fn mean(parts: &[LossParts]) -> Self {
        let n = parts.len().max(1) as f64;
        Self::new(
            parts.iter().map(|p| p.recon).sum::<f64>() / n,
            parts.iter().map(|p| p.prior).sum::<f64>() / n,
            parts.iter().map(|p| p.entro).sum::<f64>() / n,
        )
    }
}

/// Differential entropy of a diagonal Gaussian:
/// `D/2 (1 + ln 2 pi) + 1/2 sum(logvar)`.
pub fn entropy(q: &GaussianPosterior) -> f64 {
    let d = q.logvar.len() as f64;
    0.5 * d * (1.0 + (2.0 * PI).ln()) + 0.5 * q.logvar.iter().sum::<f64>()
}

pub fn entropy_on(g: &mut Graph, logvar: Var) -> Var {
    let (r, c) = g.shape(logvar);
    let s = g.sum(logvar, None);
    let s = g.scale(s, 0.5);
    g.add_scalar(s, 0.5 * (r * c) as f64 * (1.0 + (2.0 * PI).ln()))
}

/// Randomness consumed by one shape's objective: the reparameterization
/// noise and (optionally) the subset of points scored by the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeDraw {
    pub noise: Tensor,
    pub recon_rows: Option<Vec<usize>>,
}

impl ShapeDraw {
    /// Draws `d_z` normals, then, when `recon_points < n`, a sorted subset of
    /// `recon_points` point indices.
    pub fn sample(rng: &mut impl Rng, d_z: usize, n: usize, recon_points: Option<usize>) -> Self {
        let noise = Tensor::row((0..d_z).map(|_| rng.sample(StandardNormal)).collect());
        let recon_rows = match recon_points {
            Some(m) if m < n => {
                let mut rows = index::sample(rng, n, m.max(1)).into_vec();
                rows.sort_unstable();
                Some(rows)
            }
            _ => None,
        };
        Self { noise, recon_rows }
    }
}

/// Graph nodes of one shape's objective.
pub struct ShapeTerms {
    pub recon: Var,
    pub prior: Var,
    pub entro: Var,
    /// `-(recon + prior + entro)`
    pub loss: Var,
    pub encoder: crate::encoder::EncoderOut,
}

/// Builds `recon + prior + entro` for one cloud on a train-mode graph.
/// With a point subset the reconstruction sum is rescaled by `N / M`.
pub fn shape_terms(
    g: &mut Graph,
    model: &Model,
    params: &ParamSet,
    cloud: &PointCloud,
    draw: &ShapeDraw,
    solver: &Solver,
) -> Result<ShapeTerms, ObjectiveError> {
    let x = cloud.to_tensor();
    let xv = g.constant(x.clone());
    let enc = model.encoder.forward(g, params, &model.buffers, xv)?;
    let z = reparameterize_on(g, enc.mu, enc.logvar, &draw.noise)?;

    let (xs, factor) = match &draw.recon_rows {
        Some(rows) => {
            let data = rows.iter().flat_map(|&r| x.row_slice(r).to_vec()).collect();
            let sub = Tensor::matrix(rows.len(), 3, data)?;
            (g.constant(sub), x.rows() as f64 / rows.len() as f64)
        }
        None => (xv, 1.0),
    };
    let dec = NetField::new(&model.decoder, params, FieldContext::Node(z));
    let lp = log_prob_on(g, &dec, xs, solver)?;
    let recon = g.sum(lp, None);
    let recon = if factor != 1.0 { g.scale(recon, factor) } else { recon };

    let pri = NetField::new(&model.prior, params, FieldContext::None);
    let lpz = log_prob_on(g, &pri, z, solver)?;
    let prior = g.sum(lpz, None);

    let entro = entropy_on(g, enc.logvar);
    let rp = g.add(recon, prior)?;
    let total = g.add(rp, entro)?;
    let loss = g.neg(total);
    Ok(ShapeTerms {
        recon,
        prior,
        entro,
        loss,
        encoder: enc,
    })
}

fn parts_of(g: &Graph, t: &ShapeTerms) -> LossParts {
    LossParts::new(g.value(t.recon).item(), g.value(t.prior).item(), g.value(t.entro).item())
}

/// Objective values of one shape, optionally with `d(-total)/d(params)`.
pub fn shape_objective(
    model: &Model,
    cloud: &PointCloud,
    draw: &ShapeDraw,
    solver: &Solver,
    with_grad: bool,
) -> Result<(LossParts, Option<ParamSet>, Graph, ShapeTerms), ObjectiveError> {
    let mut g = Graph::new(Mode::Train);
    let terms = shape_terms(&mut g, model, &model.params, cloud, draw, solver)?;
    let parts = parts_of(&g, &terms);
    let grads = if with_grad {
        Some(g.gradients(terms.loss, &model.params)?)
    } else {
        None
    };
    Ok((parts, grads, g, terms))
}

/// Batch objective: one draw per shape from `rng`, parts averaged.
pub fn elbo_batch(
    batch: &[PointCloud],
    model: &Model,
    solver: &Solver,
    recon_points: Option<usize>,
    rng: &mut impl Rng,
) -> Result<LossParts, ObjectiveError> {
    let mut parts = Vec::with_capacity(batch.len());
    for (i, c) in batch.iter().enumerate() {
        let draw = ShapeDraw::sample(rng, model.d_z(), c.len(), recon_points);
        let (p, ..) = shape_objective(model, c, &draw, solver, false).map_err(|e| ObjectiveError::InShape {
            index: i,
            source: Box::new(e),
        })?;
        parts.push(p);
    }
    Ok(LossParts::mean(&parts))
}

/// Mean `-(total)` over a batch with fixed draws, on independent graphs;
/// returns the averaged parts and gradient.
pub fn batch_gradient(
    model: &mut Model,
    batch: &[&PointCloud],
    draws: &[ShapeDraw],
    solver: &Solver,
    update_stats: bool,
) -> Result<(Vec<LossParts>, ParamSet), ObjectiveError> {
    let mut grads = model.params.zeros_like();
    let mut parts = Vec::with_capacity(batch.len());
    let scale = 1.0 / batch.len().max(1) as f64;
    for (i, (c, draw)) in batch.iter().zip(draws).enumerate() {
        let wrap = |e: ObjectiveError| ObjectiveError::InShape {
            index: i,
            source: Box::new(e),
        };
        let (p, g_i, g, terms) = shape_objective(model, c, draw, solver, true).map_err(wrap)?;
        grads.add_scaled(&g_i.expect("gradient requested"), scale);
        if update_stats {
            update_running_stats(&g, &terms.encoder, &mut model.buffers, BN_MOMENTUM).map_err(|e| wrap(e.into()))?;
        }
        parts.push(p);
    }
    Ok((parts, grads))
}

/// Central-difference check of the gradient of `-total`, summed over
/// `clouds` with fixed draws. `flip_sign` negates the analytic gradient
/// before comparing, which must make the check fail.
pub fn check_gradients(
    model: &Model,
    clouds: &[PointCloud],
    draws: &[ShapeDraw],
    solver: &Solver,
    h: f64,
    tol: f64,
    flip_sign: bool,
) -> Result<GradCheckReport, ObjectiveError> {
    let loss = |ps: &ParamSet| -> Result<(Graph, Var), ObjectiveError> {
        let mut g = Graph::new(Mode::Train);
        let mut acc: Option<Var> = None;
        for (c, d) in clouds.iter().zip(draws) {
            let l = shape_terms(&mut g, model, ps, c, d, solver)?.loss;
            acc = Some(match acc {
                None => l,
                Some(a) => g.add(a, l)?,
            });
        }
        let l = acc.ok_or_else(|| ObjectiveError::InvalidConfig("no clouds to check".into()))?;
        Ok((g, l))
    };
    let (g, l) = loss(&model.params)?;
    let mut analytic = g.gradients(l, &model.params)?;
    drop(g);
    if flip_sign {
        analytic.scale(-1.0);
    }
    finite_diff_compare(&model.params, &analytic, loss, h, tol, 1)
}
