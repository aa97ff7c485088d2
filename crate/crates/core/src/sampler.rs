//! Shape generation from the latent prior, and reconstruction from the
//! posterior mean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::compute::{Mode, Tensor};
use crate::encoder::EncoderError;
use crate::flow::{integrate, Direction, FieldContext, FlowError, NetField, Solver};
use crate::geometry::{GeometryError, PointCloud};
use crate::model::Model;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenRequest {
    pub n_shapes: usize,
    pub n_points: usize,
    pub seed: u64,
    pub steps: usize,
    /// Latent codes to decode instead of prior draws, one per shape.
    pub z: Option<Vec<Vec<f64>>>,
}

impl GenRequest {
    pub fn new(n_shapes: usize, n_points: usize, seed: u64, steps: usize) -> Self {
        Self {
            n_shapes,
            n_points,
            seed,
            steps,
            z: None,
        }
    }

    fn validate(&self, d_z: usize) -> Result<(), SampleError> {
        let bad = |m: String| Err(SampleError::InvalidRequest(m));
        if self.n_shapes == 0 || self.n_points == 0 || self.steps == 0 {
            return bad("shape count, point count and steps must be positive".into());
        }
        if let Some(z) = &self.z {
            if z.len() != self.n_shapes {
                return bad(format!("{} latent codes for {} shapes", z.len(), self.n_shapes));
            }
            if let Some(bad_z) = z.iter().find(|v| v.len() != d_z) {
                return bad(format!("latent code of length {} (expected {d_z})", bad_z.len()));
            }
        }
        Ok(())
    }
}

fn normals(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("sized buffer")
}

/// Latent codes: prior forward flow applied to `w ~ N(0, I)`.
pub fn sample_latents(model: &Model, n: usize, seed: u64, steps: usize) -> Result<Vec<Vec<f64>>, SampleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = normals(&mut rng, n, model.d_z());
    let field = NetField::new(&model.prior, &model.params, FieldContext::None);
    let z = integrate(&field, &w, &Solver::new(steps), Direction::Forward)?;
    Ok((0..n).map(|i| z.row_slice(i).to_vec()).collect())
}

/// Decodes `n_points` points for latent `z` from Gaussian noise drawn with
/// `rng`.
pub fn decode_points(model: &Model, z: &[f64], n_points: usize, steps: usize, rng: &mut ChaCha8Rng) -> Result<PointCloud, SampleError> {
    let y = normals(rng, n_points, 3);
    let zt = Tensor::row(z.to_vec());
    let field = NetField::new(&model.decoder, &model.params, FieldContext::Fixed(&zt));
    let x = integrate(&field, &y, &Solver::new(steps), Direction::Forward)?;
    Ok(PointCloud::from_tensor(&x)?)
}

/// Generates `req.n_shapes` clouds. Latents use stream 0 of the seed and
/// shape `i`'s point noise uses stream `i + 1`, so changing `n_points`
/// keeps the latent codes.
pub fn sample_shapes(req: &GenRequest, model: &Model) -> Result<Vec<PointCloud>, SampleError> {
    req.validate(model.d_z())?;
    let zs = match &req.z {
        Some(z) => z.clone(),
        None => sample_latents(model, req.n_shapes, req.seed, req.steps)?,
    };
    zs.iter()
        .enumerate()
        .map(|(i, z)| {
            let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
            rng.set_stream(i as u64 + 1);
            decode_points(model, z, req.n_points, req.steps, &mut rng)
        })
        .collect()
}

/// Posterior mean of a cloud, normalized with its own batch statistics as
/// during training.
pub fn encode_mean(model: &Model, cloud: &PointCloud) -> Result<Vec<f64>, SampleError> {
    Ok(model.encoder.encode(cloud, &model.params, &model.buffers, Mode::Train)?.mu)
}

/// Decodes the posterior mean of `cloud` into `n_points` new points.
pub fn reconstruct(model: &Model, cloud: &PointCloud, n_points: usize, steps: usize, seed: u64) -> Result<PointCloud, SampleError> {
    let req = GenRequest {
        z: Some(vec![encode_mean(model, cloud)?]),
        ..GenRequest::new(1, n_points, seed, steps)
    };
    Ok(sample_shapes(&req, model)?.remove(0))
}
