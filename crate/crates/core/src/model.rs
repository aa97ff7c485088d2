//! The full generative model: encoder, latent prior flow and point decoder
//! flow, with their parameters and batch-norm buffers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::compute::ParamSet;
use crate::encoder::{Encoder, EncoderConfig, EncoderError};
use crate::flow::{BiasMode, FlowError, OdeNet};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder_hidden: Vec<usize>,
    pub prior_hidden: Vec<usize>,
    pub bias: BiasMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder_hidden: vec![64, 64, 64],
            prior_hidden: vec![32, 32],
            bias: BiasMode::Adaptive,
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    pub fn d_z(&self) -> usize {
        self.encoder.d_z
    }

    /// Canonical one-line description of the architecture.
    pub fn describe(&self) -> String {
        let e = &self.encoder;
        format!(
            "d_z={} width={} d_k={} widen={} head={} attention={} residual={} decoder={} prior={} bias={}",
            e.d_z,
            e.width,
            e.d_k,
            join(&e.widen),
            e.head,
            e.attention,
            e.residual_blocks,
            join(&self.decoder_hidden),
            join(&self.prior_hidden),
            self.bias
        )
    }

    /// SHA-256 of [`ModelConfig::describe`].
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.describe().as_bytes());
        h.finalize().into()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub prior: OdeNet,
    pub decoder: OdeNet,
    pub params: ParamSet,
    /// Batch-norm running statistics (not trained by gradient).
    pub buffers: ParamSet,
}

impl Model {
    /// Architecture only; parameters and buffers are empty.
    pub fn skeleton(cfg: ModelConfig) -> Self {
        let d_z = cfg.d_z();
        Self {
            encoder: Encoder::new(cfg.encoder.clone()),
            prior: OdeNet::prior(d_z, cfg.prior_hidden.clone()),
            decoder: OdeNet::decoder(d_z, cfg.decoder_hidden.clone(), cfg.bias),
            cfg,
            params: ParamSet::new(),
            buffers: ParamSet::new(),
        }
    }

    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut m = Self::skeleton(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.encoder.init_params(&mut m.params, &mut rng)?;
        m.prior.init_params(&mut m.params, &mut rng)?;
        m.decoder.init_params(&mut m.params, &mut rng)?;
        m.encoder.init_buffers(&mut m.buffers)?;
        Ok(m)
    }

    pub fn d_z(&self) -> usize {
        self.cfg.d_z()
    }
}
