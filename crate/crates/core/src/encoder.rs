//! Set encoder `q(z | x)`: pointwise embedding, residual blocks around one
//! self-attention layer, pointwise widening, max-pool and a Gaussian head.

use rand::Rng;
use thiserror::Error;

use crate::compute::{ComputeError, Graph, Mode, ParamSet, Tensor, Var};
use crate::geometry::PointCloud;

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;
pub const LOGVAR_RANGE: (f64, f64) = (-10.0, 10.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error("{what}: expected width {expected}, got {got}")]
    Width {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite input coordinate")]
    NonFinite,
    #[error("missing buffer {0}")]
    MissingBuffer(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Feature width after embedding; also the residual/attention width.
    pub width: usize,
    pub d_k: usize,
    /// Pointwise layers after the second residual block.
    pub widen: Vec<usize>,
    /// Width of the shared tanh layer in front of the two heads.
    pub head: usize,
    pub d_z: usize,
    pub attention: bool,
    pub residual_blocks: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 128,
            d_k: 16,
            widen: vec![256, 512],
            head: 256,
            d_z: 32,
            attention: true,
            residual_blocks: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl GaussianPosterior {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Graph nodes of one encoder pass.
pub struct EncoderOut {
    pub mu: Var,
    pub logvar: Var,
    /// Attention weights (`N x N`), when attention is enabled.
    pub attention: Option<Var>,
    /// Batch-norm nodes with their buffer prefix, for running-stat updates.
    pub batch_norms: Vec<(String, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("init shape")
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Self {
        Self { cfg }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn pooled_width(&self) -> usize {
        self.cfg.widen.last().copied().unwrap_or(self.cfg.width)
    }

    fn batch_norm_layers(&self) -> Vec<(String, usize)> {
        let c = self.cfg.width;
        let mut out = Vec::new();
        for rb in ["enc.rb1", "enc.rb2"] {
            out.push((format!("{rb}.bn1"), c));
            out.push((format!("{rb}.bn2"), c));
        }
        for (i, &w) in self.cfg.widen.iter().enumerate() {
            out.push((format!("enc.widen{i}.bn"), w));
        }
        out
    }

    /// Learnable parameters. Pointwise layers feeding a batch norm carry no
    /// bias of their own.
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<(), EncoderError> {
        let c = self.cfg.width;
        params.insert("enc.embed.w", uniform(rng, 3, c))?;
        params.insert("enc.embed.b", Tensor::zeros(&[1, c]))?;
        for rb in ["enc.rb1", "enc.rb2"] {
            params.insert(format!("{rb}.conv1.w"), uniform(rng, c, c))?;
            params.insert(format!("{rb}.conv2.w"), uniform(rng, c, c))?;
        }
        params.insert("enc.attn.wq", uniform(rng, c, self.cfg.d_k))?;
        params.insert("enc.attn.wk", uniform(rng, c, self.cfg.d_k))?;
        params.insert("enc.attn.wv", uniform(rng, c, c))?;
        let mut prev = c;
        for (i, &w) in self.cfg.widen.iter().enumerate() {
            params.insert(format!("enc.widen{i}.w"), uniform(rng, prev, w))?;
            prev = w;
        }
        for (name, w) in self.batch_norm_layers() {
            params.insert(format!("{name}.gamma"), Tensor::full(&[1, w], 1.0))?;
            params.insert(format!("{name}.beta"), Tensor::zeros(&[1, w]))?;
        }
        let (p, h, dz) = (self.pooled_width(), self.cfg.head, self.cfg.d_z);
        params.insert("enc.head.w", uniform(rng, p, h))?;
        params.insert("enc.head.b", Tensor::zeros(&[1, h]))?;
        params.insert("enc.mu.w", uniform(rng, h, dz))?;
        params.insert("enc.mu.b", Tensor::zeros(&[1, dz]))?;
        params.insert("enc.logvar.w", uniform(rng, h, dz))?;
        params.insert("enc.logvar.b", Tensor::zeros(&[1, dz]))?;
        Ok(())
    }

    /// Running mean 0 and variance 1 for every batch norm.
    pub fn init_buffers(&self, buffers: &mut ParamSet) -> Result<(), EncoderError> {
        for (name, w) in self.batch_norm_layers() {
            buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[1, w]))?;
            buffers.insert(format!("{name}.running_var"), Tensor::full(&[1, w], 1.0))?;
        }
        Ok(())
    }

    /// `N x 3` points to `N x width` features: `x W + b`.
    pub fn embed_points(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var, EncoderError> {
        if g.shape(x).1 != 3 {
            return Err(EncoderError::Width {
                what: "point coordinates",
                expected: 3,
                got: g.shape(x).1,
            });
        }
        if !g.value(x).is_finite() {
            return Err(EncoderError::NonFinite);
        }
        let w = g.param(params, "enc.embed.w")?;
        let b = g.param(params, "enc.embed.b")?;
        Ok(g.linear(x, w, Some(b))?)
    }

    fn batch_norm(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        buffers: &ParamSet,
        name: &str,
        x: Var,
        record: &mut Vec<(String, Var)>,
    ) -> Result<Var, EncoderError> {
        let gamma = g.param(params, &format!("{name}.gamma"))?;
        let beta = g.param(params, &format!("{name}.beta"))?;
        let buffer = |suffix: &str| {
            let key = format!("{name}.{suffix}");
            buffers.get(&key).ok_or(EncoderError::MissingBuffer(key))
        };
        let out = g.batch_norm(x, gamma, beta, buffer("running_mean")?, buffer("running_var")?, BN_EPS)?;
        record.push((name.to_string(), out));
        Ok(out)
    }

    /// `ReLU(F(f) + f)` with `F = conv -> BN -> ReLU -> conv -> BN`; without
    /// residual blocks configured the skip path is dropped.
    pub fn residual_block(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        buffers: &ParamSet,
        block: &str,
        f: Var,
        record: &mut Vec<(String, Var)>,
    ) -> Result<Var, EncoderError> {
        let c = self.cfg.width;
        if g.shape(f).1 != c {
            return Err(EncoderError::Width {
                what: "residual block input",
                expected: c,
                got: g.shape(f).1,
            });
        }
        let w1 = g.param(params, &format!("{block}.conv1.w"))?;
        let w2 = g.param(params, &format!("{block}.conv2.w"))?;
        let h = g.matmul(f, w1)?;
        let h = self.batch_norm(g, params, buffers, &format!("{block}.bn1"), h, record)?;
        let h = g.relu(h);
        let h = g.matmul(h, w2)?;
        let h = self.batch_norm(g, params, buffers, &format!("{block}.bn2"), h, record)?;
        let h = if self.cfg.residual_blocks { g.add(h, f)? } else { h };
        Ok(g.relu(h))
    }

    /// Single-head scaled dot-product attention with a residual path:
    /// `ReLU(softmax(Q K^T / sqrt(d_k)) V + f)`. Returns the output and the
    /// `N x N` weight matrix.
    pub fn self_attention(&self, g: &mut Graph, params: &ParamSet, f: Var) -> Result<(Var, Var), EncoderError> {
        let wq = g.param(params, "enc.attn.wq")?;
        let wk = g.param(params, "enc.attn.wk")?;
        let wv = g.param(params, "enc.attn.wv")?;
        let c = g.shape(f).1;
        if g.shape(wv).1 != c {
            return Err(EncoderError::Width {
                what: "attention value width",
                expected: c,
                got: g.shape(wv).1,
            });
        }
        let q = g.matmul(f, wq)?;
        let k = g.matmul(f, wk)?;
        let v = g.matmul(f, wv)?;
        let kt = g.transpose(k);
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 1.0 / (g.shape(wq).1 as f64).sqrt());
        let a = g.softmax(s, 1);
        let ctx = g.matmul(a, v)?;
        let sum = g.add(ctx, f)?;
        Ok((g.relu(sum), a))
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, buffers: &ParamSet, x: Var) -> Result<EncoderOut, EncoderError> {
        let mut bns = Vec::new();
        let f = self.embed_points(g, params, x)?;
        let f = self.residual_block(g, params, buffers, "enc.rb1", f, &mut bns)?;
        let (f, attention) = if self.cfg.attention {
            let (f, a) = self.self_attention(g, params, f)?;
            (f, Some(a))
        } else {
            (f, None)
        };
        let mut f = self.residual_block(g, params, buffers, "enc.rb2", f, &mut bns)?;
        let n = self.cfg.widen.len();
        for i in 0..n {
            let w = g.param(params, &format!("enc.widen{i}.w"))?;
            let h = g.matmul(f, w)?;
            let h = self.batch_norm(g, params, buffers, &format!("enc.widen{i}.bn"), h, &mut bns)?;
            f = if i + 1 < n { g.relu(h) } else { h };
        }
        let pooled = g.max(f, 0);
        let hw = g.param(params, "enc.head.w")?;
        let hb = g.param(params, "enc.head.b")?;
        let h = g.linear(pooled, hw, Some(hb))?;
        let h = g.tanh(h);
        let mw = g.param(params, "enc.mu.w")?;
        let mb = g.param(params, "enc.mu.b")?;
        let mu = g.linear(h, mw, Some(mb))?;
        let lw = g.param(params, "enc.logvar.w")?;
        let lb = g.param(params, "enc.logvar.b")?;
        let lv = g.linear(h, lw, Some(lb))?;
        let logvar = g.clamp(lv, LOGVAR_RANGE.0, LOGVAR_RANGE.1);
        Ok(EncoderOut {
            mu,
            logvar,
            attention,
            batch_norms: bns,
        })
    }

    /// Posterior for one cloud. `Mode::Eval` normalizes with the running
    /// statistics, `Mode::Train` with the cloud's own.
    pub fn encode(&self, cloud: &PointCloud, params: &ParamSet, buffers: &ParamSet, mode: Mode) -> Result<GaussianPosterior, EncoderError> {
        let mut g = Graph::new(mode);
        let x = g.constant(cloud.to_tensor());
        let out = self.forward(&mut g, params, buffers, x)?;
        Ok(GaussianPosterior {
            mu: g.value(out.mu).data().to_vec(),
            logvar: g.value(out.logvar).data().to_vec(),
        })
    }
}

/// Folds the batch statistics of a train-mode pass into the running ones:
/// `running = m * running + (1 - m) * batch`.
pub fn update_running_stats(g: &Graph, out: &EncoderOut, buffers: &mut ParamSet, momentum: f64) -> Result<(), EncoderError> {
    for (name, node) in &out.batch_norms {
        let Some((mean, var)) = g.batch_stats(*node) else { continue };
        for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
            let key = format!("{name}.{suffix}");
            let buf = buffers.get_mut(&key).ok_or_else(|| EncoderError::MissingBuffer(key.clone()))?;
            for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
    }
    Ok(())
}

/// `z = mu + exp(logvar / 2) * noise` on the graph.
pub fn reparameterize_on(g: &mut Graph, mu: Var, logvar: Var, noise: &Tensor) -> Result<Var, EncoderError> {
    let (r, c) = g.shape(mu);
    if noise.len() != r * c {
        return Err(EncoderError::Width {
            what: "reparameterization noise",
            expected: r * c,
            got: noise.len(),
        });
    }
    let half = g.scale(logvar, 0.5);
    let sigma = g.exp(half);
    let e = g.constant(Tensor::matrix(r, c, noise.data().to_vec())?);
    let s = g.mul(sigma, e)?;
    Ok(g.add(mu, s)?)
}

pub fn reparameterize(q: &GaussianPosterior, noise: &[f64]) -> Result<Vec<f64>, EncoderError> {
    if noise.len() != q.dim() {
        return Err(EncoderError::Width {
            what: "reparameterization noise",
            expected: q.dim(),
            got: noise.len(),
        });
    }
    let mut g = Graph::new(Mode::Eval);
    let mu = g.constant(Tensor::row(q.mu.clone()));
    let lv = g.constant(Tensor::row(q.logvar.clone()));
    let z = reparameterize_on(&mut g, mu, lv, &Tensor::row(noise.to_vec()))?;
    Ok(g.value(z).data().to_vec())
}
