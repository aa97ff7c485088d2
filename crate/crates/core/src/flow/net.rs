use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FlowError, VectorField, LN_EPS};
use crate::compute::{ComputeError, Graph, Mode, ParamSet, Tensor, Var};

/// How the per-layer bias is derived from the conditioning context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BiasMode {
    /// `gamma * phi(LN(c))`
    Adaptive,
    /// `phi(c)`
    Plain,
}

impl BiasMode {
    pub fn name(self) -> &'static str {
        match self {
            BiasMode::Adaptive => "adaptive",
            BiasMode::Plain => "plain",
        }
    }
}

impl fmt::Display for BiasMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BiasMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adaptive" => Ok(BiasMode::Adaptive),
            "plain" => Ok(BiasMode::Plain),
            other => Err(format!("unknown bias mode {other:?} (expected adaptive or plain)")),
        }
    }
}

/// How `tr(df/dy)` is obtained alongside the field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceMode {
    /// One forward tangent per state dimension.
    Exact,
    /// Rademacher probes `e` with `tr ~ mean(e^T J e)`; the probes are drawn
    /// from `seed` and stay fixed along a trajectory.
    Hutchinson { probes: usize, seed: u64 },
}

/// Layer normalization of a context vector: `(c - mean) / sqrt(var + eps)`.
/// A length-1 context normalizes to zero.
pub fn layer_norm(c: &[f64], eps: f64) -> Vec<f64> {
    if c.len() == 1 {
        log::warn!("layer norm of a length-1 context is identically zero");
    }
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::row(c.to_vec()));
    let y = g.layer_norm(x, eps);
    g.value(y).data().to_vec()
}

fn check_phi(c: &[f64], phi_w: &Tensor, phi_b: &Tensor) -> Result<(), FlowError> {
    if phi_w.rows() != c.len() {
        return Err(FlowError::Dimension {
            what: "bias hyper-network input",
            expected: phi_w.rows(),
            got: c.len(),
        });
    }
    if phi_b.len() != phi_w.cols() {
        return Err(FlowError::Dimension {
            what: "bias hyper-network offset",
            expected: phi_w.cols(),
            got: phi_b.len(),
        });
    }
    Ok(())
}

/// `gamma * (LN(c) phi_w + phi_b)`.
pub fn adaptive_bias(c: &[f64], phi_w: &Tensor, phi_b: &Tensor, gamma: f64) -> Result<Vec<f64>, FlowError> {
    check_phi(c, phi_w, phi_b)?;
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::row(c.to_vec()));
    let w = g.constant(phi_w.clone());
    let b = g.constant(Tensor::row(phi_b.data().to_vec()));
    let gm = g.scalar(gamma);
    let ln = g.layer_norm(x, LN_EPS);
    let lin = g.linear(ln, w, Some(b))?;
    let out = g.mul(gm, lin)?;
    Ok(g.value(out).data().to_vec())
}

/// `c phi_w + phi_b`, no normalization.
pub fn plain_bias(c: &[f64], phi_w: &Tensor, phi_b: &Tensor) -> Result<Vec<f64>, FlowError> {
    check_phi(c, phi_w, phi_b)?;
    let mut g = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::row(c.to_vec()));
    let w = g.constant(phi_w.clone());
    let b = g.constant(Tensor::row(phi_b.data().to_vec()));
    let out = g.linear(x, w, Some(b))?;
    Ok(g.value(out).data().to_vec())
}

/// Stack of context-biased layers `h <- tanh(h W + b(c))`, the last layer
/// linear, mapping `dim` to `dim`. The context is `[t]` for an unconditional
/// net (`latent == 0`) and `[t, z]` otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct OdeNet {
    prefix: String,
    dim: usize,
    latent: usize,
    hidden: Vec<usize>,
    bias: BiasMode,
}

impl OdeNet {
    pub fn new(prefix: impl Into<String>, dim: usize, latent: usize, hidden: Vec<usize>, bias: BiasMode) -> Self {
        assert!(dim >= 1, "flow dimension must be positive");
        Self {
            prefix: prefix.into(),
            dim,
            latent,
            hidden,
            bias,
        }
    }

    /// Point-space flow conditioned on a `d_z` latent.
    pub fn decoder(d_z: usize, hidden: Vec<usize>, bias: BiasMode) -> Self {
        Self::new("dec", 3, d_z, hidden, bias)
    }

    /// Latent-space flow conditioned on time only, with affine time bias.
    pub fn prior(d_z: usize, hidden: Vec<usize>) -> Self {
        Self::new("prior", d_z, 0, hidden, BiasMode::Plain)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn bias_mode(&self) -> BiasMode {
        self.bias
    }

    pub fn ctx_dim(&self) -> usize {
        1 + self.latent
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.n_layers());
        let mut prev = self.dim;
        for &h in self.hidden.iter().chain(std::iter::once(&self.dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn name(&self, layer: usize, part: &str) -> String {
        format!("{}.l{}.{}", self.prefix, layer, part)
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero hyper-network offsets,
    /// `gamma = 1`.
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<(), FlowError> {
        let ctx = self.ctx_dim();
        for (l, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            params.insert(self.name(l, "w"), uniform(rng, fan_in, fan_out, fan_in))?;
            params.insert(self.name(l, "phi_w"), uniform(rng, ctx, fan_out, ctx))?;
            params.insert(self.name(l, "phi_b"), Tensor::zeros(&[1, fan_out]))?;
            if self.bias == BiasMode::Adaptive {
                params.insert(self.name(l, "gamma"), Tensor::scalar(1.0))?;
            }
        }
        Ok(())
    }

    fn context(&self, g: &mut Graph, t: f64, z: Option<Var>) -> Result<Var, FlowError> {
        let tv = g.constant(Tensor::matrix(1, 1, vec![t])?);
        match (self.latent, z) {
            (0, None) => Ok(tv),
            (n, Some(z)) => {
                let (r, c) = g.shape(z);
                if r != 1 || c != n {
                    return Err(FlowError::Dimension {
                        what: "latent context",
                        expected: n,
                        got: r * c,
                    });
                }
                Ok(g.concat(&[tv, z], 1)?)
            }
            (n, None) => Err(FlowError::Dimension {
                what: "latent context",
                expected: n,
                got: 0,
            }),
        }
    }

    fn layer_bias(&self, g: &mut Graph, params: &ParamSet, l: usize, ctx: Var, ln: Option<Var>) -> Result<Var, FlowError> {
        let w = g.param(params, &self.name(l, "phi_w"))?;
        let b = g.param(params, &self.name(l, "phi_b"))?;
        match (self.bias, ln) {
            (BiasMode::Adaptive, Some(ln)) => {
                let gamma = g.param(params, &self.name(l, "gamma"))?;
                let lin = g.linear(ln, w, Some(b))?;
                Ok(g.mul(gamma, lin)?)
            }
            _ => Ok(g.linear(ctx, w, Some(b))?),
        }
    }

    /// Field at rows `y` (`P x dim`) and time `t`; with a trace mode, also the
    /// per-row `tr(df/dy)` as a `P x 1` column.
    pub fn eval(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        y: Var,
        t: f64,
        z: Option<Var>,
        trace: Option<TraceMode>,
    ) -> Result<(Var, Option<Var>), FlowError> {
        let (p, d) = g.shape(y);
        if d != self.dim {
            return Err(FlowError::Dimension {
                what: "flow state",
                expected: self.dim,
                got: d,
            });
        }
        let ctx = self.context(g, t, z)?;
        let ln = match self.bias {
            BiasMode::Adaptive => Some(g.layer_norm(ctx, LN_EPS)),
            BiasMode::Plain => None,
        };
        let probes = match trace {
            Some(TraceMode::Hutchinson { probes, seed }) => rademacher(g, p, d, probes, seed),
            _ => Vec::new(),
        };
        let exact = trace == Some(TraceMode::Exact);
        let mut tangent: Option<Var> = None;
        let mut probe_tangents: Vec<Var> = Vec::new();
        let n = self.n_layers();
        let mut h = y;
        let dims = self.layer_dims();
        for l in 0..n {
            let w = g.param(params, &self.name(l, "w"))?;
            let (fan_in, fan_out) = dims[l];
            if g.shape(w) != (fan_in, fan_out) {
                return Err(ComputeError::ShapeMismatch {
                    op: "ode layer",
                    left: vec![fan_in, fan_out],
                    right: g.value(w).shape().to_vec(),
                }
                .into());
            }
            let b = self.layer_bias(g, params, l, ctx, ln)?;
            let a = g.matmul(h, w)?;
            let a = g.add(a, b)?;
            if exact {
                tangent = Some(match tangent {
                    None => g.repeat_each_row(w, p),
                    Some(tg) => g.matmul(tg, w)?,
                });
            }
            for k in 0..probes.len() {
                let base = if l == 0 { probes[k] } else { probe_tangents[k] };
                let next = g.matmul(base, w)?;
                if l == 0 {
                    probe_tangents.push(next);
                } else {
                    probe_tangents[k] = next;
                }
            }
            if l + 1 == n {
                h = a;
            } else {
                h = g.tanh(a);
                if exact || !probes.is_empty() {
                    let sq = g.square(h);
                    let s = g.neg(sq);
                    let s = g.add_scalar(s, 1.0);
                    if let Some(tg) = tangent {
                        let rep = g.repeat_rows(s, d);
                        tangent = Some(g.mul(tg, rep)?);
                    }
                    for pt in probe_tangents.iter_mut() {
                        *pt = g.mul(*pt, s)?;
                    }
                }
            }
        }
        let tr = if let Some(tg) = tangent {
            Some(g.block_trace(tg, d)?)
        } else if !probes.is_empty() {
            let mut acc: Option<Var> = None;
            for (e, u) in probes.iter().zip(&probe_tangents) {
                let eu = g.mul(*e, *u)?;
                let est = g.sum(eu, Some(1));
                acc = Some(match acc {
                    None => est,
                    Some(a) => g.add(a, est)?,
                });
            }
            acc.map(|a| g.scale(a, 1.0 / probes.len() as f64))
        } else {
            None
        };
        Ok((h, tr))
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("consistent init shape")
}

fn rademacher(g: &mut Graph, p: usize, d: usize, probes: usize, seed: u64) -> Vec<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..probes.max(1))
        .map(|_| {
            let data = (0..p * d)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            g.constant(Tensor::matrix(p, d, data).expect("probe shape"))
        })
        .collect()
}

/// Latent context of a conditioned field.
#[derive(Clone, Copy, Debug)]
pub enum FieldContext<'a> {
    None,
    /// A value; re-inserted as a constant in every graph that evaluates the
    /// field.
    Fixed(&'a Tensor),
    /// A node of the one graph the field will be evaluated on.
    Node(Var),
}

/// An [`OdeNet`] bound to parameters and a context.
#[derive(Clone, Copy)]
pub struct NetField<'a> {
    pub net: &'a OdeNet,
    pub params: &'a ParamSet,
    pub ctx: FieldContext<'a>,
    pub trace: TraceMode,
}

impl<'a> NetField<'a> {
    pub fn new(net: &'a OdeNet, params: &'a ParamSet, ctx: FieldContext<'a>) -> Self {
        Self {
            net,
            params,
            ctx,
            trace: TraceMode::Exact,
        }
    }

    pub fn with_trace(mut self, trace: TraceMode) -> Self {
        self.trace = trace;
        self
    }
}

impl VectorField for NetField<'_> {
    fn dim(&self) -> usize {
        self.net.dim
    }

    fn eval(&self, g: &mut Graph, y: Var, t: f64, trace: bool) -> Result<(Var, Option<Var>), FlowError> {
        let z = match self.ctx {
            FieldContext::None => None,
            FieldContext::Fixed(v) => Some(g.constant(v.clone())),
            FieldContext::Node(v) => Some(v),
        };
        self.net
            .eval(g, self.params, y, t, z, trace.then_some(self.trace))
    }
}
