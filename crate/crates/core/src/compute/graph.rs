use std::collections::HashMap;

use super::tensor::gemm;
use super::{ComputeError, ParamSet, Tensor};

/// Handle to a node of one [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch normalization behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Binary(BinKind, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
    },
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Max(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    RepeatRows(Var, usize),
    RepeatEachRow(Var, usize),
    BlockTrace(Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Binary(BinKind::Add, ..) => "add",
            Op::Binary(BinKind::Sub, ..) => "sub",
            Op::Binary(BinKind::Mul, ..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Max(..) => "max",
            Op::Concat(..) => "concat",
            Op::RepeatRows(..) => "repeat_rows",
            Op::RepeatEachRow(..) => "repeat_each_row",
            Op::BlockTrace(..) => "block_trace",
        }
    }
}

/// Names of every differentiable operation the engine provides.
pub fn op_set() -> &'static [&'static str] {
    &[
        "add",
        "sub",
        "mul",
        "scale",
        "add_scalar",
        "matmul",
        "linear",
        "transpose",
        "relu",
        "tanh",
        "softplus",
        "exp",
        "square",
        "clamp",
        "softmax",
        "layer_norm",
        "batch_norm",
        "sum",
        "mean",
        "max",
        "concat",
        "repeat_rows",
        "repeat_each_row",
        "block_trace",
    ]
}

struct Node {
    value: Tensor,
    op: Op,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Tape of tensor operations supporting reverse-mode differentiation.
///
/// A graph is built by a forward pass and consumed by [`Graph::backward`].
/// It is confined to one thread; build separate graphs to work in parallel.
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    params: HashMap<usize, Var>,
    nonfinite: Option<(usize, &'static str)>,
    branch_hash: u64,
    at_kink: bool,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            params: HashMap::new(),
            nonfinite: None,
            branch_hash: FNV_OFFSET,
            at_kink: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    /// Hash of every piecewise branch taken so far (ReLU signs, argmax
    /// positions, clamp regions). Two evaluations with equal signatures took
    /// the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    /// True when some piecewise op was evaluated exactly on a breakpoint.
    pub fn at_kink(&self) -> bool {
        self.at_kink
    }

    /// First operation that produced a non-finite value, if any.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.nonfinite
    }

    pub fn check_finite(&self) -> Result<(), ComputeError> {
        match self.nonfinite {
            Some((node, op)) => Err(ComputeError::NonFinite { node, op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let idx = self.nodes.len();
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some((idx, op.name()));
        }
        self.nodes.push(Node { value, op });
        Var(idx)
    }

    fn mix(&mut self, word: u64) {
        self.branch_hash ^= word;
        self.branch_hash = self.branch_hash.wrapping_mul(FNV_PRIME);
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Binds a named parameter; repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var, ComputeError> {
        let idx = params
            .index_of(name)
            .ok_or_else(|| ComputeError::MissingParam(name.to_string()))?;
        if let Some(&v) = self.params.get(&idx) {
            return Ok(v);
        }
        let value = params.by_index(idx).1.clone();
        let v = self.push(value, Op::Param(idx));
        self.params.insert(idx, v);
        Ok(v)
    }

    // ---- elementwise binary ops with broadcasting ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.binary(BinKind::Mul, a, b)
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var, ComputeError> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let (ar, ac) = ta.dims();
        let (br, bc) = tb.dims();
        let (r, c) = broadcast_dims((ar, ac), (br, bc)).ok_or_else(|| ComputeError::ShapeMismatch {
            op: Op::Binary(kind, a, b).name(),
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        })?;
        let f = match kind {
            BinKind::Add => |x: f64, y: f64| x + y,
            BinKind::Sub => |x: f64, y: f64| x - y,
            BinKind::Mul => |x: f64, y: f64| x * y,
        };
        let da = ta.data();
        let db = tb.data();
        let mut out = Vec::with_capacity(r * c);
        if (ar, ac) == (br, bc) {
            out.extend(da.iter().zip(db).map(|(&x, &y)| f(x, y)));
        } else {
            for i in 0..r {
                let ia = if ar == 1 { 0 } else { i };
                let ib = if br == 1 { 0 } else { i };
                for j in 0..c {
                    let x = da[ia * ac + if ac == 1 { 0 } else { j }];
                    let y = db[ib * bc + if bc == 1 { 0 } else { j }];
                    out.push(f(x, y));
                }
            }
        }
        Ok(self.push(Tensor::from_dims(r, c, out), Op::Binary(kind, a, b)))
    }

    // ---- scalar ops ----

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, shift: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x + shift);
        self.push(v, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let (m, k) = ta.dims();
        let (k2, n) = tb.dims();
        if k != k2 {
            return Err(ComputeError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        Ok(self.push(Tensor::from_dims(m, n, out), Op::MatMul(a, b)))
    }

    /// Pointwise affine map `x W + b` applied to every row of `x`
    /// (a kernel-size-1 convolution over per-point features).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, ComputeError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (r, c) = t.dims();
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(Tensor::from_dims(c, r, out), Op::Transpose(a))
    }

    // ---- activations ----

    pub fn relu(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let mut hash_words = Vec::with_capacity(t.len() / 64 + 1);
        let mut word = 0u64;
        let mut kink = false;
        for (i, &x) in t.data().iter().enumerate() {
            if x > 0.0 {
                word |= 1 << (i % 64);
            }
            kink |= x == 0.0;
            if i % 64 == 63 {
                hash_words.push(word);
                word = 0;
            }
        }
        hash_words.push(word);
        let v = t.map(|x| if x > 0.0 { x } else { 0.0 });
        for w in hash_words {
            self.mix(w);
        }
        self.at_kink |= kink;
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| {
            if x > 0.0 {
                x + (-x).exp().ln_1p()
            } else {
                x.exp().ln_1p()
            }
        });
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let mut kink = false;
        let mut word = 0u64;
        for (i, &x) in t.data().iter().enumerate() {
            let region = if x < lo {
                1u64
            } else if x > hi {
                2
            } else {
                0
            };
            kink |= x == lo || x == hi;
            word = word.rotate_left(2) ^ region ^ (i as u64).wrapping_mul(0x9e37);
        }
        let v = t.map(|x| x.clamp(lo, hi));
        self.mix(word);
        self.at_kink |= kink;
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Softmax along `axis` (1: each row sums to one, 0: each column).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let (r, c) = t.dims();
        let d = t.data();
        let mut out = vec![0.0; r * c];
        let (outer, inner, stride_o, stride_i) = lanes(r, c, axis);
        for o in 0..outer {
            let base = o * stride_o;
            let mut m = f64::NEG_INFINITY;
            for i in 0..inner {
                m = m.max(d[base + i * stride_i]);
            }
            let mut s = 0.0;
            for i in 0..inner {
                let e = (d[base + i * stride_i] - m).exp();
                out[base + i * stride_i] = e;
                s += e;
            }
            for i in 0..inner {
                out[base + i * stride_i] /= s;
            }
        }
        self.push(Tensor::from_dims(r, c, out), Op::Softmax(a, axis))
    }

    /// Normalizes each row to zero mean and unit (population) variance:
    /// `(x - mean) / sqrt(var + eps)`. No learnable affine.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let (r, c) = t.dims();
        let d = t.data();
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(Tensor::from_dims(r, c, out), Op::LayerNorm { x: a, inv_std })
    }

    /// Per-column batch normalization over rows with affine `gamma`, `beta`
    /// (each `1 x C`). Train mode uses the batch statistics, eval mode the
    /// supplied running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var, ComputeError> {
        let t = &self.nodes[x.0].value;
        let (r, c) = t.dims();
        for other in [
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            running_mean,
            running_var,
        ] {
            if other.len() != c {
                return Err(ComputeError::ShapeMismatch {
                    op: "batch_norm",
                    left: t.shape().to_vec(),
                    right: other.shape().to_vec(),
                });
            }
        }
        let d = t.data();
        let train = self.mode == Mode::Train;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if train {
            for i in 0..r {
                for j in 0..c {
                    mean[j] += d[i * c + j];
                }
            }
            mean.iter_mut().for_each(|m| *m /= r as f64);
            for i in 0..r {
                for j in 0..c {
                    let dv = d[i * c + j] - mean[j];
                    var[j] += dv * dv;
                }
            }
            var.iter_mut().for_each(|v| *v /= r as f64);
        } else {
            mean.copy_from_slice(running_mean.data());
            var.copy_from_slice(running_var.data());
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                let k = i * c + j;
                xhat[k] = (d[k] - mean[j]) * inv_std[j];
                out[k] = g[j] * xhat[k] + b[j];
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
            batch_mean: mean,
            batch_var: var,
        };
        Ok(self.push(Tensor::from_dims(r, c, out), op))
    }

    /// Batch mean and variance recorded by a train-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                train: true,
                batch_mean,
                batch_var,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    // ---- reductions ----

    /// Sum over `axis` (0: over rows giving `1 x C`, 1: over columns giving
    /// `R x 1`) or over everything giving a scalar.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Var {
        let v = reduce_sum(&self.nodes[a.0].value, axis);
        self.push(v, Op::Sum(a, axis))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Var {
        let t = &self.nodes[a.0].value;
        let count = reduce_count(t.dims(), axis) as f64;
        let v = reduce_sum(t, axis).map(|x| x / count);
        self.push(v, Op::Mean(a, axis))
    }

    /// Maximum along `axis`; ties resolve to the lowest index, which also
    /// receives the whole subgradient.
    pub fn max(&mut self, a: Var, axis: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let (r, c) = t.dims();
        let d = t.data();
        let (outer, inner, stride_o, stride_i) = lanes(r, c, axis);
        let mut vals = Vec::with_capacity(outer);
        let mut arg = Vec::with_capacity(outer);
        let mut kink = false;
        for o in 0..outer {
            let base = o * stride_o;
            let mut best = base;
            for i in 1..inner {
                let k = base + i * stride_i;
                if d[k] > d[best] {
                    best = k;
                }
            }
            for i in 0..inner {
                let k = base + i * stride_i;
                kink |= k != best && d[k] == d[best];
            }
            vals.push(d[best]);
            arg.push(best);
        }
        let out = if axis == 0 {
            Tensor::from_dims(1, c, vals)
        } else {
            Tensor::from_dims(r, 1, vals)
        };
        for &k in &arg {
            self.mix(k as u64);
        }
        self.at_kink |= kink;
        self.push(out, Op::Max(a, arg))
    }

    // ---- structural ----

    /// Concatenates along `axis` (0: stack rows, 1: stack columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, ComputeError> {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.nodes[parts[0].0].value.dims();
        for p in &parts[1..] {
            let d = self.nodes[p.0].value.dims();
            let ok = if axis == 0 { d.1 == first.1 } else { d.0 == first.0 };
            if !ok {
                return Err(ComputeError::ShapeMismatch {
                    op: "concat",
                    left: self.nodes[parts[0].0].value.shape().to_vec(),
                    right: self.nodes[p.0].value.shape().to_vec(),
                });
            }
        }
        let out = if axis == 0 {
            let rows: usize = parts.iter().map(|p| self.nodes[p.0].value.rows()).sum();
            let mut data = Vec::with_capacity(rows * first.1);
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.data());
            }
            Tensor::from_dims(rows, first.1, data)
        } else {
            let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
            let mut data = Vec::with_capacity(first.0 * cols);
            for i in 0..first.0 {
                for p in parts {
                    data.extend_from_slice(self.nodes[p.0].value.row_slice(i));
                }
            }
            Tensor::from_dims(first.0, cols, data)
        };
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    /// Stacks `times` copies of `a` vertically.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let (r, c) = t.dims();
        let mut data = Vec::with_capacity(r * c * times);
        for _ in 0..times {
            data.extend_from_slice(t.data());
        }
        self.push(Tensor::from_dims(r * times, c, data), Op::RepeatRows(a, times))
    }

    /// Repeats each row `times` times consecutively (row `i` lands on rows
    /// `i*times .. (i+1)*times`).
    pub fn repeat_each_row(&mut self, a: Var, times: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let (r, c) = t.dims();
        let mut data = Vec::with_capacity(r * c * times);
        for i in 0..r {
            let row = t.row_slice(i);
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        self.push(Tensor::from_dims(r * times, c, data), Op::RepeatEachRow(a, times))
    }

    /// For `u` of shape `(d*P) x d` made of `d` stacked `P x d` blocks,
    /// returns the `P x 1` column `out[p] = sum_k u[k*P + p, k]`, i.e. the
    /// per-row trace of a Jacobian stored one direction per block.
    pub fn block_trace(&mut self, u: Var, blocks: usize) -> Result<Var, ComputeError> {
        let t = &self.nodes[u.0].value;
        let (r, c) = t.dims();
        if c != blocks || blocks == 0 || r % blocks != 0 {
            return Err(ComputeError::InvalidShape {
                op: "block_trace",
                shape: t.shape().to_vec(),
                reason: "expected (d*P) x d",
            });
        }
        let p = r / blocks;
        let d = t.data();
        let mut out = vec![0.0; p];
        for k in 0..blocks {
            for (i, o) in out.iter_mut().enumerate() {
                *o += d[(k * p + i) * c + k];
            }
        }
        Ok(self.push(Tensor::from_dims(p, 1, out), Op::BlockTrace(u, blocks)))
    }

    // ---- reverse mode ----

    /// Reverse sweep from a scalar `loss`. Returns one gradient per bound
    /// parameter index; parameters that were never bound are absent.
    pub fn backward(&self, loss: Var) -> Result<HashMap<usize, Tensor>, ComputeError> {
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(ComputeError::NonScalarLoss(lt.shape().to_vec()));
        }
        self.check_finite()?;
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut grads = HashMap::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    grads.insert(*p, g);
                }
                Op::Binary(kind, a, b) => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    match kind {
                        BinKind::Add => {
                            accumulate(&mut adj, *a, reduce_to(&g, ta));
                            accumulate(&mut adj, *b, reduce_to(&g, tb));
                        }
                        BinKind::Sub => {
                            accumulate(&mut adj, *a, reduce_to(&g, ta));
                            let gb = reduce_to(&g, tb).map(|x| -x);
                            accumulate(&mut adj, *b, gb);
                        }
                        BinKind::Mul => {
                            let ga = mul_broadcast(&g, tb);
                            let gb = mul_broadcast(&g, ta);
                            accumulate(&mut adj, *a, reduce_to(&ga, ta));
                            accumulate(&mut adj, *b, reduce_to(&gb, tb));
                        }
                    }
                }
                Op::Scale(a, f) => accumulate(&mut adj, *a, g.map(|x| x * f)),
                Op::AddScalar(a) => accumulate(&mut adj, *a, g),
                Op::MatMul(a, b) => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let (m, k) = ta.dims();
                    let n = tb.cols();
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                    accumulate(&mut adj, *a, with_shape(ta, ga));
                    accumulate(&mut adj, *b, with_shape(tb, gb));
                }
                Op::Transpose(a) => {
                    let (r, c) = g.dims();
                    let d = g.data();
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j * r + i] = d[i * c + j];
                        }
                    }
                    let ta = &self.nodes[a.0].value;
                    accumulate(&mut adj, *a, with_shape(ta, out));
                }
                Op::Relu(a) => {
                    let ta = &self.nodes[a.0].value;
                    let out = zip_map(&g, ta, |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut adj, *a, out);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let out = zip_map(&g, y, |gv, yv| gv * (1.0 - yv * yv));
                    accumulate(&mut adj, *a, with_shape(&self.nodes[a.0].value, out.into_data()));
                }
                Op::Softplus(a) => {
                    let ta = &self.nodes[a.0].value;
                    let out = zip_map(&g, ta, |gv, x| gv / (1.0 + (-x).exp()));
                    accumulate(&mut adj, *a, out);
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    let out = zip_map(&g, y, |gv, yv| gv * yv);
                    accumulate(&mut adj, *a, with_shape(&self.nodes[a.0].value, out.into_data()));
                }
                Op::Square(a) => {
                    let ta = &self.nodes[a.0].value;
                    let out = zip_map(&g, ta, |gv, x| 2.0 * gv * x);
                    accumulate(&mut adj, *a, out);
                }
                Op::Clamp(a, lo, hi) => {
                    let ta = &self.nodes[a.0].value;
                    let out = zip_map(&g, ta, |gv, x| if x >= *lo && x <= *hi { gv } else { 0.0 });
                    accumulate(&mut adj, *a, out);
                }
                Op::Softmax(a, axis) => {
                    let y = &node.value;
                    let (r, c) = y.dims();
                    let (outer, inner, so, si) = lanes(r, c, *axis);
                    let yd = y.data();
                    let gd = g.data();
                    let mut out = vec![0.0; r * c];
                    for o in 0..outer {
                        let base = o * so;
                        let dot: f64 = (0..inner).map(|i| gd[base + i * si] * yd[base + i * si]).sum();
                        for i in 0..inner {
                            let k = base + i * si;
                            out[k] = yd[k] * (gd[k] - dot);
                        }
                    }
                    accumulate(&mut adj, *a, with_shape(&self.nodes[a.0].value, out));
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let (r, c) = y.dims();
                    let yd = y.data();
                    let gd = g.data();
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let mg = gd[row.clone()].iter().sum::<f64>() / c as f64;
                        let mgy = gd[row.clone()]
                            .iter()
                            .zip(&yd[row.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / c as f64;
                        for j in 0..c {
                            let k = i * c + j;
                            out[k] = inv_std[i] * (gd[k] - mg - yd[k] * mgy);
                        }
                    }
                    accumulate(&mut adj, *x, with_shape(&self.nodes[x.0].value, out));
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                    ..
                } => {
                    let (r, c) = node.value.dims();
                    let gd = g.data();
                    let gam = self.nodes[gamma.0].value.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            dgamma[j] += gd[k] * xhat[k];
                            dbeta[j] += gd[k];
                        }
                    }
                    let mut dx = vec![0.0; r * c];
                    if *train {
                        let n = r as f64;
                        for j in 0..c {
                            let mean_dxh = dbeta[j] * gam[j] / n;
                            let mean_dxh_xh = dgamma[j] * gam[j] / n;
                            for i in 0..r {
                                let k = i * c + j;
                                let dxh = gd[k] * gam[j];
                                dx[k] = inv_std[j] * (dxh - mean_dxh - xhat[k] * mean_dxh_xh);
                            }
                        }
                    } else {
                        for i in 0..r {
                            for j in 0..c {
                                let k = i * c + j;
                                dx[k] = gd[k] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    accumulate(&mut adj, *x, with_shape(&self.nodes[x.0].value, dx));
                    accumulate(&mut adj, *gamma, with_shape(&self.nodes[gamma.0].value, dgamma));
                    accumulate(&mut adj, *beta, with_shape(&self.nodes[beta.0].value, dbeta));
                }
                Op::Sum(a, axis) | Op::Mean(a, axis) => {
                    let ta = &self.nodes[a.0].value;
                    let (r, c) = ta.dims();
                    let scale = match node.op {
                        Op::Mean(..) => 1.0 / reduce_count((r, c), *axis) as f64,
                        _ => 1.0,
                    };
                    let gd = g.data();
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let gv = match axis {
                                None => gd[0],
                                Some(0) => gd[j],
                                Some(_) => gd[i],
                            };
                            out[i * c + j] = gv * scale;
                        }
                    }
                    accumulate(&mut adj, *a, with_shape(ta, out));
                }
                Op::Max(a, arg) => {
                    let ta = &self.nodes[a.0].value;
                    let mut out = vec![0.0; ta.len()];
                    for (gv, &k) in g.data().iter().zip(arg) {
                        out[k] += gv;
                    }
                    accumulate(&mut adj, *a, with_shape(ta, out));
                }
                Op::Concat(parts, axis) => {
                    let (_, c) = g.dims();
                    let gd = g.data();
                    if *axis == 0 {
                        let mut offset = 0;
                        for p in parts {
                            let tp = &self.nodes[p.0].value;
                            let n = tp.len();
                            accumulate(&mut adj, *p, with_shape(tp, gd[offset..offset + n].to_vec()));
                            offset += n;
                        }
                    } else {
                        let mut col = 0;
                        for p in parts {
                            let tp = &self.nodes[p.0].value;
                            let (pr, pc) = tp.dims();
                            let mut out = Vec::with_capacity(pr * pc);
                            for i in 0..pr {
                                out.extend_from_slice(&gd[i * c + col..i * c + col + pc]);
                            }
                            accumulate(&mut adj, *p, with_shape(tp, out));
                            col += pc;
                        }
                    }
                }
                Op::RepeatRows(a, times) => {
                    let ta = &self.nodes[a.0].value;
                    let n = ta.len();
                    let mut out = vec![0.0; n];
                    for t in 0..*times {
                        for (o, v) in out.iter_mut().zip(&g.data()[t * n..(t + 1) * n]) {
                            *o += v;
                        }
                    }
                    accumulate(&mut adj, *a, with_shape(ta, out));
                }
                Op::RepeatEachRow(a, times) => {
                    let ta = &self.nodes[a.0].value;
                    let (r, c) = ta.dims();
                    let gd = g.data();
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        for t in 0..*times {
                            let src = (i * times + t) * c;
                            for j in 0..c {
                                out[i * c + j] += gd[src + j];
                            }
                        }
                    }
                    accumulate(&mut adj, *a, with_shape(ta, out));
                }
                Op::BlockTrace(u, blocks) => {
                    let tu = &self.nodes[u.0].value;
                    let (r, c) = tu.dims();
                    let p = r / blocks;
                    let mut out = vec![0.0; r * c];
                    for k in 0..*blocks {
                        for i in 0..p {
                            out[(k * p + i) * c + k] = g.data()[i];
                        }
                    }
                    accumulate(&mut adj, *u, with_shape(tu, out));
                }
            }
        }
        Ok(grads)
    }

    /// Gradient of `loss` for every entry of `params`, in the same order and
    /// shapes; parameters absent from the graph get zeros.
    pub fn gradients(&self, loss: Var, params: &ParamSet) -> Result<ParamSet, ComputeError> {
        let mut by_index = self.backward(loss)?;
        let mut out = ParamSet::new();
        for (i, (name, value)) in params.iter().enumerate() {
            let g = match by_index.remove(&i) {
                Some(g) => with_shape(value, g.into_data()),
                None => Tensor::zeros(value.shape()),
            };
            out.insert(name, g)?;
        }
        Ok(out)
    }
}

fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// (outer count, inner count, outer stride, inner stride) for iterating the
/// lanes of an `r x c` matrix along `axis`.
fn lanes(r: usize, c: usize, axis: usize) -> (usize, usize, usize, usize) {
    if axis == 0 {
        (c, r, 1, c)
    } else {
        (r, c, c, 1)
    }
}

fn reduce_count(dims: (usize, usize), axis: Option<usize>) -> usize {
    match axis {
        None => dims.0 * dims.1,
        Some(0) => dims.0,
        Some(_) => dims.1,
    }
}

fn reduce_sum(t: &Tensor, axis: Option<usize>) -> Tensor {
    let (r, c) = t.dims();
    let d = t.data();
    match axis {
        None => Tensor::scalar(d.iter().sum()),
        Some(0) => {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += d[i * c + j];
                }
            }
            Tensor::from_dims(1, c, out)
        }
        Some(_) => {
            let out = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
            Tensor::from_dims(r, 1, out)
        }
    }
}

/// Sums a broadcast gradient back down to the shape of `target`.
fn reduce_to(g: &Tensor, target: &Tensor) -> Tensor {
    let (tr, tc) = target.dims();
    let (gr, gc) = g.dims();
    if (tr, tc) == (gr, gc) {
        return with_shape(target, g.data().to_vec());
    }
    let mut out = vec![0.0; tr * tc];
    let d = g.data();
    for i in 0..gr {
        let ti = if tr == 1 { 0 } else { i };
        for j in 0..gc {
            let tj = if tc == 1 { 0 } else { j };
            out[ti * tc + tj] += d[i * gc + j];
        }
    }
    with_shape(target, out)
}

/// `g * broadcast(other)` where `g` has the full broadcast shape.
fn mul_broadcast(g: &Tensor, other: &Tensor) -> Tensor {
    let (gr, gc) = g.dims();
    let (or, oc) = other.dims();
    let gd = g.data();
    let od = other.data();
    if (gr, gc) == (or, oc) {
        return Tensor::from_dims(gr, gc, gd.iter().zip(od).map(|(a, b)| a * b).collect());
    }
    let mut out = Vec::with_capacity(gr * gc);
    for i in 0..gr {
        let oi = if or == 1 { 0 } else { i };
        for j in 0..gc {
            let oj = if oc == 1 { 0 } else { j };
            out.push(gd[i * gc + j] * od[oi * oc + oj]);
        }
    }
    Tensor::from_dims(gr, gc, out)
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    with_shape(x, data)
}

fn with_shape(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient matches operand size")
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}
