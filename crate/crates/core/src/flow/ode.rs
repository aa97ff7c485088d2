use std::f64::consts::PI;

use super::{FieldContext, FlowError, NetField, OdeNet};
use crate::compute::{Graph, Mode, ParamSet, Tensor, Var};

/// Something that can be integrated: `dy/dt = f(y, t)` on `P x dim` rows.
pub trait VectorField {
    fn dim(&self) -> usize;

    /// Field value and, when `trace` is set, the per-row `tr(df/dy)`.
    fn eval(&self, g: &mut Graph, y: Var, t: f64, trace: bool) -> Result<(Var, Option<Var>), FlowError>;
}

/// `f(y) = A y`, applied per row.
#[derive(Clone, Debug)]
pub struct LinearField {
    a_t: Tensor,
    trace: f64,
}

impl LinearField {
    pub fn new(a: &Tensor) -> Result<Self, FlowError> {
        let (r, c) = a.dims();
        if r != c {
            return Err(FlowError::Dimension {
                what: "square matrix",
                expected: r,
                got: c,
            });
        }
        let mut at = vec![0.0; r * r];
        let mut trace = 0.0;
        for i in 0..r {
            trace += a.at(i, i);
            for j in 0..r {
                at[j * r + i] = a.at(i, j);
            }
        }
        Ok(Self {
            a_t: Tensor::matrix(r, r, at)?,
            trace,
        })
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.a_t.rows()
    }

    fn eval(&self, g: &mut Graph, y: Var, _t: f64, trace: bool) -> Result<(Var, Option<Var>), FlowError> {
        let a = g.constant(self.a_t.clone());
        let out = g.matmul(y, a)?;
        let tr = trace.then(|| {
            let p = g.shape(y).0;
            g.constant(Tensor::full(&[p, 1], self.trace))
        });
        Ok((out, tr))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowTime {
    pub t0: f64,
    pub t1: f64,
}

impl Default for FlowTime {
    fn default() -> Self {
        Self { t0: 0.0, t1: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `t0 -> t1`: base sample to data.
    Forward,
    /// `t1 -> t0`: data to base sample.
    Inverse,
}

/// Fixed-step classical RK4 over `[t0, t1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Solver {
    pub steps: usize,
    pub time: FlowTime,
}

impl Solver {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            time: FlowTime::default(),
        }
    }

    fn validate(&self) -> Result<(), FlowError> {
        if self.steps == 0 {
            return Err(FlowError::NoSteps);
        }
        let FlowTime { t0, t1 } = self.time;
        if !(t0 < t1) || !t0.is_finite() || !t1.is_finite() {
            return Err(FlowError::InvalidTime(t0, t1));
        }
        Ok(())
    }

    /// Start time and signed step of step `i`.
    fn step(&self, i: usize, dir: Direction) -> (f64, f64) {
        let FlowTime { t0, t1 } = self.time;
        let dt = (t1 - t0) / self.steps as f64;
        match dir {
            Direction::Forward => (t0 + i as f64 * dt, dt),
            Direction::Inverse => (t1 - i as f64 * dt, -dt),
        }
    }
}

/// Final state and `delta_logp = sum of h * tr` over the signed steps, one
/// entry per row. Integrating backwards yields `-int_{t0}^{t1} tr dt`.
#[derive(Clone, Debug)]
pub struct FlowState {
    pub state: Tensor,
    pub delta_logp: Tensor,
}

fn rk4_step(
    g: &mut Graph,
    field: &dyn VectorField,
    y: Var,
    acc: Option<Var>,
    t: f64,
    h: f64,
) -> Result<(Var, Option<Var>), FlowError> {
    let trace = acc.is_some();
    let (k1, r1) = field.eval(g, y, t, trace)?;
    let s = g.scale(k1, 0.5 * h);
    let y2 = g.add(y, s)?;
    let (k2, r2) = field.eval(g, y2, t + 0.5 * h, trace)?;
    let s = g.scale(k2, 0.5 * h);
    let y3 = g.add(y, s)?;
    let (k3, r3) = field.eval(g, y3, t + 0.5 * h, trace)?;
    let s = g.scale(k3, h);
    let y4 = g.add(y, s)?;
    let (k4, r4) = field.eval(g, y4, t + h, trace)?;
    let combine = |g: &mut Graph, base: Var, a: Var, b: Var, c: Var, d: Var| -> Result<Var, FlowError> {
        let bc = g.add(b, c)?;
        let bc = g.scale(bc, 2.0);
        let ad = g.add(a, d)?;
        let sum = g.add(ad, bc)?;
        let inc = g.scale(sum, h / 6.0);
        Ok(g.add(base, inc)?)
    };
    let y_next = combine(g, y, k1, k2, k3, k4)?;
    let acc_next = match (acc, r1, r2, r3, r4) {
        (Some(a), Some(r1), Some(r2), Some(r3), Some(r4)) => Some(combine(g, a, r1, r2, r3, r4)?),
        (None, ..) => None,
        _ => {
            return Err(FlowError::Dimension {
                what: "trace output",
                expected: 1,
                got: 0,
            })
        }
    };
    Ok((y_next, acc_next))
}

fn check_dim(field: &dyn VectorField, cols: usize) -> Result<(), FlowError> {
    if cols != field.dim() {
        return Err(FlowError::Dimension {
            what: "flow state",
            expected: field.dim(),
            got: cols,
        });
    }
    Ok(())
}

/// Integrates on an existing graph so gradients flow through every solver
/// stage. Returns the final state and, with `trace`, the accumulated
/// `delta_logp` column.
pub fn integrate_on(
    g: &mut Graph,
    field: &dyn VectorField,
    y0: Var,
    solver: &Solver,
    dir: Direction,
    trace: bool,
) -> Result<(Var, Option<Var>), FlowError> {
    solver.validate()?;
    let (p, d) = g.shape(y0);
    check_dim(field, d)?;
    let mut y = y0;
    let mut acc = trace.then(|| g.constant(Tensor::zeros(&[p, 1])));
    for i in 0..solver.steps {
        let (t, h) = solver.step(i, dir);
        (y, acc) = rk4_step(g, field, y, acc, t, h)?;
        if let Some((_, op)) = g.first_nonfinite() {
            return Err(FlowError::NonFinite { step: i, op });
        }
    }
    Ok((y, acc))
}

/// Value-only integration; each step is evaluated on a fresh graph, so the
/// field must not hold graph nodes.
fn integrate_values(
    field: &dyn VectorField,
    x0: &Tensor,
    solver: &Solver,
    dir: Direction,
    trace: bool,
) -> Result<(Tensor, Option<Tensor>), FlowError> {
    solver.validate()?;
    check_dim(field, x0.cols())?;
    let mut y = x0.clone();
    let mut acc = trace.then(|| Tensor::zeros(&[x0.rows(), 1]));
    for i in 0..solver.steps {
        let (t, h) = solver.step(i, dir);
        let mut g = Graph::new(Mode::Eval);
        let yv = g.constant(y);
        let av = acc.map(|a| g.constant(a));
        let (yn, an) = rk4_step(&mut g, field, yv, av, t, h)?;
        if let Some((_, op)) = g.first_nonfinite() {
            return Err(FlowError::NonFinite { step: i, op });
        }
        y = g.value(yn).clone();
        acc = an.map(|a| g.value(a).clone());
    }
    Ok((y, acc))
}

pub fn integrate(field: &dyn VectorField, x0: &Tensor, solver: &Solver, dir: Direction) -> Result<Tensor, FlowError> {
    Ok(integrate_values(field, x0, solver, dir, false)?.0)
}

pub fn integrate_with_trace(
    field: &dyn VectorField,
    x0: &Tensor,
    solver: &Solver,
    dir: Direction,
) -> Result<FlowState, FlowError> {
    let (state, acc) = integrate_values(field, x0, solver, dir, true)?;
    Ok(FlowState {
        state,
        delta_logp: acc.expect("trace requested"),
    })
}

/// Row-wise `log N(y; 0, I)` as a `P x 1` column.
pub fn gaussian_log_density(g: &mut Graph, y: Var) -> Var {
    let d = g.shape(y).1 as f64;
    let sq = g.square(y);
    let s = g.sum(sq, Some(1));
    let s = g.scale(s, -0.5);
    g.add_scalar(s, -0.5 * d * (2.0 * PI).ln())
}

/// Per-row `log p(x)`: inverse-integrate to the base sample, then
/// `log N(y(t0)) + delta_logp` where `delta_logp = -int tr dt`.
pub fn log_prob_on(g: &mut Graph, field: &dyn VectorField, x: Var, solver: &Solver) -> Result<Var, FlowError> {
    let (y0, acc) = integrate_on(g, field, x, solver, Direction::Inverse, true)?;
    let base = gaussian_log_density(g, y0);
    Ok(g.add(base, acc.expect("trace requested"))?)
}

fn log_prob_values(field: &dyn VectorField, x: &Tensor, solver: &Solver) -> Result<Vec<f64>, FlowError> {
    let st = integrate_with_trace(field, x, solver, Direction::Inverse)?;
    let mut g = Graph::new(Mode::Eval);
    let y = g.constant(st.state);
    let base = gaussian_log_density(&mut g, y);
    Ok(g
        .value(base)
        .data()
        .iter()
        .zip(st.delta_logp.data())
        .map(|(b, d)| b + d)
        .collect())
}

/// `log p(x | z)` for each row of `x` (`P x 3`).
pub fn log_prob_conditional(
    x: &Tensor,
    z: &Tensor,
    net: &OdeNet,
    params: &ParamSet,
    solver: &Solver,
) -> Result<Vec<f64>, FlowError> {
    let field = NetField::new(net, params, FieldContext::Fixed(z));
    log_prob_values(&field, x, solver)
}

/// `log p(z)` for each row of `z` (`B x d_z`).
pub fn log_prob_prior(z: &Tensor, net: &OdeNet, params: &ParamSet, solver: &Solver) -> Result<Vec<f64>, FlowError> {
    let field = NetField::new(net, params, FieldContext::None);
    log_prob_values(&field, z, solver)
}
