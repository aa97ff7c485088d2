use super::{ComputeError, Graph, ParamSet, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[flat_index]` of the scalar with the largest relative error.
    pub worst_param: Option<String>,
    /// Analytic and numeric derivative of the worst scalar.
    pub worst_values: (f64, f64),
    pub checked: usize,
    /// Scalars whose perturbation crossed a ReLU/max/clamp breakpoint.
    pub excluded_at_kink: Vec<String>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Builds the loss from scratch for a given parameter set, returning the
/// graph and its scalar loss node.
pub trait LossFn<E> {
    fn eval(&mut self, params: &ParamSet) -> Result<(Graph, Var), E>;
}

impl<E, F> LossFn<E> for F
where
    F: FnMut(&ParamSet) -> Result<(Graph, Var), E>,
{
    fn eval(&mut self, params: &ParamSet) -> Result<(Graph, Var), E> {
        self(params)
    }
}

/// Checks reverse-mode gradients of `loss` against central differences
/// `(L(θ+h) - L(θ-h)) / 2h`, one scalar at a time.
pub fn finite_diff_check<E, L>(
    params: &ParamSet,
    mut loss: L,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, E>
where
    E: From<ComputeError>,
    L: LossFn<E>,
{
    let (g, l) = loss.eval(params)?;
    let analytic = g.gradients(l, params)?;
    drop(g);
    finite_diff_compare(params, &analytic, loss, h, tol, 1)
}

/// Compares a supplied gradient set against central differences, checking
/// every `stride`-th scalar.
pub fn finite_diff_compare<E, L>(
    params: &ParamSet,
    analytic: &ParamSet,
    mut loss: L,
    h: f64,
    tol: f64,
    stride: usize,
) -> Result<GradCheckReport, E>
where
    E: From<ComputeError>,
    L: LossFn<E>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    assert!(params.same_layout(analytic), "gradient layout differs from parameters");
    let stride = stride.max(1);
    let (base_graph, _) = loss.eval(params)?;
    let base_sig = base_graph.branch_signature();
    drop(base_graph);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: None,
        worst_values: (0.0, 0.0),
        checked: 0,
        excluded_at_kink: Vec::new(),
        tol,
    };
    let mut probe = params.clone();
    let mut counter = 0usize;
    for pi in 0..params.len() {
        let (name, tensor) = params.by_index(pi);
        let name = name.to_string();
        for k in 0..tensor.len() {
            counter += 1;
            if (counter - 1) % stride != 0 {
                continue;
            }
            let orig = tensor.data()[k];
            probe.by_index_mut(pi).1.data_mut()[k] = orig + h;
            let (gp, lp) = loss.eval(&probe)?;
            let (sp, vp) = (gp.branch_signature(), gp.value(lp).item());
            drop(gp);
            probe.by_index_mut(pi).1.data_mut()[k] = orig - h;
            let (gm, lm) = loss.eval(&probe)?;
            let (sm, vm) = (gm.branch_signature(), gm.value(lm).item());
            drop(gm);
            probe.by_index_mut(pi).1.data_mut()[k] = orig;

            let label = format!("{name}[{k}]");
            if sp != base_sig || sm != base_sig {
                report.excluded_at_kink.push(label);
                continue;
            }
            let numeric = (vp - vm) / (2.0 * h);
            let a = analytic.by_index(pi).1.data()[k];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst_param.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = Some(label);
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
