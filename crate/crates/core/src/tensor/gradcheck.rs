//! Central finite-difference gradient checking in double precision.
//!
//! The numerical side only evaluates forward values, so it is independent
//! of every backward closure it checks.

use super::tape::{ParamId, ParamStore, Tape, Var};
use super::Tensor;
use crate::error::Result;

/// Default step for central differences.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(tensor index, element index)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheck {
    fn record(&mut self, t: usize, i: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = err.max(self.max_rel_err);
            self.worst = Some((t, i));
        }
    }
}

fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
    tape.value(v).data[0]
}

/// Checks the gradient of `f` with respect to every element of `inputs`.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(scalar(&t, l))
    };
    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let analytic = grads.input(*v).map(|g| g.to_vec());
        for i in 0..inputs[ti].numel() {
            let x0 = work[ti].data[i];
            work[ti].data[i] = x0 + STEP;
            let up = eval(&work)?;
            work[ti].data[i] = x0 - STEP;
            let down = eval(&work)?;
            work[ti].data[i] = x0;
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            report.record(ti, i, a, (up - down) / (2.0 * STEP));
        }
    }
    Ok(report)
}

/// Checks parameter gradients of `f`. At most `per_param` elements are
/// probed per tensor, spread evenly.
pub fn check_params(
    store: &mut ParamStore<f64>,
    per_param: usize,
    f: impl Fn(&mut Tape<f64>, &mut ParamStore<f64>) -> Result<Var>,
) -> Result<GradCheck> {
    let probes: Vec<(ParamId, usize)> = (0..store.len())
        .flat_map(|pi| {
            let n = store.params[pi].value.numel();
            let stride = n.div_ceil(per_param.max(1)).max(1);
            (0..n).step_by(stride).map(move |i| (ParamId(pi), i))
        })
        .collect();
    check_param_elements(store, &probes, f)
}

/// Checks the gradient of `f` at the listed `(parameter, element)` pairs.
/// The report's `worst` holds the parameter index.
pub fn check_param_elements(
    store: &mut ParamStore<f64>,
    probes: &[(ParamId, usize)],
    f: impl Fn(&mut Tape<f64>, &mut ParamStore<f64>) -> Result<Var>,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let mut report = GradCheck::default();
    for &(id, i) in probes {
        let pi = id.0;
        let x0 = store.params[pi].value.data[i];
        let probe = |x: f64, store: &mut ParamStore<f64>| -> Result<f64> {
            store.params[pi].value.data[i] = x;
            let mut t = Tape::new();
            let l = f(&mut t, store)?;
            Ok(scalar(&t, l))
        };
        let up = probe(x0 + STEP, store)?;
        let down = probe(x0 - STEP, store)?;
        store.params[pi].value.data[i] = x0;
        let a = grads.param(id).map_or(0.0, |g| g[i]);
        report.record(pi, i, a, (up - down) / (2.0 * STEP));
    }
    Ok(report)
}
