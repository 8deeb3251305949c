//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes on perturbed copies of the
//! inputs, so it shares nothing with reverse accumulation except the forward
//! kernels.

use serde::Serialize;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which gradient entries are compared absolutely. Central
/// differences at `h = 1e-5` carry ~1e-10 truncation error on O(1) losses,
/// so entries smaller than this cannot be resolved relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Reduces a non-scalar output to a scalar through fixed random weights so
/// every output coordinate contributes.
fn scalarize(tape: &mut Tape, out: Var) -> Result<Var> {
    let n = tape.value(out).len();
    if n == 1 {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let mut s = rng::stream(0x6772_6164, "gradcheck/projection");
    let w = Tensor::new(shape, rng::normal_vec(&mut s, n, 1.0))?;
    let wv = tape.constant(&w);
    let prod = tape.mul(out, wv)?;
    tape.sum(prod)
}

/// Checks `f` with respect to every entry of every input tensor.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor], tolerance: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t)).collect();
        let out = f(&mut tape, &vars)?;
        let s = scalarize(&mut tape, out)?;
        Ok(tape.scalar(s))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        tolerance,
        passed: true,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            record(&mut report, analytic[i], numeric, || format!("input{k}[{i}]"));
        }
    }
    report.passed = report.max_rel_err < tolerance;
    Ok(report)
}

/// Checks `f` with respect to every trainable parameter in `store` whose
/// path starts with one of `prefixes` (all trainable ones when empty).
pub fn check_params<F>(
    name: &str,
    store: &ParamStore,
    prefixes: &[&str],
    tolerance: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut grads_store = store.clone();
    grads_store.zero_grad();
    {
        let mut tape = Tape::new();
        let loss = f(&mut tape, &grads_store)?;
        if tape.value(loss).len() != 1 {
            return Err(Error::Usage("check_params expects a scalar loss".into()));
        }
        tape.backward_into(loss, &mut grads_store)?;
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, s)?;
        Ok(tape.scalar(loss))
    };

    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        tolerance,
        passed: true,
    };
    let mut work = store.clone();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let path = store.path(id).to_string();
        let t = store.get(id);
        if !t.requires_grad() {
            continue;
        }
        if !prefixes.is_empty() && !prefixes.iter().any(|p| path.starts_with(p)) {
            continue;
        }
        let analytic = grads_store
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        for i in 0..t.numel() {
            let orig = t.data()[i];
            work.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            record(&mut report, analytic[i], numeric, || format!("{path}[{i}]"));
        }
    }
    report.passed = report.max_rel_err < tolerance;
    Ok(report)
}

fn record(report: &mut GradCheckReport, analytic: f64, numeric: f64, label: impl FnOnce() -> String) {
    report.checked += 1;
    let e = rel_err(analytic, numeric);
    if e > report.max_rel_err || report.worst.is_empty() {
        report.max_rel_err = report.max_rel_err.max(e);
        report.worst = label();
    }
}
