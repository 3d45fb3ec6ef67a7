//! Central finite-difference checks of tape gradients.
//!
//! The op under test maps leaf vars to an output of any shape. It is reduced
//! to a scalar with a fixed seeded projection `L = Σ r ⊙ y`, so every output
//! coordinate contributes. Relative error per coordinate is
//! `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::param::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{DType, Scalar, Tensor};

pub mod suite;

pub use suite::{model_grad_check, run_all, run_op, OPS};

/// Magnitude below which errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct InputReport {
    pub index: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub eps: f64,
    pub tol: f64,
    pub max_rel_err: f64,
    pub inputs: Vec<InputReport>,
    pub passed: bool,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval<F>(op: &F, inputs: &[Tensor<f64>], proj: Option<&Tensor<f64>>, proj_seed: u64) -> Result<(Tape<f64>, Vec<Var>, Var, Tensor<f64>)>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = op(&tape, &vars)?;
    let proj = match proj {
        Some(p) => p.clone(),
        None => Tensor::uniform(tape.dims(y), 1.0, proj_seed),
    };
    let l = tape.weighted_sum(y, proj.clone())?;
    Ok((tape, vars, l, proj))
}

/// Checks every coordinate of every input. Inputs must be f64.
pub fn grad_check<T, F>(name: &str, op: F, inputs: &[Tensor<T>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    if T::DTYPE != DType::F64 {
        return Err(Error::DType {
            expected: "f64",
            found: T::DTYPE.name(),
        });
    }
    if !(1e-6..=1e-3).contains(&eps) {
        return invalid("grad_check", format!("eps {eps} outside [1e-6, 1e-3]"));
    }
    let inputs: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    let (tape, vars, l, proj) = eval(&op, &inputs, None, 0x5eed)?;
    let grads = tape.backward(l, &mut ParamStore::new(0))?;
    let mut reports = Vec::with_capacity(inputs.len());
    for (idx, (var, input)) in vars.iter().zip(&inputs).enumerate() {
        let analytic = grads.get_or_zeros(*var, input.dims());
        let mut rep = InputReport {
            index: idx,
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let mut probe = inputs.clone();
        for coord in 0..input.numel() {
            let base = input.data()[coord];
            probe[idx].data_mut()[coord] = base + eps;
            let plus = projected(&op, &probe, &proj)?;
            probe[idx].data_mut()[coord] = base - eps;
            let minus = projected(&op, &probe, &proj)?;
            probe[idx].data_mut()[coord] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[coord];
            let e = rel_err(a, numeric);
            if e > rep.max_rel_err {
                rep = InputReport {
                    index: idx,
                    max_rel_err: e,
                    worst_coord: coord,
                    analytic: a,
                    numeric,
                };
            }
        }
        reports.push(rep);
    }
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        name: name.to_string(),
        eps,
        tol,
        max_rel_err,
        passed: max_rel_err <= tol,
        inputs: reports,
    })
}

fn projected<F>(op: &F, inputs: &[Tensor<f64>], proj: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let (tape, _, l, _) = eval(op, inputs, Some(proj), 0)?;
    let v = tape.value(l).item();
    Ok(v)
}
