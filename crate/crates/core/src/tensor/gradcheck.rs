//! Central finite-difference verification of tape gradients.

use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor on the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn merge(reports: impl IntoIterator<Item = (String, GradCheckReport)>, tolerance: f64) -> Self {
        let entries: Vec<GradCheckEntry> = reports
            .into_iter()
            .flat_map(|(prefix, r)| {
                r.entries.into_iter().map(move |mut e| {
                    e.name = format!("{prefix}/{}", e.name);
                    e
                })
            })
            .collect();
        Self::from_entries(entries, tolerance)
    }

    fn from_entries(entries: Vec<GradCheckEntry>, tolerance: f64) -> Self {
        let max_rel_error = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
        GradCheckReport {
            pass: max_rel_error <= tolerance,
            entries,
            max_rel_error,
            tolerance,
        }
    }
}

/// Pins a closure to the higher-ranked signature the checker expects, for
/// closures bound to a local before use.
pub fn tape_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval_value<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = out.value();
    if v.numel() != 1 {
        return Err(Error::Contract(format!("function output has shape {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Gradients of `f` with respect to every input, through the tape.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars.iter().map(|v| grads.get_or_zeros(*v)).collect())
}

/// Central differences `(f(x+eps) − f(x−eps)) / 2eps`, one coordinate at a time.
pub fn numerical_gradients<F>(f: &F, inputs: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be > 0, got {eps}")));
    }
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].values()[j];
            work[i].values_mut()[j] = orig + eps;
            let plus = eval_value(f, &work)?;
            work[i].values_mut()[j] = orig - eps;
            let minus = eval_value(f, &work)?;
            work[i].values_mut()[j] = orig;
            g.push((plus - minus) / (2.0 * eps));
        }
        out.push(Tensor::new(inputs[i].shape().to_vec(), g)?);
    }
    Ok(out)
}

/// Compares two gradient sets coordinate-wise.
pub fn compare_gradients(
    names: &[String],
    analytic: &[Tensor],
    numerical: &[Tensor],
    tolerance: f64,
) -> GradCheckReport {
    let entries = names
        .iter()
        .zip(analytic.iter().zip(numerical))
        .map(|(name, (a, n))| GradCheckEntry {
            name: name.clone(),
            coords: a.numel(),
            max_rel_error: a
                .values()
                .iter()
                .zip(n.values())
                .map(|(&x, &y)| relative_error(x, y))
                .fold(0.0, f64::max),
        })
        .collect();
    GradCheckReport::from_entries(entries, tolerance)
}

/// Checks tape gradients of a scalar function against central differences.
///
/// `f` must be deterministic (dropout in eval mode); this is verified by two
/// forward evaluations at the unperturbed point.
pub fn finite_diff_check<F>(
    f: F,
    inputs: &[(String, Tensor)],
    eps: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
    let tensors: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let first = eval_value(&f, &tensors)?;
    let second = eval_value(&f, &tensors)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism(first, second));
    }
    let analytic = analytic_gradients(&f, &tensors)?;
    let numerical = numerical_gradients(&f, &tensors, eps)?;
    Ok(compare_gradients(&names, &analytic, &numerical, tolerance))
}
