//! Central finite-difference checks of tape gradients.

use super::{Module, Tape, Var};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Entries where both gradients are below this are compared absolutely instead;
/// at step 1e-5 the rounding error of a central difference is around 1e-11 |loss|.
pub const TINY: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    /// `(analytic, numeric)` at the worst entry.
    pub worst_pair: (f64, f64),
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|)`, or the absolute gap when both are tiny.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < TINY {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares tape gradients of every trainable parameter of `m` against central
/// differences of `loss`. `loss` must be deterministic in the parameter values.
pub fn gradcheck<M: Module>(
    m: &mut M,
    loss: impl Fn(&M, &mut Tape) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let out = loss(m, &mut tape)?;
    tape.backward(out)?;
    let names: Vec<(String, usize)> = m
        .params()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), p.numel()))
        .collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        worst_pair: (0.0, 0.0),
        checked: 0,
    };
    for (name, n) in names {
        let analytic: Vec<f64> = match tape.param_grad(&name) {
            Some(g) => g.to_vec(),
            None => vec![0.0; n],
        };
        for i in 0..n {
            let orig = value_at(m, &name, i);
            set_value(m, &name, i, orig + FD_STEP);
            let up = eval(m, &loss)?;
            set_value(m, &name, i, orig - FD_STEP);
            let down = eval(m, &loss)?;
            set_value(m, &name, i, orig);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(analytic[i], numeric);
            if !e.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient comparison at {name}[{i}]"
                )));
            }
            if report.worst.is_none() || e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((name.clone(), i));
                report.worst_pair = (analytic[i], numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn eval<M: Module>(m: &M, loss: &impl Fn(&M, &mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = loss(m, &mut tape)?;
    Ok(tape.scalar(v))
}

fn value_at<M: Module>(m: &M, name: &str, i: usize) -> f64 {
    m.params()
        .into_iter()
        .find(|p| p.name == name)
        .expect("parameter present")
        .value
        .data()[i]
}

fn set_value<M: Module>(m: &mut M, name: &str, i: usize, v: f64) {
    m.params_mut()
        .into_iter()
        .find(|p| p.name == name)
        .expect("parameter present")
        .value
        .data_mut()[i] = v;
}
