use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// `(parameter, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    /// `(analytic, numeric)` at `worst`.
    pub worst_values: Option<(f64, f64)>,
    pub coordinates: usize,
}

/// Compares backprop gradients of `f` against central differences
/// `(f(p + ε) - f(p - ε)) / 2ε`, coordinate by coordinate.
///
/// `f` builds a scalar on a fresh tape from one leaf per parameter. The
/// relative error of a coordinate is `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn finite_difference_check<F>(params: &[Tensor], f: F, epsilon: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.borrowed(p, true)).collect();
        let loss = f(&mut tape, &vars)?;
        finite_scalar(tape.value(loss))?;
        tape.backward(loss)?;
        vars.iter()
            .zip(params)
            .map(|(v, p)| tape.grad(*v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
            .collect::<Vec<_>>()
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.borrowed(p, false)).collect();
        let loss = f(&mut tape, &vars)?;
        finite_scalar(tape.value(loss))
    };

    let mut work = params.to_vec();
    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst: None,
        worst_values: None,
        coordinates: 0,
    };
    for p in 0..work.len() {
        for i in 0..work[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + epsilon;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = orig - epsilon;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[p][i];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((p, i));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    Ok(report)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn finite_scalar(t: &Tensor) -> Result<f64> {
    let v = t.item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}
