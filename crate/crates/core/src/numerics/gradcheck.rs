//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Magnitude floor in the relative-error denominator. Below it a gradient
/// entry is compared in absolute terms, which keeps finite-difference
/// round-off on near-zero entries from reading as a failure.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(tensor, element)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the reverse-mode gradient of `f` at `theta` with central
/// differences of width `step`, elementwise.
pub fn grad_check<T, F>(f: F, theta: &Tensor<T>, step: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(theta),
        step,
        None,
    )
}

/// Multi-tensor variant. `coords`, when given, restricts the check to those
/// `(tensor, element)` pairs.
pub fn grad_check_many<T, F>(
    f: F,
    thetas: &[Tensor<T>],
    step: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item().as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = thetas.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().as_f64().is_finite() {
        return Err(Error::NonFinite("objective is not finite".into()));
    }
    let grads = tape.backward(out)?;

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = thetas
                .iter()
                .enumerate()
                .flat_map(|(ti, t)| (0..t.len()).map(move |e| (ti, e)))
                .collect();
            &all
        }
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor<T>> = thetas.to_vec();
    for &(ti, e) in coords {
        let orig = work[ti].data()[e];
        work[ti].data_mut()[e] = T::of(orig.as_f64() + step);
        let fp = eval(&work)?;
        work[ti].data_mut()[e] = T::of(orig.as_f64() - step);
        let fm = eval(&work)?;
        work[ti].data_mut()[e] = orig;

        let numeric = (fp - fm) / (2.0 * step);
        let analytic = grads.get(vars[ti]).map_or(0.0, |g| g.data()[e].as_f64());
        let r = rel_err(analytic, numeric);
        report.max_abs_err = report.max_abs_err.max((analytic - numeric).abs());
        if r > report.max_rel_err {
            report.max_rel_err = r;
            report.worst = (ti, e);
        }
        report.checked += 1;
    }
    Ok(report)
}
