//! Finite-difference verification of the tape's gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used for central differences.
pub const GRAD_CHECK_H: f64 = 1e-5;
/// Absolute floor applied to the relative-error denominator.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// Human-readable diagnostics for failures (non-finite values, worst element).
    pub notes: Vec<String>,
}

/// Compares the tape's gradients for `program` against central finite
/// differences at `h = 1e-5`, elementwise over every tracked parameter.
///
/// `program` must deterministically build a scalar root from the leaves it
/// is handed. Pass iff the max relative error (denominator floored at 1e-8)
/// stays below `tol`; any non-finite value or gradient fails the check.
pub fn grad_check<S, F>(program: F, params: &[Tensor<S>], tol: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<S>]| -> Result<(f64, Vec<Vec<S>>, bool)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|p| tape.leaf(p)).collect();
        let root = program(&mut tape, &vars)?;
        if tape.numel(root) != 1 {
            return Err(Error::InvalidArgument(
                "grad_check program must produce a scalar".into(),
            ));
        }
        let value = tape.scalar_value(root).into_f64();
        tape.backward(root)?;
        let mut grads = Vec::with_capacity(vars.len());
        let mut finite = value.is_finite();
        for (&v, p) in vars.iter().zip(inputs) {
            if p.requires_grad() {
                let g = tape
                    .grad(v)
                    .expect("tracked leaf has a gradient after backward")
                    .to_vec();
                finite &= g.iter().all(|x| x.is_finite());
                grads.push(g);
            } else {
                grads.push(Vec::new());
            }
        }
        Ok((value, grads, finite))
    };

    let (_, analytic, finite) = eval(params)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        pass: true,
        notes: Vec::new(),
    };
    if !finite {
        report.pass = false;
        report.max_rel_err = f64::INFINITY;
        report.notes.push("non-finite value or gradient".into());
        return Ok(report);
    }

    let h = S::from_f64(GRAD_CHECK_H);
    for (pi, param) in params.iter().enumerate() {
        if !param.requires_grad() {
            continue;
        }
        for (ei, exact) in analytic[pi].iter().enumerate() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[ei] += h;
            let (fp, _, ok_p) = eval(&plus)?;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[ei] -= h;
            let (fm, _, ok_m) = eval(&minus)?;
            if !ok_p || !ok_m || !fp.is_finite() || !fm.is_finite() {
                report.pass = false;
                report.max_rel_err = f64::INFINITY;
                report
                    .notes
                    .push(format!("non-finite evaluation near param {pi} element {ei}"));
                return Ok(report);
            }
            let numeric = (fp - fm) / (2.0 * GRAD_CHECK_H);
            let exact = exact.into_f64();
            let denom = exact.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            let rel = (exact - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                if rel >= tol {
                    report.notes.push(format!(
                        "param {pi} element {ei}: analytic {exact:e} vs numeric {numeric:e}"
                    ));
                }
            }
        }
    }
    report.pass = report.max_rel_err < tol;
    Ok(report)
}
