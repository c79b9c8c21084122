use serde::Serialize;

use super::{Matrix, Tape, Var};

/// Largest discrepancy between tape gradients and central differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries_checked: usize,
}

/// Denominator floor for relative error; below it the comparison is absolute.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h` for every entry of every parameter.
///
/// `f` builds a scalar on the given tape from the parameter vars, and must
/// be deterministic.
pub fn check_gradients<F>(params: &[Matrix], h: f64, f: F) -> GradCheckReport
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let eval = |ps: &[Matrix]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&tape, &vars);
        tape.scalar_value(out)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out).expect("gradient check needs a scalar output");
    let analytic: Vec<Matrix> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        entries_checked: 0,
    };
    let mut work: Vec<Matrix> = params.to_vec();
    for (k, p) in params.iter().enumerate() {
        for (idx, &orig) in p.indexed_iter() {
            work[k][idx] = orig + h;
            let up = eval(&work);
            work[k][idx] = orig - h;
            let down = eval(&work);
            work[k][idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k][idx];
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.entries_checked += 1;
        }
    }
    report
}
