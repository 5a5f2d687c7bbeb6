use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Gradient magnitudes below this are compared on an absolute scale; the
/// relative error denominator is `max(|analytic|, |numeric|, FLOOR)`.
pub const GRAD_SCALE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates where a perturbed evaluation failed (e.g. a normalization
    /// hit its norm guard). These are not failures.
    pub skipped: Vec<usize>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let out = f(&mut tape, v)?;
    tape.scalar(out)
}

/// Compares the tape gradient of the scalar function `f` at `x` against
/// central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// Errors only when `f` itself fails at `x`.
pub fn finite_diff_grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut tracked = x.clone();
    tracked.set_requires_grad(true);

    let mut tape = Tape::new();
    let v = tape.leaf(&tracked);
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: Vec::new(),
        tol,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + step;
        let plus = eval(&f, &probe);
        probe.values_mut()[i] = orig - step;
        let minus = eval(&f, &probe);
        probe.values_mut()[i] = orig;
        let (Ok(plus), Ok(minus)) = (plus, minus) else {
            report.skipped.push(i);
            continue;
        };
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(GRAD_SCALE_FLOOR);
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(i);
        }
    }
    Ok(report)
}
