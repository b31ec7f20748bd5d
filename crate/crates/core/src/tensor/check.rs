use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - cd| / max(|analytic|, |cd|, 1e-8)` over every entry.
    pub max_rel_error: f64,
    /// `(parameter index, entry index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Checks the analytic gradient of a scalar computation against
/// `(f(p + eps) - f(p - eps)) / (2 eps)` for every entry of every parameter.
///
/// `f` receives a fresh tape and the parameter vars registered on it, in the
/// order of `params`, and must return a scalar node.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("registered as param").clone();
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;

            let cd = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[ei];
            let denom = a.abs().max(cd.abs()).max(1e-8);
            let rel = (a - cd).abs() / denom;
            report.entries += 1;
            if rel > report.max_rel_error || report.entries == 1 {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = cd;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(&[Tensor::scalar(3.0)], 1e-4, |t, v| t.mul(v[0], v[0])).unwrap();
        assert!((r.analytic - 6.0).abs() < 1e-12);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let r = grad_check(&[Tensor::vector(vec![1.0, -2.0])], 1e-4, |t, _| Ok(t.constant(Tensor::scalar(4.0)))).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.analytic, 0.0);
        assert_eq!(r.numeric, 0.0);
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(grad_check(&[Tensor::scalar(1.0)], 0.0, |t, v| Ok(t.sum(v[0]))).is_err());
    }
}
