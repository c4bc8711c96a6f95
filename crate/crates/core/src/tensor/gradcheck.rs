use super::{Result, Tape, Tensor, TensorError, Var};

/// Symmetric relative error used by every gradient check.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    let value = tape.value(out).item()?;
    if !value.is_finite() {
        return Err(TensorError::Numeric(format!("function value {value}")));
    }
    Ok(value)
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences with the given step; returns the worst relative error.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(TensorError::Contract(format!("step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let v = tape.variable(x.clone());
    let out = f(&mut tape, v)?;
    if !tape.value(out).item()?.is_finite() {
        return Err(TensorError::Numeric("non-finite function value".into()));
    }
    tape.backward(out)?;
    let analytic = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, v| Ok(t.sum(v)), &x, 0.0).is_err());
        let err = grad_check(|t, v| Ok(t.scale(v, f64::INFINITY)), &x, 1e-5);
        assert!(matches!(err, Err(TensorError::Numeric(_))));
    }
}
