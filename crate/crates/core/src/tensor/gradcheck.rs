use super::{Result, Tape, Tensor, TensorError, Var};

/// Central-difference gradient of a scalar function at `x`.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        grad.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Ok(grad)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(TensorError::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Relative error used throughout: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` at `x` with central differences and
/// returns the largest elementwise relative error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(TensorError::Contract(format!("step {h} must be positive")));
    }
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic = tape
        .grad_data(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let numeric = numeric_gradient(&f, x, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}
