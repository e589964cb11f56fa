use crate::diffengine::{DiffError, Tape, Tensor, Var};

/// Maximum over coordinates of `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`,
/// with the numeric gradient from central differences of step `h`.
///
/// `f` must build a scalar on the given tape from one `Var` per input tensor
/// and must be deterministic in its inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64, DiffError>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&tape, &vars);
        let value = loss.item();
        if !value.is_finite() {
            return Err(DiffError::NonFinite(value));
        }
        let grads = tape.backward(loss)?;
        vars.iter()
            .map(|&v| grads.wrt(v))
            .collect::<Result<Vec<_>, _>>()?
    };

    let eval = |xs: &[Tensor<f64>]| -> Result<f64, DiffError> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let v = f(&tape, &vars).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DiffError::NonFinite(v))
        }
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            probe[t].data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe[t].data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
