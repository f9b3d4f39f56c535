//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or 0 when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central difference of a scalar function along every coordinate of `x`.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let up = f(&probe)?;
        probe[i] = orig - FD_STEP;
        let down = f(&probe)?;
        probe[i] = orig;
        g.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(g)
}

/// Compares the reverse-mode gradient of `f` with central differences for
/// every input. `f` must return a scalar. Returns the worst relative error
/// over the inputs.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let vars: Vec<Tensor> = inputs.iter().map(Tensor::detach_variable).collect();
    let loss = f(&vars)?;
    if loss.numel() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    loss.backward()?;

    let mut worst: f64 = 0.0;
    for (idx, v) in vars.iter().enumerate() {
        let analytic = v.grad().unwrap_or_else(|| vec![0.0; v.numel()]);
        let numeric = numeric_gradient(v.data(), |probe| {
            let mut args: Vec<Tensor> = vars.iter().map(Tensor::detach).collect();
            args[idx] = Tensor::new(v.shape(), probe.to_vec())?;
            f(&args)?.item()
        })?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
