use alloc::format;

use super::{Graph, TArray, TensorError, Var};

/// Central-difference verification of reverse-mode gradients.
///
/// `f` must build a scalar objective from its input node. Returns the
/// maximum over elements of `|analytic - numeric| / max(1, |analytic| + |numeric|)`.
/// Runs in `f64`; `eps` around `1e-5` balances truncation and cancellation.
pub fn grad_check<F>(f: F, x: &TArray<f64>, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let y = f(&mut g, xv)?;
    if g.value(y).numel() != 1 {
        return Err(TensorError::ShapeMismatch(format!(
            "grad_check objective must be scalar, got {:?}",
            g.shape(y)
        )));
    }
    if !g.value(y).is_finite() {
        return Err(TensorError::NonFiniteValue("grad_check objective".into()));
    }
    let grads = g.backward(y)?;
    let analytic = match grads.get(xv) {
        Some(a) => a.clone(),
        None => TArray::zeros(x.shape()),
    };
    if !analytic.is_finite() {
        return Err(TensorError::NonFiniteValue("grad_check gradient".into()));
    }

    let eval = |probe: &TArray<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let xv = g.leaf(probe.clone(), false);
        let y = f(&mut g, xv)?;
        let v = g.value(y).data()[0];
        if !v.is_finite() {
            return Err(TensorError::NonFiniteValue("grad_check probe".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1.0f64.max(a.abs() + numeric.abs());
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
