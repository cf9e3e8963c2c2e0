//! Central-difference gradient checking.

use crate::{Graph, Tensor, TensorError, Var};

/// Compare the analytic gradient of a scalar-valued function against central
/// finite differences. Returns the max over components of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` must build the same computation whenever it is called; it is invoked
/// once for the analytic pass and twice per input component for the stencil.
/// Generic over the error type so callers with richer errors can pass their
/// builders through unchanged.
pub fn grad_check<F, E>(mut f: F, x: &Tensor, eps: f64) -> Result<f64, E>
where
    F: FnMut(&mut Graph, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            detail: format!("eps must be in (0, 1e-2], got {eps}"),
        }
        .into());
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let y = f(&mut g, xv)?;
    let numel = g.value(y).numel();
    if numel != 1 {
        return Err(TensorError::NonScalarLoss { numel }.into());
    }
    g.backward(y)?;
    let analytic = g.grad(xv).ok_or(TensorError::DetachedLoss)?.to_vec();

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval_scalar(&mut f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval_scalar(&mut f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_rel)
}

fn eval_scalar<F, E>(f: &mut F, x: &Tensor) -> Result<f64, E>
where
    F: FnMut(&mut Graph, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), false);
    let y = f(&mut g, xv)?;
    Ok(g.value(y).item())
}
