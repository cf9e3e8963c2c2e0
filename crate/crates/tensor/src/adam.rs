//! Adam with bias correction.

use crate::{kernels, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment buffers plus the shared step counter.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &[Tensor], hyper: AdamHyper) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
            hyper,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First-moment buffer, exposed for closed-form recursion tests.
    pub fn first_moment(&self, idx: usize) -> &[f64] {
        &self.m[idx]
    }
}

/// One Adam update over a parameter group. Deterministic given inputs.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
) -> Result<(), TensorError> {
    if state.hyper.lr < 0.0 || !state.hyper.lr.is_finite() {
        return Err(TensorError::InvalidArgument {
            op: "adam_step",
            detail: format!("lr must be finite and >= 0, got {}", state.hyper.lr),
        });
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "{} params vs {} grads vs {} state buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            });
        }
        if !kernels::all_finite(g.data()) {
            return Err(TensorError::NonFinite {
                context: "adam_step gradient".into(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let AdamHyper {
        lr,
        beta1,
        beta2,
        eps,
    } = state.hyper;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let grads = vec![Tensor::zeros(&[3])];
        let mut st = AdamState::new(&params, AdamHyper::default());
        adam_step(&mut params, &grads, &mut st).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0, 0.5]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_expansion() {
        // After one step: mhat = g, vhat = g^2, so delta = lr*g/(|g|+eps).
        let lr = 1e-3;
        let g = 0.5;
        let mut params = vec![Tensor::scalar(1.0)];
        let grads = vec![Tensor::scalar(g)];
        let mut st = AdamState::new(
            &params,
            AdamHyper {
                lr,
                ..AdamHyper::default()
            },
        );
        adam_step(&mut params, &grads, &mut st).unwrap();
        let expect = 1.0 - lr * g / (g.abs() + 1e-8);
        assert!((params[0].item() - expect).abs() < 1e-15);
        // magnitude of the first step is ~lr
        assert!((1.0 - params[0].item() - lr).abs() < 1e-6 * lr + 1e-10);
    }

    #[test]
    fn constant_grad_first_moment_follows_closed_form() {
        // m_t = (1 - beta1^t) g; the bias-corrected mhat stays exactly g while
        // the raw moment approaches it monotonically.
        let g = -0.25;
        let beta1 = 0.9f64;
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(g)];
        let mut st = AdamState::new(&params, AdamHyper::default());
        let mut prev_gap = f64::INFINITY;
        for t in 1..=5 {
            adam_step(&mut params, &grads, &mut st).unwrap();
            let m = st.first_moment(0)[0];
            let closed = (1.0 - beta1.powi(t)) * g;
            assert!((m - closed).abs() < 1e-15);
            let gap = (m - g).abs();
            assert!(gap < prev_gap, "bias-correction gap must shrink");
            prev_gap = gap;
        }
    }

    #[test]
    fn zero_lr_step_changes_nothing() {
        let mut params = vec![Tensor::new(vec![2], vec![0.5, -0.25]).unwrap()];
        let before = params[0].clone();
        let grads = vec![Tensor::new(vec![2], vec![1.0, -3.0]).unwrap()];
        let mut st = AdamState::new(
            &params,
            AdamHyper {
                lr: 0.0,
                ..AdamHyper::default()
            },
        );
        adam_step(&mut params, &grads, &mut st).unwrap();
        assert_eq!(params[0], before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Tensor::zeros(&[2])];
        let grads = vec![Tensor::zeros(&[3])];
        let mut st = AdamState::new(&params, AdamHyper::default());
        assert!(matches!(
            adam_step(&mut params, &grads, &mut st),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn nonfinite_grad_rejected() {
        let mut params = vec![Tensor::zeros(&[1])];
        let grads = vec![Tensor::new(vec![1], vec![f64::NAN]).unwrap()];
        let mut st = AdamState::new(&params, AdamHyper::default());
        assert!(matches!(
            adam_step(&mut params, &grads, &mut st),
            Err(TensorError::NonFinite { .. })
        ));
    }
}
