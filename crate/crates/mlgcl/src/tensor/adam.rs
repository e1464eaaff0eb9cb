//! Adam optimizer with bias-corrected first and second moments.

use crate::error::{Error, Result};
use crate::tensor::Dense;

/// Step size and moment hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    /// Standard defaults with a caller-chosen learning rate.
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter moment buffers plus the shared step counter.
///
/// The state is positional: buffer `i` belongs to whatever tensor the caller
/// passes at index `i` on every step, so the parameter order must not change
/// across steps.
#[derive(Clone, Debug)]
pub struct AdamState {
    hyper: AdamHyper,
    m: Vec<Dense>,
    v: Vec<Dense>,
    t: u64,
}

impl AdamState {
    /// Zero-initialized moments matching the given parameter shapes.
    pub fn new(params: &[&Dense], hyper: AdamHyper) -> Self {
        let m = params.iter().map(|p| Dense::zeros(p.dim())).collect();
        let v = params.iter().map(|p| Dense::zeros(p.dim())).collect();
        AdamState { hyper, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Applies one Adam update in place.
///
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, then
/// `p <- p - lr * m_hat / (sqrt(v_hat) + eps)` with the usual
/// `1 - beta^t` bias corrections. Gradients must match parameter shapes
/// elementwise and be finite.
pub fn adam_step(
    params: &mut [&mut Dense],
    grads: &[Dense],
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::arg(
            "adam_step",
            format!(
                "{} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() {
            return Err(Error::shape(
                "adam_step",
                format!("param {i} is {:?} but grad is {:?}", p.dim(), g.dim()),
            ));
        }
        if !g.iter().all(|x| x.is_finite()) {
            return Err(Error::numeric("adam_step", format!("non-finite gradient for param {i}")));
        }
    }
    state.t += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        ndarray::Zip::from(&mut **p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_almost_exactly_lr() {
        // With m_hat = g and v_hat = g^2 after bias correction, the first
        // update is lr * g / (|g| + eps), i.e. very nearly lr * sign(g).
        let mut p = Dense::from_shape_vec((1, 1), vec![1.0]).unwrap();
        let g = Dense::from_shape_vec((1, 1), vec![1.0]).unwrap();
        let mut state = AdamState::new(&[&p], AdamHyper::with_lr(0.001));
        adam_step(&mut [&mut p], &[g], &mut state).unwrap();
        assert!((p[[0, 0]] - 0.999).abs() < 1e-9, "got {}", p[[0, 0]]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn converges_on_a_quadratic() {
        // Minimize (x - 3)^2 by following its gradient 2(x - 3).
        let mut p = Dense::from_shape_vec((1, 1), vec![0.0]).unwrap();
        let mut state = AdamState::new(&[&p], AdamHyper::with_lr(0.05));
        for _ in 0..2000 {
            let g = Dense::from_shape_vec((1, 1), vec![2.0 * (p[[0, 0]] - 3.0)]).unwrap();
            adam_step(&mut [&mut p], &[g], &mut state).unwrap();
        }
        assert!((p[[0, 0]] - 3.0).abs() < 1e-3, "got {}", p[[0, 0]]);
    }

    #[test]
    fn rejects_shape_mismatch_and_nan() {
        let mut p = Dense::zeros((2, 2));
        let mut state = AdamState::new(&[&p], AdamHyper::with_lr(0.01));
        let bad_shape = Dense::zeros((2, 3));
        assert!(adam_step(&mut [&mut p], &[bad_shape], &mut state).is_err());
        let mut bad_val = Dense::zeros((2, 2));
        bad_val[[0, 0]] = f64::NAN;
        assert!(adam_step(&mut [&mut p], &[bad_val], &mut state).is_err());
        // Failed validation must not advance the step counter.
        assert_eq!(state.step_count(), 0);
    }
}
