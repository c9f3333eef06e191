//! Adam with bias correction and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::matrix::{global_norm, Matrix};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Standard defaults: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(params: &[Matrix], lr: f64) -> Self {
        AdamState {
            step: 0,
            first_moment: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            second_moment: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update, in place. Increments `state.step`.
pub fn adam_step(state: &mut AdamState, params: &mut [Matrix], grads: &[Matrix]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            expected: format!("{} parameter tensors", state.first_moment.len()),
            got: format!("{} params / {} grads", params.len(), grads.len()),
        });
    }
    for ((p, g), (m, v)) in params
        .iter()
        .zip(grads)
        .zip(state.first_moment.iter().zip(&state.second_moment))
    {
        p.check_same_shape(g, "adam_step grads")?;
        p.check_same_shape(m, "adam_step moments")?;
        let _ = v;
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for i in 0..params.len() {
        let g = &grads[i];
        let m = &mut state.first_moment[i];
        for (mj, gj) in m.data_mut().iter_mut().zip(g.data()) {
            *mj = state.beta1 * *mj + (1.0 - state.beta1) * gj;
        }
        let v = &mut state.second_moment[i];
        for (vj, gj) in v.data_mut().iter_mut().zip(g.data()) {
            *vj = state.beta2 * *vj + (1.0 - state.beta2) * gj * gj;
        }
        let p = &mut params[i];
        for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let mhat = mj / bc1;
            let vhat = vj / bc2;
            *pj -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
///
/// The threshold carries a 1e-12 relative slack so that re-clipping an
/// already clipped set is a bit-exact no-op (rescaling can leave the norm
/// a few ulps above `max_norm`).
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_norm(grads);
    if norm > max_norm * (1.0 + 1e-12) {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
