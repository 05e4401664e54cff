//! SGD with momentum and L2 weight decay.

use crate::error::{Error, Result};

/// One in-place step: `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::Dimension(format!(
            "sgd_step: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} is {} (param = {})",
            grads[i], params[i]
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    Ok(())
}
