use crate::backbone::ParamSet;
use crate::config::LrSchedule;
use crate::error::{Error, Result};

/// Learning rate at step `t` (0-based) under `schedule`.
pub fn learning_rate(base: f64, schedule: LrSchedule, t: u64, t_max: u64) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Poly => base * (1.0 - t.min(t_max) as f64 / t_max.max(1) as f64).powf(0.9),
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `g += wd * theta; buf = mu * buf + g; theta -= lr * buf`.
pub fn sgd_step(
    params: &mut ParamSet<f32>,
    grads: &ParamSet<f32>,
    momentum: &mut ParamSet<f32>,
    lr: f64,
    mu: f64,
    weight_decay: f64,
) -> Result<()> {
    params.check_same_structure(grads)?;
    params.check_same_structure(momentum)?;
    let (lr, mu, wd) = (lr as f32, mu as f32, weight_decay as f32);
    for ((p, g), m) in params.params.iter_mut().zip(&grads.params).zip(&mut momentum.params) {
        for ((theta, &grad), buf) in p.data.iter_mut().zip(&g.data).zip(&mut m.data) {
            let g = grad + wd * *theta;
            *buf = mu * *buf + g;
            *theta -= lr * *buf;
        }
    }
    Ok(())
}

/// Euclidean norm of a gradient set; errors when it is not finite.
pub fn checked_grad_norm(grads: &ParamSet<f32>) -> Result<f64> {
    let norm = grads.sq_norm().sqrt();
    if norm.is_finite() {
        Ok(norm)
    } else {
        let bad = grads
            .params
            .iter()
            .find(|p| p.data.iter().any(|v| !v.is_finite()))
            .map_or("<overflow>", |p| p.name.as_str());
        Err(Error::Numerical(format!("gradient norm is not finite (first bad tensor: {bad})")))
    }
}
