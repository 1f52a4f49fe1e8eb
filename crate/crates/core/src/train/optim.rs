use crate::lm::{Parameters, TensorKind};

use super::TrainConfig;

/// Linear warmup to `learning_rate`, then cosine decay to
/// `min_lr_ratio · learning_rate` at `max_steps`. `step` counts from 1.
pub fn lr_at(config: &TrainConfig, step: u64) -> f64 {
    let lr = config.learning_rate;
    let warm = config.warmup_steps;
    if warm > 0 && step <= warm {
        return lr * step as f64 / warm as f64;
    }
    let span = config.max_steps.saturating_sub(warm).max(1) as f64;
    let progress = ((step - warm.min(step)) as f64 / span).clamp(0.0, 1.0);
    let min = lr * config.min_lr_ratio;
    min + (lr - min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Global L2 norm over every gradient tensor.
pub fn grad_norm(grads: &Parameters<f32>) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Parameters<f32>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for t in grads.tensors_mut() {
            t.data.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Decoupled weight decay applies to matrices only; norm gains are exempt.
fn decays(kind: TensorKind) -> bool {
    !matches!(kind, TensorKind::Norm)
}

/// One AdamW update. `step` counts from 1 and drives bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    params: &mut Parameters<f32>,
    grads: &Parameters<f32>,
    m: &mut Parameters<f32>,
    v: &mut Parameters<f32>,
    config: &TrainConfig,
    lr: f64,
    step: u64,
) {
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powf(step as f64);
    let c2 = 1.0 - b2.powf(step as f64);
    let g = grads.tensors();
    let mut ms = m.tensors_mut();
    let mut vs = v.tensors_mut();
    for (i, p) in params.tensors_mut().into_iter().enumerate() {
        let wd = if decays(p.kind) { config.weight_decay } else { 0.0 };
        let (gd, md, vd) = (g[i].data, &mut *ms[i].data, &mut *vs[i].data);
        for j in 0..p.data.len() {
            let gj = gd[j] as f64;
            let mj = b1 * md[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * vd[j] as f64 + (1.0 - b2) * gj * gj;
            md[j] = mj as f32;
            vd[j] = vj as f32;
            let update = (mj / c1) / ((vj / c2).sqrt() + config.eps);
            let w = p.data[j] as f64;
            p.data[j] = (w - lr * (update + wd * w)) as f32;
        }
    }
}
