use serde::{Deserialize, Serialize};

use super::ParamSet;

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// `buf ← momentum·buf + grad + wd·θ; θ ← θ − lr·buf`, then clears gradients.
///
/// Frozen parameters are skipped entirely.
pub fn sgd_step(params: &mut ParamSet, cfg: &SgdConfig) {
    for (_, p) in params.iter_mut() {
        if p.frozen {
            continue;
        }
        let value = p.value.data_mut();
        let buf = p.velocity.data_mut();
        for ((theta, v), &g) in value.iter_mut().zip(buf.iter_mut()).zip(p.grad.data()) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *theta;
            *theta -= cfg.lr * *v;
        }
        p.grad.data_mut().fill(0.0);
    }
}
