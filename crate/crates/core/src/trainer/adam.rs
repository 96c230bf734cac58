//! Adam with bias correction; weight decay enters as a gradient term.

use crate::error::{check_dim, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHp {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHp {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, one entry per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn reset(&mut self, len: usize) {
        *self = Self::new(len);
    }

    /// Appends zero moments for `extra` new trailing parameters.
    pub fn grow(&mut self, extra: usize) {
        self.m.resize(self.m.len() + extra, 0.0);
        self.v.resize(self.v.len() + extra, 0.0);
    }
}

pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    hp: &AdamHp,
) -> Result<()> {
    check_dim(params.len(), grads.len())?;
    check_dim(params.len(), state.m.len())?;
    check_dim(params.len(), state.v.len())?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g + hp.weight_decay * *p;
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}
