use super::params::ParamStore;
use crate::error::Result;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam update from the accumulated gradients, which are zeroed afterwards.
///
/// Fails (without touching any parameter) if a gradient is not finite.
pub fn adam_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    store.check_grads()?;
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..store.values.len() {
        let g = store.grads[i].data();
        let m = store.m[i].data_mut();
        for (mv, &gv) in m.iter_mut().zip(g) {
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
        }
        let v = store.v[i].data_mut();
        for (vv, &gv) in v.iter_mut().zip(g) {
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
        }
        if lr != 0.0 {
            let (m, v) = (store.m[i].data(), store.v[i].data());
            let w = store.values[i].data_mut();
            for ((wv, &mv), &vv) in w.iter_mut().zip(m).zip(v) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *wv -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
    store.zero_grads();
    Ok(())
}

/// Cosine-annealed learning rate that reaches exactly zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, total_steps: u64) -> Self {
        Self { base_lr, total_steps }
    }

    /// Steps past `total_steps` are clamped to 0.
    pub fn lr(&self, t: u64) -> f64 {
        cosine_lr(self, t)
    }
}

pub fn cosine_lr(schedule: &Schedule, t: u64) -> f64 {
    if schedule.total_steps == 0 || t >= schedule.total_steps {
        return 0.0;
    }
    let frac = t as f64 / schedule.total_steps as f64;
    schedule.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}
