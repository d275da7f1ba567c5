//! AdamW with decoupled weight decay, and the linear warmup / linear decay
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cast, ModelParams, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl ScheduleConfig {
    /// Warmup over the first `ceil(0.1·T)` steps.
    pub fn with_default_warmup(peak_lr: f64, total_steps: u64) -> Result<Self> {
        let warmup_steps = (total_steps as f64 * 0.1).ceil() as u64;
        let cfg = ScheduleConfig {
            peak_lr,
            total_steps,
            warmup_steps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.warmup_steps && self.warmup_steps < self.total_steps) {
            return Err(Error::Config(format!(
                "schedule needs 1 <= warmup ({}) < total ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::Config(format!("bad peak lr {}", self.peak_lr)));
        }
        Ok(())
    }
}

/// Learning rate for the 0-based step `t`: `α·(t+1)/W` during warmup, then
/// `α·(T−t)/(T−W)` down to the last step.
pub fn lr_at_step(cfg: &ScheduleConfig, t: u64) -> Result<f64> {
    cfg.validate()?;
    let (a, w, total) = (cfg.peak_lr, cfg.warmup_steps, cfg.total_steps);
    if t >= total {
        return Err(Error::Config(format!(
            "step {t} outside schedule of {total} steps"
        )));
    }
    Ok(if t < w {
        a * ((t + 1) as f64 / w as f64)
    } else {
        a * ((total - t) as f64 / (total - w) as f64)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub cfg: AdamWConfig,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamWState {
            step: 0,
            m: ModelParams::zeros(),
            v: ModelParams::zeros(),
            cfg,
        }
    }
}

/// One AdamW update in place:
///
/// ```text
/// m ← β1·m + (1−β1)·g        v ← β2·v + (1−β2)·g²
/// θ ← θ − lr·( m̂/(√v̂ + eps) + λ·θ )
/// ```
///
/// Rank-1 tensors (biases) get no weight decay. Non-finite gradients abort
/// before any state is touched.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamWState<T>,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!(
            "learning rate must be >= 0, got {lr}"
        )));
    }
    if let Some(t) = grads
        .tensors()
        .iter()
        .find(|t| t.data.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite {
            what: "gradient",
            step: state.step,
            detail: format!("tensor {}", t.name),
        });
    }

    state.step += 1;
    let c = state.cfg;
    let (b1, b2) = (cast::<T>(c.beta1), cast::<T>(c.beta2));
    let one = T::one();
    let bc1 = cast::<T>(1.0 - c.beta1.powi(state.step as i32));
    let bc2 = cast::<T>(1.0 - c.beta2.powi(state.step as i32));
    let eps = cast::<T>(c.eps);
    let lr_t = cast::<T>(lr);
    let wd = cast::<T>(c.weight_decay);

    let tensors = params.tensors_mut().iter_mut();
    let moments = state
        .m
        .tensors_mut()
        .iter_mut()
        .zip(state.v.tensors_mut().iter_mut());
    for ((theta, g), (m, v)) in tensors.zip(grads.tensors()).zip(moments) {
        let decay = if theta.is_vector() { T::zero() } else { wd };
        for i in 0..theta.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (one - b1) * gi;
            v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            let th = theta.data[i];
            theta.data[i] = th - lr_t * (m_hat / (v_hat.sqrt() + eps) + decay * th);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_and_decay_endpoints() {
        let cfg = ScheduleConfig {
            peak_lr: 1e-4,
            total_steps: 100,
            warmup_steps: 10,
        };
        let close = |t: u64, want: f64| {
            let got = lr_at_step(&cfg, t).unwrap();
            assert!(
                (got - want).abs() <= 1e-15 * want,
                "step {t}: {got} vs {want}"
            );
        };
        close(0, 1e-4 / 10.0);
        // The ratio is formed first so the peak is hit exactly.
        assert_eq!(lr_at_step(&cfg, 9).unwrap(), 1e-4);
        assert_eq!(lr_at_step(&cfg, 10).unwrap(), 1e-4);
        close(99, 1e-4 / 90.0);
        assert!(lr_at_step(&cfg, 100).is_err());
    }

    #[test]
    fn default_warmup_is_ceil_tenth() {
        assert_eq!(
            ScheduleConfig::with_default_warmup(1.0, 320)
                .unwrap()
                .warmup_steps,
            32
        );
        assert_eq!(
            ScheduleConfig::with_default_warmup(1.0, 15)
                .unwrap()
                .warmup_steps,
            2
        );
        assert!(ScheduleConfig::with_default_warmup(1.0, 1).is_err());
    }

    #[test]
    fn schedule_is_bounded_by_peak() {
        let cfg = ScheduleConfig::with_default_warmup(3e-4, 57).unwrap();
        let lrs: Vec<f64> = (0..57).map(|t| lr_at_step(&cfg, t).unwrap()).collect();
        let max = lrs.iter().cloned().fold(f64::MIN, f64::max);
        assert!((max - 3e-4).abs() < 1e-18);
        assert!(lrs.iter().all(|l| *l > 0.0));
    }

    #[test]
    fn decay_only_step() {
        let mut params = ModelParams::<f64>::init(1);
        let before = params.clone();
        let grads = ModelParams::<f64>::zeros();
        let mut state = AdamWState::new(AdamWConfig::default());
        adamw_step(&mut params, &grads, &mut state, 0.1).unwrap();
        for (a, b) in params.tensors().iter().zip(before.tensors()) {
            let factor = if a.is_vector() { 1.0 } else { 1.0 - 0.1 * 0.01 };
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y * factor).abs() < 1e-15, "{}", a.name);
            }
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut params = ModelParams::<f64>::zeros();
        let mut grads = ModelParams::<f64>::zeros();
        grads.get_mut("head.b").unwrap().data[0] = 1.0;
        let mut state = AdamWState::new(AdamWConfig::default());
        adamw_step(&mut params, &grads, &mut state, 0.1).unwrap();
        let got = params.get("head.b").unwrap().data[0];
        assert!((got - -0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((state.m.get("head.b").unwrap().data[0] - 0.1).abs() < 1e-15);
        assert!(state.v.to_flat().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn fixed_point_without_gradient_or_decay() {
        let mut params = ModelParams::<f64>::init(2);
        let before = params.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut state = AdamWState::new(cfg);
        for _ in 0..3 {
            adamw_step(&mut params, &ModelParams::zeros(), &mut state, 0.5).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut params = ModelParams::<f32>::zeros();
        let mut grads = ModelParams::<f32>::zeros();
        grads.get_mut("conv2.w").unwrap().data[3] = f32::NAN;
        let mut state = AdamWState::new(AdamWConfig::default());
        let err = adamw_step(&mut params, &grads, &mut state, 0.1).unwrap_err();
        assert!(err.to_string().contains("conv2.w"));
        assert_eq!(state.step, 0);
    }
}
