//! AdamW with decoupled weight decay, global-norm gradient clipping and a
//! half-cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter first and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(config: AdamWConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One AdamW update. `grads[i]` pairs with `params[i]`; a `None` gradient is
/// an error rather than a silent skip.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Option<&Tensor>],
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "adamw_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        let g = g.ok_or_else(|| Error::MissingGrad(format!("#{i}")))?;
        if g.shape() != params[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: params[i].shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].expect("checked above").data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= lr * weight_decay * *w;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm observed before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub kind: ScheduleKind,
}

/// Half-cosine decay from `base_lr` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: u64, schedule: &LrSchedule) -> Result<f64> {
    if step > schedule.total_steps || schedule.total_steps == 0 {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside schedule of {} steps",
            schedule.total_steps
        )));
    }
    let ScheduleKind::Cosine = schedule.kind;
    let frac = step as f64 / schedule.total_steps as f64;
    Ok(schedule.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut st = OptimState::new(cfg(0.0), &[&p]);
        adamw_step(&mut [&mut p], &[Some(&g)], &mut st, 0.1).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so the step is lr / (1 + eps).
        let mut p = Tensor::from_vec(vec![0.0]);
        let g = Tensor::from_vec(vec![1.0]);
        let mut st = OptimState::new(cfg(0.0), &[&p]);
        adamw_step(&mut [&mut p], &[Some(&g)], &mut st, 0.1).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut p = Tensor::from_vec(vec![1.0]);
        let g = Tensor::zeros(&[1]);
        let mut st = OptimState::new(cfg(0.01), &[&p]);
        adamw_step(&mut [&mut p], &[Some(&g)], &mut st, 0.1).unwrap();
        assert!((p.data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = Tensor::from_vec(vec![1.0]);
        let mut st = OptimState::new(cfg(0.0), &[&p]);
        assert!(matches!(
            adamw_step(&mut [&mut p], &[None], &mut st, 0.1),
            Err(Error::MissingGrad(_))
        ));
    }

    #[test]
    fn adamw_is_deterministic() {
        let run = || {
            let mut p = Tensor::from_vec(vec![0.3, -0.7, 1.1]);
            let mut st = OptimState::new(cfg(0.01), &[&p]);
            for k in 0..5 {
                let g = Tensor::from_vec(vec![0.1 * k as f64, -0.2, 0.05]);
                adamw_step(&mut [&mut p], &[Some(&g)], &mut st, 3e-4).unwrap();
            }
            p
        };
        assert!(run().bitwise_eq(&run()));
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::from_vec(vec![0.3, 0.4])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 0.5);
        assert_eq!(g[0].data(), &[0.3, 0.4]);

        let mut g = vec![Tensor::from_vec(vec![3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[0].data()[1] - 0.8).abs() < 1e-15);
        assert!((g[0].l2_norm() - 1.0).abs() < 1e-12);

        assert_eq!(clip_grad_norm(&mut [], 1.0), 0.0);
    }

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule {
            base_lr: 3e-4,
            total_steps: 100,
            kind: ScheduleKind::Cosine,
        };
        assert_eq!(cosine_lr(0, &s).unwrap(), 3e-4);
        assert!(cosine_lr(100, &s).unwrap().abs() < 1e-20);
        assert!((cosine_lr(50, &s).unwrap() - 1.5e-4).abs() < 1e-18);
        assert!(cosine_lr(101, &s).is_err());
        for step in 0..100 {
            let lr = cosine_lr(step, &s).unwrap();
            assert!(lr > 0.0 && lr <= 3e-4);
        }
    }
}
