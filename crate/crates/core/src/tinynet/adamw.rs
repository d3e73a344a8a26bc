//! AdamW with decoupled weight decay and a linear learning-rate warmup.
//!
//! ```text
//! lr_t  = lr * min(1, (t + 1) / warmup)
//! θ    ← θ - lr_t * wd * θ
//! m    ← β1 m + (1 - β1) g
//! v    ← β2 v + (1 - β2) g²
//! θ    ← θ - lr_t * m̂ / (√v̂ + ε)      (m̂, v̂ bias-corrected with t + 1)
//! ```

use crate::error::{Error, Result};

use super::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Zero disables warmup.
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    /// Desk-scale defaults. Full-scale training used lr 1e-5 over 80k steps
    /// with the same betas and decay.
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_steps: 100,
        }
    }
}

impl AdamWConfig {
    pub fn effective_lr(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

pub fn adamw_step(params: &mut ParamSet, grads: &ParamSet, state: &mut OptimizerState) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::Model("optimizer shapes do not match parameters".into()));
    }
    if let Some(p) = grads
        .params()
        .iter()
        .find(|p| p.data.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Optimizer(p.name.clone()));
    }
    let cfg = state.config;
    let lr = cfg.effective_lr(state.step);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = lr * cfg.weight_decay;

    let params_iter = params.params_mut().iter_mut();
    let m_iter = state.m.params_mut().iter_mut();
    let v_iter = state.v.params_mut().iter_mut();
    for (((p, g), m), v) in params_iter.zip(grads.params()).zip(m_iter).zip(v_iter) {
        for k in 0..p.data.len() {
            let gk = g.data[k];
            let mut theta = p.data[k];
            theta -= decay * theta;
            m.data[k] = cfg.beta1 * m.data[k] + (1.0 - cfg.beta1) * gk;
            v.data[k] = cfg.beta2 * v.data[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m.data[k] / bc1;
            let v_hat = v.data[k] / bc2;
            theta -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            p.data[k] = theta;
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_setup(theta: f64, grad: f64) -> (ParamSet, ParamSet) {
        let mut p = ParamSet::zeros(1, 1, 1);
        let mut g = p.zeros_like();
        *p.flat_mut(0) = theta;
        *g.flat_mut(0) = grad;
        (p, g)
    }

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
            warmup_steps: 0,
        }
    }

    #[test]
    fn first_step_by_hand() {
        // bias-corrected m̂ = v̂ = g = 1, so the step is lr / (1 + ε)
        let (mut p, g) = scalar_setup(1.0, 1.0);
        let mut s = OptimizerState::new(&p, cfg(0.0));
        adamw_step(&mut p, &g, &mut s).unwrap();
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.flat()[0] - expect).abs() < 1e-15);
        assert!((p.flat()[0] - 0.9).abs() < 1e-7);
        assert_eq!(s.step, 1);

        let (mut p, g) = scalar_setup(1.0, 1.0);
        let mut s = OptimizerState::new(&p, cfg(0.05));
        adamw_step(&mut p, &g, &mut s).unwrap();
        // decay 1 - 0.1 * 0.05 = 0.995, then the Adam step
        assert!((p.flat()[0] - (0.995 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p.flat()[0] - 0.895).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let (mut p, g) = scalar_setup(0.7, 0.0);
        let before = p.clone();
        let mut s = OptimizerState::new(&p, cfg(0.0));
        for _ in 0..3 {
            adamw_step(&mut p, &g, &mut s).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn linear_warmup() {
        let c = AdamWConfig {
            warmup_steps: 4,
            ..cfg(0.0)
        };
        assert!((c.effective_lr(0) - 0.025).abs() < 1e-15);
        assert!((c.effective_lr(1) - 0.05).abs() < 1e-15);
        assert_eq!(c.effective_lr(3), 0.1);
        assert_eq!(c.effective_lr(100), 0.1);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let p = ParamSet::zeros(2, 2, 2);
        let mut g = p.zeros_like();
        g.get_mut("cls.w").unwrap().data[1] = f64::NAN;
        let mut params = p.clone();
        let mut s = OptimizerState::new(&p, cfg(0.0));
        match adamw_step(&mut params, &g, &mut s) {
            Err(Error::Optimizer(name)) => assert_eq!(name, "cls.w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(params, p);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn second_moment_nonnegative() {
        let (mut p, _) = scalar_setup(1.0, 0.0);
        let mut s = OptimizerState::new(&p, cfg(0.01));
        for k in 0..20 {
            let (_, g) = scalar_setup(0.0, if k % 2 == 0 { -3.0 } else { 2.0 });
            adamw_step(&mut p, &g, &mut s).unwrap();
            assert!(s.v.flat().iter().all(|v| *v >= 0.0));
        }
    }
}
