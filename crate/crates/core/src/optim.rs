//! AdamW with decoupled weight decay, the EMA teacher update and the
//! warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{check_finite_named, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

impl AdamW {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("optimizer.lr", "must be positive"));
        }
        for (name, b) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, "must lie in [0, 1)"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::invalid("optimizer.eps", "must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("optimizer.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One AdamW update at learning rate `lr` (the schedule's value, not `hp.lr`).
/// Nothing is modified when the gradient holds a non-finite value.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "adamw: {} params, {} grads, {}/{} moments",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    check_finite_named(params.layout(), grads, &format!("gradient before optimizer step {}", state.step + 1))?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let decay = 1.0 - lr * hp.weight_decay;
    for (((theta, &g), m), v) in params.data_mut().iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut())
    {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let update = (*m / bc1) / ((*v / bc2).sqrt() + hp.eps);
        *theta = *theta * decay - lr * update;
    }
    Ok(())
}

/// `teacher <- decay * teacher + (1 - decay) * student`.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, decay: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(Error::Shape("teacher and student layouts differ".into()));
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::invalid("ema_decay", "must lie in [0, 1]"));
    }
    for (t, &s) in teacher.data_mut().iter_mut().zip(student.data()) {
        *t = decay * *t + (1.0 - decay) * s;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl ScheduleConfig {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if !(base_lr.is_finite() && base_lr > 0.0) {
            return Err(Error::invalid("base_lr", "must be positive"));
        }
        if warmup_steps == 0 || warmup_steps >= total_steps {
            return Err(Error::invalid("warmup", format!("need 0 < warmup ({warmup_steps}) < total ({total_steps})")));
        }
        Ok(Self { base_lr, warmup_steps, total_steps })
    }

    /// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        let (w, t) = (self.warmup_steps, self.total_steps);
        if step > t {
            return Err(Error::invalid("step", format!("{step} is past the schedule end {t}")));
        }
        if step < w {
            return Ok(self.base_lr * (step + 1) as f64 / w as f64);
        }
        let frac = (step - w) as f64 / (t - w) as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Architecture;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn params(seed: u64) -> ModelParams {
        ModelParams::init(Architecture::new(1), &mut Rng::new(seed, 0))
    }

    #[test]
    fn zero_gradient_zero_decay_is_noop() {
        let mut p = params(0);
        let before = p.clone();
        let mut st = OptimizerState::new(p.len());
        let hp = AdamW { weight_decay: 0.0, ..AdamW::default() };
        let g = vec![0.0; p.len()];
        adamw_step(&mut p, &g, &mut st, 0.1, &hp).unwrap();
        assert_eq!(p, before);
    }

    /// Scalar oracle: m = 0.1, v = 0.001, bias-corrected both to 1, so the
    /// step is lr / (1 + eps).
    #[test]
    fn first_step_matches_scalar_oracle() {
        let mut p = ModelParams::zeros(Architecture::new(1));
        p.data_mut().fill(1.0);
        let mut st = OptimizerState::new(p.len());
        let hp = AdamW { weight_decay: 0.0, ..AdamW::default() };
        let g = vec![1.0; p.len()];
        adamw_step(&mut p, &g, &mut st, 0.1, &hp).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!(p.data().iter().all(|&v| (v - expected).abs() < 1e-12));
        assert!((expected - 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_alone_scales_parameters() {
        let mut p = params(1);
        let before = p.clone();
        let mut st = OptimizerState::new(p.len());
        let hp = AdamW { weight_decay: 0.1, ..AdamW::default() };
        let g = vec![0.0; p.len()];
        adamw_step(&mut p, &g, &mut st, 0.5, &hp).unwrap();
        for (a, b) in p.data().iter().zip(before.data()) {
            assert!((a - b * (1.0 - 0.05)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_leaves_state() {
        let mut p = params(2);
        let before = p.clone();
        let mut st = OptimizerState::new(p.len());
        let mut g = vec![0.0; p.len()];
        let idx = p.layout().entry("dec2a.bias").unwrap().offset + 3;
        g[idx] = f64::NAN;
        let err = adamw_step(&mut p, &g, &mut st, 0.1, &AdamW::default()).unwrap_err();
        assert!(matches!(&err, Error::NonFinite { name, .. } if name == "dec2a.bias"), "{err}");
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn ema_examples() {
        let mut t = ModelParams::zeros(Architecture::new(1));
        let mut s = t.clone();
        s.data_mut().fill(1.0);
        ema_update(&mut t, &s, 0.99).unwrap();
        assert!(t.data().iter().all(|&v| (v - 0.01).abs() < 1e-15));

        let a = params(3);
        let mut b = a.clone();
        ema_update(&mut b, &a, 0.99).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
        }

        let mut z = params(4);
        ema_update(&mut z, &a, 0.0).unwrap();
        assert_eq!(z, a);

        let mut other = ModelParams::zeros(Architecture::new(3));
        assert!(ema_update(&mut other, &a, 0.5).is_err());
    }

    #[test]
    fn schedule_examples() {
        let s = ScheduleConfig::new(0.01, 10, 110).unwrap();
        assert_eq!(s.lr_at(10).unwrap(), 0.01);
        assert!((s.lr_at(60).unwrap() - 0.005).abs() < 1e-15);
        assert!(s.lr_at(110).unwrap().abs() < 1e-15);
        assert!((s.lr_at(0).unwrap() - 0.001).abs() < 1e-15);
        assert!(s.lr_at(111).is_err());
        assert!(ScheduleConfig::new(0.01, 0, 10).is_err());
        assert!(ScheduleConfig::new(0.01, 10, 10).is_err());
    }

    proptest! {
        /// EMA keeps every teacher value inside the envelope of its history.
        #[test]
        fn ema_stays_in_envelope(seed in any::<u64>(), decay in 0.0f64..1.0, steps in 1usize..20) {
            let arch = Architecture::new(1);
            let mut rng = Rng::new(seed, 1);
            let mut teacher = ModelParams::init(arch, &mut rng);
            let mut lo = teacher.data().to_vec();
            let mut hi = lo.clone();
            for _ in 0..steps {
                let student = ModelParams::init(arch, &mut rng);
                for (i, &v) in student.data().iter().enumerate() {
                    lo[i] = lo[i].min(v);
                    hi[i] = hi[i].max(v);
                }
                ema_update(&mut teacher, &student, decay).unwrap();
                for (i, &v) in teacher.data().iter().enumerate() {
                    prop_assert!(v >= lo[i] - 1e-15 && v <= hi[i] + 1e-15);
                }
            }
        }

        #[test]
        fn schedule_is_bounded(w in 1u64..50, extra in 1u64..500, frac in 0.0f64..=1.0) {
            let s = ScheduleConfig::new(0.1, w, w + extra).unwrap();
            let step = (frac * (w + extra) as f64) as u64;
            let lr = s.lr_at(step).unwrap();
            prop_assert!((0.0..=0.1 + 1e-15).contains(&lr));
        }
    }
}
