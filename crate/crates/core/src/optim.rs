//! AdamW, learning-rate schedules and EMA parameter tracking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SegNetParams;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `base * (1 - epoch / total)`, floored at `base / 100`.
    Linear,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            schedule: Schedule::Linear,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self, prefix: &str, problems: &mut Vec<String>) {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("{prefix}.lr: must be positive"));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                problems.push(format!("{prefix}.{name}: must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            problems.push(format!("{prefix}.eps: must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            problems.push(format!("{prefix}.weight_decay: must be non-negative"));
        }
    }

    pub fn lr_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        match self.schedule {
            Schedule::Linear => lr_schedule(self.lr, epoch, total_epochs),
            Schedule::Constant => self.lr,
        }
    }
}

/// Learning-rate, epoch and batch settings of a training phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhasePreset {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

/// Teacher settings at full scale.
pub const PAPER_TEACHER: PhasePreset = PhasePreset {
    lr: 1e-5,
    epochs: 50,
    batch_size: 4,
};

/// Student settings at full scale; the learning rate is shared with the teacher.
pub const PAPER_STUDENT: PhasePreset = PhasePreset {
    lr: 1e-5,
    epochs: 5,
    batch_size: 2,
};

/// Linear decay to a floor of `base_lr / 100`.
pub fn lr_schedule(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return base_lr;
    }
    let frac = epoch.min(total_epochs) as f64 / total_epochs as f64;
    (base_lr * (1.0 - frac)).max(base_lr / 100.0)
}

/// First and second moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: OptimConfig,
    pub m: SegNetParams,
    pub v: SegNetParams,
    pub t: u64,
}

impl AdamWState {
    pub fn new(params: &SegNetParams, config: OptimConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

fn adamw_tensor(
    p: &mut Tensor,
    g: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    cfg: &OptimConfig,
    lr: f64,
    t: u64,
) -> Result<()> {
    p.ensure_same_shape(g)?;
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, &g), m), v) in p
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(m.data_mut().iter_mut())
        .zip(v.data_mut().iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
    }
    Ok(())
}

/// One decoupled-weight-decay step at learning rate `lr`.
pub fn adamw_step(params: &mut SegNetParams, grads: &SegNetParams, state: &mut AdamWState, lr: f64) -> Result<()> {
    params.ensure_same_layout(grads)?;
    params.ensure_same_layout(&state.m)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients"));
    }
    state.t += 1;
    let cfg = state.config;
    let t = state.t;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        adamw_tensor(p, g, m, v, &cfg, lr, t)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaConfig {
    pub enabled: bool,
    pub decay: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            decay: 0.999,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self, prefix: &str, problems: &mut Vec<String>) {
        if !(0.0..=1.0).contains(&self.decay) {
            problems.push(format!("{prefix}.decay: must lie in [0, 1]"));
        }
    }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`.
pub fn ema_update(teacher: &mut SegNetParams, student: &SegNetParams, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("EMA decay {alpha} is outside [0, 1]")));
    }
    teacher.ensure_same_layout(student)?;
    for (t, s) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn scalar_step(p: f64, g: f64, lr: f64, wd: f64, state: &mut (f64, f64, u64)) -> f64 {
        let cfg = OptimConfig {
            lr,
            weight_decay: wd,
            ..OptimConfig::default()
        };
        let mut pt = Tensor::from_vec(vec![p]);
        let mut m = Tensor::from_vec(vec![state.0]);
        let mut v = Tensor::from_vec(vec![state.1]);
        state.2 += 1;
        adamw_tensor(&mut pt, &Tensor::from_vec(vec![g]), &mut m, &mut v, &cfg, lr, state.2).unwrap();
        state.0 = m.data()[0];
        state.1 = v.data()[0];
        pt.data()[0]
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut rng = RngState::new(1);
        let mut params = SegNetParams::init(&mut rng, 4, 8);
        let before = params.clone();
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut state = AdamWState::new(&params, cfg);
        let grads = params.zeros_like();
        adamw_step(&mut params, &grads, &mut state, 0.1).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn single_step_by_hand() {
        let p = scalar_step(1.0, 1.0, 0.1, 0.0, &mut (0.0, 0.0, 0));
        // m_hat = 1, v_hat = 1.
        assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_shrinks_parameters() {
        let p = scalar_step(2.0, 0.0, 0.1, 0.01, &mut (0.0, 0.0, 0));
        assert!((p - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn converges_on_a_parabola() {
        let mut state = (0.0, 0.0, 0);
        let mut p = 5.0;
        for _ in 0..500 {
            p = scalar_step(p, 2.0 * p, 0.1, 0.0, &mut state);
        }
        assert!(p.abs() < 1e-3, "p = {p}");
    }

    #[test]
    fn schedule_points() {
        assert_eq!(lr_schedule(1e-3, 0, 10), 1e-3);
        assert_eq!(lr_schedule(1e-3, 10, 10), 1e-5);
        assert!((lr_schedule(1e-3, 5, 10) - 5e-4).abs() < 1e-18);
        let constant = OptimConfig {
            schedule: Schedule::Constant,
            ..OptimConfig::default()
        };
        assert_eq!(constant.lr_at(9, 10), constant.lr);
    }

    #[test]
    fn ema_cases() {
        let mut rng = RngState::new(2);
        let student = SegNetParams::init(&mut rng, 3, 4);
        let teacher = SegNetParams::init(&mut rng, 3, 4);
        let mut t = teacher.clone();
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t, teacher);
        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t, student);

        let mut zero = SegNetParams::zeros(3, 4);
        let mut one = SegNetParams::zeros(3, 4);
        one.tensors_mut().into_iter().for_each(|t| t.fill(1.0));
        ema_update(&mut zero, &one, 0.5).unwrap();
        assert!(zero.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.5)));
        assert!(ema_update(&mut zero, &SegNetParams::zeros(4, 4), 0.5).is_err());
    }

    #[test]
    fn ema_distance_contracts_geometrically() {
        let mut rng = RngState::new(3);
        let student = SegNetParams::init(&mut rng, 3, 4);
        let mut teacher = SegNetParams::init(&mut rng, 3, 4);
        let dist = |a: &SegNetParams, b: &SegNetParams| {
            a.tensors()
                .iter()
                .zip(b.tensors())
                .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).powi(2)))
                .sum::<f64>()
                .sqrt()
        };
        let start = dist(&teacher, &student);
        let alpha: f64 = 0.9;
        for _ in 0..7 {
            ema_update(&mut teacher, &student, alpha).unwrap();
        }
        let ratio = dist(&teacher, &student) / start;
        assert!((ratio - alpha.powi(7)).abs() < 1e-12, "ratio {ratio}");
    }

    #[test]
    fn config_validation() {
        let bad = OptimConfig {
            lr: 0.0,
            beta1: 1.0,
            ..OptimConfig::default()
        };
        let mut problems = Vec::new();
        bad.validate("optim", &mut problems);
        assert_eq!(
            problems,
            vec!["optim.lr: must be positive", "optim.beta1: must lie in [0, 1)"]
        );
    }
}
