use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::tensor::Tensor;
use super::{Group, ParamId};
use crate::{Error, Result};

/// Maps `(group, step, base_lr)` to the learning rate for that step.
pub type GroupRate = Arc<dyn Fn(Group, u64, f64) -> f64 + Send + Sync>;

#[derive(Clone, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `η / (t + 1)` where `t` counts completed steps.
    InverseTime,
    PerGroup(GroupRate),
}

impl fmt::Debug for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrSchedule::Constant => f.write_str("Constant"),
            LrSchedule::InverseTime => f.write_str("InverseTime"),
            LrSchedule::PerGroup(_) => f.write_str("PerGroup(..)"),
        }
    }
}

/// Plain SGD with per-group learning rates.
#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    base_lr: f64,
    overrides: BTreeMap<Group, f64>,
    schedule: LrSchedule,
    step: u64,
}

impl SgdOptimizer {
    pub fn new(base_lr: f64) -> Self {
        Self {
            base_lr,
            overrides: BTreeMap::new(),
            schedule: LrSchedule::Constant,
            step: 0,
        }
    }

    pub fn with_schedule(mut self, schedule: LrSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    /// Fixes the base rate of one group; `0.0` freezes it.
    pub fn set_group_lr(&mut self, group: Group, lr: f64) {
        self.overrides.insert(group, lr);
    }

    pub fn freeze(&mut self, group: Group) {
        self.set_group_lr(group, 0.0);
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate applied to `group` on the next call to [`step`](Self::step).
    pub fn lr(&self, group: Group) -> f64 {
        let base = self.overrides.get(&group).copied().unwrap_or(self.base_lr);
        match &self.schedule {
            LrSchedule::Constant => base,
            LrSchedule::InverseTime => base / (self.step + 1) as f64,
            LrSchedule::PerGroup(f) => f(group, self.step, base),
        }
    }

    /// `θ ← θ − η_group · grad` for every parameter, then advances the step
    /// counter. Groups whose rate is zero are skipped entirely, so their
    /// buffers stay bit-identical.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (ParamId, &'a mut Tensor)>,
    {
        for (id, t) in params {
            let lr = self.lr(id.group);
            if lr < 0.0 || !lr.is_finite() {
                return Err(Error::Config(format!(
                    "learning rate for {:?} must be finite and nonnegative, got {lr}",
                    id.group
                )));
            }
            let Some(g) = t.take_grad() else {
                return Err(Error::Contract(format!("missing gradient for {id:?}")));
            };
            if lr == 0.0 {
                continue;
            }
            for (v, gv) in t.data_mut().iter_mut().zip(&g) {
                *v -= lr * gv;
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Slot;

    fn id() -> ParamId {
        ParamId::new(Group::Stage(1), 0, Slot::Weight)
    }

    fn with_grad(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v);
        t.set_grad(vec![g]).unwrap();
        t
    }

    #[test]
    fn one_step() {
        let mut opt = SgdOptimizer::new(0.1);
        let mut t = with_grad(1.0, 2.0);
        opt.step([(id(), &mut t)]).unwrap();
        assert!((t.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        let mut opt = SgdOptimizer::new(0.1);
        opt.freeze(Group::Stage(1));
        let mut t = with_grad(1.234_567, 9.0);
        let before = t.content_hash();
        opt.step([(id(), &mut t)]).unwrap();
        assert_eq!(t.content_hash(), before);
    }

    #[test]
    fn inverse_time_two_steps() {
        // η_1 = 1, η_2 = 1/2: 0 − 1 − 0.5
        let mut opt = SgdOptimizer::new(1.0).with_schedule(LrSchedule::InverseTime);
        let mut t = Tensor::scalar(0.0);
        for _ in 0..2 {
            t.set_grad(vec![1.0]).unwrap();
            opt.step([(id(), &mut t)]).unwrap();
        }
        assert_eq!(t.data()[0], -1.5);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut opt = SgdOptimizer::new(0.1);
        let mut t = Tensor::scalar(0.0);
        assert!(matches!(
            opt.step([(id(), &mut t)]),
            Err(Error::Contract(_))
        ));
    }
}
