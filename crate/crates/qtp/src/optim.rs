//! Adam with a cosine learning-rate schedule. Parameters are updated in
//! lexicographic name order so runs are reproducible.

use std::collections::BTreeMap;

use crate::error::QtpError;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CosineSchedule {
    pub total_steps: u64,
}

impl CosineSchedule {
    /// lr(t) = base * 0.5 * (1 + cos(pi * t / total_steps)).
    pub fn lr_at(&self, base_lr: f64, step: u64) -> f64 {
        let t = step.min(self.total_steps) as f64;
        base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t / self.total_steps as f64).cos())
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub base_lr: f64,
    pub schedule: CosineSchedule,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(base_lr: f64, total_steps: u64) -> Self {
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            base_lr,
            schedule: CosineSchedule { total_steps },
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Learning rate that will be used by the next call to `step`.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.base_lr, self.step)
    }

    /// One Adam update over all parameters, in lexicographic name order.
    /// The learning rate is taken from the schedule at the pre-update step
    /// count, so the very first step runs at `base_lr`.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), QtpError> {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = match grads.get(name) {
                Some(g) => g,
                None => continue,
            };
            if !g.all_finite() {
                return Err(QtpError::NonFiniteGradient(name.clone()));
            }
            if g.shape() != p.shape() {
                return Err(QtpError::Shape(format!(
                    "gradient shape {:?} vs parameter '{}' shape {:?}",
                    g.shape(),
                    name,
                    p.shape()
                )));
            }
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.first_moment, &self.second_moment)
    }

    pub fn restore_moments(
        &mut self,
        first: BTreeMap<String, Tensor>,
        second: BTreeMap<String, Tensor>,
    ) {
        self.first_moment = first;
        self.second_moment = second;
    }
}
