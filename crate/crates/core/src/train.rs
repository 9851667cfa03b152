//! Shared optimisation loop plumbing: parameter groups, binding and one
//! AdamW step per iteration under the warm-up/poly schedule.

use crate::error::Result;
use crate::nets::{Bound, ParamSet, TrainMask};
use crate::numerics::{AdamWConfig, AdamWState, Gradients, Graph, LrSchedule};

pub struct Trainer {
    pub schedule: LrSchedule,
    state: AdamWState,
    /// Learning-rate multiplier per parameter, in `ParamSet` order.
    mult: Vec<f64>,
    trainable: Vec<bool>,
}

impl Trainer {
    pub fn new(params: &ParamSet, adam: AdamWConfig, schedule: LrSchedule, mult: Vec<f64>, mask: &TrainMask) -> Self {
        assert_eq!(mult.len(), params.len(), "one lr multiplier per parameter");
        Trainer {
            schedule,
            state: AdamWState::new(adam, params.tensors()),
            mult,
            trainable: params.names().iter().map(|n| mask.is_trainable(n)).collect(),
        }
    }

    pub fn bind(&self, g: &mut Graph, params: &ParamSet) -> Bound {
        let names = params.names();
        Bound::bind(g, params, |n| {
            let i = names.iter().position(|m| m == n).expect("bound name comes from the set");
            self.trainable[i]
        })
    }

    /// Learning rate of parameter `i` for 0-based iteration `iter`.
    pub fn lr(&self, i: usize, iter: u64) -> Result<f64> {
        Ok(self.schedule.lr_at(iter + 1)? * self.mult[i])
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    pub fn step(&mut self, params: &mut ParamSet, bound: &Bound, grads: &Gradients, iter: u64) -> Result<()> {
        let base = self.schedule.lr_at(iter + 1)?;
        let lrs: Vec<f64> = self.mult.iter().map(|m| base * m).collect();
        let mut per: Vec<Option<&[f64]>> = vec![None; params.len()];
        for &(i, v) in bound.trainable() {
            per[i] = grads.get(v);
        }
        self.state.step(params.tensors_mut(), &per, &lrs)
    }
}
