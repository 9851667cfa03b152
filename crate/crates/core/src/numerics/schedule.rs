use crate::error::{Error, Result};

/// Linear warm-up to `base_lr`, then polynomial decay to `eta_min`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    /// Iteration at which warm-up ends and the polynomial decay begins.
    pub warmup_end: u64,
    pub total_iters: u64,
    pub power: f64,
    pub eta_min: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_end: u64, total_iters: u64) -> Result<Self> {
        let s = LrSchedule {
            base_lr,
            warmup_end,
            total_iters,
            power: 0.9,
            eta_min: 0.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_end > 0 && self.warmup_end < self.total_iters) {
            return Err(Error::invalid(format!(
                "schedule needs 0 < warmup_end ({}) < total_iters ({})",
                self.warmup_end, self.total_iters
            )));
        }
        if !(self.base_lr >= self.eta_min && self.eta_min >= 0.0) {
            return Err(Error::invalid("schedule needs base_lr >= eta_min >= 0"));
        }
        Ok(())
    }

    pub fn lr_at(&self, t: u64) -> Result<f64> {
        if t > self.total_iters {
            return Err(Error::invalid(format!("iteration {t} beyond total {}", self.total_iters)));
        }
        if t <= self.warmup_end {
            return Ok(self.base_lr * t as f64 / self.warmup_end as f64);
        }
        let span = (self.total_iters - self.warmup_end) as f64;
        let frac = 1.0 - (t - self.warmup_end) as f64 / span;
        Ok((self.base_lr - self.eta_min) * frac.powf(self.power) + self.eta_min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule::new(1e-4, 500, 5000).unwrap()
    }

    #[test]
    fn peak_at_warmup_end() {
        assert_eq!(sched().lr_at(500).unwrap(), 1e-4);
    }

    #[test]
    fn zero_at_end() {
        assert_eq!(sched().lr_at(5000).unwrap(), 0.0);
        assert_eq!(sched().lr_at(0).unwrap(), 0.0);
    }

    #[test]
    fn midpoint_of_decay() {
        let lr = sched().lr_at(2750).unwrap();
        assert!((lr - 1e-4 * 0.5f64.powf(0.9)).abs() < 1e-18);
        assert!((lr - 5.36e-5).abs() < 5e-8);
    }

    #[test]
    fn out_of_range_and_invalid() {
        assert!(sched().lr_at(5001).is_err());
        assert!(LrSchedule::new(1e-4, 0, 10).is_err());
        assert!(LrSchedule::new(1e-4, 10, 10).is_err());
    }

    #[test]
    fn continuous_and_monotone_after_warmup() {
        let s = sched();
        let left = s.base_lr * 499.999 / 500.0;
        assert!((s.lr_at(500).unwrap() - left).abs() < 1e-9);
        let mut prev = s.lr_at(500).unwrap();
        for t in 501..=5000 {
            let lr = s.lr_at(t).unwrap();
            assert!(lr <= prev && lr >= 0.0 && lr <= s.base_lr);
            prev = lr;
        }
    }
}
