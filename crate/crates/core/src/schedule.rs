//! Scalar schedules: warmup + {constant, linear, cosine} decay.
//!
//! One shape covers every scheduled quantity in training — learning rate
//! (linear warmup, cosine decay), weight decay (cosine ramp), teacher momentum
//! (cosine toward 1), teacher temperature (linear warmup, then flat).

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Param(format!(
                "unknown schedule kind {other:?} (expected constant|linear|cosine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub kind: ScheduleKind,
    /// Value at the end of warmup (the schedule's starting point).
    pub base: f64,
    /// Value at `total_steps`.
    pub final_value: f64,
    /// Steps of linear warmup from `warmup_start` to `base`.
    pub warmup_steps: usize,
    pub warmup_start: f64,
    pub total_steps: usize,
}

impl Schedule {
    pub fn constant(value: f64, total_steps: usize) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            base: value,
            final_value: value,
            warmup_steps: 0,
            warmup_start: 0.0,
            total_steps,
        }
    }

    pub fn cosine(base: f64, final_value: f64, total_steps: usize) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            base,
            final_value,
            warmup_steps: 0,
            warmup_start: 0.0,
            total_steps,
        }
    }

    pub fn with_warmup(mut self, warmup_steps: usize, warmup_start: f64) -> Self {
        self.warmup_steps = warmup_steps;
        self.warmup_start = warmup_start;
        self
    }

    /// Value at `step`; steps run 0..=total_steps.
    pub fn value(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Param(format!(
                "schedule step {step} out of range (total {})",
                self.total_steps
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Param(format!(
                "warmup {} exceeds total {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return Ok(self.warmup_start + (self.base - self.warmup_start) * frac);
        }
        let span = self.total_steps - self.warmup_steps;
        let t = if span == 0 { 1.0 } else { (step - self.warmup_steps) as f64 / span as f64 };
        Ok(match self.kind {
            ScheduleKind::Constant => self.base,
            ScheduleKind::Linear => self.base + (self.final_value - self.base) * t,
            ScheduleKind::Cosine => {
                self.final_value
                    + (self.base - self.final_value) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        })
    }
}

/// Linear learning-rate scaling: the configured rate is per 256 samples.
pub fn scaled_lr(base_per_256: f64, batch_size: usize) -> f64 {
    base_per_256 * batch_size as f64 / 256.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_hits_both_endpoints_exactly() {
        let s = Schedule::cosine(0.996, 1.0, 1000);
        assert_eq!(s.value(0).unwrap(), 0.996);
        assert_eq!(s.value(1000).unwrap(), 1.0);
        // midpoint is the arithmetic mean
        let mid = s.value(500).unwrap();
        assert!((mid - 0.998).abs() < 1e-12, "mid {mid}");
    }

    #[test]
    fn cosine_toward_one_is_monotone_nondecreasing() {
        let s = Schedule::cosine(0.996, 1.0, 200);
        let mut prev = s.value(0).unwrap();
        for step in 1..=200 {
            let v = s.value(step).unwrap();
            assert!(v >= prev, "step {step}: {v} < {prev}");
            prev = v;
        }
    }

    #[test]
    fn warmup_then_flat_models_teacher_temperature() {
        let s = Schedule::constant(0.07, 100).with_warmup(30, 0.04);
        assert_eq!(s.value(0).unwrap(), 0.04);
        let v15 = s.value(15).unwrap();
        assert!((v15 - 0.055).abs() < 1e-15, "mid-warmup {v15}");
        assert_eq!(s.value(30).unwrap(), 0.07);
        assert_eq!(s.value(77).unwrap(), 0.07);
        assert_eq!(s.value(100).unwrap(), 0.07);
    }

    #[test]
    fn warmup_then_cosine_models_learning_rate() {
        let s = Schedule::cosine(0.01, 1e-6, 100).with_warmup(10, 0.0);
        assert_eq!(s.value(0).unwrap(), 0.0);
        assert_eq!(s.value(10).unwrap(), 0.01);
        assert_eq!(s.value(100).unwrap(), 1e-6);
        // decay is monotone after warmup
        let mut prev = s.value(10).unwrap();
        for step in 11..=100 {
            let v = s.value(step).unwrap();
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn linear_kind_interpolates() {
        let s = Schedule { kind: ScheduleKind::Linear, ..Schedule::cosine(1.0, 0.0, 4) };
        assert_eq!(s.value(1).unwrap(), 0.75);
        assert_eq!(s.value(3).unwrap(), 0.25);
    }

    #[test]
    fn out_of_range_step_is_an_error() {
        let s = Schedule::constant(1.0, 10);
        assert!(s.value(11).is_err());
        assert!(s.value(10).is_ok());
    }

    #[test]
    fn lr_scaling_is_exact() {
        assert_eq!(scaled_lr(0.0005, 256), 0.0005);
        assert_eq!(scaled_lr(0.0005, 8), 1.5625e-5);
        assert_eq!(scaled_lr(0.0005, 64), 0.000125);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!(ScheduleKind::parse("cosine").unwrap(), ScheduleKind::Cosine);
        assert!(ScheduleKind::parse("cos").is_err());
    }
}
