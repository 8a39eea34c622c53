use serde::{Deserialize, Serialize};

/// Gaussian warm-up of the unsupervised weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampupSchedule {
    pub final_weight: f64,
    pub t: u64,
    pub t_max: u64,
}

impl RampupSchedule {
    pub fn new(final_weight: f64, t: u64, t_max: u64) -> Self {
        Self {
            final_weight,
            t,
            t_max,
        }
    }

    /// `exp(-5 (1 - t/t_max)^2)` with `t` clamped to `t_max`.
    pub fn unit(&self) -> f64 {
        if self.t_max == 0 {
            return 1.0;
        }
        let x = self.t.min(self.t_max) as f64 / self.t_max as f64;
        (-5.0 * (1.0 - x) * (1.0 - x)).exp()
    }

    pub fn weight(&self) -> f64 {
        self.final_weight * self.unit()
    }
}

pub fn rampup_weight(sched: &RampupSchedule) -> f64 {
    sched.weight()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_values() {
        let w = |t| rampup_weight(&RampupSchedule::new(0.1, t, 1000));
        assert!((w(0) - 0.1 * (-5.0f64).exp()).abs() < 1e-15);
        assert!((w(0) - 6.7379e-4).abs() / 6.7379e-4 < 1e-4);
        assert!((w(500) - 0.028650).abs() / 0.028650 < 1e-4);
        assert_eq!(w(1000), 0.1);
        assert_eq!(w(5000), 0.1);
    }

    proptest! {
        #[test]
        fn monotone(t_max in 1u64..10_000, a in 0u64..12_000, b in 0u64..12_000, w in 0.0f64..10.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(RampupSchedule::new(w, lo, t_max).weight() <= RampupSchedule::new(w, hi, t_max).weight());
        }

        #[test]
        fn scale_invariant(t in 0u64..1000, t_max in 1u64..1000, k in 1u64..20, w in 0.01f64..10.0) {
            let a = RampupSchedule::new(w, t, t_max).weight() / w;
            let b = RampupSchedule::new(2.0 * w, k * t, k * t_max).weight() / (2.0 * w);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
