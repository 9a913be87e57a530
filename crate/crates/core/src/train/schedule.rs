use serde::{Deserialize, Serialize};

/// Learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// `init · 2^(−⌊iter / every⌋)`.
    StepHalving { init: f64, every: u64 },
    /// Cosine annealing from `init` to `floor` over `epochs` epochs;
    /// constant at `floor` afterwards.
    Cosine { init: f64, floor: f64, epochs: f64 },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::step_halving()
    }
}

impl Schedule {
    pub fn step_halving() -> Self {
        Schedule::StepHalving {
            init: 1e-4,
            every: 100_000,
        }
    }

    pub fn cosine(epochs: f64) -> Self {
        Schedule::Cosine {
            init: 2e-4,
            floor: 1e-6,
            epochs,
        }
    }

    /// Rate for iteration `iter` (0-based). The cosine schedule works in
    /// fractional epochs of `iters_per_epoch` iterations.
    pub fn lr_at(&self, iter: u64, iters_per_epoch: u64) -> f64 {
        match *self {
            Schedule::StepHalving { init, every } => {
                let halvings = iter / every.max(1);
                init * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
            }
            Schedule::Cosine { init, floor, epochs } => {
                let e = iter as f64 / iters_per_epoch.max(1) as f64;
                cosine_at(init, floor, epochs, e)
            }
        }
    }
}

/// `floor + (init − floor)·(1 + cos(π·e/E))/2`, clamped to `e ∈ [0, E]`.
pub fn cosine_at(init: f64, floor: f64, epochs: f64, epoch: f64) -> f64 {
    if epochs <= 0.0 {
        return floor;
    }
    let r = (epoch / epochs).clamp(0.0, 1.0);
    floor + (init - floor) * (1.0 + (std::f64::consts::PI * r).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn step_halving_values() {
        let s = Schedule::step_halving();
        assert_eq!(s.lr_at(0, 1), 1e-4);
        assert_eq!(s.lr_at(99_999, 1), 1e-4);
        assert_eq!(s.lr_at(100_000, 1), 5e-5);
        assert!((s.lr_at(250_000, 1) - 2.5e-5).abs() < 1e-20);
    }

    #[test]
    fn cosine_values() {
        let e = 120.0;
        assert!((cosine_at(2e-4, 1e-6, e, 0.0) - 2e-4).abs() < 1e-18);
        assert!((cosine_at(2e-4, 1e-6, e, e) - 1e-6).abs() < 1e-18);
        assert!((cosine_at(2e-4, 1e-6, e, e / 2.0) - 1.005e-4).abs() < 1e-15);
        let s = Schedule::cosine(2.0);
        assert!((s.lr_at(10, 10) - 1.005e-4).abs() < 1e-15);
        assert_eq!(s.lr_at(1000, 10), s.lr_at(20, 10));
    }

    proptest! {
        #[test]
        fn schedules_never_increase(a in 0u64..2_000_000, b in 0u64..2_000_000) {
            let (lo, hi) = (a.min(b), a.max(b));
            let s = Schedule::step_halving();
            prop_assert!(s.lr_at(hi, 1) <= s.lr_at(lo, 1));
            let c = Schedule::cosine(7.0);
            prop_assert!(c.lr_at(hi, 100_000) <= c.lr_at(lo, 100_000));
        }
    }
}
