//! Learning-rate schedules for pre-training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Peak learning rate of the reference configuration.
pub const REFERENCE_LR: f64 = 5e-4;
/// Batch duration, in seconds, at which the reference rate was tuned.
pub const REFERENCE_SECONDS: f64 = 6000.0;

/// How the peak learning rate follows the batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrKind {
    /// Keep the reference rate.
    Const,
    /// Scale with the square root of the batch-size ratio.
    Sub,
    /// Scale linearly with the batch-size ratio.
    Lin,
}

impl std::str::FromStr for LrKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "const" => Ok(LrKind::Const),
            "sub" => Ok(LrKind::Sub),
            "lin" => Ok(LrKind::Lin),
            _ => Err(Error::InvalidArgument(format!(
                "unknown learning-rate heuristic {s:?}; expected const, sub or lin"
            ))),
        }
    }
}

/// Peak learning rate for a batch of `batch_seconds` under `kind`, relative
/// to `reference_lr` at `reference_seconds`.
pub fn lr_heuristic_with(
    batch_seconds: f64,
    kind: LrKind,
    reference_lr: f64,
    reference_seconds: f64,
) -> f64 {
    let ratio = batch_seconds / reference_seconds;
    match kind {
        LrKind::Const => reference_lr,
        LrKind::Sub => reference_lr * ratio.sqrt(),
        LrKind::Lin => reference_lr * ratio,
    }
}

/// [`lr_heuristic_with`] at the reference configuration.
pub fn lr_heuristic(batch_seconds: f64, kind: LrKind) -> f64 {
    lr_heuristic_with(batch_seconds, kind, REFERENCE_LR, REFERENCE_SECONDS)
}

/// Triangular schedule between `max_lr / 100` and `max_lr`, repeated for a
/// fixed number of cycles and held at the base rate afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CyclicLr {
    pub max_lr: f64,
    pub base_lr: f64,
    pub half_cycle: u64,
    pub cycles: u64,
}

impl CyclicLr {
    pub fn new(max_lr: f64, half_cycle: u64, cycles: u64) -> Self {
        CyclicLr {
            max_lr,
            base_lr: max_lr / 100.0,
            half_cycle,
            cycles,
        }
    }

    pub fn total_steps(&self) -> u64 {
        2 * self.half_cycle * self.cycles
    }

    pub fn at(&self, step: u64) -> f64 {
        if step >= self.total_steps() {
            return self.base_lr;
        }
        let pos = step % (2 * self.half_cycle);
        let h = self.half_cycle as f64;
        let frac = if pos <= self.half_cycle {
            pos as f64 / h
        } else {
            (2 * self.half_cycle - pos) as f64 / h
        };
        self.base_lr + (self.max_lr - self.base_lr) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn heuristic_examples() {
        assert!((lr_heuristic(600.0, LrKind::Lin) - 5.0e-5).abs() < 1e-18);
        assert!((lr_heuristic(600.0, LrKind::Sub) - 1.58e-4).abs() < 5e-7);
        assert_eq!(lr_heuristic(6000.0, LrKind::Lin), 5e-4);
        assert_eq!(lr_heuristic(87.5, LrKind::Const), 5e-4);
        assert!("sqrt".parse::<LrKind>().is_err());
    }

    #[test]
    fn cyclic_examples() {
        let s = CyclicLr::new(1e-3, 25_000, 8);
        assert_eq!(s.at(0), 1e-5);
        assert_eq!(s.at(25_000), 1e-3);
        assert_eq!(s.at(50_000), 1e-5);
        assert_eq!(s.at(400_000), 1e-5);
        assert_eq!(s.at(10_000_000), 1e-5);
        let peaks = (0..=s.total_steps()).filter(|&t| s.at(t) == s.max_lr).count();
        assert_eq!(peaks, 8);
    }

    proptest! {
        #[test]
        fn cyclic_stays_in_range_and_is_periodic(step in 0u64..4000, max in 1e-5f64..1e-2) {
            let s = CyclicLr::new(max, 250, 8);
            let lr = s.at(step);
            prop_assert!(lr >= s.base_lr && lr <= s.max_lr);
            if step + 500 < s.total_steps() {
                prop_assert!((s.at(step + 500) - lr).abs() <= 1e-15 * max);
            }
            // Neighbouring steps differ by at most one slope increment.
            let slope = (s.max_lr - s.base_lr) / 250.0;
            prop_assert!((s.at(step + 1) - lr).abs() <= slope * (1.0 + 1e-9));
        }
    }
}
