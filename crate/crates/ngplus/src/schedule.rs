//! Learning-rate and damping schedules evaluated at a fractional epoch and
//! an iteration count.
//!
//! The epoch-indexed kinds (cosine, exponential, stepped exponential) drive
//! learning rates and the damping coefficient; the iteration-indexed
//! polynomial decay drives the stochastic convergence runs. A linear warmup
//! ramp can be layered over any kind.

use crate::error::{Error, Result};

/// Closed-form schedule kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    /// Fixed value at every epoch.
    Constant(f64),
    /// `floor + 0.5 (base - floor) (1 + cos(pi epoch / max_epoch))`,
    /// annealing from `base` at epoch 0 down to `floor` at `max_epoch`.
    Cosine {
        base: f64,
        floor: f64,
        max_epoch: f64,
    },
    /// `base (1 - epoch / max_epoch)^power`, reaching zero at the horizon.
    Exponential {
        base: f64,
        power: f64,
        max_epoch: f64,
    },
    /// `c * max(iter, 1)^-beta`, indexed by iteration rather than epoch.
    PolyDecay { c: f64, beta: f64 },
    /// `base * rate^(epoch / interval)`, the stepped damping law when fed
    /// whole epochs.
    ExpEpochDecay {
        base: f64,
        rate: f64,
        interval: f64,
    },
}

/// A schedule kind plus an optional linear warmup ramp over the first
/// `warmup_epochs` epochs, starting at `warmup_start` and meeting the base
/// schedule's value at the end of the ramp.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub warmup_epochs: f64,
    pub warmup_start: f64,
}

impl Schedule {
    /// Schedule without warmup.
    pub fn new(kind: ScheduleKind) -> Self {
        Schedule {
            kind,
            warmup_epochs: 0.0,
            warmup_start: 0.0,
        }
    }

    /// Adds a linear ramp from `start` over the first `epochs` epochs.
    pub fn with_warmup(mut self, epochs: f64, start: f64) -> Self {
        self.warmup_epochs = epochs;
        self.warmup_start = start;
        self
    }

    /// Fixed value, the most common case in configs and tests.
    pub fn constant(v: f64) -> Self {
        Schedule::new(ScheduleKind::Constant(v))
    }

    /// Checks positivity and horizon sanity once, at construction time.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match &self.kind {
            ScheduleKind::Constant(v) => {
                if !(*v > 0.0) {
                    return bad(format!("constant schedule value must be positive, got {v}"));
                }
            }
            ScheduleKind::Cosine {
                base,
                floor,
                max_epoch,
            } => {
                if !(*floor > 0.0) || !(*base >= *floor) {
                    return bad(format!(
                        "cosine schedule needs 0 < floor <= base, got base {base} floor {floor}"
                    ));
                }
                if !(*max_epoch > 0.0) {
                    return bad(format!("cosine horizon must be positive, got {max_epoch}"));
                }
            }
            ScheduleKind::Exponential {
                base,
                power,
                max_epoch,
            } => {
                if !(*base > 0.0) || !(*power >= 0.0) {
                    return bad(format!(
                        "exponential schedule needs base > 0 and power >= 0, got {base}, {power}"
                    ));
                }
                if !(*max_epoch > 0.0) {
                    return bad(format!(
                        "exponential horizon must be positive, got {max_epoch}"
                    ));
                }
            }
            ScheduleKind::PolyDecay { c, beta } => {
                if !(*c > 0.0) {
                    return bad(format!("polynomial decay scale must be positive, got {c}"));
                }
                if !(*beta > 0.0) || !(*beta < 1.0) {
                    return bad(format!(
                        "polynomial decay exponent must lie in (0, 1), got {beta}"
                    ));
                }
            }
            ScheduleKind::ExpEpochDecay {
                base,
                rate,
                interval,
            } => {
                if !(*base > 0.0) || !(*rate > 0.0) || !(*interval > 0.0) {
                    return bad(format!(
                        "stepped decay needs positive base, rate, interval; got {base}, {rate}, {interval}"
                    ));
                }
            }
        }
        if self.warmup_epochs < 0.0 || self.warmup_start < 0.0 {
            return bad(format!(
                "warmup must be nonnegative, got {} epochs from {}",
                self.warmup_epochs, self.warmup_start
            ));
        }
        Ok(())
    }

    /// Value of the bare kind, before any warmup ramp.
    fn base_value(&self, epoch: f64, iter: usize) -> Result<f64> {
        match &self.kind {
            ScheduleKind::Constant(v) => Ok(*v),
            ScheduleKind::Cosine {
                base,
                floor,
                max_epoch,
            } => {
                if epoch > *max_epoch {
                    return Err(Error::HorizonExceeded {
                        epoch,
                        max_epoch: *max_epoch,
                    });
                }
                let phase = std::f64::consts::PI * epoch / max_epoch;
                Ok(floor + 0.5 * (base - floor) * (1.0 + phase.cos()))
            }
            ScheduleKind::Exponential {
                base,
                power,
                max_epoch,
            } => {
                if epoch > *max_epoch {
                    return Err(Error::HorizonExceeded {
                        epoch,
                        max_epoch: *max_epoch,
                    });
                }
                Ok(base * (1.0 - epoch / max_epoch).powf(*power))
            }
            ScheduleKind::PolyDecay { c, beta } => Ok(c * (iter.max(1) as f64).powf(-beta)),
            ScheduleKind::ExpEpochDecay {
                base,
                rate,
                interval,
            } => Ok(base * rate.powf(epoch / interval)),
        }
    }

    /// Evaluates the schedule at a fractional epoch and iteration count.
    /// During warmup the value interpolates linearly from `warmup_start` to
    /// the base schedule's value at the end of the ramp.
    pub fn value(&self, epoch: f64, iter: usize) -> Result<f64> {
        if epoch < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "epoch must be nonnegative, got {epoch}"
            )));
        }
        if self.warmup_epochs > 0.0 && epoch < self.warmup_epochs {
            let target = self.base_value(self.warmup_epochs, iter)?;
            let t = epoch / self.warmup_epochs;
            return Ok(self.warmup_start + t * (target - self.warmup_start));
        }
        self.base_value(epoch, iter)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_ignores_epoch_and_iter() {
        let s = Schedule::constant(0.3);
        assert_eq!(s.value(0.0, 0).unwrap(), 0.3);
        assert_eq!(s.value(17.5, 9999).unwrap(), 0.3);
    }

    #[test]
    fn cosine_hits_both_endpoints() {
        let s = Schedule::new(ScheduleKind::Cosine {
            base: 0.9,
            floor: 0.001,
            max_epoch: 40.0,
        });
        assert!((s.value(0.0, 0).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.value(40.0, 0).unwrap() - 0.001).abs() < 1e-15);
        // Midpoint sits halfway between base and floor.
        assert!((s.value(20.0, 0).unwrap() - 0.4505).abs() < 1e-12);
    }

    #[test]
    fn exponential_matches_hand_value_at_midpoint() {
        let s = Schedule::new(ScheduleKind::Exponential {
            base: 0.18,
            power: 5.0,
            max_epoch: 52.0,
        });
        assert!((s.value(26.0, 0).unwrap() - 0.005625).abs() < 1e-15);
    }

    #[test]
    fn bounded_schedules_reject_epochs_past_the_horizon() {
        let cos = Schedule::new(ScheduleKind::Cosine {
            base: 0.1,
            floor: 0.001,
            max_epoch: 10.0,
        });
        assert!(matches!(
            cos.value(10.5, 0),
            Err(Error::HorizonExceeded { .. })
        ));
        let exp = Schedule::new(ScheduleKind::Exponential {
            base: 0.1,
            power: 2.0,
            max_epoch: 10.0,
        });
        assert!(matches!(
            exp.value(11.0, 0),
            Err(Error::HorizonExceeded { .. })
        ));
    }

    #[test]
    fn poly_decay_is_iteration_indexed_and_clamped_at_one() {
        let s = Schedule::new(ScheduleKind::PolyDecay { c: 2.0, beta: 0.7 });
        assert_eq!(s.value(0.0, 0).unwrap(), 2.0);
        assert_eq!(s.value(0.0, 1).unwrap(), 2.0);
        let v100 = s.value(3.0, 100).unwrap();
        assert!((v100 - 2.0 * 100f64.powf(-0.7)).abs() < 1e-15);
    }

    #[test]
    fn stepped_decay_shrinks_by_rate_each_interval() {
        let s = Schedule::new(ScheduleKind::ExpEpochDecay {
            base: 0.16,
            rate: 0.8,
            interval: 10.0,
        });
        assert!((s.value(0.0, 0).unwrap() - 0.16).abs() < 1e-15);
        assert!((s.value(10.0, 0).unwrap() - 0.128).abs() < 1e-15);
        assert!((s.value(20.0, 0).unwrap() - 0.1024).abs() < 1e-15);
    }

    #[test]
    fn warmup_ramps_linearly_into_the_base_schedule() {
        let s = Schedule::new(ScheduleKind::Cosine {
            base: 0.8,
            floor: 0.001,
            max_epoch: 40.0,
        })
        .with_warmup(4.0, 0.0);
        assert_eq!(s.value(0.0, 0).unwrap(), 0.0);
        let target = Schedule::new(ScheduleKind::Cosine {
            base: 0.8,
            floor: 0.001,
            max_epoch: 40.0,
        })
        .value(4.0, 0)
        .unwrap();
        assert!((s.value(2.0, 0).unwrap() - 0.5 * target).abs() < 1e-15);
        assert!((s.value(4.0, 0).unwrap() - target).abs() < 1e-15);
        // A nonzero ramp start shifts the whole line up.
        let shifted = s.clone().with_warmup(4.0, 0.01);
        assert_eq!(shifted.value(0.0, 0).unwrap(), 0.01);
    }

    #[test]
    fn validation_rejects_out_of_range_parameters() {
        assert!(Schedule::constant(0.0).validate().is_err());
        assert!(Schedule::new(ScheduleKind::PolyDecay { c: 1.0, beta: 1.0 })
            .validate()
            .is_err());
        assert!(Schedule::new(ScheduleKind::Cosine {
            base: 0.001,
            floor: 0.01,
            max_epoch: 5.0,
        })
        .validate()
        .is_err());
        assert!(Schedule::new(ScheduleKind::ExpEpochDecay {
            base: 0.16,
            rate: 0.8,
            interval: 10.0,
        })
        .validate()
        .is_ok());
        let mut warm = Schedule::constant(0.1);
        warm.warmup_epochs = -1.0;
        assert!(warm.validate().is_err());
    }

    #[test]
    fn negative_epochs_are_rejected() {
        assert!(Schedule::constant(1.0).value(-0.1, 0).is_err());
    }
}
