//! Adaptive loss balancing: auxiliary weights are rescaled so each term's
//! EMA magnitude matches the alignment loss, on a linearly growing update
//! interval. The align weight is pinned to 1.

use crate::error::{Error, Result};
use crate::losses::LossName;

const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveBalancer {
    /// EMA of |value| per term; None until first observed.
    ema_magnitudes: [Option<f64>; 8],
    ema_decay: f64,
    update_interval: u64,
    interval_step: u64,
    steps_since_update: u64,
    weights: [f64; 8],
}

impl AdaptiveBalancer {
    pub fn new(ema_decay: f64, initial_interval: u64, interval_step: u64) -> Self {
        Self {
            ema_magnitudes: [None; 8],
            ema_decay,
            update_interval: initial_interval.max(1),
            interval_step,
            steps_since_update: 0,
            weights: [1.0; 8],
        }
    }

    /// Record one step of observed loss values. Magnitude EMAs move every
    /// step; weights are recomputed only when the interval elapses, then the
    /// interval grows by `interval_step`.
    pub fn step(&mut self, observed: &[(LossName, f64)]) -> Result<()> {
        if !observed.iter().any(|(n, _)| *n == LossName::Align) {
            return Err(Error::MissingAlignTerm);
        }
        for &(name, value) in observed {
            let slot = &mut self.ema_magnitudes[name.index()];
            let mag = value.abs();
            *slot = Some(match *slot {
                None => mag,
                Some(prev) => self.ema_decay * prev + (1.0 - self.ema_decay) * mag,
            });
        }
        self.steps_since_update += 1;
        if self.steps_since_update >= self.update_interval {
            let align = self.ema_magnitudes[LossName::Align.index()].unwrap_or(0.0);
            for name in LossName::ALL {
                if name == LossName::Align {
                    continue;
                }
                if let Some(mag) = self.ema_magnitudes[name.index()] {
                    self.weights[name.index()] = align / mag.max(EPS);
                }
            }
            self.update_interval += self.interval_step;
            self.steps_since_update = 0;
        }
        Ok(())
    }

    pub fn weight(&self, name: LossName) -> f64 {
        if name == LossName::Align {
            1.0
        } else {
            self.weights[name.index()]
        }
    }

    pub fn ema(&self, name: LossName) -> Option<f64> {
        self.ema_magnitudes[name.index()]
    }
}

/// Fixed manual weights, mirroring the per-modality lambda tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ManualWeights {
    weights: [f64; 8],
}

impl ManualWeights {
    pub fn new(table: &[(LossName, f64)]) -> Self {
        let mut weights = [1.0; 8];
        for &(name, w) in table {
            weights[name.index()] = w;
        }
        weights[LossName::Align.index()] = 1.0;
        Self { weights }
    }

    pub fn weight(&self, name: LossName) -> f64 {
        self.weights[name.index()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_definition() {
        let mut b = AdaptiveBalancer::new(0.99, 1, 0);
        // with interval 1 the first step already updates; seed EMAs directly
        b.step(&[(LossName::Align, 2.0), (LossName::Orth, 4.0)]).unwrap();
        assert!((b.weight(LossName::Orth) - 0.5).abs() < 1e-12);
        assert_eq!(b.weight(LossName::Align), 1.0);
    }

    #[test]
    fn weights_constant_between_updates() {
        let mut b = AdaptiveBalancer::new(0.5, 3, 0);
        b.step(&[(LossName::Align, 1.0), (LossName::Uni, 10.0)]).unwrap();
        let w1 = b.weight(LossName::Uni);
        b.step(&[(LossName::Align, 1.0), (LossName::Uni, 20.0)]).unwrap();
        assert_eq!(b.weight(LossName::Uni), w1);
        b.step(&[(LossName::Align, 1.0), (LossName::Uni, 20.0)]).unwrap();
        assert_ne!(b.weight(LossName::Uni), w1);
    }

    #[test]
    fn triangular_update_schedule() {
        // interval starts at 1, grows by 1: updates at steps 1, 3, 6, 10
        let mut b = AdaptiveBalancer::new(0.0, 1, 1);
        let mut update_steps = Vec::new();
        let mut last = b.weight(LossName::Orth);
        for step in 1..=12u64 {
            let v = 1.0 + step as f64;
            b.step(&[(LossName::Align, 1.0), (LossName::Orth, v)]).unwrap();
            if b.weight(LossName::Orth) != last {
                update_steps.push(step);
                last = b.weight(LossName::Orth);
            }
        }
        assert_eq!(update_steps, vec![1, 3, 6, 10]);
    }

    #[test]
    fn missing_align_rejected() {
        let mut b = AdaptiveBalancer::new(0.9, 1, 1);
        assert!(matches!(
            b.step(&[(LossName::Orth, 1.0)]),
            Err(Error::MissingAlignTerm)
        ));
    }

    #[test]
    fn eps_guard_keeps_weights_finite() {
        let mut b = AdaptiveBalancer::new(0.0, 1, 0);
        b.step(&[(LossName::Align, 1.0), (LossName::Recon, 0.0)]).unwrap();
        let w = b.weight(LossName::Recon);
        assert!(w.is_finite() && w > 0.0);
    }

    #[test]
    fn manual_table_pins_align() {
        let m = ManualWeights::new(&[(LossName::Vq, 1000.0), (LossName::Align, 5.0)]);
        assert_eq!(m.weight(LossName::Align), 1.0);
        assert_eq!(m.weight(LossName::Vq), 1000.0);
    }
}
