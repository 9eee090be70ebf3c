//! Learning-rate schedules, evaluated at fractional epochs.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    /// `base * decay^floor(epoch)`
    Exponential { base: f64, decay: f64 },
    /// Linear warmup from `start` to `peak`, then cosine from `peak` to `floor` at `total_epochs`.
    WarmupCosine {
        start: f64,
        peak: f64,
        floor: f64,
        warmup_epochs: f64,
        total_epochs: f64,
    },
}

pub fn lr_at(epoch: f64, schedule: &LrSchedule) -> f64 {
    match *schedule {
        LrSchedule::Exponential { base, decay } => base * decay.powi(epoch.max(0.0).floor() as i32),
        LrSchedule::WarmupCosine {
            start,
            peak,
            floor,
            warmup_epochs,
            total_epochs,
        } => {
            let e = epoch.max(0.0);
            if e < warmup_epochs {
                start + (peak - start) * e / warmup_epochs
            } else {
                let span = (total_epochs - warmup_epochs).max(f64::EPSILON);
                let t = ((e - warmup_epochs) / span).min(1.0);
                floor + (peak - floor) * 0.5 * (1.0 + (PI * t).cos())
            }
        }
    }
}
