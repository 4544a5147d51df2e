use serde::{Deserialize, Serialize};

use crate::Real;

/// Log-linear decay from `initial` to `final_value` over `max_steps`, held
/// constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: Real,
    #[serde(rename = "final")]
    pub final_value: Real,
    pub max_steps: u64,
}

impl LrSchedule {
    pub fn new(initial: Real, final_value: Real, max_steps: u64) -> Self {
        Self {
            initial,
            final_value,
            max_steps,
        }
    }

    pub fn value(&self, step: u64) -> Real {
        lr_value(self, step)
    }
}

pub fn lr_value(schedule: &LrSchedule, step: u64) -> Real {
    if step == 0 {
        return schedule.initial;
    }
    if step >= schedule.max_steps {
        return schedule.final_value;
    }
    let frac = step as Real / schedule.max_steps as Real;
    (schedule.initial.ln() * (1.0 - frac) + schedule.final_value.ln() * frac).exp()
}
