use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::Real;

pub const EMA_MOMENTUM: Real = 0.4;
pub const GAMMA_START: Real = 0.05;
pub const GAMMA_END: Real = 0.02;

/// Exponential moving average of a per-view statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaTracker {
    pub value: Real,
    pub initialized: bool,
    pub momentum: Real,
}

impl Default for EmaTracker {
    fn default() -> Self {
        Self::new(EMA_MOMENTUM)
    }
}

impl EmaTracker {
    pub fn new(momentum: Real) -> Self {
        Self {
            value: 0.0,
            initialized: false,
            momentum,
        }
    }

    /// `EMA ← m·x + (1 − m)·EMA`; the first observation sets the EMA.
    pub fn update(&mut self, x: Real) {
        if self.initialized {
            self.value = self.momentum * x + (1.0 - self.momentum) * self.value;
        } else {
            self.value = x;
            self.initialized = true;
        }
    }
}

/// Outcome of one detector call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub flagged: bool,
    /// `(1 + γ)·EMA` before the update; `None` on the first observation.
    pub threshold: Option<Real>,
}

/// Flags a view whose PSNR is below `(1 + γ)` times the running average, then
/// folds the PSNR into the average.
pub fn detect_crude_psnr(tracker: &mut EmaTracker, psnr: Real, gamma: Real) -> Detection {
    let threshold = tracker.initialized.then(|| (1.0 + gamma) * tracker.value);
    let flagged = threshold.is_some_and(|t| psnr < t);
    tracker.update(psnr);
    Detection { flagged, threshold }
}

/// Flags a view whose mean view-space gradient norm exceeds `(1 + γ)` times
/// the running average, then folds it into the average.
pub fn detect_crude_gradient(tracker: &mut EmaTracker, grad_norm: Real, gamma: Real) -> Detection {
    let threshold = tracker.initialized.then(|| (1.0 + gamma) * tracker.value);
    let flagged = threshold.is_some_and(|t| grad_norm > t);
    tracker.update(grad_norm);
    Detection { flagged, threshold }
}

/// Linear interpolation from `start` at step 0 to `end` at `len`, clamped.
pub fn gamma_schedule(start: Real, end: Real, step: u64, len: u64) -> Real {
    if len == 0 || step >= len {
        return end;
    }
    start + (end - start) * (step as Real / len as Real)
}

/// γ with the default 0.05 → 0.02 endpoints.
pub fn gamma_value(step: u64, stage2_len: u64) -> Real {
    gamma_schedule(GAMMA_START, GAMMA_END, step, stage2_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureType {
    Quality,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementEntry {
    pub camera_id: usize,
    pub failure: FailureType,
    pub severity: Real,
    pub hits: u64,
    pub first_iteration: u64,
    pub last_iteration: u64,
}

impl RefinementEntry {
    pub fn priority(&self) -> Real {
        self.severity * self.hits as Real
    }
}

/// Flagged cameras in first-detection order, one entry per camera.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementStack {
    pub entries: Vec<RefinementEntry>,
}

impl RefinementStack {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, camera_id: usize) -> Option<&RefinementEntry> {
        self.entries.iter().find(|e| e.camera_id == camera_id)
    }

    /// Records a detection. A known camera keeps the larger severity (and its
    /// failure type) and gains one hit.
    pub fn update(&mut self, camera_id: usize, failure: FailureType, deficit: Real, iteration: u64) {
        let deficit = if deficit.is_finite() { deficit.max(0.0) } else { 0.0 };
        match self.entries.iter_mut().find(|e| e.camera_id == camera_id) {
            Some(e) => {
                if deficit > e.severity {
                    e.severity = deficit;
                    e.failure = failure;
                }
                e.hits += 1;
                e.last_iteration = iteration;
            }
            None => self.entries.push(RefinementEntry {
                camera_id,
                failure,
                severity: deficit,
                hits: 1,
                first_iteration: iteration,
                last_iteration: iteration,
            }),
        }
    }

    /// Entries by descending priority, ties by camera id.
    pub fn ranked(&self) -> Vec<&RefinementEntry> {
        let mut v: Vec<_> = self.entries.iter().collect();
        v.sort_by(|a, b| b.priority().total_cmp(&a.priority()).then(a.camera_id.cmp(&b.camera_id)));
        v
    }

    /// Draws a camera with probability proportional to priority; uniform when
    /// every priority is zero.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        if self.entries.is_empty() {
            return None;
        }
        let total: Real = self.entries.iter().map(|e| e.priority()).sum();
        if !(total > 0.0) || !total.is_finite() {
            return Some(self.entries[rng.random_range(0..self.entries.len())].camera_id);
        }
        let u = rng.random::<Real>() * total;
        let mut acc = 0.0;
        for e in &self.entries {
            acc += e.priority();
            if u < acc {
                return Some(e.camera_id);
            }
        }
        self.entries.last().map(|e| e.camera_id)
    }
}

/// Severity of a quality detection, `(threshold − psnr) / threshold`.
pub fn quality_deficit(psnr: Real, threshold: Real) -> Real {
    ((threshold - psnr) / threshold).max(0.0)
}

/// Severity of a gradient detection, `grad / threshold − 1`.
pub fn gradient_deficit(grad: Real, threshold: Real) -> Real {
    if threshold > 0.0 {
        (grad / threshold - 1.0).max(0.0)
    } else {
        0.0
    }
}
