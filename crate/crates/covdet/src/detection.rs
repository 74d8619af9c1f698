//! Converts a solved gamma into per-device activity and data decisions
//! and scores them against the ground truth.

use serde::Serialize;

use crate::model::TruthAssignment;
use crate::objective::GammaVector;

/// Per-device decisions: `None` for inactive, `Some(q)` for an active
/// device detected as transmitting sequence q.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    decisions: Vec<Option<usize>>,
    threshold: f64,
}

impl DetectionResult {
    pub fn decisions(&self) -> &[Option<usize>] {
        &self.decisions
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn active_count(&self) -> usize {
        self.decisions.iter().filter(|d| d.is_some()).count()
    }
}

/// Device-level error counts against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorReport {
    /// Truly active devices detected as inactive.
    pub missed_devices: usize,
    /// Truly inactive devices detected as active.
    pub false_alarm_devices: usize,
    /// Active devices detected active but with the wrong sequence.
    pub data_errors: usize,
    pub n_devices: usize,
}

impl ErrorReport {
    pub fn total_errors(&self) -> usize {
        self.missed_devices + self.false_alarm_devices + self.data_errors
    }

    /// (missed + false alarms + data errors) / N.
    pub fn error_rate(&self) -> f64 {
        self.total_errors() as f64 / self.n_devices as f64
    }
}

/// Per-device rule: take q* = argmax_q gamma_{n,q} (smallest index on
/// ties) and declare the device active iff gamma_{n,q*} exceeds the
/// threshold.
pub fn detect(gamma_hat: &GammaVector, theta: f64, q: usize) -> DetectionResult {
    assert!(theta >= 0.0, "threshold must be nonnegative");
    assert!(q >= 1 && gamma_hat.len().is_multiple_of(q));
    let n = gamma_hat.len() / q;
    let decisions = (0..n)
        .map(|dev| {
            let mut best_q = 0;
            let mut best_v = gamma_hat.get(dev * q);
            for qi in 1..q {
                let v = gamma_hat.get(dev * q + qi);
                if v > best_v {
                    best_v = v;
                    best_q = qi;
                }
            }
            (best_v > theta).then_some(best_q)
        })
        .collect();
    DetectionResult {
        decisions,
        threshold: theta,
    }
}

/// Counts missed devices, false alarms, and data errors.
pub fn score(result: &DetectionResult, truth: &TruthAssignment) -> ErrorReport {
    assert_eq!(result.decisions.len(), truth.n_devices());
    let mut missed = 0;
    let mut false_alarm = 0;
    let mut data = 0;
    for (dev, decided) in result.decisions.iter().enumerate() {
        match (truth.selected()[dev], decided) {
            (Some(_), None) => missed += 1,
            (None, Some(_)) => false_alarm += 1,
            (Some(tq), Some(dq)) if tq != *dq => data += 1,
            _ => {}
        }
    }
    ErrorReport {
        missed_devices: missed,
        false_alarm_devices: false_alarm,
        data_errors: data,
        n_devices: truth.n_devices(),
    }
}
