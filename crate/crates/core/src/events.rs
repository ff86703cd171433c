//! Event algebra: temporal IoU, binary-mask encoding/decoding and
//! multi-scorer consensus construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Annotation;

/// A scored interval: center time, duration and a binary label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub center_s: f64,
    pub duration_s: f64,
    pub label: u8,
}

impl Event {
    pub fn new(center_s: f64, duration_s: f64, label: u8) -> Self {
        Event { center_s, duration_s, label }
    }

    /// Positive event from start/stop times.
    pub fn from_bounds(start_s: f64, stop_s: f64) -> Self {
        Event { center_s: 0.5 * (start_s + stop_s), duration_s: stop_s - start_s, label: 1 }
    }

    pub fn start_s(&self) -> f64 {
        self.center_s - 0.5 * self.duration_s
    }

    pub fn stop_s(&self) -> f64 {
        self.center_s + 0.5 * self.duration_s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() || !self.center_s.is_finite() {
            return Err(Error::Integrity(format!(
                "event must have finite center and strictly positive duration, got center={} duration={}",
                self.center_s, self.duration_s
            )));
        }
        if self.label > 1 {
            return Err(Error::Integrity(format!("event label must be 0 or 1, got {}", self.label)));
        }
        Ok(())
    }
}

/// Temporal intersection over union of two intervals. Symmetric, in [0, 1],
/// 0 for disjoint intervals and 1 iff the intervals are equal.
pub fn iou(a: &Event, b: &Event) -> f64 {
    let inter = (a.stop_s().min(b.stop_s()) - a.start_s().max(b.start_s())).max(0.0);
    let union = a.duration_s + b.duration_s - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Sampled binary representation of an event list over a fixed duration.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub sampling_rate_hz: f64,
    pub values: Vec<f64>,
}

/// Consensus parameters: threshold on the mean scorer mask and the expected
/// number of scorers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConsensusSpec {
    pub kappa: f64,
    pub n_scorers: usize,
    /// Consensus runs shorter than this are dropped after thresholding.
    #[serde(default)]
    pub min_duration_s: f64,
}

impl ConsensusSpec {
    pub fn new(kappa: f64, n_scorers: usize) -> Self {
        ConsensusSpec { kappa, n_scorers, min_duration_s: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::Argument(format!("kappa must be in (0, 1], got {}", self.kappa)));
        }
        if self.n_scorers == 0 {
            return Err(Error::Argument("n_scorers must be >= 1".into()));
        }
        Ok(())
    }
}

/// Rasterize events onto a sample grid: sample i is 1 iff its time interval
/// [i/fs, (i+1)/fs) intersects some event.
pub fn events_to_mask(events: &[Event], fs: f64, duration_s: f64) -> Result<BinaryMask> {
    let n = (fs * duration_s).round() as usize;
    let mut values = vec![0.0; n];
    for e in events {
        if e.start_s() < -1e-9 || e.stop_s() > duration_s + 1e-9 {
            return Err(Error::Bounds(format!(
                "event [{:.3}, {:.3}] outside [0, {}]",
                e.start_s(),
                e.stop_s(),
                duration_s
            )));
        }
        let lo = (e.start_s() * fs).floor().max(0.0) as usize;
        let hi = ((e.stop_s() * fs).ceil() as usize).min(n);
        for i in lo..hi {
            let t0 = i as f64 / fs;
            let t1 = (i + 1) as f64 / fs;
            if t0 < e.stop_s() && e.start_s() < t1 {
                values[i] = 1.0;
            }
        }
    }
    Ok(BinaryMask { sampling_rate_hz: fs, values })
}

/// Decode maximal runs of ones back into events.
pub fn mask_to_events(mask: &BinaryMask) -> Result<Vec<Event>> {
    let fs = mask.sampling_rate_hz;
    for &v in &mask.values {
        if v != 0.0 && v != 1.0 {
            return Err(Error::Domain(format!("mask value {v} is not binary")));
        }
    }
    let mut events = Vec::new();
    let mut run_start: Option<usize> = None;
    for i in 0..=mask.values.len() {
        let on = i < mask.values.len() && mask.values[i] == 1.0;
        match (run_start, on) {
            (None, true) => run_start = Some(i),
            (Some(s), false) => {
                let len = i - s;
                events.push(Event {
                    center_s: (s as f64 + len as f64 / 2.0) / fs,
                    duration_s: len as f64 / fs,
                    label: 1,
                });
                run_start = None;
            }
            _ => {}
        }
    }
    Ok(events)
}

/// Build the consensus annotation: threshold the mean of per-scorer masks at
/// kappa, then re-encode runs as events. kappa = 1/n gives the union of the
/// scorers, kappa = 1 their intersection.
pub fn consensus(
    annotations: &[Annotation],
    spec: &ConsensusSpec,
    fs: f64,
    duration_s: f64,
) -> Result<Annotation> {
    spec.validate()?;
    if annotations.is_empty() {
        return Err(Error::Argument("consensus requires at least one annotation".into()));
    }
    if annotations.len() != spec.n_scorers {
        return Err(Error::Argument(format!(
            "expected {} annotations, got {}",
            spec.n_scorers,
            annotations.len()
        )));
    }
    let record_id = &annotations[0].record_id;
    for a in annotations {
        if &a.record_id != record_id {
            return Err(Error::Integrity(format!(
                "mixed record ids in consensus: {} vs {}",
                record_id, a.record_id
            )));
        }
    }
    let n = annotations.len() as f64;
    let len = (fs * duration_s).round() as usize;
    let mut sum = vec![0.0f64; len];
    for a in annotations {
        let m = events_to_mask(&a.events, fs, duration_s)?;
        for (s, v) in sum.iter_mut().zip(m.values) {
            *s += v;
        }
    }
    let thresholded: Vec<f64> =
        sum.iter().map(|&s| if s / n >= spec.kappa { 1.0 } else { 0.0 }).collect();
    let mut events = mask_to_events(&BinaryMask { sampling_rate_hz: fs, values: thresholded })?;
    if spec.min_duration_s > 0.0 {
        events.retain(|e| e.duration_s >= spec.min_duration_s);
    }
    Ok(Annotation { record_id: record_id.clone(), scorer_id: "consensus".into(), events })
}
