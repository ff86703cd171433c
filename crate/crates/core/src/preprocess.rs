//! Signal normalization, downsampling, window extraction with event-balanced
//! sampling, and training-time augmentation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::Event;
use crate::io::{Annotation, Record};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Gaussian noise std in normalized units, applied with `noise_prob`.
    pub noise_std: f64,
    pub noise_prob: f64,
    /// Probability of multiplying all channels by -1.
    pub invert_prob: f64,
    /// Rescale factor drawn log-uniform in [rescale_min, rescale_max],
    /// applied with `rescale_prob`.
    pub rescale_prob: f64,
    pub rescale_min: f64,
    pub rescale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_std: 0.05,
            noise_prob: 0.5,
            invert_prob: 0.5,
            rescale_prob: 0.5,
            rescale_min: 0.8,
            rescale_max: 1.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub downsample_factor: usize,
    pub window_s: f64,
    /// Boundary-clipped events are kept only if at least this fraction of the
    /// event overlaps the window.
    pub min_event_overlap: f64,
    pub augment: AugmentConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            downsample_factor: 64,
            window_s: 180.0,
            min_event_overlap: 0.5,
            augment: AugmentConfig::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor < 1 {
            return Err(Error::Config("downsample_factor must be >= 1".into()));
        }
        if !(self.window_s > 0.0) {
            return Err(Error::Config("window_s must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_event_overlap) {
            return Err(Error::Config("min_event_overlap must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One model input: channel-major samples plus window-local training events.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub samples: Vec<Vec<f64>>,
    pub start_s: f64,
    pub events: Vec<Event>,
}

/// Per channel: clamp to the nominal range, then map it affinely onto
/// [-0.5, 0.5]. Channel descriptors are updated so the map is idempotent.
pub fn normalize(record: &Record) -> Record {
    let mut out = record.clone();
    for (ch, row) in out.channels.iter_mut().zip(&mut out.samples) {
        let lo = ch.nominal_min as f32;
        let hi = ch.nominal_max as f32;
        let span = hi - lo;
        for v in row.iter_mut() {
            *v = (v.clamp(lo, hi) - lo) / span - 0.5;
        }
        ch.nominal_min = -0.5;
        ch.nominal_max = 0.5;
    }
    out
}

/// Mean-pool each factor-sized block (box anti-alias), then decimate.
pub fn downsample(record: &Record, factor: usize) -> Result<Record> {
    if factor < 1 || factor > record.total_samples() {
        return Err(Error::Argument(format!(
            "downsample factor {factor} invalid for {} samples",
            record.total_samples()
        )));
    }
    if factor == 1 {
        return Ok(record.clone());
    }
    let new_len = record.total_samples() / factor;
    let mut out = record.clone();
    out.sampling_rate_hz = record.sampling_rate_hz / factor as f64;
    for row in &mut out.samples {
        let mut pooled = Vec::with_capacity(new_len);
        for b in 0..new_len {
            let sum: f64 = row[b * factor..(b + 1) * factor].iter().map(|&v| v as f64).sum();
            pooled.push((sum / factor as f64) as f32);
        }
        *row = pooled;
    }
    Ok(out)
}

/// Extract the window starting at sample `start_idx`, attaching window-local
/// events from `annotation`: events are clipped to the window and dropped when
/// the retained portion is shorter than `min_overlap` of the original event.
pub fn extract_window(
    record: &Record,
    start_idx: usize,
    window_len: usize,
    annotation: Option<&Annotation>,
    min_overlap: f64,
) -> Result<Window> {
    if start_idx + window_len > record.total_samples() {
        return Err(Error::Argument(format!(
            "window [{start_idx}, {}) exceeds record length {}",
            start_idx + window_len,
            record.total_samples()
        )));
    }
    let fs = record.sampling_rate_hz;
    let start_s = start_idx as f64 / fs;
    let window_s = window_len as f64 / fs;
    let samples = record
        .samples
        .iter()
        .map(|row| row[start_idx..start_idx + window_len].iter().map(|&v| v as f64).collect())
        .collect();
    let mut events = Vec::new();
    if let Some(annotation) = annotation {
        for e in &annotation.events {
            let lo = (e.start_s() - start_s).max(0.0);
            let hi = (e.stop_s() - start_s).min(window_s);
            if hi <= lo {
                continue;
            }
            if (hi - lo) / e.duration_s < min_overlap {
                continue;
            }
            events.push(Event::from_bounds(lo, hi));
        }
    }
    Ok(Window { samples, start_s, events })
}

/// Draw `count` windows at uniformly random continuous start offsets, with a
/// `balance` fraction rejection-sampled to contain at least one event.
pub fn sample_windows(
    record: &Record,
    annotation: &Annotation,
    cfg: &PreprocessConfig,
    count: usize,
    balance: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Window>> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&balance) {
        return Err(Error::Argument(format!("balance must be in [0, 1], got {balance}")));
    }
    let fs = record.sampling_rate_hz;
    let window_len = (cfg.window_s * fs).round() as usize;
    if window_len > record.total_samples() {
        return Err(Error::Argument(format!(
            "record of {} samples is shorter than one {}-sample window",
            record.total_samples(),
            window_len
        )));
    }
    let n_event = (count as f64 * balance).round() as usize;
    if n_event > 0 && annotation.events.is_empty() {
        return Err(Error::Sampling(
            "balanced sampling requested but the record has no events".into(),
        ));
    }
    let max_start = record.total_samples() - window_len;
    let draw = |rng: &mut dyn rand::RngCore| -> usize {
        if max_start == 0 {
            0
        } else {
            let start_s: f64 = rng.gen_range(0.0..(max_start as f64 / fs));
            (start_s * fs).floor() as usize
        }
    };
    let mut windows = Vec::with_capacity(count);
    for i in 0..count {
        if i < n_event {
            let mut attempts = 0;
            loop {
                let w = extract_window(record, draw(rng), window_len, Some(annotation), cfg.min_event_overlap)?;
                if !w.events.is_empty() {
                    windows.push(w);
                    break;
                }
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::Sampling(
                        "could not draw a window containing an event after 10000 attempts".into(),
                    ));
                }
            }
        } else {
            windows.push(extract_window(record, draw(rng), window_len, Some(annotation), cfg.min_event_overlap)?);
        }
    }
    Ok(windows)
}

/// Apply noise, inversion and rescaling independently; events are unchanged
/// and the signal is re-clamped to [-0.5, 0.5].
pub fn augment(window: &Window, cfg: &AugmentConfig, rng: &mut impl Rng) -> Window {
    let mut out = window.clone();
    if cfg.noise_prob > 0.0 && rng.gen_bool(cfg.noise_prob.min(1.0)) && cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("valid noise std");
        for row in &mut out.samples {
            for v in row.iter_mut() {
                *v += normal.sample(rng);
            }
        }
    }
    if cfg.invert_prob > 0.0 && rng.gen_bool(cfg.invert_prob.min(1.0)) {
        for row in &mut out.samples {
            for v in row.iter_mut() {
                *v = -*v;
            }
        }
    }
    if cfg.rescale_prob > 0.0 && rng.gen_bool(cfg.rescale_prob.min(1.0)) {
        let scale = (rng.gen_range(cfg.rescale_min.ln()..cfg.rescale_max.ln())).exp();
        for row in &mut out.samples {
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
    }
    for row in &mut out.samples {
        for v in row.iter_mut() {
            *v = v.clamp(-0.5, 0.5);
        }
    }
    out
}
