//! Synthetic polysomnography-like data: multichannel breathing signals with
//! planted apnea/hypopnea events, plus noisy simulated scorers.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::Event;
use crate::io::{
    write_annotation, write_manifest, write_record, Annotation, ChannelDescriptor, DatasetManifest,
    ManifestEntry, Record, Split,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerNoise {
    /// Standard deviation of the start/stop jitter, seconds.
    pub jitter_std_s: f64,
    /// Probability a true event is dropped.
    pub miss_prob: f64,
    /// Rate of spurious events per hour.
    pub false_alarm_per_hour: f64,
}

impl Default for ScorerNoise {
    fn default() -> Self {
        ScorerNoise { jitter_std_s: 1.0, miss_prob: 0.05, false_alarm_per_hour: 0.5 }
    }
}

impl ScorerNoise {
    pub fn none() -> Self {
        ScorerNoise { jitter_std_s: 0.0, miss_prob: 0.0, false_alarm_per_hour: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub duration_s: f64,
    pub sampling_rate_hz: f64,
    /// Nominal breathing frequency; each record draws a value near it.
    pub breathing_rate_hz: f64,
    pub event_rate_per_hour: f64,
    pub event_duration_min_s: f64,
    pub event_duration_max_s: f64,
    /// Minimum separation between consecutive planted events.
    pub min_gap_s: f64,
    /// Cosine ramp length at event edges.
    pub ramp_s: f64,
    pub noise_std: f64,
    pub n_scorers: usize,
    pub scorer_noise: ScorerNoise,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 20,
            n_validation: 5,
            n_test: 5,
            duration_s: 7200.0,
            sampling_rate_hz: 32.0,
            breathing_rate_hz: 0.25,
            event_rate_per_hour: 18.5,
            event_duration_min_s: 10.0,
            event_duration_max_s: 60.0,
            min_gap_s: 15.0,
            ramp_s: 2.0,
            noise_std: 0.008,
            n_scorers: 5,
            scorer_noise: ScorerNoise::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) || !(self.sampling_rate_hz > 0.0) {
            return Err(Error::Config("duration and sampling rate must be positive".into()));
        }
        if self.event_rate_per_hour < 0.0 {
            return Err(Error::Config("event_rate_per_hour must be >= 0".into()));
        }
        if self.event_duration_min_s <= 0.0
            || self.event_duration_max_s < self.event_duration_min_s
        {
            return Err(Error::Config("event duration range is invalid".into()));
        }
        if self.n_scorers == 0 {
            return Err(Error::Config("n_scorers must be >= 1".into()));
        }
        Ok(())
    }
}

const SIGNAL_CHANNELS: [&str; 5] = ["nasal_flow", "thermistor", "abdomen", "thorax", "snore"];

fn channel_descriptors() -> Vec<ChannelDescriptor> {
    let mut channels: Vec<ChannelDescriptor> = SIGNAL_CHANNELS
        .iter()
        .map(|&name| ChannelDescriptor {
            name: name.into(),
            nominal_min: -1.5,
            nominal_max: 1.5,
            unit: "au".into(),
        })
        .collect();
    channels.push(ChannelDescriptor {
        name: "spo2".into(),
        nominal_min: 60.0,
        nominal_max: 100.0,
        unit: "%".into(),
    });
    channels
}

/// Plant events at the configured hourly rate: the count is Poisson, the
/// placement is rejection-sampled to keep the minimum gap.
pub fn generate_events(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Event>> {
    cfg.validate()?;
    let hours = cfg.duration_s / 3600.0;
    let lambda = cfg.event_rate_per_hour * hours;
    let count = if lambda == 0.0 {
        0
    } else {
        Poisson::new(lambda)
            .map_err(|e| Error::Sampling(format!("poisson({lambda}): {e}")))?
            .sample(rng) as usize
    };
    let margin = cfg.event_duration_max_s.min(cfg.duration_s * 0.05);
    let mut events: Vec<Event> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while events.len() < count {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Sampling(format!(
                "placed only {} of {count} events after {attempts} attempts",
                events.len()
            )));
        }
        let duration = rng.gen_range(cfg.event_duration_min_s..=cfg.event_duration_max_s);
        let lo = margin;
        let hi = cfg.duration_s - margin - duration;
        if hi <= lo {
            return Err(Error::Sampling("record too short for configured events".into()));
        }
        let start = rng.gen_range(lo..hi);
        let candidate = Event::from_bounds(start, start + duration);
        let ok = events.iter().all(|e| {
            candidate.start_s() >= e.stop_s() + cfg.min_gap_s
                || candidate.stop_s() <= e.start_s() - cfg.min_gap_s
        });
        if ok {
            events.push(candidate);
        }
    }
    events.sort_by(|a, b| a.center_s.total_cmp(&b.center_s));
    Ok(events)
}

/// Smooth 0→1 ramp of length `ramp` starting at 0.
fn ramp_up(t: f64, ramp: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (PI * t / ramp).cos()
    }
}

/// Attenuation envelope in [0, 1]: 1 inside the event (full depth), with
/// cosine ramps at both edges.
fn event_envelope(t: f64, event: &Event, ramp: f64) -> f64 {
    ramp_up(t - event.start_s(), ramp) * ramp_up(event.stop_s() - t, ramp)
}

/// One record and its ground-truth events. Deterministic per (cfg, seed).
pub fn generate_record(cfg: &SynthConfig, record_id: &str, seed: u64) -> Result<(Record, Vec<Event>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let events = generate_events(cfg, &mut rng)?;
    let n = (cfg.duration_s * cfg.sampling_rate_hz).round() as usize;
    let freq = cfg.breathing_rate_hz * rng.gen_range(0.9..1.1);
    let noise = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| Error::Sampling(format!("noise distribution: {e}")))?;

    // per-event attenuation depth and desaturation magnitude
    let depths: Vec<f64> = events.iter().map(|_| rng.gen_range(0.92..0.99)).collect();
    let desats: Vec<f64> = events.iter().map(|_| rng.gen_range(6.0..10.0)).collect();

    // precompute the per-sample attenuation once (events are sparse, so only
    // samples inside an event span are touched)
    let fs = cfg.sampling_rate_hz;
    let mut attenuation = vec![0.0f64; n];
    for (e, &depth) in events.iter().zip(&depths) {
        let lo = (e.start_s() * fs).floor().max(0.0) as usize;
        let hi = ((e.stop_s() * fs).ceil() as usize).min(n);
        for (i, att) in attenuation.iter_mut().enumerate().take(hi).skip(lo) {
            let t = i as f64 / fs;
            *att = att.max(depth * event_envelope(t, e, cfg.ramp_s));
        }
    }

    let mut samples: Vec<Vec<f32>> = Vec::with_capacity(6);
    for ch in 0..SIGNAL_CHANNELS.len() {
        let amplitude = rng.gen_range(0.6..1.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let harmonic = rng.gen_range(0.15..0.35);
        let mut row = Vec::with_capacity(n);
        // snore channel attenuates less so channels are not redundant
        let depth_scale = if ch == 4 { 0.7 } else { 1.0 };
        for (i, &att) in attenuation.iter().enumerate() {
            let t = i as f64 / fs;
            let carrier = (2.0 * PI * freq * t + phase).sin()
                + harmonic * (4.0 * PI * freq * t + 2.0 * phase).sin();
            let v = amplitude * (1.0 - depth_scale * att) * carrier + noise.sample(&mut rng);
            row.push(v.clamp(-1.5, 1.5) as f32);
        }
        samples.push(row);
    }

    // SpO2: slow baseline plus a delayed desaturation dip after each event
    let desat_delay = 8.0;
    let desat_width = 20.0;
    let mut dip = vec![0.0f64; n];
    for (e, &mag) in events.iter().zip(&desats) {
        let center = e.stop_s() + desat_delay;
        let lo = ((center - desat_width) * fs).floor().max(0.0) as usize;
        let hi = (((center + desat_width) * fs).ceil() as usize).min(n);
        for (i, d) in dip.iter_mut().enumerate().take(hi).skip(lo) {
            let x = (i as f64 / fs - center) / desat_width;
            if x.abs() < 1.0 {
                *d = d.max(mag * 0.5 * (1.0 + (PI * x).cos()));
            }
        }
    }
    let mut spo2 = Vec::with_capacity(n);
    for &d in &dip {
        let v = 96.0 - d + 0.3 * noise.sample(&mut rng);
        spo2.push(v.clamp(60.0, 100.0) as f32);
    }
    samples.push(spo2);

    let record = Record {
        record_id: record_id.into(),
        channels: channel_descriptors(),
        sampling_rate_hz: cfg.sampling_rate_hz,
        hours_of_sleep: cfg.duration_s / 3600.0,
        samples,
    };
    Ok((record, events))
}

/// Simulated scorers: each one misses, jitters, and adds false alarms
/// independently. With `ScorerNoise::none()` every scorer reproduces the
/// truth exactly.
pub fn generate_scorers(
    truth: &[Event],
    cfg: &SynthConfig,
    record_id: &str,
    duration_s: f64,
    seed: u64,
) -> Result<Vec<Annotation>> {
    let noise = &cfg.scorer_noise;
    let mut out = Vec::with_capacity(cfg.n_scorers);
    for s in 0..cfg.n_scorers {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5c0e_u64 << 16) ^ s as u64);
        let jitter = Normal::new(0.0, noise.jitter_std_s.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::Sampling(format!("jitter distribution: {e}")))?;
        let mut events = Vec::new();
        for e in truth {
            if noise.miss_prob > 0.0 && rng.gen_bool(noise.miss_prob) {
                continue;
            }
            if noise.jitter_std_s > 0.0 {
                let start = (e.start_s() + jitter.sample(&mut rng)).max(0.0);
                let stop = (e.stop_s() + jitter.sample(&mut rng)).min(duration_s);
                if stop - start >= 1.0 {
                    events.push(Event::from_bounds(start, stop));
                }
            } else {
                events.push(*e);
            }
        }
        if noise.false_alarm_per_hour > 0.0 {
            let lambda = noise.false_alarm_per_hour * duration_s / 3600.0;
            let count = Poisson::new(lambda)
                .map_err(|e| Error::Sampling(format!("poisson({lambda}): {e}")))?
                .sample(&mut rng) as usize;
            for _ in 0..count {
                let d = rng.gen_range(10.0..30.0f64).min(duration_s);
                let start = rng.gen_range(0.0..(duration_s - d));
                events.push(Event::from_bounds(start, start + d));
            }
        }
        events.sort_by(|a, b| a.center_s.total_cmp(&b.center_s));
        out.push(Annotation {
            record_id: record_id.into(),
            scorer_id: format!("scorer{s}"),
            events,
        });
    }
    Ok(out)
}

/// Generate the full dataset under `dir` and return the manifest path.
/// Layout: `<id>.json`/`<id>.bin` records, `<id>.scorer<k>.json` annotations,
/// `manifest.json` at the top.
pub fn generate_dataset(cfg: &SynthConfig, seed: u64, dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let groups = [
        (Split::Train, "train", cfg.n_train),
        (Split::Validation, "val", cfg.n_validation),
        (Split::Test, "test", cfg.n_test),
    ];
    let mut entries = Vec::new();
    let mut counter = 0u64;
    for (split, prefix, count) in groups {
        for i in 0..count {
            let id = format!("{prefix}{i:02}");
            let record_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(counter);
            counter += 1;
            let (record, truth) = generate_record(cfg, &id, record_seed)?;
            write_record(&record, &dir.join(format!("{id}.json")))?;
            let scorers =
                generate_scorers(&truth, cfg, &id, record.duration_s(), record_seed)?;
            let mut annotation_paths = Vec::new();
            for a in &scorers {
                let name = format!("{id}.{}.json", a.scorer_id);
                write_annotation(a, &dir.join(&name))?;
                annotation_paths.push(name);
            }
            entries.push(ManifestEntry {
                record: format!("{id}.json"),
                annotations: annotation_paths,
                split,
            });
        }
    }
    let manifest_path = dir.join("manifest.json");
    write_manifest(&DatasetManifest { entries }, &manifest_path)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{match_events, prf1};

    fn quick_cfg() -> SynthConfig {
        SynthConfig { duration_s: 600.0, sampling_rate_hz: 8.0, ..Default::default() }
    }

    #[test]
    fn zero_rate_means_no_events() {
        let cfg = SynthConfig { event_rate_per_hour: 0.0, ..quick_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(generate_events(&cfg, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn events_respect_gap_and_bounds() {
        let cfg = SynthConfig { duration_s: 3600.0, ..quick_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let events = generate_events(&cfg, &mut rng).unwrap();
        for w in events.windows(2) {
            assert!(w[1].start_s() - w[0].stop_s() >= cfg.min_gap_s - 1e-9);
        }
        for e in &events {
            assert!(e.start_s() >= 0.0 && e.stop_s() <= cfg.duration_s);
            assert!(e.duration_s >= cfg.event_duration_min_s - 1e-9);
            assert!(e.duration_s <= cfg.event_duration_max_s + 1e-9);
        }
    }

    #[test]
    fn event_count_matches_configured_rate() {
        // mean of 40 records of 8 h at 18.5/h: lambda = 148 per record,
        // mean count over 40 records has std sqrt(148/40) ~ 1.9
        let cfg = SynthConfig { duration_s: 8.0 * 3600.0, ..SynthConfig::default() };
        let mut total = 0usize;
        for seed in 0..40 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            total += generate_events(&cfg, &mut rng).unwrap().len();
        }
        let mean = total as f64 / 40.0;
        assert!((mean - 148.0).abs() < 3.0 * 1.93, "mean count {mean}");
    }

    #[test]
    fn record_deterministic_and_in_range() {
        let cfg = quick_cfg();
        let (a, ta) = generate_record(&cfg, "r0", 7).unwrap();
        let (b, tb) = generate_record(&cfg, "r0", 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate_record(&cfg, "r0", 8).unwrap();
        assert_ne!(a.samples, c.samples);

        assert_eq!(a.channels.len(), 6);
        assert_eq!(a.total_samples(), 4800);
        for (ch, row) in a.channels.iter().zip(&a.samples) {
            for &v in row {
                assert!(v as f64 >= ch.nominal_min && v as f64 <= ch.nominal_max);
            }
        }
    }

    #[test]
    fn events_attenuate_signal() {
        let cfg = SynthConfig { duration_s: 1200.0, noise_std: 0.0, ..quick_cfg() };
        let (record, truth) = generate_record(&cfg, "r0", 3).unwrap();
        assert!(!truth.is_empty());
        let fs = cfg.sampling_rate_hz;
        let rms = |lo: f64, hi: f64| {
            let (a, b) = ((lo * fs) as usize, (hi * fs) as usize);
            let row = &record.samples[0][a..b];
            (row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / row.len() as f64).sqrt()
        };
        let e = &truth[0];
        let inside = rms(e.start_s() + cfg.ramp_s, e.stop_s() - cfg.ramp_s);
        let before = rms((e.start_s() - 12.0).max(0.0), (e.start_s() - 2.0).max(1.0));
        assert!(inside < 0.5 * before, "inside {inside}, before {before}");
    }

    #[test]
    fn noiseless_scorers_reproduce_truth() {
        let cfg = SynthConfig { scorer_noise: ScorerNoise::none(), ..quick_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = generate_events(&SynthConfig { duration_s: 3600.0, ..cfg.clone() }, &mut rng).unwrap();
        let scorers = generate_scorers(&truth, &cfg, "r", 3600.0, 5).unwrap();
        assert_eq!(scorers.len(), cfg.n_scorers);
        for s in &scorers {
            assert_eq!(s.events, truth);
        }
    }

    #[test]
    fn jittered_scorers_stay_close_to_truth() {
        let cfg = SynthConfig {
            duration_s: 4.0 * 3600.0,
            scorer_noise: ScorerNoise {
                jitter_std_s: 2.0,
                miss_prob: 0.0,
                false_alarm_per_hour: 0.0,
            },
            ..SynthConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = generate_events(&cfg, &mut rng).unwrap();
        let truth_annot = Annotation { record_id: "r".into(), scorer_id: "truth".into(), events: truth.clone() };
        let scorers = generate_scorers(&truth, &cfg, "r", cfg.duration_s, 9).unwrap();
        for s in &scorers {
            let counts = match_events(s, &truth_annot, 0.3).unwrap();
            let (_, _, f1) = prf1(&counts).into();
            assert!(f1 > 0.9, "scorer {} f1 {f1}", s.scorer_id);
        }
    }

    #[test]
    fn dataset_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_train: 2,
            n_validation: 1,
            n_test: 1,
            duration_s: 400.0,
            sampling_rate_hz: 8.0,
            n_scorers: 2,
            ..Default::default()
        };
        let manifest_path = generate_dataset(&cfg, 42, dir.path()).unwrap();
        let manifest = crate::io::read_manifest(&manifest_path).unwrap();
        assert_eq!(manifest.entries.len(), 4);
        for entry in &manifest.entries {
            let record = crate::io::read_record(&crate::io::resolve(&manifest_path, &entry.record)).unwrap();
            assert_eq!(entry.annotations.len(), 2);
            for a in &entry.annotations {
                let annotation = crate::io::read_annotation(&crate::io::resolve(&manifest_path, a)).unwrap();
                annotation.validate_against(&record).unwrap();
                assert_eq!(annotation.record_id, record.record_id);
            }
        }
    }
}
