//! Record, annotation and manifest files.
//!
//! A record is stored as a JSON header (`<stem>.json`) next to a raw binary
//! body (`<stem>.bin`) holding channel-major little-endian 32-bit floats.
//! Annotations and manifests are plain JSON. All formats round-trip
//! bit-exactly and every documented invariant violation is rejected at read
//! time rather than silently repaired.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::Event;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDescriptor {
    pub name: String,
    pub nominal_min: f64,
    pub nominal_max: f64,
    pub unit: String,
}

/// Multichannel uniformly sampled signal plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub record_id: String,
    pub channels: Vec<ChannelDescriptor>,
    pub sampling_rate_hz: f64,
    pub hours_of_sleep: f64,
    /// Channel-major samples, `channels.len()` rows of equal length.
    pub samples: Vec<Vec<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordHeader {
    record_id: String,
    channels: Vec<ChannelDescriptor>,
    sampling_rate_hz: f64,
    hours_of_sleep: f64,
    total_samples: usize,
}

impl Record {
    pub fn total_samples(&self) -> usize {
        self.samples.first().map_or(0, |c| c.len())
    }

    pub fn duration_s(&self) -> f64 {
        self.total_samples() as f64 / self.sampling_rate_hz
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Format("record has no channels".into()));
        }
        if self.channels.len() != self.samples.len() {
            return Err(Error::Integrity(format!(
                "{} channel descriptors but {} sample rows",
                self.channels.len(),
                self.samples.len()
            )));
        }
        if !(self.sampling_rate_hz > 0.0) {
            return Err(Error::Integrity(format!(
                "sampling_rate_hz must be positive, got {}",
                self.sampling_rate_hz
            )));
        }
        if !(self.hours_of_sleep > 0.0) {
            return Err(Error::Integrity(format!(
                "hours_of_sleep must be positive, got {}",
                self.hours_of_sleep
            )));
        }
        let n = self.total_samples();
        for (ch, row) in self.channels.iter().zip(&self.samples) {
            if row.len() != n {
                return Err(Error::Integrity(format!(
                    "channel {} has {} samples, expected {}",
                    ch.name,
                    row.len(),
                    n
                )));
            }
            if !(ch.nominal_min < ch.nominal_max) {
                return Err(Error::Integrity(format!(
                    "channel {}: nominal_min {} must be < nominal_max {}",
                    ch.name, ch.nominal_min, ch.nominal_max
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integrity(format!(
                    "channel {} contains a non-finite sample",
                    ch.name
                )));
            }
        }
        Ok(())
    }
}

fn body_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("bin")
}

/// Read a record from its JSON header path; the body is expected at the same
/// stem with a `.bin` extension.
pub fn read_record(path: &Path) -> Result<Record> {
    let text = fs::read_to_string(path)?;
    let header: RecordHeader =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if header.channels.is_empty() {
        return Err(Error::Format(format!("{}: record has no channels", path.display())));
    }
    let body = fs::read(body_path(path))?;
    let expected = header.channels.len() * header.total_samples * 4;
    if body.len() != expected {
        return Err(Error::Integrity(format!(
            "{}: body is {} bytes, expected {}",
            body_path(path).display(),
            body.len(),
            expected
        )));
    }
    let mut samples = Vec::with_capacity(header.channels.len());
    for c in 0..header.channels.len() {
        let offset = c * header.total_samples * 4;
        let row: Vec<f32> = body[offset..offset + header.total_samples * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        samples.push(row);
    }
    let record = Record {
        record_id: header.record_id,
        channels: header.channels,
        sampling_rate_hz: header.sampling_rate_hz,
        hours_of_sleep: header.hours_of_sleep,
        samples,
    };
    record.validate()?;
    Ok(record)
}

/// Write a record as header + body; `read_record(write_record(r)) == r`
/// bit-exactly.
pub fn write_record(record: &Record, path: &Path) -> Result<()> {
    record.validate()?;
    let header = RecordHeader {
        record_id: record.record_id.clone(),
        channels: record.channels.clone(),
        sampling_rate_hz: record.sampling_rate_hz,
        hours_of_sleep: record.hours_of_sleep,
        total_samples: record.total_samples(),
    };
    let mut body = Vec::with_capacity(record.channels.len() * record.total_samples() * 4);
    for row in &record.samples {
        for v in row {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, serde_json::to_string_pretty(&header)?)?;
    fs::write(body_path(path), body)?;
    Ok(())
}

/// Scored event list for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub record_id: String,
    pub scorer_id: String,
    pub events: Vec<Event>,
}

impl Annotation {
    /// Check every event lies within the record and invariants hold.
    pub fn validate_against(&self, record: &Record) -> Result<()> {
        let duration = record.duration_s();
        for e in &self.events {
            e.validate()?;
            if e.start_s() < -1e-9 || e.stop_s() > duration + 1e-9 {
                return Err(Error::Integrity(format!(
                    "event [{:.3}, {:.3}] outside record [0, {:.3}]",
                    e.start_s(),
                    e.stop_s(),
                    duration
                )));
            }
        }
        Ok(())
    }
}

/// Read an annotation; events are re-sorted by center time.
pub fn read_annotation(path: &Path) -> Result<Annotation> {
    let text = fs::read_to_string(path)?;
    let mut annotation: Annotation =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for e in &annotation.events {
        e.validate()?;
    }
    annotation.events.sort_by(|a, b| a.center_s.total_cmp(&b.center_s));
    Ok(annotation)
}

pub fn write_annotation(annotation: &Annotation, path: &Path) -> Result<()> {
    for e in &annotation.events {
        e.validate()?;
    }
    fs::write(path, serde_json::to_string_pretty(annotation)?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path to the record header, relative to the manifest file.
    pub record: String,
    /// Paths to annotation files, relative to the manifest file.
    pub annotations: Vec<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.record) {
                return Err(Error::Integrity(format!("duplicate record path {}", e.record)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

/// Resolve a manifest-relative path.
pub fn resolve(manifest_path: &Path, relative: &str) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(relative)
}
