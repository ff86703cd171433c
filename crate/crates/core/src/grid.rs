//! Default-event anchor grid and offset coding.
//!
//! Anchors of each configured size tile the window with a fixed fractional
//! overlap. Real events are coded against an anchor as a center shift
//! normalized by the anchor duration plus a log duration ratio.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::Event;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub window_s: f64,
    pub default_sizes_s: Vec<f64>,
    pub overlap: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            window_s: 180.0,
            default_sizes_s: vec![10.0, 20.0, 30.0, 40.0, 60.0, 80.0, 100.0, 130.0, 150.0],
            overlap: 0.5,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0) {
            return Err(Error::Config(format!("window_s must be positive, got {}", self.window_s)));
        }
        if !(self.overlap > 0.0 && self.overlap < 1.0) {
            return Err(Error::Config(format!("overlap must be in (0, 1), got {}", self.overlap)));
        }
        if self.default_sizes_s.is_empty() || self.default_sizes_s.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("default_sizes_s must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// The anchor locations tiling one window, ordered by size ascending then
/// center ascending. Large anchors may overhang the window edges.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultEventGrid {
    pub anchors: Vec<Event>,
}

impl DefaultEventGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Per size s: stride = s * (1 - overlap), floor(window / stride) anchors at
/// centers stride * (i + 0.5).
pub fn build_grid(cfg: &GridConfig) -> Result<DefaultEventGrid> {
    cfg.validate()?;
    let mut sizes = cfg.default_sizes_s.clone();
    sizes.sort_by(f64::total_cmp);
    let mut anchors = Vec::new();
    for s in sizes {
        let stride = s * (1.0 - cfg.overlap);
        let count = (cfg.window_s / stride).floor() as usize;
        for i in 0..count {
            anchors.push(Event::new(stride * (i as f64 + 0.5), s, 0));
        }
    }
    Ok(DefaultEventGrid { anchors })
}

/// Offsets of `event` relative to `anchor`: normalized center shift and log
/// duration ratio.
pub fn encode_offsets(event: &Event, anchor: &Event) -> Result<(f64, f64)> {
    if !(event.duration_s > 0.0) || !(anchor.duration_s > 0.0) {
        return Err(Error::Domain(format!(
            "offset coding needs positive durations, got event {} anchor {}",
            event.duration_s, anchor.duration_s
        )));
    }
    Ok((
        (event.center_s - anchor.center_s) / anchor.duration_s,
        (event.duration_s / anchor.duration_s).ln(),
    ))
}

/// Exact inverse of [`encode_offsets`]. Decoded events may overhang the
/// window; clipping happens at report time only.
pub fn decode_offsets(delta_center: f64, delta_duration: f64, anchor: &Event) -> Event {
    Event {
        center_s: anchor.center_s + delta_center * anchor.duration_s,
        duration_s: anchor.duration_s * delta_duration.exp(),
        label: 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::iou;
    use proptest::prelude::*;

    #[test]
    fn paper_grid_counts() {
        let grid = build_grid(&GridConfig::default()).unwrap();
        assert_eq!(grid.len(), 92);
        let expected = [(10.0, 36), (20.0, 18), (30.0, 12), (40.0, 9), (60.0, 6), (80.0, 4), (100.0, 3), (130.0, 2), (150.0, 2)];
        for (size, count) in expected {
            let n = grid.anchors.iter().filter(|a| a.duration_s == size).count();
            assert_eq!(n, count, "size {size}");
        }
    }

    #[test]
    fn single_size_grid() {
        // window 180 s, one size 45 s, overlap 0.5: 8 anchors by the counting rule
        let cfg = GridConfig { window_s: 180.0, default_sizes_s: vec![45.0], overlap: 0.5 };
        let grid = build_grid(&cfg).unwrap();
        assert_eq!(grid.len(), 8);
        assert_eq!(grid.anchors[0].center_s, 22.5 * 0.5);
    }

    #[test]
    fn grid_is_deterministic_and_ordered() {
        let a = build_grid(&GridConfig::default()).unwrap();
        let b = build_grid(&GridConfig::default()).unwrap();
        assert_eq!(a, b);
        for w in a.anchors.windows(2) {
            assert!(
                w[0].duration_s < w[1].duration_s
                    || (w[0].duration_s == w[1].duration_s && w[0].center_s < w[1].center_s)
            );
        }
    }

    #[test]
    fn offset_coding_examples() {
        let anchor = Event::new(50.0, 20.0, 0);
        assert_eq!(encode_offsets(&anchor, &anchor).unwrap(), (0.0, 0.0));

        let shifted = Event::new(70.0, 20.0, 1);
        assert_eq!(encode_offsets(&shifted, &anchor).unwrap().0, 1.0);

        let doubled = Event::new(50.0, 40.0, 1);
        let (_, dd) = encode_offsets(&doubled, &anchor).unwrap();
        assert!((dd - std::f64::consts::LN_2).abs() < 1e-12);

        let decoded = decode_offsets(0.0, 0.0, &anchor);
        assert_eq!(decoded.center_s, anchor.center_s);
        assert_eq!(decoded.duration_s, anchor.duration_s);

        let halved = decode_offsets(0.0, -std::f64::consts::LN_2, &Event::new(30.0, 60.0, 0));
        assert!((halved.duration_s - 30.0).abs() < 1e-12);
    }

    #[test]
    fn offset_coding_rejects_nonpositive_duration() {
        let anchor = Event::new(50.0, 20.0, 0);
        let degenerate = Event { center_s: 10.0, duration_s: 0.0, label: 1 };
        assert!(encode_offsets(&degenerate, &anchor).is_err());
    }

    #[test]
    fn anchor_coverage_sweep() {
        // every event with duration in [10, 150] inside the window overlaps
        // some anchor with IoU >= 0.3 (1 s sweep resolution)
        let grid = build_grid(&GridConfig::default()).unwrap();
        let mut worst = 1.0f64;
        for dur in 10..=150 {
            let d = dur as f64;
            let mut c = d / 2.0;
            while c <= 180.0 - d / 2.0 + 1e-9 {
                let e = Event::new(c, d, 1);
                let best = grid
                    .anchors
                    .iter()
                    .map(|a| iou(&e, a))
                    .fold(0.0, f64::max);
                worst = worst.min(best);
                c += 1.0;
            }
        }
        assert!(worst >= 0.3, "coverage gap: worst best-anchor IoU = {worst}");
    }

    proptest! {
        #[test]
        fn encode_decode_identity(center in 10.0..170.0f64, dur in 1.0..150.0f64, a_center in 10.0..170.0f64, a_dur in 5.0..150.0f64) {
            let event = Event::new(center, dur, 1);
            let anchor = Event::new(a_center, a_dur, 0);
            let (dc, dd) = encode_offsets(&event, &anchor).unwrap();
            let back = decode_offsets(dc, dd, &anchor);
            prop_assert!((back.center_s - event.center_s).abs() < 1e-9);
            prop_assert!((back.duration_s - event.duration_s).abs() < 1e-9);
        }
    }
}
