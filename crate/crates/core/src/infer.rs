//! Inference: threshold the per-anchor event probabilities, decode offsets
//! back to absolute events, and merge overlapping window predictions with
//! greedy non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{iou, Event};
use crate::grid::{decode_offsets, DefaultEventGrid};
use crate::io::{Annotation, Record};
use crate::model::{Model, ModelOutput};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    /// Classification threshold: anchors with event probability strictly
    /// above this are decoded.
    pub theta: f64,
    /// Suppression threshold for greedy NMS.
    pub nms_iou: f64,
    /// Window stride as a fraction of the window length.
    pub stride_fraction: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { theta: 0.5, nms_iou: 0.5, stride_fraction: 0.5 }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta must be in [0, 1], got {}", self.theta)));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::Config(format!("nms_iou must be in (0, 1], got {}", self.nms_iou)));
        }
        if !(self.stride_fraction > 0.0 && self.stride_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "stride_fraction must be in (0, 1], got {}",
                self.stride_fraction
            )));
        }
        Ok(())
    }
}

/// A decoded event candidate with its classification score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub event: Event,
    pub score: f64,
}

/// Decode one batch row of model output: every anchor with event probability
/// above `theta` yields a candidate, shifted by the window start time.
pub fn decode_window(
    output: &ModelOutput<f64>,
    batch_idx: usize,
    grid: &DefaultEventGrid,
    theta: f64,
    window_start_s: f64,
) -> Result<Vec<Detection>> {
    let n_anchors = output.class_probs.shape[1];
    if n_anchors != grid.anchors.len() {
        return Err(Error::Shape(format!(
            "model output has {n_anchors} anchors, grid has {}",
            grid.anchors.len()
        )));
    }
    let mut out = Vec::new();
    for (a, anchor) in grid.anchors.iter().enumerate() {
        let score = output.event_prob(batch_idx, a);
        if score > theta {
            let (dc, dd) = output.offset_pair(batch_idx, a);
            let mut event = decode_offsets(dc, dd, anchor);
            event.center_s += window_start_s;
            out.push(Detection { event, score });
        }
    }
    Ok(out)
}

/// Greedy non-maximum suppression: keep candidates in descending score order
/// (ties broken by earlier center, then shorter duration), discarding any
/// whose IoU with an already kept detection exceeds `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(detections[a].event.center_s.total_cmp(&detections[b].event.center_s))
            .then(detections[a].event.duration_s.total_cmp(&detections[b].event.duration_s))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = detections[i];
        if kept.iter().all(|k| iou(&k.event, &d.event) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Full-record prediction plus whether the record needed edge padding.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub annotation: Annotation,
    /// True when the record was shorter than one window and was extended by
    /// replicating its last sample.
    pub padded: bool,
}

/// Run the model over every tiled window and return all anchor decodings
/// (no threshold applied — scores come along for later filtering), plus
/// whether edge padding was needed.
pub fn window_detections(
    model: &Model<f64>,
    grid: &DefaultEventGrid,
    record: &Record,
    stride_fraction: f64,
) -> Result<(Vec<Vec<Detection>>, bool)> {
    let window_len = model.cfg.input_len;
    if record.channels.len() != model.cfg.channels_in {
        return Err(Error::Shape(format!(
            "record has {} channels, model expects {}",
            record.channels.len(),
            model.cfg.channels_in
        )));
    }
    let fs = record.sampling_rate_hz;
    let total = record.samples[0].len();

    // edge-replicate short records up to one full window
    let (samples, padded) = if total < window_len {
        let mut rows: Vec<Vec<f32>> = record.samples.clone();
        for row in &mut rows {
            let last = *row.last().ok_or_else(|| Error::Argument("empty record".into()))?;
            row.resize(window_len, last);
        }
        (rows, true)
    } else {
        (record.samples.clone(), false)
    };
    let padded_total = samples[0].len();

    let stride = ((window_len as f64 * stride_fraction).round() as usize).max(1);
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|s| s + window_len <= padded_total)
        .collect();
    // clamped final window so the tail is always covered
    let last_start = padded_total - window_len;
    if starts.last() != Some(&last_start) {
        starts.push(last_start);
    }

    let mut out = Vec::with_capacity(starts.len());
    for start in starts {
        let mut data = Vec::with_capacity(model.cfg.channels_in * window_len);
        for row in &samples {
            data.extend(row[start..start + window_len].iter().map(|&v| v as f64));
        }
        let x = Tensor::from_vec(&[1, model.cfg.channels_in, window_len], data)?;
        let output = model.forward_eval(&x)?;
        out.push(decode_window(&output, 0, grid, -1.0, start as f64 / fs)?);
    }
    Ok((out, padded))
}

/// Threshold, per-window NMS, one global NMS pass, clip to the record, and
/// sort by center time.
pub fn assemble_prediction(
    record_id: &str,
    duration_s: f64,
    window_dets: &[Vec<Detection>],
    cfg: &InferConfig,
) -> Annotation {
    let mut candidates = Vec::new();
    for dets in window_dets {
        let above: Vec<Detection> =
            dets.iter().copied().filter(|d| d.score > cfg.theta).collect();
        candidates.extend(nms(&above, cfg.nms_iou));
    }
    let mut kept = nms(&candidates, cfg.nms_iou);
    kept.retain_mut(|d| {
        let start = d.event.start_s().max(0.0);
        let stop = d.event.stop_s().min(duration_s);
        if stop > start {
            d.event = Event::from_bounds(start, stop);
            true
        } else {
            false
        }
    });
    kept.sort_by(|a, b| a.event.center_s.total_cmp(&b.event.center_s));
    Annotation {
        record_id: record_id.into(),
        scorer_id: "model".into(),
        events: kept.into_iter().map(|d| d.event).collect(),
    }
}

/// Tile the (preprocessed) record with overlapping windows, decode each one,
/// and merge everything with a single global NMS pass. Events are clipped to
/// the record and returned sorted by center time.
pub fn predict_record(
    model: &Model<f64>,
    grid: &DefaultEventGrid,
    record: &Record,
    cfg: &InferConfig,
) -> Result<Prediction> {
    cfg.validate()?;
    let (window_dets, padded) = window_detections(model, grid, record, cfg.stride_fraction)?;
    let duration_s = record.samples[0].len() as f64 / record.sampling_rate_hz;
    let annotation = assemble_prediction(&record.record_id, duration_s, &window_dets, cfg);
    Ok(Prediction { annotation, padded })
}
