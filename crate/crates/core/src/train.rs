//! Training: anchor matching, classification + localization loss with
//! hard-negative mining, and the minibatch loop with threshold selection and
//! early stopping on validation F1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{iou, Event};
use crate::grid::{build_grid, encode_offsets, DefaultEventGrid};
use crate::infer::{assemble_prediction, window_detections, InferConfig};
use crate::io::{Annotation, Record};
use crate::metrics::{match_events, prf1};
use crate::model::{build_model, Model, ModelConfig, ModelOutput};
use crate::nn::adam::{AdamConfig, AdamState};
use crate::nn::ops::{cross_entropy_rows, cross_entropy_rows_backward, smooth_l1, smooth_l1_grad};
use crate::nn::tensor::Tensor;
use crate::preprocess::{augment, sample_windows, PreprocessConfig, Window};

/// Per-anchor assignment for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// 0 = background, 1 = event.
    pub labels: Vec<usize>,
    /// Regression target (delta_center, delta_duration) for positives.
    pub targets: Vec<Option<(f64, f64)>>,
}

impl MatchResult {
    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Assign window events to grid anchors. Each event first claims its
/// highest-IoU unclaimed anchor (ties to the smaller anchor index; events
/// with no overlap claim nothing). Then every remaining anchor whose best
/// IoU against any event reaches `gamma` is also positive, targeting its
/// best event. Everything else is background.
pub fn match_anchors(events: &[Event], grid: &DefaultEventGrid, gamma: f64) -> Result<MatchResult> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("gamma must be in (0, 1], got {gamma}")));
    }
    let n = grid.anchors.len();
    let mut labels = vec![0usize; n];
    let mut targets: Vec<Option<(f64, f64)>> = vec![None; n];
    let mut claimed = vec![false; n];

    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by(|&a, &b| events[a].center_s.total_cmp(&events[b].center_s).then(a.cmp(&b)));

    for &ei in &order {
        let e = &events[ei];
        let mut best: Option<(f64, usize)> = None;
        for (a, anchor) in grid.anchors.iter().enumerate() {
            if claimed[a] {
                continue;
            }
            let v = iou(e, anchor);
            if v > 0.0 && best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, a));
            }
        }
        if let Some((_, a)) = best {
            claimed[a] = true;
            labels[a] = 1;
            targets[a] = Some(encode_offsets(e, &grid.anchors[a])?);
        }
    }

    for (a, anchor) in grid.anchors.iter().enumerate() {
        if claimed[a] {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for &ei in &order {
            let v = iou(&events[ei], anchor);
            if best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, ei));
            }
        }
        if let Some((v, ei)) = best {
            if v >= gamma {
                labels[a] = 1;
                targets[a] = Some(encode_offsets(&events[ei], anchor)?);
            }
        }
    }

    Ok(MatchResult { labels, targets })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub localization: f64,
    pub n_positive: usize,
    pub n_negative: usize,
}

/// Detection loss over a batch, plus gradients w.r.t. the classification
/// logits and the offset outputs (both [B, N_d, 2]).
///
/// Classification: cross-entropy over all positives plus, per window, the
/// `negative_ratio * n_positive` background anchors with the highest
/// predicted event probability (min(negative_ratio, N_d) when the window has
/// no positive), normalized by the number of included anchors.
/// Localization: smooth L1 over positive anchor offsets, normalized by the
/// number of positives (zero when there are none).
pub fn detection_loss(
    output: &ModelOutput<f64>,
    matches: &[MatchResult],
    negative_ratio: usize,
) -> Result<(LossBreakdown, Tensor<f64>, Tensor<f64>)> {
    let batch = output.batch();
    let nd = output.n_anchors();
    if matches.len() != batch {
        return Err(Error::Shape(format!(
            "{} match results for batch of {batch}",
            matches.len()
        )));
    }
    for m in matches {
        if m.labels.len() != nd {
            return Err(Error::Shape(format!(
                "match over {} anchors, model has {nd}",
                m.labels.len()
            )));
        }
    }

    // pick the anchors that enter the classification term
    let mut selected: Vec<(usize, usize, usize)> = Vec::new(); // (b, a, label)
    let mut n_positive = 0usize;
    let mut n_negative = 0usize;
    for (b, m) in matches.iter().enumerate() {
        let pos: Vec<usize> = (0..nd).filter(|&a| m.labels[a] == 1).collect();
        let wanted_neg = if pos.is_empty() {
            negative_ratio.min(nd)
        } else {
            negative_ratio * pos.len()
        };
        let mut negs: Vec<usize> = (0..nd).filter(|&a| m.labels[a] == 0).collect();
        negs.sort_by(|&x, &y| {
            output
                .event_prob(b, y)
                .total_cmp(&output.event_prob(b, x))
                .then(x.cmp(&y))
        });
        negs.truncate(wanted_neg);
        n_positive += pos.len();
        n_negative += negs.len();
        for a in pos {
            selected.push((b, a, 1));
        }
        for a in negs {
            selected.push((b, a, 0));
        }
    }
    let n_included = selected.len();

    let mut g_logits = Tensor::zeros(&[batch, nd, 2]);
    let mut classification = 0.0;
    if n_included > 0 {
        let scale = 1.0 / n_included as f64;
        for &(b, a, label) in &selected {
            let i = (b * nd + a) * 2;
            let row = &output.class_logits.data[i..i + 2];
            classification += cross_entropy_rows(row, 2, &[label])[0] * scale;
            let g = cross_entropy_rows_backward(row, 2, &[label]);
            g_logits.data[i] = g[0] * scale;
            g_logits.data[i + 1] = g[1] * scale;
        }
    }

    let mut g_offsets = Tensor::zeros(&[batch, nd, 2]);
    let mut localization = 0.0;
    if n_positive > 0 {
        let scale = 1.0 / n_positive as f64;
        for (b, m) in matches.iter().enumerate() {
            for (a, target) in m.targets.iter().enumerate() {
                if let Some((tc, td)) = target {
                    let (pc, pd) = output.offset_pair(b, a);
                    localization += (smooth_l1(pc, *tc) + smooth_l1(pd, *td)) * scale;
                    let i = (b * nd + a) * 2;
                    g_offsets.data[i] = smooth_l1_grad(pc, *tc) * scale;
                    g_offsets.data[i + 1] = smooth_l1_grad(pd, *td) * scale;
                }
            }
        }
    }

    let breakdown = LossBreakdown {
        total: classification + localization,
        classification,
        localization,
        n_positive,
        n_negative,
    };
    Ok((breakdown, g_logits, g_offsets))
}

pub fn default_theta_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// IoU threshold above which an anchor is a positive match.
    pub gamma: f64,
    pub batch_size: usize,
    /// Fraction of each batch rejection-sampled to contain an event.
    pub balance: f64,
    /// Hard negatives kept per positive.
    pub negative_ratio: usize,
    /// Maximum number of epochs.
    pub epochs: usize,
    /// Event count used to size an epoch (steps = ceil(count / batch_size)).
    /// The pipeline sets this to the total event count across every scorer
    /// annotation in the training split; `None` falls back to the events in
    /// the training reference annotations.
    pub epoch_events: Option<usize>,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    pub adam: AdamConfig,
    /// Classification thresholds swept during validation.
    pub theta_grid: Vec<f64>,
    /// IoU threshold for the validation F1.
    pub eval_iou: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.5,
            batch_size: 128,
            balance: 0.5,
            negative_ratio: 3,
            epochs: 100,
            patience: 10,
            epoch_events: None,
            adam: AdamConfig::default(),
            theta_grid: default_theta_grid(),
            eval_iou: 0.3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, epochs and patience must be >= 1".into()));
        }
        if self.theta_grid.is_empty() {
            return Err(Error::Config("theta_grid must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub classification: f64,
    pub localization: f64,
    pub val_f1: f64,
    pub theta: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model<f64>,
    /// Threshold selected on validation.
    pub theta: f64,
    pub val_f1: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Mean validation F1 for every candidate threshold, computed from one
/// forward pass per record. Returns (theta, f1) pairs in grid order.
pub fn validation_sweep(
    model: &Model<f64>,
    grid: &DefaultEventGrid,
    validation: &[(Record, Annotation)],
    theta_grid: &[f64],
    eval_iou: f64,
    infer: &InferConfig,
) -> Result<Vec<(f64, f64)>> {
    let mut per_theta = vec![0.0f64; theta_grid.len()];
    for (record, reference) in validation {
        let (dets, _) = window_detections(model, grid, record, infer.stride_fraction)?;
        let duration_s = record.duration_s();
        for (ti, &theta) in theta_grid.iter().enumerate() {
            let cfg = InferConfig { theta, ..*infer };
            let mut predicted = assemble_prediction(&record.record_id, duration_s, &dets, &cfg);
            predicted.record_id = reference.record_id.clone();
            let counts = match_events(&predicted, reference, eval_iou)?;
            per_theta[ti] += prf1(&counts).2;
        }
    }
    let n = validation.len().max(1) as f64;
    Ok(theta_grid.iter().zip(per_theta).map(|(&t, f)| (t, f / n)).collect())
}

fn batch_tensor(windows: &[Window], channels: usize, len: usize) -> Result<Tensor<f64>> {
    let mut data = Vec::with_capacity(windows.len() * channels * len);
    for w in windows {
        if w.samples.len() != channels || w.samples.iter().any(|r| r.len() != len) {
            return Err(Error::Shape(format!(
                "window of {} x {} samples, expected {channels} x {len}",
                w.samples.len(),
                w.samples.first().map_or(0, |r| r.len())
            )));
        }
        for row in &w.samples {
            data.extend_from_slice(row);
        }
    }
    Tensor::from_vec(&[windows.len(), channels, len], data)
}

/// Train a fresh model on balanced random windows. Records must already be
/// normalized and downsampled to the model's input rate. Every epoch runs
/// ceil(total events / batch size) steps, then sweeps the threshold grid on
/// the validation split; the best (model, theta) by validation F1 is kept,
/// with early stopping after `patience` stale epochs.
pub fn train_loop(
    model_cfg: &ModelConfig,
    pre_cfg: &PreprocessConfig,
    train: &[(Record, Annotation)],
    validation: &[(Record, Annotation)],
    cfg: &TrainConfig,
    infer: &InferConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Training("train and validation splits must be non-empty".into()));
    }
    let grid = build_grid(&model_cfg.grid)?;
    let reference_events: usize = train.iter().map(|(_, a)| a.events.len()).sum();
    if reference_events == 0 {
        return Err(Error::Training("training annotations contain no events".into()));
    }
    let total_events = cfg.epoch_events.unwrap_or(reference_events).max(1);
    let steps_per_epoch = total_events.div_ceil(cfg.batch_size);

    let mut model = build_model::<f64>(model_cfg, cfg.seed)?;
    let param_lens: Vec<usize> = model.params_mut().iter().map(|p| p.len()).collect();
    let mut adam = AdamState::new(cfg.adam, &param_lens);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);

    let mut best: Option<(Model<f64>, f64, f64, usize)> = None; // model, theta, f1, epoch
    let mut log = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_cls = 0.0;
        let mut epoch_loc = 0.0;
        for _ in 0..steps_per_epoch {
            let mut windows = Vec::with_capacity(cfg.batch_size);
            let n_event = (cfg.batch_size as f64 * cfg.balance).round() as usize;
            for w in 0..cfg.batch_size {
                let (record, annotation) = &train[rng.gen_range(0..train.len())];
                let balance = if w < n_event && !annotation.events.is_empty() { 1.0 } else { 0.0 };
                let window = sample_windows(record, annotation, pre_cfg, 1, balance, &mut rng)?
                    .pop()
                    .expect("one window requested");
                windows.push(augment(&window, &pre_cfg.augment, &mut rng));
            }
            let matches: Vec<MatchResult> = windows
                .iter()
                .map(|w| match_anchors(&w.events, &grid, cfg.gamma))
                .collect::<Result<_>>()?;
            let x = batch_tensor(&windows, model_cfg.channels_in, model_cfg.input_len)?;
            let (output, cache) = model.forward_train(&x, &mut rng)?;
            let (loss, g_logits, g_offsets) = detection_loss(&output, &matches, cfg.negative_ratio)?;
            if !loss.total.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {} at epoch {epoch}",
                    loss.total
                )));
            }
            epoch_loss += loss.total;
            epoch_cls += loss.classification;
            epoch_loc += loss.localization;
            model.zero_grads();
            model.backward(&cache, &g_logits, &g_offsets)?;
            adam.step(&mut model.params_mut())?;
        }

        let sweep = validation_sweep(&model, &grid, validation, &cfg.theta_grid, cfg.eval_iou, infer)?;
        let &(theta, val_f1) = sweep
            .iter()
            .reduce(|a, b| if b.1 > a.1 { b } else { a })
            .expect("non-empty theta grid");

        log.push(EpochLog {
            epoch,
            loss: epoch_loss / steps_per_epoch as f64,
            classification: epoch_cls / steps_per_epoch as f64,
            localization: epoch_loc / steps_per_epoch as f64,
            val_f1,
            theta,
        });

        let improved = best.as_ref().map_or(true, |(_, _, f, _)| val_f1 > *f);
        if improved {
            best = Some((model.clone(), theta, val_f1, epoch));
        } else if epoch - best.as_ref().expect("set on first epoch").3 >= cfg.patience {
            break;
        }
    }

    let (model, theta, val_f1, best_epoch) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { model, theta, val_f1, best_epoch, log })
}
